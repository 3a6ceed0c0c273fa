"""Single-coil Cartesian MR acquisition model.

Images and k-space are complex tensors of shape (..., H, W) with H, W even.
All transforms are orthonormal and centered: the DC component sits at
(H//2, W//2), and Parseval holds exactly up to float rounding. Every
function here is differentiable, so masks and reconstructions can be
optimized through the acquisition model.
"""

import torch

from .errors import ValidationError


def _check_image(x: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.is_tensor(x):
        x = torch.as_tensor(x)
    if x.ndim < 2:
        raise ValidationError(f"{name} must have shape (..., H, W), got {tuple(x.shape)}")
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise ValidationError(f"{name} needs even H, W for the centered transform, got {h}x{w}")
    if not torch.isfinite(torch.view_as_real(x) if x.is_complex() else x).all():
        raise ValidationError(f"{name} contains NaN or Inf")
    return x


def fft2c(image: torch.Tensor) -> torch.Tensor:
    """Centered orthonormal 2D FFT over the last two dimensions."""
    image = _check_image(image, "image")
    k = torch.fft.fft2(torch.fft.ifftshift(image, dim=(-2, -1)), norm="ortho")
    return torch.fft.fftshift(k, dim=(-2, -1))


def ifft2c(kspace: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`fft2c`."""
    kspace = _check_image(kspace, "kspace")
    x = torch.fft.ifft2(torch.fft.ifftshift(kspace, dim=(-2, -1)), norm="ortho")
    return torch.fft.fftshift(x, dim=(-2, -1))


def _check_mask_shape(mask: torch.Tensor, data: torch.Tensor) -> torch.Tensor:
    if not torch.is_tensor(mask):
        mask = torch.as_tensor(mask)
    if mask.shape != data.shape and mask.shape != data.shape[-2:]:
        raise ValidationError(
            f"mask shape {tuple(mask.shape)} does not match data shape {tuple(data.shape)}"
        )
    return mask


def undersample(kspace: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Element-wise masking of k-space, ``y_hat = y * M``."""
    if not torch.is_tensor(kspace):
        kspace = torch.as_tensor(kspace)
    mask = _check_mask_shape(mask, kspace)
    return kspace * mask.to(kspace.dtype)


def zero_filled(kspace_undersampled: torch.Tensor) -> torch.Tensor:
    """Zero-filled reconstruction: inverse transform of masked k-space."""
    return ifft2c(kspace_undersampled)


def data_consistency(
    mask: torch.Tensor, x_rec: torch.Tensor, y_hat: torch.Tensor
) -> torch.Tensor:
    """Project a reconstruction onto the acquired data.

    Returns ``ifft2c((1 - M) * fft2c(x_rec) + M * y_hat)``: the output's
    k-space equals the acquired samples exactly at sampled locations and
    keeps the reconstruction's content elsewhere.
    """
    if not torch.is_tensor(x_rec):
        x_rec = torch.as_tensor(x_rec)
    if not torch.is_tensor(y_hat):
        y_hat = torch.as_tensor(y_hat)
    if x_rec.shape != y_hat.shape:
        raise ValidationError(
            f"x_rec shape {tuple(x_rec.shape)} does not match y_hat shape {tuple(y_hat.shape)}"
        )
    mask = _check_mask_shape(mask, y_hat)
    m = mask.to(y_hat.dtype)
    k_pred = fft2c(x_rec)
    return ifft2c((1 - m) * k_pred + m * y_hat)
