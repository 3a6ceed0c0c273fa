"""Image-quality metrics and mask analytics.

PSNR and SSIM operate on magnitude images (complex inputs are reduced
with abs). SSIM is computed in torch with Gaussian-weighted local
statistics over valid window positions, so it can double as a training
loss; it returns a 0-dim tensor. PSNR is an evaluation-only scalar.
"""

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ValidationError

PSNR_CAP_DB = 100.0


def _to_magnitude(x, name: str) -> torch.Tensor:
    if not torch.is_tensor(x):
        x = torch.as_tensor(x)
    if x.is_complex():
        x = torch.abs(x)
    if not torch.isfinite(x).all():
        raise ValidationError(f"{name} contains NaN or Inf")
    return x


def psnr(ref, test, data_range: float | None = None, mask: torch.Tensor | None = None) -> float:
    """10*log10(data_range^2 / MSE), capped at 100 dB for identical inputs.

    ``data_range`` defaults to the reference's max magnitude. With
    ``mask``, the MSE runs over the masked pixels only.
    """
    ref = _to_magnitude(ref, "ref")
    test = _to_magnitude(test, "test")
    if ref.shape != test.shape:
        raise ValidationError(f"shape mismatch {tuple(ref.shape)} vs {tuple(test.shape)}")
    if data_range is None:
        data_range = float(ref.max())
    if data_range <= 0:
        raise ValidationError(f"data_range must be positive, got {data_range}")
    if mask is not None:
        if mask.shape != ref.shape:
            raise ValidationError("mask shape does not match images")
        if not mask.any():
            raise ValidationError("mask selects no pixels")
        ref, test = ref[mask], test[mask]
    mse = torch.mean((ref.to(torch.float64) - test.to(torch.float64)) ** 2).item()
    if mse == 0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(data_range ** 2 / mse), PSNR_CAP_DB)


def _gaussian_kernel(window: int, sigma: float, dtype) -> torch.Tensor:
    half = (window - 1) // 2
    x = torch.arange(-half, half + 1, dtype=dtype)
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).reshape(1, 1, window, window)


def ssim(
    ref,
    test,
    window: int = 11,
    k1: float = 0.01,
    k2: float = 0.03,
    sigma: float = 1.5,
    data_range: float | None = None,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean local SSIM over valid Gaussian windows; 0-dim tensor result.

    Differentiable in both images. With ``mask``, averages only windows
    whose center pixel is masked (after cropping to valid positions).
    """
    ref = _to_magnitude(ref, "ref")
    test = _to_magnitude(test, "test")
    if ref.shape != test.shape:
        raise ValidationError(f"shape mismatch {tuple(ref.shape)} vs {tuple(test.shape)}")
    if ref.ndim != 2:
        raise ValidationError(f"expected 2D images, got shape {tuple(ref.shape)}")
    h, w = ref.shape
    if window % 2 == 0 or window < 3 or window > min(h, w):
        raise ConfigurationError(f"window must be odd, >= 3 and <= min(H, W); got {window}")
    if data_range is None:
        data_range = float(ref.max())
        if data_range <= 0:
            data_range = 1.0

    dtype = ref.dtype if ref.dtype in (torch.float32, torch.float64) else torch.float64
    x = ref.to(dtype).reshape(1, 1, h, w)
    y = test.to(dtype).reshape(1, 1, h, w)
    kernel = _gaussian_kernel(window, sigma, dtype)

    mu_x = F.conv2d(x, kernel)
    mu_y = F.conv2d(y, kernel)
    var_x = F.conv2d(x * x, kernel) - mu_x ** 2
    var_y = F.conv2d(y * y, kernel) - mu_y ** 2
    cov = F.conv2d(x * y, kernel) - mu_x * mu_y

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    )
    if mask is None:
        return s.mean()
    if mask.shape != ref.shape:
        raise ValidationError("mask shape does not match images")
    pad = (window - 1) // 2
    inner = mask[pad:h - pad, pad:w - pad]
    if not inner.any():
        raise ValidationError("mask selects no valid window positions")
    return s.reshape(h - 2 * pad, w - 2 * pad)[inner].mean()


def mask_histogram(mask: torch.Tensor, bin_len: int = 10) -> torch.Tensor:
    """Sampled-column counts over consecutive column bins.

    Accepts a replicated 2D mask or a binary column vector; the last bin
    may cover fewer columns. Counts sum to the number of sampled columns.
    """
    if bin_len < 1:
        raise ConfigurationError(f"bin_len must be >= 1, got {bin_len}")
    if not torch.is_tensor(mask):
        mask = torch.as_tensor(mask)
    if mask.ndim == 2:
        cols = mask.amax(dim=0)
    elif mask.ndim == 1:
        cols = mask
    else:
        raise ValidationError(f"mask must be 1D or 2D, got shape {tuple(mask.shape)}")
    if not ((cols == 0) | (cols == 1)).all():
        raise ValidationError("mask entries must be binary")
    d = cols.shape[0]
    n_bins = (d + bin_len - 1) // bin_len
    counts = torch.zeros(n_bins, dtype=torch.long)
    for k in range(n_bins):
        counts[k] = int(cols[k * bin_len:(k + 1) * bin_len].sum())
    return counts


@dataclass
class MetricsReport:
    """Evaluation summary for one model over a sample set."""

    per_contrast_psnr: list[float] = field(default_factory=list)
    per_contrast_ssim: list[float] = field(default_factory=list)
    mean_psnr: float = 0.0
    mean_ssim: float = 0.0
    map_psnr_bg: float | None = None
    map_ssim_bg: float | None = None
    map_psnr_nbg: float | None = None
    map_ssim_nbg: float | None = None
    alphas: list[float] = field(default_factory=list)
    ratios: list[float] = field(default_factory=list)
    mask_histograms: list[list[int]] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def csv_rows(self) -> list[dict]:
        rows = []
        for c, (p, s) in enumerate(zip(self.per_contrast_psnr, self.per_contrast_ssim)):
            rows.append({
                "contrast": c,
                "psnr_db": round(p, 4),
                "ssim": round(s, 6),
                "alpha": round(self.alphas[c], 6) if c < len(self.alphas) else "",
                "ratio": round(self.ratios[c], 4) if c < len(self.ratios) else "",
            })
        return rows

    def to_csv(self) -> str:
        rows = self.csv_rows()
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()) if rows else ["contrast"])
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue()
