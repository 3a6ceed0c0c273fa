"""T2*-decay signal model and map synthesis.

The c-th contrast of a multi-echo acquisition carries per-pixel signal
``s(c) = exp(-c * delta_t / T2*)`` for c = 1..C. This module provides
that forward model, an exact log-linear fitting oracle, a small neural
regressor trained on simulated decays (kept frozen afterwards so map
losses backpropagate only into sampling and reconstruction), per-pixel
map synthesis, and the Sobel/Otsu foreground pipeline used when scoring
maps with and without background.
"""

import warnings

import numpy as np
import torch
import torch.nn as nn
from scipy import ndimage
from skimage.filters import threshold_otsu

from .errors import ConfigurationError, DomainError, StateError, ValidationError

T2_MAX_MS = 300.0


def decay_signal(t2star, delta_t: float, C: int) -> torch.Tensor:
    """Noiseless decay samples s(c) = exp(-c*delta_t/t2star), c = 1..C.

    ``t2star`` may be a scalar or a tensor; the contrast axis is appended
    last, giving shape (*t2star.shape, C).
    """
    if C < 1:
        raise ConfigurationError(f"C must be >= 1, got {C}")
    if delta_t <= 0:
        raise DomainError(f"delta_t must be positive, got {delta_t}")
    t = torch.as_tensor(t2star, dtype=torch.float64) if not torch.is_tensor(t2star) else t2star
    if (t <= 0).any():
        raise DomainError("t2star must be positive")
    c = torch.arange(1, C + 1, dtype=t.dtype)
    return torch.exp(-c * delta_t / t.unsqueeze(-1))


def fit_t2star_loglinear(signal: torch.Tensor, delta_t: float):
    """Exact T2* from a noiseless decay: least-squares slope of ln s vs c.

    The slope equals -delta_t/T2* regardless of a constant amplitude
    factor. Non-decaying signals (slope >= 0) clamp to the 300 ms
    sentinel. Scalar in, scalar out; nonpositive samples are a domain
    error (use :func:`fit_t2star_map` for image grids with background).
    """
    s = torch.as_tensor(signal, dtype=torch.float64)
    if s.ndim != 1 or s.shape[0] < 2:
        raise ValidationError(f"signal must be a vector of >= 2 echoes, got shape {tuple(s.shape)}")
    if (s <= 0).any():
        raise DomainError("log-linear fit requires strictly positive samples")
    if delta_t <= 0:
        raise DomainError(f"delta_t must be positive, got {delta_t}")
    return float(_loglinear_core(s.unsqueeze(0), delta_t)[0])


def _loglinear_core(signals: torch.Tensor, delta_t: float) -> torch.Tensor:
    # signals: (N, C) strictly positive. slope = cov(c, ln s)/var(c)
    n, C = signals.shape
    c = torch.arange(1, C + 1, dtype=signals.dtype)
    c_centered = c - c.mean()
    logs = torch.log(signals)
    slope = (logs * c_centered).sum(dim=1) / (c_centered * c_centered).sum()
    est = torch.where(
        slope < 0,
        -delta_t / torch.where(slope < 0, slope, -torch.ones_like(slope)),
        torch.full_like(slope, T2_MAX_MS),
    )
    return est.clamp(0.0, T2_MAX_MS)


def fit_t2star_map(signals: torch.Tensor, delta_t: float) -> torch.Tensor:
    """Vectorized log-linear fit over (..., C) signals.

    Pixels containing any nonpositive sample (background, noise-crossed
    zeros) map to 0 ms instead of raising.
    """
    s = torch.as_tensor(signals, dtype=torch.float64)
    if s.ndim < 1 or s.shape[-1] < 2:
        raise ValidationError("signals must have a trailing echo axis of length >= 2")
    if delta_t <= 0:
        raise DomainError(f"delta_t must be positive, got {delta_t}")
    flat = s.reshape(-1, s.shape[-1])
    valid = (flat > 0).all(dim=1)
    out = torch.zeros(flat.shape[0], dtype=torch.float64)
    if valid.any():
        out[valid] = _loglinear_core(flat[valid], delta_t)
    return out.reshape(s.shape[:-1])


def simulate_regressor_dataset(
    n: int, seed: int = 0, C: int = 5, delta_t: float = 10.0, eps: float = 1.0
):
    """n unit-amplitude decays with T2* ~ Uniform(eps, 300] ms.

    Returns (signals (n, C) float32, labels (n,) float32 in ms). The
    floor ``eps`` keeps the fastest decays above float32 underflow so
    every signal stays strictly positive and strictly decreasing.
    """
    if n < 1:
        raise ConfigurationError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    labels = rng.uniform(eps, T2_MAX_MS, size=n)
    signals = decay_signal(torch.from_numpy(labels), delta_t, C)
    return signals.to(torch.float32), torch.from_numpy(labels).to(torch.float32)


class T2StarRegressor(nn.Module):
    """Fully connected 5/32/1 regressor from a C-echo decay to T2* in ms.

    Internally predicts T2*/300 and rescales, which keeps the MSE
    training target O(1). ``forward`` is differentiable and unclamped
    (for map-loss training); ``predict`` is the evaluation path with the
    [0, 300] ms clamp.
    """

    def __init__(self, C: int = 5, delta_t: float = 10.0):
        super().__init__()
        if C < 2:
            raise ConfigurationError(f"C must be >= 2, got {C}")
        self.C = C
        self.delta_t = float(delta_t)
        self.net = nn.Sequential(
            nn.Linear(C, C), nn.ReLU(),
            nn.Linear(C, 32), nn.ReLU(),
            nn.Linear(32, 1),
        )
        self.register_buffer("trained", torch.tensor(False))

    def forward(self, signals: torch.Tensor) -> torch.Tensor:
        if not bool(self.trained):
            raise StateError("regressor has not been fitted; call fit() first")
        return self._raw(signals)

    def _raw(self, signals: torch.Tensor) -> torch.Tensor:
        if signals.shape[-1] != self.C:
            raise ValidationError(
                f"expected {self.C} echoes on the last axis, got {signals.shape[-1]}"
            )
        return self.net(signals).squeeze(-1) * T2_MAX_MS

    @torch.no_grad()
    def predict(self, signals: torch.Tensor) -> torch.Tensor:
        return self.forward(signals).clamp(0.0, T2_MAX_MS)

    def fit(self, n: int = 200_000, seed: int = 0, epochs: int = 20,
            batch_size: int = 512, lr: float = 1e-3, freeze: bool = True):
        """Train on simulated decays with MSE, then optionally freeze."""
        torch.manual_seed(seed)
        for m in self.net:
            if isinstance(m, nn.Linear):
                m.reset_parameters()
        signals, labels = simulate_regressor_dataset(n, seed=seed, C=self.C,
                                                     delta_t=self.delta_t)
        target = labels / T2_MAX_MS
        opt = torch.optim.Adam(self.net.parameters(), lr=lr)
        gen = torch.Generator().manual_seed(seed + 1)
        for _ in range(epochs):
            order = torch.randperm(n, generator=gen)
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                pred = self.net(signals[idx]).squeeze(-1)
                loss = torch.mean((pred - target[idx]) ** 2)
                opt.zero_grad()
                loss.backward()
                opt.step()
        self.trained.fill_(True)
        if freeze:
            self.freeze()
        return self

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
            p.grad = None
        return self

    @property
    def is_frozen(self) -> bool:
        return all(not p.requires_grad for p in self.parameters())


def _to_magnitudes(images) -> torch.Tensor:
    x = torch.as_tensor(images) if not torch.is_tensor(images) else images
    if x.is_complex():
        x = torch.abs(x)
    if x.ndim != 3:
        raise ValidationError(f"expected (C, H, W) images, got shape {tuple(x.shape)}")
    return x


def synthesize_map(images, fitter, delta_t: float | None = None,
                   differentiable: bool = False) -> torch.Tensor:
    """Apply a per-pixel fitter across C contrast images, giving an (H, W) map.

    ``fitter`` is either the string ``"loglinear"`` (needs ``delta_t``) or a
    trained :class:`T2StarRegressor`. With ``differentiable=True`` the
    regressor path stays in the autograd graph and skips the final clamp.
    """
    mags = _to_magnitudes(images)
    C, H, W = mags.shape
    if C < 2:
        raise ValidationError(f"need at least 2 contrasts, got {C}")
    signals = mags.permute(1, 2, 0).reshape(-1, C)
    if fitter == "loglinear":
        if delta_t is None:
            raise ConfigurationError("loglinear fitting needs delta_t")
        return fit_t2star_map(signals, delta_t).reshape(H, W)
    if isinstance(fitter, T2StarRegressor):
        if fitter.C != C:
            raise ValidationError(f"regressor expects {fitter.C} contrasts, images have {C}")
        if differentiable:
            return fitter(signals.to(torch.float32)).reshape(H, W)
        return fitter.predict(signals.to(torch.float32)).reshape(H, W)
    raise ConfigurationError(f"unknown fitter {fitter!r}")


def foreground_mask(images) -> torch.Tensor:
    """Object support from contrast images.

    Average magnitude -> Sobel edge magnitude -> Otsu threshold -> dilate
    (radius 2) -> fill holes -> keep the largest connected component.
    Returns a boolean (H, W) tensor; empty result carries a warning.
    """
    mags = _to_magnitudes(images)
    mean_img = mags.mean(dim=0).numpy().astype(np.float64)

    def _empty():
        warnings.warn("foreground mask is empty", stacklevel=2)
        return torch.zeros(mean_img.shape, dtype=torch.bool)

    if not np.isfinite(mean_img).all():
        raise ValidationError("images contain NaN or Inf")
    if mean_img.max() <= mean_img.min():
        return _empty()

    gx = ndimage.sobel(mean_img, axis=0)
    gy = ndimage.sobel(mean_img, axis=1)
    edges = np.hypot(gx, gy)
    if edges.max() <= 0:
        return _empty()
    binary = edges > threshold_otsu(edges)
    if not binary.any():
        return _empty()

    disk = np.hypot(*np.mgrid[-2:3, -2:3]) <= 2.0
    binary = ndimage.binary_dilation(binary, structure=disk)
    binary = ndimage.binary_fill_holes(binary)
    labels, n_comp = ndimage.label(binary)
    if n_comp == 0:
        return _empty()
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=range(1, n_comp + 1))
    keep = 1 + int(np.argmax(sizes))
    return torch.from_numpy(labels == keep)
