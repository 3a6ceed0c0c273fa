"""Synthetic multi-contrast samples with known T2* ground truth.

Each sample is a stack of C complex images over a shared anatomy: random
ellipse composites define piecewise proton-density and T2* maps, contrast
magnitudes follow the decay law exactly, and a smooth random phase makes
the data genuinely complex. Arrays are kept in double precision so the
decay law and the log-linear fitting oracle close to ~1e-12; training
code downcasts at batch time.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, DomainError, ValidationError

T2_LOW_MS = 10.0
T2_HIGH_MS = 300.0


@dataclass
class MultiContrastSample:
    images: torch.Tensor          # (C, H, W) complex128
    t2star_gt: torch.Tensor       # (H, W) float64, ms; 0 on background
    proton_density: torch.Tensor  # (H, W) float64; 0 on background
    delta_t: float
    seed: int

    @property
    def C(self) -> int:
        return self.images.shape[0]

    @property
    def foreground(self) -> torch.Tensor:
        return self.proton_density > 0


def _ellipse_mask(h, w, cy, cx, ry, rx, theta):
    yy, xx = np.mgrid[0:h, 0:w]
    y = yy - cy
    x = xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = x * ct + y * st
    v = -x * st + y * ct
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def generate_phantom(
    seed: int,
    H: int = 64,
    W: int = 64,
    C: int = 5,
    delta_t: float = 10.0,
    noise_sigma: float = 0.0,
) -> MultiContrastSample:
    """Random ellipse-composite sample, deterministic per seed.

    ``noise_sigma`` adds independent Gaussian noise of that standard
    deviation to the real and imaginary parts of every contrast.
    """
    if H % 16 or W % 16:
        raise ConfigurationError(f"H and W must be divisible by 16, got {H}x{W}")
    if C < 2:
        raise ConfigurationError(f"need at least 2 contrasts, got C={C}")
    if delta_t <= 0:
        raise ConfigurationError(f"delta_t must be positive, got {delta_t}")
    if noise_sigma < 0:
        raise ConfigurationError(f"noise_sigma must be >= 0, got {noise_sigma}")

    rng = np.random.default_rng(seed)
    pd = np.zeros((H, W))
    t2 = np.zeros((H, W))

    # outer body
    body = _ellipse_mask(
        H, W,
        cy=H / 2 + rng.uniform(-H * 0.03, H * 0.03),
        cx=W / 2 + rng.uniform(-W * 0.03, W * 0.03),
        ry=rng.uniform(0.32, 0.42) * H,
        rx=rng.uniform(0.32, 0.42) * W,
        theta=rng.uniform(-0.3, 0.3),
    )
    pd[body] = rng.uniform(0.8, 1.1)
    t2[body] = rng.uniform(60.0, 150.0)

    # internal structures overwrite whatever they cover
    for _ in range(int(rng.integers(4, 9))):
        blob = _ellipse_mask(
            H, W,
            cy=rng.uniform(0.25, 0.75) * H,
            cx=rng.uniform(0.25, 0.75) * W,
            ry=rng.uniform(0.04, 0.18) * H,
            rx=rng.uniform(0.04, 0.18) * W,
            theta=rng.uniform(0, np.pi),
        )
        blob &= body
        pd[blob] = rng.uniform(0.6, 1.2)
        t2[blob] = rng.uniform(T2_LOW_MS, T2_HIGH_MS)

    phase = gaussian_filter(rng.standard_normal((H, W)), sigma=H / 8.0)
    scale = np.abs(phase).max()
    if scale > 0:
        phase = phase * (0.9 * np.pi / scale)

    cs = np.arange(1, C + 1).reshape(C, 1, 1)
    decay = np.where(body, np.exp(-cs * delta_t / np.where(body, t2, 1.0)), 0.0)
    mags = pd * decay
    images = mags * np.exp(1j * phase)
    if noise_sigma > 0:
        images = images + noise_sigma * (
            rng.standard_normal(images.shape) + 1j * rng.standard_normal(images.shape)
        )

    return MultiContrastSample(
        images=torch.from_numpy(images.astype(np.complex128)),
        t2star_gt=torch.from_numpy(t2),
        proton_density=torch.from_numpy(pd),
        delta_t=float(delta_t),
        seed=int(seed),
    )


def normalize(image: torch.Tensor) -> torch.Tensor:
    """Divide by the mean magnitude of the whole array.

    Applied to a (C, H, W) stack this uses one scalar for all contrasts,
    preserving the cross-contrast decay ratios.
    """
    if not torch.is_tensor(image):
        image = torch.as_tensor(image)
    mean = torch.abs(image).mean()
    if mean == 0:
        raise DomainError("cannot normalize an all-zero image")
    return image / mean


def save_sample(path, sample: MultiContrastSample) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(
            fh,
            images=sample.images.numpy(),
            t2star_gt=sample.t2star_gt.numpy(),
            proton_density=sample.proton_density.numpy(),
            delta_t=np.float64(sample.delta_t),
            seed=np.int64(sample.seed),
        )
    tmp.rename(path)


def load_volume(path) -> MultiContrastSample:
    """Read a named-array container holding one multi-contrast sample."""
    with np.load(path) as data:
        for key in ("images", "t2star_gt", "delta_t"):
            if key not in data:
                raise ValidationError(f"{path}: missing array {key!r}")
        images = np.asarray(data["images"])
        if images.ndim != 3:
            raise ValidationError(f"{path}: images must be (C, H, W), got {images.shape}")
        t2 = np.asarray(data["t2star_gt"], dtype=np.float64)
        pd = (
            np.asarray(data["proton_density"], dtype=np.float64)
            if "proton_density" in data
            else (np.abs(images[0]) > 0).astype(np.float64)
        )
        return MultiContrastSample(
            images=torch.from_numpy(images.astype(np.complex128)),
            t2star_gt=torch.from_numpy(t2),
            proton_density=torch.from_numpy(pd),
            delta_t=float(data["delta_t"]),
            seed=int(data["seed"]) if "seed" in data else -1,
        )


def split_indices(n: int, fractions=(0.7, 0.15, 0.15), seed: int = 0) -> dict:
    """Deterministic train/val/test index partition."""
    if n < 1:
        raise ConfigurationError(f"n must be >= 1, got {n}")
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ConfigurationError(f"fractions must be 3 nonnegative values summing to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": sorted(int(i) for i in order[:n_train]),
        "val": sorted(int(i) for i in order[n_train:n_train + n_val]),
        "test": sorted(int(i) for i in order[n_train + n_val:]),
    }


def write_dataset(
    root,
    n_samples: int,
    seed: int = 0,
    fractions=(0.7, 0.15, 0.15),
    H: int = 64,
    W: int = 64,
    C: int = 5,
    delta_t: float = 10.0,
    noise_sigma: float = 0.0,
) -> Path:
    """Generate samples on disk plus a manifest of paths and splits."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    splits = split_indices(n_samples, fractions, seed)
    membership = {}
    for name, idxs in splits.items():
        for i in idxs:
            membership[i] = name
    entries = []
    for i in range(n_samples):
        rel = f"sample_{i:04d}.npz"
        save_sample(root / rel, generate_phantom(seed + i, H, W, C, delta_t, noise_sigma))
        entries.append({"path": rel, "split": membership[i], "seed": seed + i})
    manifest = {
        "config": {
            "n_samples": n_samples, "seed": seed, "fractions": list(fractions),
            "H": H, "W": W, "C": C, "delta_t": delta_t, "noise_sigma": noise_sigma,
        },
        "samples": entries,
    }
    manifest_path = root / "manifest.json"
    tmp = manifest_path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2))
    tmp.rename(manifest_path)
    return manifest_path


def load_manifest(root):
    """Return (manifest dict, {split: [MultiContrastSample]}) from a dataset dir."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    out = {"train": [], "val": [], "test": []}
    for entry in manifest["samples"]:
        out[entry["split"]].append(load_volume(root / entry["path"]))
    return manifest, out
