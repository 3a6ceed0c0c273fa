"""Synthetic multi-contrast data and the k-space forward model.

Generates an ellipse-composite phantom whose pixel values decay
exponentially across contrasts, undersamples its k-space column-wise, and
shows what zero-filling and the data-consistency projection do.

    python3 demos/02_phantoms_and_kspace.py
"""

# %%
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from mcmri.kspace import data_consistency, fft2c, undersample, zero_filled
from mcmri.maskgen import ProbabilisticMask
from mcmri.phantom import generate_phantom, normalize

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)
torch.manual_seed(0)

# %%
# One sample: C=5 contrasts of the same anatomy, later contrasts dimmer
# where the decay constant is short. Ground-truth decay map rides along.
sample = generate_phantom(seed=5, H=64, W=64, C=5)
images = normalize(sample.images).to(torch.complex64)
print(f"images {tuple(images.shape)}, decay map "
      f"{sample.t2star_gt.min():.0f}..{sample.t2star_gt.max():.0f} ms")

fig, axes = plt.subplots(1, 6, figsize=(15, 2.8))
for c in range(5):
    axes[c].imshow(images[c].abs(), cmap="gray")
    axes[c].set_title(f"contrast {c + 1}")
    axes[c].axis("off")
im = axes[5].imshow(sample.t2star_gt, cmap="magma")
axes[5].set_title("decay map (ms)")
axes[5].axis("off")
fig.colorbar(im, ax=axes[5], fraction=0.046)
fig.tight_layout()
fig.savefig(out / "phantom_contrasts.png", dpi=120)
print(f"wrote {out / 'phantom_contrasts.png'}")

# %%
# Acquire a quarter of the columns. Zero-filling the missing data brings
# column-aliasing; the aliasing pattern follows the mask.
pm = ProbabilisticMask(64, 0.25, preselect_count=6, seed=1)
u = pm.draw_u(torch.Generator().manual_seed(42))
mask = pm.sample(u, 64).detach()
y_full = fft2c(images[0])
y_hat = undersample(y_full, mask)
x_zf = zero_filled(y_hat)
err_zf = (x_zf - images[0]).abs().max()
print(f"zero-filled max error {err_zf:.3f}")

# %%
# Data consistency overwrites the k-space of any candidate image at the
# sampled columns with the acquired values: acquired data are never argued
# with, and projecting twice changes nothing.
candidate = torch.zeros_like(images[0])
projected = data_consistency(mask, candidate, y_hat)
again = data_consistency(mask, projected, y_hat)
print(f"sampled-column residual "
      f"{((fft2c(projected) - y_full) * mask).abs().max():.2e}")
print(f"idempotence gap {(again - projected).abs().max():.2e}")

fig, axes = plt.subplots(1, 4, figsize=(12, 3))
titles = ["fully sampled", "mask", "zero-filled", "dc(0)"]
panels = [images[0].abs(), mask, x_zf.abs(), projected.abs()]
for ax, title, panel in zip(axes, titles, panels):
    ax.imshow(panel, cmap="gray")
    ax.set_title(title)
    ax.axis("off")
fig.tight_layout()
fig.savefig(out / "undersampling.png", dpi=120)
print(f"wrote {out / 'undersampling.png'}")
