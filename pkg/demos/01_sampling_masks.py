"""Column-wise sampling masks: probabilities, binarization, budgets.

Walks through the sampling side of the pipeline: a per-contrast
probabilistic column mask, its renormalization onto a sparsity budget with
always-on central columns, hard/soft binarization, and the straight-through
gradient that lets the budget constraint survive training.

Run from the repository root:

    python3 demos/01_sampling_masks.py

Figures land in demos/out/.
"""

# %%
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from mcmri.maskgen import (
    ProbabilisticMask,
    binarize_forward,
    center_columns,
    relaxed_surrogate,
    renormalize_probs,
    straight_through_binarize,
)

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)
torch.manual_seed(0)

# %%
# A probabilistic mask over d=64 k-space columns, quarter sparsity, with 6
# central columns always sampled. Renormalization pins mean(p) to alpha.
d, alpha, preselect = 64, 0.25, 6
mask = ProbabilisticMask(d, alpha, preselect_count=preselect, seed=3)
p = mask.probs().detach()
print(f"mean(p) = {p.mean():.6f} (target {alpha})")
print(f"preselected columns at p=1: {center_columns(d, preselect).tolist()}")

# %%
# Hard binarization draws u ~ U[0,1) per column and keeps columns with
# u <= p. The sigmoid surrogate is its smooth stand-in for gradients.
u = torch.rand(d)
hard = binarize_forward(p, u, preselected=center_columns(d, preselect))
soft = relaxed_surrogate(p, u, slope=5.0)
print(f"sampled {int(hard.sum())} of {d} columns "
      f"(expected {alpha * d:.0f})")

fig, axes = plt.subplots(3, 1, figsize=(8, 5), sharex=True)
axes[0].bar(range(d), p, color="tab:blue")
axes[0].set_ylabel("p")
axes[1].bar(range(d), hard, color="tab:green")
axes[1].set_ylabel("hard")
axes[2].bar(range(d), soft, color="tab:orange")
axes[2].set_ylabel("surrogate")
axes[2].set_xlabel("k-space column")
fig.tight_layout()
fig.savefig(out / "mask_binarization.png", dpi=120)
print(f"wrote {out / 'mask_binarization.png'}")

# %%
# The straight-through rule: hard values forward, surrogate gradient
# backward. Both paths produce bit-identical gradients on p.
p_hard = p.clone().requires_grad_(True)
straight_through_binarize(p_hard, u, slope=5.0).sum().backward()
p_soft = p.clone().requires_grad_(True)
relaxed_surrogate(p_soft, u, slope=5.0).sum().backward()
print(f"gradients identical: {torch.equal(p_hard.grad, p_soft.grad)}")

# %%
# Renormalization projects any raw probability vector back onto the budget;
# the mean lands on alpha no matter how skewed the input.
raw = torch.rand(d) ** 3
fixed = renormalize_probs(raw, alpha, center_columns(d, preselect))
print(f"raw mean {raw.mean():.3f} -> renormalized mean {fixed.mean():.6f}")
