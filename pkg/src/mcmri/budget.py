"""Per-contrast sampling-budget allocation.

A total sparsity ``alpha`` (fraction of columns sampled, averaged over C
contrasts) is split into per-contrast sparsities. In learnable mode the
split is ``alpha_c = alpha * C * softmax(w)_c`` driven by logits ``w``;
values are then clamped to [floor, cap] with the surplus redistributed
proportionally among the unclamped contrasts, so the total budget
``sum(alpha_c) = C * alpha`` is preserved exactly. The floor corresponds
to the always-sampled central columns (preselect/d), the cap to a fully
sampled contrast.
"""

import torch
import torch.nn as nn

from .errors import ConfigurationError, DomainError, InfeasibleBudgetError, ValidationError


def allocate_ratios(w: torch.Tensor, alpha_total, C: int | None = None,
                    floor: float = 0.0, cap: float = 1.0) -> torch.Tensor:
    """Split the total budget into per-contrast sparsities.

    Differentiable w.r.t. ``w`` (and a tensor ``alpha_total``) away from
    clamp boundaries. When no entry violates [floor, cap] the raw softmax
    allocation is returned untouched, so uniform logits reproduce the
    fixed split bit for bit.
    """
    if not torch.is_tensor(w):
        w = torch.as_tensor(w, dtype=torch.get_default_dtype())
    if w.ndim != 1:
        raise ValidationError(f"w must be a 1D logit vector, got shape {tuple(w.shape)}")
    if not torch.isfinite(w).all():
        raise ValidationError("w contains NaN or Inf")
    n = w.shape[0]
    if C is None:
        C = n
    elif C != n:
        raise ConfigurationError(f"C={C} does not match len(w)={n}")
    a = float(alpha_total.detach() if torch.is_tensor(alpha_total) else alpha_total)
    if not 0.0 < a <= 1.0:
        raise ConfigurationError(f"total sparsity must be in (0,1], got {a}")
    if not 0.0 <= floor < cap <= 1.0:
        raise ConfigurationError(f"need 0 <= floor < cap <= 1, got floor={floor} cap={cap}")
    if a < floor:
        raise InfeasibleBudgetError(
            f"total sparsity {a} is below the per-contrast floor {floor}"
        )
    if a > cap:
        raise ConfigurationError(f"total sparsity {a} exceeds the per-contrast cap {cap}")

    alphas = alpha_total * (C * torch.softmax(w, dim=0))
    if not ((alphas > cap).any() or (alphas < floor).any()):
        return alphas

    # water-filling: find t with sum(clip(raw*t, floor, cap)) = total, which
    # is monotone in t, then recompute the interior entries exactly so the
    # budget holds to machine precision and gradients flow through them
    raw = alphas.detach().to(torch.float64)
    total = float(a * n)
    lo_t, hi_t = 0.0, 2.0
    while torch.clip(raw * hi_t, floor, cap).sum().item() < total and hi_t < 1e12:
        hi_t *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo_t + hi_t)
        if torch.clip(raw * mid, floor, cap).sum().item() < total:
            lo_t = mid
        else:
            hi_t = mid
    t = 0.5 * (lo_t + hi_t)

    at_cap = raw * t >= cap
    at_floor = raw * t <= floor
    free = ~(at_cap | at_floor)
    fixed_sum = at_cap.sum().item() * cap + at_floor.sum().item() * floor
    if not free.any():
        if abs(fixed_sum - total) > 1e-9 * n:
            raise ConfigurationError("budget cannot be balanced within [floor, cap]")
        out = torch.where(at_cap, cap, floor)
        return out.to(w.dtype)
    t_exact = (total - fixed_sum) / alphas[free].sum()
    balanced = alphas * t_exact
    out = torch.where(at_cap, torch.as_tensor(cap, dtype=w.dtype),
                      torch.where(at_floor, torch.as_tensor(floor, dtype=w.dtype), balanced))
    return out


def sparsity_to_acceleration(alpha_c):
    """Acceleration ratio r = 1/alpha."""
    t = torch.as_tensor(alpha_c, dtype=torch.float64) if not torch.is_tensor(alpha_c) else alpha_c
    if (t <= 0).any() or (t > 1).any():
        raise DomainError(f"sparsity must be in (0,1], got {alpha_c}")
    r = 1.0 / t
    return r if torch.is_tensor(alpha_c) else (r.item() if r.ndim == 0 else r)


class BudgetAllocation(nn.Module):
    """Owns the allocation logits and the total budget.

    ``mode='fixed'`` always returns the uniform split; ``mode='learnable'``
    exposes ``w`` as a trainable parameter, started uniform so training
    begins at the fixed baseline.
    """

    def __init__(self, C: int, alpha_total: float, mode: str = "learnable",
                 floor: float = 0.0, cap: float = 1.0):
        super().__init__()
        if C < 1:
            raise ConfigurationError(f"C must be >= 1, got {C}")
        if mode not in ("fixed", "learnable"):
            raise ConfigurationError(f"mode must be 'fixed' or 'learnable', got {mode!r}")
        if not 0.0 < alpha_total <= 1.0:
            raise ConfigurationError(f"total sparsity must be in (0,1], got {alpha_total}")
        if alpha_total < floor:
            raise InfeasibleBudgetError(
                f"total sparsity {alpha_total} is below the per-contrast floor {floor}"
            )
        self.C = C
        self.alpha_total = float(alpha_total)
        self.mode = mode
        self.floor = float(floor)
        self.cap = float(cap)
        if mode == "learnable":
            self.w = nn.Parameter(torch.zeros(C))
        else:
            self.register_buffer("w", torch.zeros(C))

    def alphas(self) -> torch.Tensor:
        if self.mode == "fixed":
            return torch.full((self.C,), self.alpha_total)
        return allocate_ratios(self.w, self.alpha_total, self.C, self.floor, self.cap)

    def ratios(self) -> torch.Tensor:
        return 1.0 / self.alphas()

    def report(self) -> list[dict]:
        alphas = self.alphas().detach()
        return [
            {"contrast": c, "alpha": round(float(alphas[c]), 6),
             "ratio": round(float(1.0 / alphas[c]), 4)}
            for c in range(self.C)
        ]

    def forward(self) -> torch.Tensor:
        return self.alphas()
