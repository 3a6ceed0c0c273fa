"""Learnable Cartesian sampling masks.

Each contrast owns a probability vector ``p`` over the W phase-encoding
columns. A binary mask is drawn by thresholding uniform noise against
``p`` (hard forward pass); gradients flow through a sigmoid relaxation
of the same comparison. A clipped rescaling keeps ``mean(p)`` pinned to
the sparsity budget, and a block of central low-frequency columns is
always sampled.

All functions accept the sparsity target as a float or a 0-dim tensor,
so a learnable budget upstream receives gradients through the
renormalization.
"""

import torch
import torch.nn as nn

from .errors import ConfigurationError, InfeasibleBudgetError, ValidationError


def center_columns(d: int, count: int) -> torch.Tensor:
    """Indices of the ``count`` central columns out of ``d``."""
    if count < 0 or count > d:
        raise ConfigurationError(f"preselect count {count} out of range for d={d}")
    start = (d - count) // 2
    return torch.arange(start, start + count)


def _check_probs(p: torch.Tensor, name: str = "p") -> torch.Tensor:
    if not torch.is_tensor(p):
        p = torch.as_tensor(p)
    if p.ndim != 1:
        raise ValidationError(f"{name} must be a 1D vector, got shape {tuple(p.shape)}")
    if not torch.isfinite(p).all():
        raise ValidationError(f"{name} contains NaN or Inf")
    if p.min() < 0 or p.max() > 1:
        raise ValidationError(f"{name} must lie in [0,1]")
    return p


def _alpha_value(alpha) -> float:
    return float(alpha.detach() if torch.is_tensor(alpha) else alpha)


def renormalize_probs(p: torch.Tensor, alpha, preselected: torch.Tensor | None) -> torch.Tensor:
    """Rescale ``p`` so that ``mean(p) == alpha`` exactly.

    Preselected entries are pinned at 1; the remaining mass is moved by a
    clipped rescale that stays in [0,1], is monotone in ``p``, and is
    differentiable almost everywhere (in both ``p`` and ``alpha``):
    scale down by ``alpha_free/mean`` when over budget, otherwise pull
    toward 1 by rescaling the complement.
    """
    p = _check_probs(p)
    d = p.shape[0]
    a = _alpha_value(alpha)
    if not 0.0 < a <= 1.0:
        raise ConfigurationError(f"sparsity target must be in (0,1], got {a}")
    if preselected is None:
        preselected = torch.empty(0, dtype=torch.long)
    n_pre = int(preselected.numel())
    if a * d < n_pre - 1e-9:
        raise InfeasibleBudgetError(
            f"budget alpha={a} affords {a * d:.2f} columns but {n_pre} are preselected"
        )

    out_dtype = p.dtype
    p64 = p.to(torch.float64)
    if torch.is_tensor(alpha):
        alpha = alpha.to(torch.float64)

    if n_pre == d:
        return torch.ones_like(p64).to(out_dtype)

    free = torch.ones(d, dtype=torch.bool)
    free[preselected] = False
    p_free = p64[free]
    alpha_free = (alpha * d - n_pre) / (d - n_pre)
    af = _alpha_value(alpha_free)
    if af > 1.0 + 1e-12:
        raise ConfigurationError(f"free-column sparsity {af} exceeds 1")

    eps = 1e-12
    mean_free = p_free.mean()
    scale = alpha_free / mean_free.clamp_min(eps)
    beta = (1 - alpha_free) / (1 - mean_free).clamp_min(eps)
    boosted = 1 - (1 - p_free) * beta
    lowered = p_free * scale
    new_free = torch.where(mean_free >= alpha_free, lowered, boosted).clamp(0, 1)

    out = torch.ones(d, dtype=torch.float64)
    out = torch.masked_scatter(out, free, new_free)
    return out.to(out_dtype)


def init_prob_mask(
    d: int, alpha, preselect_count: int = 20, seed: int = 0, slope: float = 5.0
) -> "ProbabilisticMask":
    """Build a mask with uniform-random free probabilities renormalized to ``alpha``."""
    return ProbabilisticMask(d, alpha, preselect_count=preselect_count, seed=seed, slope=slope)


def _check_pair(p: torch.Tensor, u: torch.Tensor):
    p = _check_probs(p, "p")
    u = _check_probs(u, "u")
    if p.shape != u.shape:
        raise ValidationError(f"p shape {tuple(p.shape)} != u shape {tuple(u.shape)}")
    return p, u


def binarize_forward(
    p: torch.Tensor, u: torch.Tensor, preselected: torch.Tensor | None = None
) -> torch.Tensor:
    """Hard threshold: ``m_i = 1`` iff ``u_i <= p_i``; preselected columns forced on."""
    p, u = _check_pair(p, u)
    m = (u <= p).to(p.dtype)
    if preselected is not None and preselected.numel():
        m = m.clone()
        m[preselected] = 1.0
    return m


def relaxed_surrogate(p: torch.Tensor, u: torch.Tensor, slope: float = 5.0) -> torch.Tensor:
    """Sigmoid relaxation of the threshold comparison, 1/(1+exp(-slope*(p-u)))."""
    if slope <= 0:
        raise ConfigurationError(f"slope must be positive, got {slope}")
    p, u = _check_pair(p, u)
    return torch.sigmoid(slope * (p - u))


class _StraightThrough(torch.autograd.Function):
    # hard comparison forward; backward replays the sigmoid surrogate so the
    # gradient is the surrogate's gradient, bit for bit
    @staticmethod
    def forward(ctx, p, u, slope):
        ctx.save_for_backward(p, u)
        ctx.slope = slope
        return (u <= p).to(p.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        p, u = ctx.saved_tensors
        with torch.enable_grad():
            p_leaf = p.detach().requires_grad_(True)
            soft = relaxed_surrogate(p_leaf, u, ctx.slope)
            (grad_p,) = torch.autograd.grad(soft, p_leaf, grad_out)
        return grad_p, None, None


def straight_through_binarize(
    p: torch.Tensor,
    u: torch.Tensor,
    slope: float = 5.0,
    preselected: torch.Tensor | None = None,
) -> torch.Tensor:
    """Binary mask whose gradient w.r.t. ``p`` is that of :func:`relaxed_surrogate`."""
    if slope <= 0:
        raise ConfigurationError(f"slope must be positive, got {slope}")
    p, u = _check_pair(p, u)
    m = _StraightThrough.apply(p, u, slope)
    if preselected is not None and preselected.numel():
        ones = torch.ones(preselected.numel(), dtype=m.dtype)
        m = torch.index_put(m, (preselected,), ones)
    return m


def replicate_mask(m: torch.Tensor, height: int) -> torch.Tensor:
    """Spread a column vector (..., W) into a 2D mask (..., height, W)."""
    if not torch.is_tensor(m):
        m = torch.as_tensor(m)
    if height < 1:
        raise ConfigurationError(f"height must be >= 1, got {height}")
    return m.unsqueeze(-2).expand(*m.shape[:-1], height, m.shape[-1]).contiguous()


class ProbabilisticMask(nn.Module):
    """Learnable column-sampling distribution for one contrast.

    The raw parameter lives in [0,1]; :meth:`probs` returns the effective,
    budget-renormalized probabilities (kept in the autograd graph so both the
    mask parameter and a learnable budget receive gradients), :meth:`sample`
    draws a hard 2D mask via the straight-through estimator, and
    :meth:`project_` re-imposes the budget on the raw parameter after an
    optimizer step.
    """

    def __init__(self, d: int, alpha, preselect_count: int = 20, seed: int = 0,
                 slope: float = 5.0):
        super().__init__()
        if d < 1:
            raise ConfigurationError(f"d must be >= 1, got {d}")
        if slope <= 0:
            raise ConfigurationError(f"slope must be positive, got {slope}")
        a = _alpha_value(alpha)
        if not 0.0 < a <= 1.0:
            raise ConfigurationError(f"sparsity target must be in (0,1], got {a}")
        if preselect_count > d:
            raise ConfigurationError(f"preselect count {preselect_count} exceeds d={d}")
        if preselect_count == d:
            a = 1.0  # full preselection leaves nothing to allocate
        elif a * d < preselect_count - 1e-9:
            raise InfeasibleBudgetError(
                f"alpha={a} affords {a * d:.2f} columns, fewer than the "
                f"{preselect_count} preselected"
            )
        self.d = d
        self.target_sparsity = a
        self.slope = slope
        self.register_buffer("preselected", center_columns(d, preselect_count))

        gen = torch.Generator().manual_seed(seed)
        p0 = torch.rand(d, generator=gen)
        p0[self.preselected] = 1.0
        p0 = renormalize_probs(p0, a, self.preselected)
        self.p = nn.Parameter(p0.to(torch.float32))

    def probs(self, alpha=None) -> torch.Tensor:
        a = self.target_sparsity if alpha is None else alpha
        return renormalize_probs(self.p.clamp(0, 1), a, self.preselected)

    def sample(self, u: torch.Tensor, height: int, alpha=None, hard: bool = True) -> torch.Tensor:
        """(height, d) mask from a uniform realization ``u``.

        ``hard=True`` gives the binary straight-through mask; ``hard=False``
        gives the fully smooth sigmoid relaxation of the same comparison.
        """
        p = self.probs(alpha)
        if hard:
            m = straight_through_binarize(p, u, self.slope, self.preselected)
        else:
            m = relaxed_surrogate(p, u, self.slope)
            if self.preselected.numel():
                ones = torch.ones(self.preselected.numel(), dtype=m.dtype)
                m = torch.index_put(m, (self.preselected,), ones)
        return replicate_mask(m, height)

    def draw_u(self, generator: torch.Generator | None = None) -> torch.Tensor:
        return torch.rand(self.d, generator=generator)

    @torch.no_grad()
    def project_(self, alpha=None) -> None:
        a = self.target_sparsity if alpha is None else alpha
        self.p.copy_(renormalize_probs(self.p.clamp(0, 1), a, self.preselected))

    def forward(self, u: torch.Tensor, height: int, alpha=None) -> torch.Tensor:
        return self.sample(u, height, alpha)
