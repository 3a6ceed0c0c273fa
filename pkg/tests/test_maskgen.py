import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mcmri.errors import ConfigurationError, InfeasibleBudgetError, ValidationError
from mcmri.maskgen import (
    ProbabilisticMask,
    binarize_forward,
    center_columns,
    init_prob_mask,
    relaxed_surrogate,
    renormalize_probs,
    replicate_mask,
    straight_through_binarize,
)


def bisect_rescale_oracle(p_free: np.ndarray, alpha_free: float) -> np.ndarray:
    """Independent check of the clipped rescale: bisect the branch factor
    until the mean constraint is met, instead of using the closed form."""
    lowering = p_free.mean() >= alpha_free
    if lowering:
        apply = lambda r: p_free * r  # mean increasing in r
    else:
        apply = lambda b: 1.0 - (1.0 - p_free) * b  # mean decreasing in b
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        below = apply(mid).mean() < alpha_free
        if below == lowering:
            lo = mid
        else:
            hi = mid
    return apply(0.5 * (lo + hi))


# ---------------------------------------------------------------- renormalize

def test_renormalize_fixed_point():
    p = torch.full((16,), 0.25, dtype=torch.float64)
    out = renormalize_probs(p, 0.25, None)
    assert torch.abs(out - p).max().item() < 1e-12


def test_renormalize_uniform_halving():
    p = torch.full((16,), 0.5, dtype=torch.float64)
    out = renormalize_probs(p, 0.25, None)
    assert torch.abs(out - 0.25).max().item() < 1e-12


def test_renormalize_boost_matches_bisection_oracle():
    rng = np.random.default_rng(3)
    p = rng.uniform(0, 1, size=32)
    p[:4] = 1.0  # saturated entries must stay at 1
    target = 0.8
    got = renormalize_probs(torch.from_numpy(p), target, None).numpy()
    ref = bisect_rescale_oracle(p, target)
    assert np.max(np.abs(got - ref)) < 1e-10
    assert got.max() <= 1.0 and got.min() >= 0.0
    assert abs(got.mean() - target) < 1e-6


def test_renormalize_lower_matches_bisection_oracle():
    rng = np.random.default_rng(4)
    p = rng.uniform(0.3, 1.0, size=32)
    target = 0.2
    got = renormalize_probs(torch.from_numpy(p), target, None).numpy()
    ref = bisect_rescale_oracle(p, target)
    assert np.max(np.abs(got - ref)) < 1e-10


def test_renormalize_keeps_preselected_at_one():
    pre = center_columns(32, 6)
    rng = np.random.default_rng(5)
    p = torch.from_numpy(rng.uniform(0, 1, size=32))
    p[pre] = 1.0
    out = renormalize_probs(p, 0.5, pre)
    assert torch.all(out[pre] == 1.0)
    assert abs(out.mean().item() - 0.5) < 1e-6


@settings(max_examples=50, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    alpha=st.floats(0.25, 1.0),
    n_pre=st.integers(0, 8),
)
def test_renormalize_properties(seed, alpha, n_pre):
    d = 32
    rng = np.random.default_rng(seed)
    pre = center_columns(d, n_pre) if n_pre else None
    p = torch.from_numpy(rng.uniform(0, 1, size=d))
    if pre is not None:
        p[pre] = 1.0
    out = renormalize_probs(p, alpha, pre)
    assert abs(out.mean().item() - alpha) < 1e-6
    assert out.min().item() >= 0.0 and out.max().item() <= 1.0
    # monotone off preselection
    free = torch.ones(d, dtype=torch.bool)
    if pre is not None:
        free[pre] = False
    pf, of = p[free], out[free]
    order = torch.argsort(pf)
    assert torch.all(of[order][1:] >= of[order][:-1] - 1e-12)


def test_renormalize_infeasible():
    with pytest.raises(InfeasibleBudgetError):
        renormalize_probs(torch.ones(16), 0.1, center_columns(16, 8))
    with pytest.raises(ConfigurationError):
        renormalize_probs(torch.ones(16), 1.5, None)
    with pytest.raises(ValidationError):
        renormalize_probs(torch.full((16,), 1.5), 0.5, None)


def test_renormalize_differentiable_and_alpha_grad():
    p = torch.rand(16, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    p.requires_grad_(True)
    alpha = torch.tensor(0.4, dtype=torch.float64, requires_grad=True)
    w = torch.linspace(-1, 1, 16, dtype=torch.float64)
    loss = (w * renormalize_probs(p, alpha, None)).sum()
    loss.backward()
    assert p.grad is not None and torch.isfinite(p.grad).all()
    assert alpha.grad is not None and torch.isfinite(alpha.grad).all()

    # finite differences on a weighted sum, away from the branch boundary
    def f(pv):
        return (w * renormalize_probs(pv, 0.4, None)).sum()

    h = 1e-6
    base = p.detach().clone()
    for i in [0, 7, 15]:
        hi, lo = base.clone(), base.clone()
        hi[i] += h
        lo[i] -= h
        fd = (f(hi) - f(lo)).item() / (2 * h)
        assert abs(fd - p.grad[i].item()) < 1e-4 * max(1.0, abs(fd))


# ---------------------------------------------------------------- init

def test_init_full_preselection_forces_ones():
    mask = init_prob_mask(d=20, alpha=0.5, preselect_count=20, seed=0)
    assert mask.target_sparsity == 1.0
    assert torch.all(mask.probs() == 1.0)


def test_init_budget_and_preselection():
    mask = init_prob_mask(d=224, alpha=0.25, preselect_count=20, seed=1)
    p = mask.probs()
    assert abs(p.mean().item() - 0.25) < 1e-6
    assert torch.all(p[mask.preselected] == 1.0)
    assert mask.preselected.tolist() == list(range(102, 122))
    assert p.min().item() >= 0.0 and p.max().item() <= 1.0


def test_init_deterministic_per_seed():
    a = init_prob_mask(d=64, alpha=0.3, preselect_count=6, seed=7)
    b = init_prob_mask(d=64, alpha=0.3, preselect_count=6, seed=7)
    c = init_prob_mask(d=64, alpha=0.3, preselect_count=6, seed=8)
    assert torch.equal(a.p, b.p)
    assert not torch.equal(a.p, c.p)


def test_init_rejects_bad_config():
    with pytest.raises(InfeasibleBudgetError):
        init_prob_mask(d=64, alpha=0.05, preselect_count=20)
    with pytest.raises(ConfigurationError):
        init_prob_mask(d=64, alpha=1.5, preselect_count=4)
    with pytest.raises(ConfigurationError):
        init_prob_mask(d=16, alpha=0.5, preselect_count=17)
    with pytest.raises(ConfigurationError):
        ProbabilisticMask(d=16, alpha=0.5, preselect_count=2, slope=0.0)


# ---------------------------------------------------------------- binarize

def test_binarize_definition():
    p = torch.tensor([0.7, 0.3])
    u = torch.tensor([0.5, 0.5])
    assert binarize_forward(p, u).tolist() == [1.0, 0.0]
    assert binarize_forward(torch.ones(8), torch.rand(8)).tolist() == [1.0] * 8


def test_binarize_tie_counts_as_sampled():
    assert binarize_forward(torch.tensor([0.5]), torch.tensor([0.5])).item() == 1.0


def test_binarize_forces_preselected():
    p = torch.zeros(8)
    u = torch.full((8,), 0.9)
    m = binarize_forward(p, u, preselected=center_columns(8, 2))
    assert m.tolist() == [0, 0, 0, 1, 1, 0, 0, 0]


def test_binarize_monte_carlo_matches_probs():
    d, n = 16, 100_000
    gen = torch.Generator().manual_seed(42)
    p = torch.rand(d, generator=gen, dtype=torch.float64)
    total = torch.zeros(d, dtype=torch.float64)
    for _ in range(10):
        u = torch.rand(n // 10, d, generator=gen, dtype=torch.float64)
        total += (u <= p).sum(dim=0)
    freq = total / n
    sigma = torch.sqrt(p * (1 - p) / n)
    assert torch.all(torch.abs(freq - p) <= 3 * sigma + 1e-12)


# ---------------------------------------------------------------- surrogate

def test_surrogate_values():
    p = torch.tensor([0.4, 0.6], dtype=torch.float64)
    assert torch.abs(relaxed_surrogate(p, p.clone(), 5.0) - 0.5).max().item() < 1e-12
    s = 5.0
    u = p - 1.0 / s
    expected = 1.0 / (1.0 + np.exp(-1.0))
    assert torch.abs(relaxed_surrogate(p, u, s) - expected).max().item() < 1e-12


def test_surrogate_range_and_slope_validation():
    p = torch.rand(32, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    u = torch.rand(32, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    out = relaxed_surrogate(p, u, 5.0)
    assert torch.all(out > 0) and torch.all(out < 1)
    # at steep slopes the tails round to exactly 0/1 in floating point
    out = relaxed_surrogate(p, u, 50.0)
    assert torch.all(out >= 0) and torch.all(out <= 1)
    with pytest.raises(ConfigurationError):
        relaxed_surrogate(p, u, 0.0)
    with pytest.raises(ConfigurationError):
        relaxed_surrogate(p, u, -3.0)


@pytest.mark.parametrize("slope", [5.0, 50.0])
def test_surrogate_gradient_matches_finite_differences(slope):
    # probe where the sigmoid has usable slope (|p-u| <= 2/s); in the far
    # tails the true gradient underflows below FD roundoff
    n = 24
    p = torch.linspace(0.3, 0.7, n, dtype=torch.float64).requires_grad_(True)
    delta = torch.linspace(-2.0 / slope, 2.0 / slope, n, dtype=torch.float64)
    u = (p.detach() - delta).clamp(0, 1)
    relaxed_surrogate(p, u, slope).sum().backward()
    h = 1e-7
    base = p.detach()
    for i in range(n):
        hi, lo = base.clone(), base.clone()
        hi[i] += h
        lo[i] -= h
        fd = (relaxed_surrogate(hi, u, slope)[i] - relaxed_surrogate(lo, u, slope)[i]).item() / (2 * h)
        ref = p.grad[i].item()
        assert abs(fd - ref) <= 1e-4 * abs(ref)


def test_surrogate_converges_to_hard_threshold():
    gen = torch.Generator().manual_seed(10)
    p = torch.rand(64, generator=gen, dtype=torch.float64)
    u = torch.rand(64, generator=gen, dtype=torch.float64)
    hard = binarize_forward(p, u)
    soft = relaxed_surrogate(p, u, 1e6)
    assert torch.abs(soft.round() - hard).max().item() == 0.0


# ---------------------------------------------------------------- straight-through

def test_ste_forward_is_hard():
    gen = torch.Generator().manual_seed(11)
    p = torch.rand(32, generator=gen)
    u = torch.rand(32, generator=gen)
    m = straight_through_binarize(p, u, 5.0)
    assert set(m.unique().tolist()) <= {0.0, 1.0}
    assert torch.equal(m, binarize_forward(p, u))


def test_ste_gradient_identical_to_surrogate():
    gen = torch.Generator().manual_seed(12)
    weights = torch.randn(32, generator=gen, dtype=torch.float64)
    u = torch.rand(32, generator=gen, dtype=torch.float64)

    p1 = torch.rand(32, generator=torch.Generator().manual_seed(13), dtype=torch.float64)
    p2 = p1.clone()
    p1.requires_grad_(True)
    p2.requires_grad_(True)

    (weights * straight_through_binarize(p1, u, 5.0)).sum().backward()
    (weights * relaxed_surrogate(p2, u, 5.0)).sum().backward()
    assert torch.equal(p1.grad, p2.grad)


def test_ste_quadratic_toy_moves_probability_the_right_way():
    # one column, mask currently off; loss wants it on -> gradient descent raises p
    p = torch.tensor([0.3], dtype=torch.float64, requires_grad=True)
    u = torch.tensor([0.6], dtype=torch.float64)
    m = straight_through_binarize(p, u, 5.0)
    loss = (m - 1.0).pow(2).sum()
    loss.backward()
    assert p.grad.item() < 0  # descent step increases p
    # and the mirror case: mask on, loss wants it off
    q = torch.tensor([0.9], dtype=torch.float64, requires_grad=True)
    mq = straight_through_binarize(q, u, 5.0)
    ((mq - 0.0).pow(2).sum()).backward()
    assert q.grad.item() > 0


def test_ste_finite_difference_against_surrogate_loss():
    # FD of the surrogate loss approximates the STE gradient at slope 5
    gen = torch.Generator().manual_seed(14)
    u = torch.rand(16, generator=gen, dtype=torch.float64)
    w = torch.randn(16, generator=gen, dtype=torch.float64)
    p = torch.rand(16, generator=torch.Generator().manual_seed(15), dtype=torch.float64)
    p.requires_grad_(True)
    (w * straight_through_binarize(p, u, 5.0)).sum().backward()
    h = 1e-6
    base = p.detach()
    for i in range(0, 16, 3):
        hi, lo = base.clone(), base.clone()
        hi[i] += h
        lo[i] -= h
        fd = ((w * relaxed_surrogate(hi, u, 5.0)).sum() - (w * relaxed_surrogate(lo, u, 5.0)).sum()).item() / (2 * h)
        ref = p.grad[i].item()
        assert abs(fd - ref) <= 1e-4 * max(abs(ref), 1e-8)


# ---------------------------------------------------------------- replication

def test_replicate_examples():
    m = torch.tensor([1.0, 0.0])
    out = replicate_mask(m, 2)
    assert out.tolist() == [[1.0, 0.0], [1.0, 0.0]]
    assert torch.all(replicate_mask(torch.ones(4), 3) == 1.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 1000), h=st.integers(1, 12))
def test_replicate_rows_identical_and_column_sums(seed, h):
    gen = torch.Generator().manual_seed(seed)
    m = (torch.rand(10, generator=gen) < 0.4).float()
    out = replicate_mask(m, h)
    assert out.shape == (h, 10)
    assert torch.all(out == m.unsqueeze(0))
    assert torch.equal(out.sum(dim=0), h * m)


def test_replicate_batched():
    m = torch.tensor([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    out = replicate_mask(m, 4)
    assert out.shape == (2, 4, 3)
    assert torch.all(out[0] == m[0])


# ---------------------------------------------------------------- module end-to-end

def test_mask_module_sample_structure():
    mask = ProbabilisticMask(d=32, alpha=0.5, preselect_count=6, seed=3)
    u = mask.draw_u(torch.Generator().manual_seed(0))
    m2d = mask.sample(u, height=24)
    assert m2d.shape == (24, 32)
    assert set(m2d.unique().tolist()) <= {0.0, 1.0}
    assert torch.all(m2d[0] == m2d)  # every row identical
    assert torch.all(m2d[:, mask.preselected] == 1.0)


def test_mask_module_gradient_reaches_parameter():
    mask = ProbabilisticMask(d=32, alpha=0.5, preselect_count=4, seed=4)
    u = mask.draw_u(torch.Generator().manual_seed(1))
    out = mask.sample(u, height=8)
    out.sum().backward()
    assert mask.p.grad is not None
    assert torch.isfinite(mask.p.grad).all()
    assert mask.p.grad.abs().sum().item() > 0


def test_mask_module_projection_restores_budget():
    mask = ProbabilisticMask(d=64, alpha=0.25, preselect_count=6, seed=5)
    with torch.no_grad():
        mask.p.add_(torch.randn(64, generator=torch.Generator().manual_seed(2)) * 0.2)
    mask.project_()
    assert abs(mask.p.mean().item() - 0.25) < 1e-6
    assert torch.all(mask.p[mask.preselected] == 1.0)
    assert mask.p.min().item() >= 0.0 and mask.p.max().item() <= 1.0


def test_mask_module_alpha_override():
    mask = ProbabilisticMask(d=64, alpha=0.25, preselect_count=6, seed=6)
    p = mask.probs(alpha=0.5)
    assert abs(p.mean().item() - 0.5) < 1e-6


def test_mask_module_eval_realization_reproducible():
    mask = ProbabilisticMask(d=32, alpha=0.5, preselect_count=4, seed=7)
    u1 = mask.draw_u(torch.Generator().manual_seed(99))
    u2 = mask.draw_u(torch.Generator().manual_seed(99))
    assert torch.equal(mask.sample(u1, 16), mask.sample(u2, 16))
