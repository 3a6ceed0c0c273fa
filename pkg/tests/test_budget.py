import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mcmri.budget import BudgetAllocation, allocate_ratios, sparsity_to_acceleration
from mcmri.errors import ConfigurationError, DomainError, InfeasibleBudgetError, ValidationError


def test_uniform_logits_reproduce_fixed_split_bitwise():
    for C in (2, 3, 5, 7):
        for dtype in (torch.float32, torch.float64):
            alpha = torch.tensor(0.25, dtype=dtype)
            out = allocate_ratios(torch.zeros(C, dtype=dtype), alpha, C)
            assert torch.equal(out, torch.full((C,), 0.25, dtype=dtype))


def test_two_contrast_closed_form():
    out = allocate_ratios(torch.tensor([math.log(3.0), 0.0], dtype=torch.float64), 0.25, 2)
    assert torch.allclose(out, torch.tensor([0.375, 0.125], dtype=torch.float64), atol=1e-9)
    r = sparsity_to_acceleration(out)
    assert torch.allclose(r, torch.tensor([8 / 3, 8.0], dtype=torch.float64), atol=1e-6)


def test_reported_learnable_ratios_at_acceleration_two_fit_budget_formula():
    # published per-contrast ratios for the 5-contrast learnable split at
    # total acceleration 2: the inverse ratios must sum to C*alpha
    ratios = [1.0, 3.3, 7.3, 8.4, 1.0]
    total = sum(1.0 / r for r in ratios)
    c_alpha = 5 * 0.5
    assert abs(total - c_alpha) <= 0.15


def test_budget_conserved_with_clamping():
    floor = 20.0 / 224.0
    w = torch.tensor([5.0, 5.0, -5.0, -5.0, -5.0], dtype=torch.float64)
    out = allocate_ratios(w, 0.25, 5, floor=floor)
    assert abs(out.sum().item() - 5 * 0.25) < 1e-9
    assert out.min().item() >= floor - 1e-12
    assert out.max().item() <= 1.0 + 1e-12
    # the three starved contrasts sit exactly on the floor
    assert torch.allclose(out[2:], torch.full((3,), floor, dtype=torch.float64))
    assert sparsity_to_acceleration(out[2].item()) == pytest.approx(11.2, abs=0.01)


def test_cap_redistribution():
    out = allocate_ratios(torch.tensor([10.0, 0.0, 0.0], dtype=torch.float64), 0.9, 3)
    assert abs(out.sum().item() - 2.7) < 1e-9
    assert out[0].item() == 1.0
    assert torch.allclose(out[1:], torch.full((2,), 0.85, dtype=torch.float64))


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    alpha=st.floats(0.15, 0.95),
    c=st.integers(2, 8),
)
def test_allocation_properties(seed, alpha, c):
    gen = torch.Generator().manual_seed(seed)
    w = torch.randn(c, generator=gen, dtype=torch.float64) * 3
    floor = 0.1
    out = allocate_ratios(w, alpha, c, floor=floor)
    assert abs(out.mean().item() - alpha) < 1e-6
    assert out.min().item() >= floor - 1e-12
    assert out.max().item() <= 1.0 + 1e-12
    # ordering follows the logits
    order = torch.argsort(w)
    assert torch.all(out[order][1:] >= out[order][:-1] - 1e-12)


def test_gradient_matches_finite_differences_unclamped():
    w = torch.tensor([0.3, -0.2, 0.1, 0.05], dtype=torch.float64, requires_grad=True)
    alpha = 0.2
    coeff = torch.tensor([1.0, -2.0, 0.5, 3.0], dtype=torch.float64)
    (coeff * allocate_ratios(w, alpha, 4)).sum().backward()
    h = 1e-6
    base = w.detach()
    for j in range(4):
        hi, lo = base.clone(), base.clone()
        hi[j] += h
        lo[j] -= h
        fd = ((coeff * allocate_ratios(hi, alpha, 4)).sum()
              - (coeff * allocate_ratios(lo, alpha, 4)).sum()).item() / (2 * h)
        ref = w.grad[j].item()
        assert abs(fd - ref) <= 1e-4 * max(abs(ref), 1e-8)


def test_gradient_flows_through_clamped_allocation():
    w = torch.tensor([5.0, 5.0, -5.0, -5.0, -5.0], dtype=torch.float64, requires_grad=True)
    out = allocate_ratios(w, 0.25, 5, floor=20.0 / 224.0)
    out[0].backward()
    assert torch.isfinite(w.grad).all()


def test_validation_errors():
    with pytest.raises(ConfigurationError):
        allocate_ratios(torch.zeros(3), 1.5, 3)
    with pytest.raises(ConfigurationError):
        allocate_ratios(torch.zeros(3), 0.5, 4)
    with pytest.raises(InfeasibleBudgetError):
        allocate_ratios(torch.zeros(3), 0.05, 3, floor=0.1)
    with pytest.raises(ValidationError):
        allocate_ratios(torch.tensor([0.0, float("nan")]), 0.5)
    with pytest.raises(ValidationError):
        allocate_ratios(torch.zeros(2, 2), 0.5)


def test_sparsity_to_acceleration():
    assert sparsity_to_acceleration(0.5) == pytest.approx(2.0)
    assert sparsity_to_acceleration(1.0) == pytest.approx(1.0)
    assert sparsity_to_acceleration(0.0893) == pytest.approx(11.2, abs=0.005)
    with pytest.raises(DomainError):
        sparsity_to_acceleration(0.0)
    with pytest.raises(DomainError):
        sparsity_to_acceleration(-0.1)
    with pytest.raises(DomainError):
        sparsity_to_acceleration(1.2)


def test_module_fixed_mode():
    b = BudgetAllocation(5, 0.25, mode="fixed")
    assert torch.equal(b.alphas(), torch.full((5,), 0.25))
    assert len(list(b.parameters())) == 0


def test_module_learnable_starts_at_fixed_baseline():
    fixed = BudgetAllocation(5, 0.25, mode="fixed")
    learn = BudgetAllocation(5, 0.25, mode="learnable")
    assert torch.equal(fixed.alphas(), learn.alphas())
    assert len(list(learn.parameters())) == 1


def test_module_report_schema():
    b = BudgetAllocation(3, 0.5, mode="fixed")
    rep = b.report()
    assert [row["contrast"] for row in rep] == [0, 1, 2]
    for row in rep:
        assert row["alpha"] == pytest.approx(0.5)
        assert row["ratio"] == pytest.approx(2.0)


def test_module_rejects_bad_config():
    with pytest.raises(ConfigurationError):
        BudgetAllocation(0, 0.5)
    with pytest.raises(ConfigurationError):
        BudgetAllocation(3, 0.5, mode="adaptive")
    with pytest.raises(InfeasibleBudgetError):
        BudgetAllocation(3, 0.05, floor=0.1)
