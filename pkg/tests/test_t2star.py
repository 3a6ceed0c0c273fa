import math
import warnings

import numpy as np
import pytest
import torch
from scipy import stats

from mcmri.errors import ConfigurationError, DomainError, StateError, ValidationError
from mcmri.t2star import (
    T2StarRegressor,
    decay_signal,
    fit_t2star_loglinear,
    fit_t2star_map,
    foreground_mask,
    simulate_regressor_dataset,
    synthesize_map,
)


@pytest.fixture(scope="module")
def trained_regressor():
    torch.set_num_threads(1)
    return T2StarRegressor(C=5, delta_t=10.0).fit(n=200_000, seed=0, epochs=20)


# ---------------------------------------------------------------- decay model

def test_decay_analytic_values():
    s = decay_signal(10.0, 10.0, 3)
    assert s[0].item() == pytest.approx(math.exp(-1.0), rel=1e-12)
    assert s[1].item() == pytest.approx(math.exp(-2.0), rel=1e-12)


def test_decay_infinite_t2_limit():
    s = decay_signal(1e12, 10.0, 5)
    assert torch.all(s > 1 - 1e-10)


def test_decay_monotone_decreasing():
    s = decay_signal(20.0, 10.0, 5)
    expected = torch.exp(torch.tensor([-0.5 * c for c in range(1, 6)], dtype=torch.float64))
    assert torch.allclose(s, expected, atol=1e-12)
    assert torch.all(s[1:] < s[:-1])


def test_decay_batched_shape():
    t = torch.tensor([[50.0, 100.0], [150.0, 200.0]])
    s = decay_signal(t, 10.0, 4)
    assert s.shape == (2, 2, 4)
    assert s[0, 1, 0].item() == pytest.approx(math.exp(-10.0 / 100.0), rel=1e-6)


def test_decay_domain_errors():
    with pytest.raises(DomainError):
        decay_signal(-5.0, 10.0, 3)
    with pytest.raises(DomainError):
        decay_signal(50.0, 0.0, 3)
    with pytest.raises(ConfigurationError):
        decay_signal(50.0, 10.0, 0)


# ---------------------------------------------------------------- oracle fit

def test_loglinear_exact_inversion_sweep():
    for t2 in np.linspace(1.0, 300.0, 40):
        s = decay_signal(float(t2), 10.0, 5)
        est = fit_t2star_loglinear(s, 10.0)
        assert abs(est - t2) <= 1e-9 * t2


def test_loglinear_amplitude_invariant():
    s = decay_signal(150.0, 10.0, 5)
    assert fit_t2star_loglinear(0.37 * s, 10.0) == pytest.approx(150.0, rel=1e-9)


def test_loglinear_constant_signal_clamps():
    assert fit_t2star_loglinear(torch.ones(5), 10.0) == 300.0


def test_loglinear_increasing_signal_clamps():
    s = torch.tensor([0.1, 0.2, 0.4, 0.8, 0.9], dtype=torch.float64)
    assert fit_t2star_loglinear(s, 10.0) == 300.0


def test_loglinear_noise_monte_carlo():
    rng = np.random.default_rng(11)
    clean = decay_signal(50.0, 10.0, 5).numpy()
    estimates = []
    for _ in range(1000):
        noisy = clean + rng.normal(0, 0.01, size=5)
        estimates.append(fit_t2star_loglinear(torch.from_numpy(noisy), 10.0))
    med = float(np.median(estimates))
    assert abs(med - 50.0) <= 5.0


def test_loglinear_domain_errors():
    with pytest.raises(DomainError):
        fit_t2star_loglinear(torch.tensor([0.5, 0.0, 0.1]), 10.0)
    with pytest.raises(DomainError):
        fit_t2star_loglinear(torch.tensor([0.5, 0.4, 0.3]), -1.0)
    with pytest.raises(ValidationError):
        fit_t2star_loglinear(torch.tensor([0.5]), 10.0)


def test_map_fit_background_pixels_are_zero():
    signals = torch.zeros(4, 4, 5, dtype=torch.float64)
    signals[1, 1] = decay_signal(80.0, 10.0, 5)
    out = fit_t2star_map(signals, 10.0)
    assert out[1, 1].item() == pytest.approx(80.0, rel=1e-9)
    out[1, 1] = 0
    assert torch.all(out == 0)


def test_map_fit_matches_scalar_fit():
    rng = np.random.default_rng(5)
    t2s = rng.uniform(10, 290, size=16)
    signals = decay_signal(torch.from_numpy(t2s), 10.0, 5)
    out = fit_t2star_map(signals, 10.0)
    for i, t2 in enumerate(t2s):
        assert out[i].item() == pytest.approx(fit_t2star_loglinear(signals[i], 10.0), rel=1e-12)


# ---------------------------------------------------------------- dataset

def test_dataset_uniform_labels():
    _, labels = simulate_regressor_dataset(100_000, seed=3)
    res = stats.kstest(labels.numpy(), "uniform", args=(0, 300))
    assert res.pvalue > 0.01


def test_dataset_signals_strictly_decreasing():
    signals, _ = simulate_regressor_dataset(1000, seed=4)
    assert torch.all(signals[:, 1:] < signals[:, :-1])


def test_dataset_deterministic():
    s1, l1 = simulate_regressor_dataset(500, seed=7)
    s2, l2 = simulate_regressor_dataset(500, seed=7)
    s3, _ = simulate_regressor_dataset(500, seed=8)
    assert torch.equal(s1, s2) and torch.equal(l1, l2)
    assert not torch.equal(s1, s3)


# ---------------------------------------------------------------- regressor

def test_regressor_untrained_raises():
    reg = T2StarRegressor()
    with pytest.raises(StateError):
        reg.predict(torch.ones(1, 5))


def test_regressor_mae_under_5ms(trained_regressor):
    signals, labels = simulate_regressor_dataset(20_000, seed=999)
    mae = (trained_regressor.predict(signals) - labels).abs().mean().item()
    assert mae < 5.0


def test_regressor_agrees_with_oracle(trained_regressor):
    signals, _ = simulate_regressor_dataset(5_000, seed=1234)
    pred = trained_regressor.predict(signals)
    oracle = fit_t2star_map(signals.to(torch.float64), 10.0).to(torch.float32)
    agree = ((pred - oracle).abs() <= 10.0).float().mean().item()
    assert agree >= 0.95


def test_regressor_constant_signal_lands_near_clamp(trained_regressor):
    est = trained_regressor.predict(torch.ones(1, 5)).item()
    assert est >= 250.0


def test_regressor_frozen_after_fit(trained_regressor):
    assert trained_regressor.is_frozen
    x = torch.rand(8, 5, requires_grad=True)
    trained_regressor(x).sum().backward()
    assert x.grad is not None and torch.isfinite(x.grad).all()
    for p in trained_regressor.parameters():
        assert p.grad is None


def test_regressor_deterministic_fit():
    a = T2StarRegressor().fit(n=2_000, seed=5, epochs=2)
    b = T2StarRegressor().fit(n=2_000, seed=5, epochs=2)
    x = torch.rand(16, 5, generator=torch.Generator().manual_seed(0))
    assert torch.equal(a.predict(x), b.predict(x))


def test_regressor_input_validation(trained_regressor):
    with pytest.raises(ValidationError):
        trained_regressor.predict(torch.ones(4, 7))


# ---------------------------------------------------------------- map synthesis

def _phantom_like(h, w, seed=0):
    rng = np.random.default_rng(seed)
    t2 = torch.zeros(h, w, dtype=torch.float64)
    t2[2:-2, 2:-2] = torch.from_numpy(rng.uniform(20, 280, size=(h - 4, w - 4)))
    support = t2 > 0
    images = torch.where(
        support.unsqueeze(-1), decay_signal(t2.clamp_min(1.0), 10.0, 5), torch.zeros(1, dtype=torch.float64)
    ).permute(2, 0, 1)
    return images, t2, support


def test_synthesize_map_loglinear_matches_ground_truth():
    images, t2, support = _phantom_like(12, 12, seed=2)
    out = synthesize_map(images, "loglinear", delta_t=10.0)
    assert out.shape == (12, 12)
    assert torch.abs(out[support] - t2[support]).max().item() < 1e-6
    assert torch.all(out[~support] == 0)


def test_synthesize_map_constant_images_clamp():
    out = synthesize_map(torch.ones(5, 8, 8), "loglinear", delta_t=10.0)
    assert torch.all(out == 300.0)


def test_synthesize_map_regressor_path(trained_regressor):
    images, t2, support = _phantom_like(12, 12, seed=3)
    out = synthesize_map(images, trained_regressor)
    assert out.shape == (12, 12)
    err = torch.abs(out[support] - t2[support].to(torch.float32))
    assert err.median().item() < 10.0


def test_synthesize_map_differentiable_path(trained_regressor):
    images = torch.rand(5, 8, 8, generator=torch.Generator().manual_seed(1), requires_grad=True)
    out = synthesize_map(images, trained_regressor, differentiable=True)
    out.sum().backward()
    assert images.grad is not None
    assert images.grad.abs().sum().item() > 0


def test_synthesize_map_validation(trained_regressor):
    with pytest.raises(ValidationError):
        synthesize_map(torch.ones(5, 8), "loglinear", delta_t=10.0)
    with pytest.raises(ConfigurationError):
        synthesize_map(torch.ones(5, 8, 8), "loglinear")
    with pytest.raises(ValidationError):
        synthesize_map(torch.ones(3, 8, 8), trained_regressor)
    with pytest.raises(ConfigurationError):
        synthesize_map(torch.ones(5, 8, 8), "cubic", delta_t=10.0)


# ---------------------------------------------------------------- foreground

def test_foreground_all_zero_warns_empty():
    with pytest.warns(UserWarning):
        m = foreground_mask(torch.zeros(3, 16, 16))
    assert m.dtype == torch.bool and not m.any()


def test_foreground_disk_iou():
    h, r = 192, 84
    yy, xx = np.mgrid[0:h, 0:h]
    disk = np.hypot(yy - h / 2 + 0.5, xx - h / 2 + 0.5) <= r
    images = torch.stack(
        [torch.from_numpy(disk * math.exp(-c * 10.0 / 80.0)) for c in (1, 2, 3)]
    )
    m = foreground_mask(images).numpy()
    iou = (m & disk).sum() / (m | disk).sum()
    assert iou > 0.9


def test_foreground_keeps_largest_blob():
    h = 96
    yy, xx = np.mgrid[0:h, 0:h]
    big = np.hypot(yy - 30, xx - 30) <= 14
    small = np.hypot(yy - 72, xx - 72) <= 5
    scene = (big | small).astype(np.float64)
    images = torch.stack([torch.from_numpy(scene * 0.8 ** c) for c in (1, 2, 3)])
    m = foreground_mask(images).numpy()
    assert (m & small).sum() == 0
    assert (m & big).sum() / big.sum() > 0.9
