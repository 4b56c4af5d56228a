import math

import numpy as np
import pytest

from dpfedsim.dp import (
    DEFAULT_ALPHA_GRID,
    DpConfig,
    PrivacyLedger,
    clip_gradient,
    epsilon_spent,
    noisy_batch_gradient,
    poisson_sample,
    rdp_cost_per_step,
    rdp_to_dp,
    steps_for_budget,
)
from dpfedsim.linalg import l2_norm


def test_clip_worked_example():
    clipped = clip_gradient(np.array([3.0, 4.0]), 1.5)
    np.testing.assert_allclose(clipped, [0.9, 1.2], rtol=0, atol=1e-15)


def test_clip_leaves_small_vectors_bitwise_alone():
    g = np.array([0.1, -0.2, 0.05])
    out = clip_gradient(g, 1.5)
    assert out is g  # same object, same bits


def test_clip_zero_vector():
    g = np.zeros(4)
    np.testing.assert_array_equal(clip_gradient(g, 1.0), g)


def test_clip_property_over_random_inputs():
    rng = np.random.default_rng(12)
    for _ in range(1000):
        dim = int(rng.integers(1, 50))
        g = rng.standard_normal(dim) * rng.uniform(0.1, 10)
        c = rng.uniform(1e-3, 5.0)
        out = clip_gradient(g, c)
        assert l2_norm(out) <= c + 1e-9
        if l2_norm(g) <= c:
            assert out is g


def test_clip_rejects_bad_threshold():
    with pytest.raises(ValueError, match="clip_threshold"):
        clip_gradient(np.ones(2), 0.0)


def test_poisson_sample_fixed_size():
    rng = np.random.default_rng(0)
    idx = poisson_sample(100, 0.32, "fixed_size", rng)
    assert idx.shape == (32,)
    assert np.all(np.diff(idx) > 0)  # ascending, distinct
    assert idx.min() >= 0 and idx.max() < 100
    # floor(0.05 * 10) = 0 still yields one sample
    assert poisson_sample(10, 0.05, "fixed_size", rng).shape == (1,)


def test_poisson_sample_rate_one_takes_everything():
    rng = np.random.default_rng(1)
    np.testing.assert_array_equal(
        poisson_sample(7, 1.0, "poisson", rng), np.arange(7)
    )
    np.testing.assert_array_equal(
        poisson_sample(7, 1.0, "fixed_size", rng), np.arange(7)
    )


def test_poisson_sample_poisson_mode_statistics():
    rng = np.random.default_rng(2)
    sizes = [poisson_sample(1000, 0.1, "poisson", rng).size for _ in range(200)]
    assert abs(np.mean(sizes) - 100) < 10  # ~5 stderr


def test_poisson_sample_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="sampling_rate"):
        poisson_sample(10, 0.0, "poisson", rng)
    with pytest.raises(ValueError, match="sampling_mode"):
        poisson_sample(10, 0.5, "bernoulli", rng)
    with pytest.raises(ValueError, match="shard_size"):
        poisson_sample(0, 0.5, "poisson", rng)


def test_noisy_batch_gradient_sigma_zero_is_plain_mean():
    batch = [np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([1.0, 1.0])]
    rng = np.random.default_rng(0)
    out = noisy_batch_gradient(batch, 1.5, 0.0, rng)
    np.testing.assert_array_equal(out, np.array([2.0, 2.0]) / 3)


def test_noisy_batch_gradient_empty_batch_errors():
    with pytest.raises(ValueError, match="nonempty"):
        noisy_batch_gradient([], 1.5, 0.8, np.random.default_rng(0))


def test_noisy_batch_gradient_noise_scale():
    # zero gradients isolate the noise term: stdev should be sigma*C/|S|
    sigma, c, batch_size = 0.8, 1.5, 4
    rng = np.random.default_rng(3)
    batch = [np.zeros(8)] * batch_size
    draws = np.concatenate(
        [noisy_batch_gradient(batch, c, sigma, rng) for _ in range(4000)]
    )
    expected = sigma * c / batch_size
    assert np.std(draws) == pytest.approx(expected, rel=0.02)


def test_rdp_cost_per_step():
    assert rdp_cost_per_step(1.0, 2.0) == 1.0
    assert rdp_cost_per_step(0.8, 3.0) == pytest.approx(3 / (2 * 0.64))
    with pytest.raises(ValueError, match="infinite"):
        rdp_cost_per_step(0.0, 2.0)
    with pytest.raises(ValueError, match="alpha"):
        rdp_cost_per_step(1.0, 1.0)


def test_rdp_to_dp_known_values():
    # R=1, alpha=2, delta=1e-5: 1 + ln(1/2) - (ln(1e-5) + ln 2)/1
    assert rdp_to_dp(1.0, 2.0, 1e-5) == pytest.approx(11.126631, abs=1e-6)
    assert rdp_to_dp(1.0, 10.0, 1e-5) == pytest.approx(1.918011, abs=1e-6)


def test_rdp_to_dp_validation():
    with pytest.raises(ValueError):
        rdp_to_dp(1.0, 1.0, 1e-5)
    with pytest.raises(ValueError):
        rdp_to_dp(1.0, 2.0, 0.0)
    with pytest.raises(ValueError):
        rdp_to_dp(-0.5, 2.0, 1e-5)


def test_default_alpha_grid():
    assert DEFAULT_ALPHA_GRID[0] == 1.5
    assert DEFAULT_ALPHA_GRID[1:] == tuple(float(a) for a in range(2, 65))


def test_epsilon_spent_zero_steps_is_conversion_floor():
    ledger = PrivacyLedger(config=DpConfig())
    eps, alpha = epsilon_spent(ledger)
    # with no accumulated cost the best alpha is the largest on the grid
    assert alpha == 64.0
    assert eps == pytest.approx(rdp_to_dp(0.0, 64.0, 1e-5))


def test_epsilon_monotone_in_steps():
    cfg = DpConfig(noise_multiplier=0.8)
    values = []
    for steps in range(0, 40, 3):
        values.append(
            epsilon_spent(PrivacyLedger(config=cfg, steps_taken=steps))[0]
        )
    assert all(b > a for a, b in zip(values, values[1:]))


def test_epsilon_decreases_when_sigma_doubles():
    for steps in (1, 10, 100):
        lo = epsilon_spent(
            PrivacyLedger(config=DpConfig(noise_multiplier=0.8), steps_taken=steps)
        )[0]
        hi = epsilon_spent(
            PrivacyLedger(config=DpConfig(noise_multiplier=1.6), steps_taken=steps)
        )[0]
        assert hi < lo


def test_epsilon_tie_goes_to_smaller_alpha():
    cfg = DpConfig(noise_multiplier=0.8)
    ledger = PrivacyLedger(config=cfg, steps_taken=5, alpha_grid=(2.0, 2.0, 3.0))
    eps, alpha = epsilon_spent(ledger)
    assert alpha in (2.0, 3.0)
    two = rdp_to_dp(5 * rdp_cost_per_step(0.8, 2.0), 2.0, cfg.delta)
    three = rdp_to_dp(5 * rdp_cost_per_step(0.8, 3.0), 3.0, cfg.delta)
    assert eps == min(two, three)
    if two == three:
        assert alpha == 2.0


def test_ledger_record_steps():
    ledger = PrivacyLedger(config=DpConfig())
    ledger.record_steps(3)
    ledger.record_steps(0)
    assert ledger.steps_taken == 3
    with pytest.raises(ValueError):
        ledger.record_steps(-1)


def test_steps_for_budget_round_trip():
    cfg = DpConfig(noise_multiplier=0.8)
    for target in (2.0, 10.0, 57.3):
        steps = steps_for_budget(cfg, target)
        at = epsilon_spent(PrivacyLedger(config=cfg, steps_taken=steps))[0]
        over = epsilon_spent(PrivacyLedger(config=cfg, steps_taken=steps + 1))[0]
        assert at <= target < over


def test_steps_for_budget_unreachable_target():
    cfg = DpConfig(noise_multiplier=0.8)
    floor = epsilon_spent(PrivacyLedger(config=cfg))[0]
    with pytest.raises(ValueError, match="floor"):
        steps_for_budget(cfg, floor / 2)


def test_dp_config_validation_messages():
    with pytest.raises(ValueError, match="clip_threshold must be > 0"):
        DpConfig(clip_threshold=-1)
    with pytest.raises(ValueError, match="noise_multiplier must be >= 0"):
        DpConfig(noise_multiplier=-0.1)
    with pytest.raises(ValueError, match=r"sampling_rate must be in \(0, 1\]"):
        DpConfig(sampling_rate=1.5)
    with pytest.raises(ValueError, match=r"delta must be in \(0, 1\)"):
        DpConfig(delta=0)
    with pytest.raises(ValueError, match="sampling_mode"):
        DpConfig(sampling_mode="uniform")
