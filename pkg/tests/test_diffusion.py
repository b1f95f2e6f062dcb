import math

import numpy as np
import pytest

from stdiffusion.diffusion import (
    DiffusionSchedule,
    make_schedule,
    p_sample_step,
    q_sample,
    q_step,
    reverse_chain,
    round_to_location,
    snapshot_steps,
    vlb_terms,
)


def test_single_and_two_step_schedules():
    assert make_schedule(1, 0.5, 0.5).abar(1) == pytest.approx(0.5)
    assert make_schedule(2, 0.1, 0.2).abar(2) == pytest.approx(0.72)


def test_default_schedule_terminal_alpha_bar():
    sch = make_schedule(200, 1e-4, 0.02)
    # direct product, independent of the cumprod in the schedule
    prod = 1.0
    for k in range(200):
        prod *= 1 - (1e-4 + (0.02 - 1e-4) * k / 199)
    assert sch.abar(200) == pytest.approx(prod, rel=1e-12)
    # the linear schedule over 200 steps only reaches about 0.132
    assert prod == pytest.approx(0.13218275425, rel=1e-9)
    assert np.all(np.diff(sch.alpha_bar) < 0)
    assert np.all((sch.beta > 0) & (sch.beta < 1))


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_bounds(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_q_sample_edges():
    sch = make_schedule(50)
    x0 = np.array([[1.5, -2.0]])
    np.testing.assert_allclose(q_sample(x0, 10, np.zeros_like(x0), sch), math.sqrt(sch.abar(10)) * x0)
    eps = np.array([[0.3, 0.7]])
    np.testing.assert_allclose(q_sample(np.zeros_like(x0), 10, eps, sch), math.sqrt(1 - sch.abar(10)) * eps)


def test_q_sample_variance():
    sch = make_schedule(200)
    rng = np.random.default_rng(0)
    for k in (1, 50, 200):
        x = q_sample(np.full(10_000, 2.0), k, rng.standard_normal(10_000), sch)
        var, n = 1 - sch.abar(k), 10_000
        assert abs(x.mean() - 2 * math.sqrt(sch.abar(k))) < 3 * math.sqrt(var / n)
        assert abs(x.var(ddof=1) - var) < 3 * var * math.sqrt(2 / (n - 1))


def test_one_step_inversion_with_true_noise():
    sch = make_schedule(1, 0.3, 0.3)
    x0 = np.array([[0.7, -1.1]])
    eps = np.array([[0.4, 2.0]])
    x1 = q_sample(x0, 1, eps, sch)
    np.testing.assert_allclose(p_sample_step(x1, eps, np.zeros_like(x1), 1, sch), x0, atol=1e-14)


def test_last_step_refuses_noise():
    sch = make_schedule(5)
    with pytest.raises(ValueError):
        p_sample_step(np.ones(2), np.zeros(2), np.ones(2), 1, sch)
    with pytest.raises(ValueError):
        p_sample_step(np.ones(2), np.zeros(2), np.zeros(2), 0, sch)


def test_tiny_beta_barely_moves():
    sch = DiffusionSchedule(np.array([1e-12, 1e-12]))
    x = np.array([0.5, -0.2])
    np.testing.assert_allclose(p_sample_step(x, np.ones(2), np.zeros(2), 2, sch), x, atol=1e-5)


def oracle_eps_fn(x0_s, x0_t, sch):
    """Exact noise for a point-mass data distribution at (x0_s, x0_t)."""

    def fn(s, t, k):
        ab = sch.abar(k)
        return (s - math.sqrt(ab) * x0_s) / math.sqrt(1 - ab), (t - math.sqrt(ab) * x0_t) / math.sqrt(1 - ab)

    return fn


def test_reverse_chain_concentrates_on_point_mass():
    sch = make_schedule(100)
    rng = np.random.default_rng(1)
    target_s, target_t = np.array([1.0, -2.0]), np.array([0.5])
    s0, t0, snaps = reverse_chain(oracle_eps_fn(target_s, target_t, sch), 2000, 2, sch, rng, [100, 0])
    assert s0.std(axis=0).max() < snaps[100][0].std(axis=0).min()
    np.testing.assert_allclose(s0.mean(axis=0), target_s, atol=1e-6)
    np.testing.assert_allclose(t0.mean(), 0.5, atol=1e-6)


def test_snapshot_steps():
    assert snapshot_steps(200) == [200, 150, 100, 50, 1, 0]
    assert snapshot_steps(2) == [2, 1, 0]


def test_forward_iterated_chain_matches_closed_form():
    sch = make_schedule(200)
    rng = np.random.default_rng(2)
    n = 10_000
    x0 = rng.uniform(-1, 1, n)
    for k in (1, 50, 200):
        x = x0.copy()
        for j in range(1, k + 1):
            x = q_step(x, j, rng.standard_normal(n), sch)
        y = q_sample(x0, k, rng.standard_normal(n), sch)
        diff = x - math.sqrt(sch.abar(k)) * x0
        diff_y = y - math.sqrt(sch.abar(k)) * x0
        var = 1 - sch.abar(k)
        assert abs(diff.mean() - diff_y.mean()) < 3 * math.sqrt(2 * var / n)
        assert abs(diff.var() - diff_y.var()) < 3 * var * math.sqrt(4 / n)


def test_oracle_denoiser_has_no_mean_mismatch():
    sch = make_schedule(200)
    rng = np.random.default_rng(3)
    x0_s, x0_t = np.array([[0.3, -0.8]]), np.array([[1.2]])
    parts = vlb_terms(x0_s, x0_t, oracle_eps_fn(x0_s[0], x0_t[0], sch), sch, rng)
    # only the fixed-variance mismatch remains in each KL term
    var_only = sum(
        0.5 * (math.log(sch.b(k) / sch.posterior_var(k)) + sch.posterior_var(k) / sch.b(k) - 1)
        for k in range(2, 201)
    )
    np.testing.assert_allclose(parts["kl_s"], var_only, rtol=1e-9)
    np.testing.assert_allclose(parts["kl_t"], var_only, rtol=1e-9)
    # perfect reconstruction: -log N(x0; x0, beta_1)
    np.testing.assert_allclose(parts["recon_t"], 0.5 * (math.log(2 * math.pi) + math.log(sch.b(1))), rtol=1e-9)


def test_rounding():
    table = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0], [5.0, 5.0]])
    assert round_to_location(table[2], table)[0] == 2
    assert round_to_location([2.0, 0.0], table)[0] == 1  # equidistant from ids 1 and 2
    rng = np.random.default_rng(4)
    emb = rng.normal(scale=5.0, size=(5, 8))
    np.testing.assert_array_equal(round_to_location(emb + rng.normal(scale=0.01, size=emb.shape), emb), np.arange(5))
