"""Tests for divergence estimators, Gaussian references, and error sweeps."""

import math
from types import SimpleNamespace

import numpy as np
import pytest

from girsanovlab.affine import (
    quadratic_path_kl,
    scheme_marginal_gaussian,
    step_maps_for_schedule,
)
from girsanovlab.divergences import (
    diffusion_marginal_ld,
    diffusion_marginal_uld,
    estimate_kl,
    estimate_renyi,
    fit_loglog_slope,
    gaussian_kl,
    local_error_sweep,
    pinsker_tv_bound,
    stationary_moments,
)
from girsanovlab.engine import run_weights
from girsanovlab.integrators import simulate_mlmc
from girsanovlab.paths import OverdampedSchedule, TimeGrid, noise_matrix
from girsanovlab.potentials import AnisotropicQuadratic, IsotropicQuadratic


# ---------------------------------------------------------------------------
# Sample-based estimators
# ---------------------------------------------------------------------------


def test_estimate_kl_zero_weights():
    est = estimate_kl(np.zeros(100))
    assert est.value == 0.0
    assert est.se == 0.0
    assert est.n_used == 100
    assert est.n_rejected == 0
    assert est.reliable


def test_estimate_kl_excludes_rejected_paths():
    logw = np.zeros(100)
    logw[:2] = np.nan
    est = estimate_kl(logw)
    assert est.n_used == 98
    assert est.n_rejected == 2
    assert not est.reliable  # 2% rejected exceeds the 1% reliability limit

    big = np.zeros(1000)
    big[:5] = -np.inf
    est = estimate_kl(big)
    assert est.n_rejected == 5
    assert est.reliable  # 0.5% is within the limit


def test_estimate_kl_accepts_weight_objects():
    obj = SimpleNamespace(
        log_weight=np.array([-0.1, -0.2, -0.3, 99.0]),
        invertible=np.array([True, True, True, False]),
    )
    est = estimate_kl(obj)
    assert est.n_used == 3
    assert est.n_rejected == 1
    assert est.value == pytest.approx(0.2)


def _martingale_log_weights(a, n, seed):
    # log M = a z - a^2/2 with z standard normal: E[M] = 1, KL = a^2/2,
    # and the Renyi order-q divergence is q a^2/2
    z = noise_matrix(seed, n, 1, 1)[:, 0, 0]
    return a * z - a**2 / 2.0


def test_renyi_rejects_low_orders():
    w = np.zeros(10)
    with pytest.raises(ValueError):
        estimate_renyi(w, 1.0)
    with pytest.raises(ValueError):
        estimate_renyi(w, 0.5)


def test_renyi_continuity_and_monotonicity():
    a, n = 0.1, 20000
    logw = _martingale_log_weights(a, n, seed=31)
    kl = estimate_kl(logw)
    near_one = estimate_renyi(logw, 1.01)
    # q -> 1 recovers the KL value up to the O(q-1) systematic gap
    assert abs(near_one.value - kl.value) <= 4.0 * (kl.se + near_one.se) + 1e-4

    r2 = estimate_renyi(logw, 2.0)
    r3 = estimate_renyi(logw, 3.0)
    assert r2.value == pytest.approx(2.0 * a**2 / 2.0, abs=4.0 * r2.se)
    assert r2.value <= r3.value + 3.0 * (r2.se + r3.se)
    assert r2.kind == "renyi-2"


# ---------------------------------------------------------------------------
# Gaussian references
# ---------------------------------------------------------------------------


def test_gaussian_kl_identical_is_zero():
    cov = np.array([[2.0, 0.3], [0.3, 1.0]])
    assert gaussian_kl(np.zeros(2), cov, np.zeros(2), cov) == pytest.approx(0.0, abs=1e-14)


def test_gaussian_kl_unit_shift_oracle():
    # KL(N(0,1) || N(1,1)) = 1/2
    assert gaussian_kl([0.0], [[1.0]], [1.0], [[1.0]]) == pytest.approx(0.5, rel=1e-14)


def test_gaussian_kl_rotation_invariance():
    rng = np.random.default_rng(17)
    A = rng.normal(size=(3, 3))
    cov0 = A @ A.T + 3.0 * np.eye(3)
    B = rng.normal(size=(3, 3))
    cov1 = B @ B.T + 3.0 * np.eye(3)
    m0, m1 = rng.normal(size=3), rng.normal(size=3)
    theta = 0.7
    Q = np.array(
        [
            [math.cos(theta), -math.sin(theta), 0.0],
            [math.sin(theta), math.cos(theta), 0.0],
            [0.0, 0.0, 1.0],
        ]
    )
    base = gaussian_kl(m0, cov0, m1, cov1)
    rotated = gaussian_kl(Q @ m0, Q @ cov0 @ Q.T, Q @ m1, Q @ cov1 @ Q.T)
    assert rotated == pytest.approx(base, rel=1e-12)


def test_gaussian_kl_rejects_indefinite_covariance():
    with pytest.raises(ValueError):
        gaussian_kl([0.0], [[-1.0]], [0.0], [[1.0]])


def test_pinsker_bound_values():
    assert pinsker_tv_bound(0.0) == 0.0
    assert pinsker_tv_bound(0.02) == pytest.approx(0.1, rel=1e-14)
    assert pinsker_tv_bound(2.0) == 1.0  # saturates at total variation 1
    with pytest.raises(ValueError):
        pinsker_tv_bound(-0.1)


def test_stationary_moments_quadratic():
    pot = AnisotropicQuadratic((0.5, 2.0))
    mean, cov = stationary_moments(pot)
    np.testing.assert_array_equal(mean, 0.0)
    np.testing.assert_allclose(cov, np.diag([2.0, 0.5]), atol=1e-14)

    mean_k, cov_k = stationary_moments(pot, kinetic=True)
    assert mean_k.shape == (4,)
    np.testing.assert_allclose(cov_k[:2, :2], np.diag([2.0, 0.5]), atol=1e-14)
    np.testing.assert_allclose(cov_k[2:, 2:], np.eye(2), atol=1e-14)

    with pytest.raises(ValueError):
        stationary_moments(IsotropicQuadratic(2, scale=0.0))


def test_diffusion_marginal_overdamped_closed_form():
    pot = IsotropicQuadratic(1)
    T = 0.7
    mean, cov = diffusion_marginal_ld(pot, T, np.array([2.0]), np.array([[0.0]]))
    assert mean[0] == pytest.approx(2.0 * math.exp(-T), rel=1e-13)
    assert cov[0, 0] == pytest.approx(1.0 - math.exp(-2.0 * T), rel=1e-13)

    # stationarity: N(0, H^{-1}) is a fixed point
    m0, c0 = stationary_moments(pot)
    mean, cov = diffusion_marginal_ld(pot, T, m0, c0)
    np.testing.assert_allclose(mean, 0.0, atol=1e-14)
    np.testing.assert_allclose(cov, c0, atol=1e-12)


def test_diffusion_marginal_kinetic_preserves_stationary_law():
    pot = AnisotropicQuadratic((0.8, 1.7))
    m0, c0 = stationary_moments(pot, kinetic=True)
    mean, cov = diffusion_marginal_uld(pot, 0.9, 1.1, m0, c0)
    np.testing.assert_allclose(mean, 0.0, atol=1e-12)
    np.testing.assert_allclose(cov, c0, atol=1e-10)


# ---------------------------------------------------------------------------
# Log-log slope fitting
# ---------------------------------------------------------------------------


def test_fit_loglog_slope_exact_power_law():
    x = np.array([0.5, 0.25, 0.125, 0.0625])
    y = 3.0 * x**2.5
    fit = fit_loglog_slope(x, y)
    assert fit.slope == pytest.approx(2.5, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(3.0), abs=1e-10)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
    assert fit.ci95 == pytest.approx(0.0, abs=1e-9)
    assert fit.n_points == 4


def test_fit_loglog_slope_input_validation():
    with pytest.raises(ValueError):
        fit_loglog_slope(np.array([1.0, 2.0, 3.0]), np.array([1.0, -1.0, 2.0]))
    with pytest.raises(ValueError):
        fit_loglog_slope(np.array([1.0, 2.0]), np.array([1.0, 2.0]))


# ---------------------------------------------------------------------------
# Affine scheme marginals
# ---------------------------------------------------------------------------


def test_scheme_marginal_free_dynamics_accumulates_variance():
    # with no drift every step adds 2h to the covariance and keeps the mean
    pot = IsotropicQuadratic(1, scale=0.0)
    grid = TimeGrid(1.0, 4, 2)
    mean, cov = scheme_marginal_gaussian("em-ld", pot, grid, np.array([1.0]), np.array([[0.5]]))
    assert mean[0] == pytest.approx(1.0, rel=1e-14)
    assert cov[0, 0] == pytest.approx(0.5 + 2.0, rel=1e-14)


def test_scheme_marginal_matches_empirical_moments():
    pot = IsotropicQuadratic(1)
    grid = TimeGrid(0.5, 4, 2)
    sched = OverdampedSchedule.deterministic(grid, fraction=0.5)
    n = 20480
    xi = noise_matrix(23, n, grid.n_cells, 1)
    traj = simulate_mlmc(pot, sched, np.ones((n, 1)), xi)
    end = traj.x[:, -1, 0]
    mean, cov = scheme_marginal_gaussian("mlmc", pot, sched, np.array([1.0]), np.array([[0.0]]))
    se_mean = end.std(ddof=1) / math.sqrt(n)
    assert end.mean() == pytest.approx(mean[0], abs=4.0 * se_mean)
    se_var = end.var(ddof=1) * math.sqrt(2.0 / (n - 1))
    assert end.var(ddof=1) == pytest.approx(cov[0, 0], abs=4.0 * se_var)


def test_kinetic_baseline_step_map_is_stable():
    pot = IsotropicQuadratic(1)
    grid = TimeGrid(0.25, 1, 4)
    (sm,) = step_maps_for_schedule("ulmc", pot, grid, gamma=1.0)
    assert sm.state_dim == 2
    assert np.max(np.abs(np.linalg.eigvals(sm.A))) < 1.0


def test_path_kl_dominates_marginal_kl_and_matches_sampling():
    # deterministic path KL >= marginal KL (data processing), and the
    # sampled estimate agrees with the deterministic value
    pot = IsotropicQuadratic(1)
    grid = TimeGrid(0.5, 4, 2)
    mean0, cov0 = stationary_moments(pot)
    maps = step_maps_for_schedule("em-ld", pot, grid)
    path_kl = quadratic_path_kl(maps, mean0, cov0)
    mean_s, cov_s = scheme_marginal_gaussian("em-ld", pot, grid, mean0, cov0)
    mean_d, cov_d = diffusion_marginal_ld(pot, grid.T, mean0, cov0)
    marginal = gaussian_kl(mean_s, cov_s, mean_d, cov_d)
    assert marginal <= path_kl + 1e-12

    run = run_weights("em-ld", pot, grid=grid, n_paths=8192, seed=3)
    est = estimate_kl(run)
    assert est.reliable
    assert abs(est.value - path_kl) <= 4.0 * est.se


# ---------------------------------------------------------------------------
# One-step local error sweep
# ---------------------------------------------------------------------------


def test_local_error_sweep_exact_for_free_dynamics():
    # with no drift the Euler step IS the diffusion step under the coupling
    pot = IsotropicQuadratic(1, scale=0.0)
    grids = [TimeGrid(h, 1, 4) for h in (0.25, 0.125)]
    report = local_error_sweep(
        "em-ld",
        pot,
        grids,
        n_paths=256,
        seed=5,
        init=(np.zeros(1), np.eye(1)),
    )
    np.testing.assert_array_equal(report.strong_x, 0.0)
    np.testing.assert_array_equal(report.strong_p, 0.0)
    assert "strong_x" not in report.slopes


def test_local_error_sweep_rejects_multistep_grids():
    pot = IsotropicQuadratic(1)
    with pytest.raises(ValueError):
        local_error_sweep("mlmc", pot, [TimeGrid(0.2, 2, 4)], n_paths=16, seed=0)
    with pytest.raises(ValueError):
        local_error_sweep("dmulmc", pot, [TimeGrid(0.2, 1, 4)], n_paths=16, seed=0)
