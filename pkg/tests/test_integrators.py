"""Integrator and kernel tests against hand-computed and quadrature oracles."""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from girsanovlab.integrators import (
    StepSizeError,
    TrajectoryBlowupError,
    UnsupportedPotentialError,
    exact_ou_flow_ld,
    exact_ou_flow_uld,
    ou_cell_ld,
    ou_cell_uld,
    simulate_dmulmc,
    simulate_dmulmc_marginal,
    simulate_elementary_ld,
    simulate_mlmc,
    simulate_ulmc,
)
from girsanovlab.kernels import (
    SigmaCoefficients,
    discrete_sigma_coefficients,
    exp_integrals,
    sigma_coefficients,
)
from girsanovlab.paths import (
    OverdampedSchedule,
    TimeGrid,
    UnderdampedSchedule,
    brownian_partial_sums,
    noise_matrix,
)
from girsanovlab.potentials import (
    AnisotropicQuadratic,
    IsotropicQuadratic,
    PerturbedQuadratic,
)


# ---------------------------------------------------------------------------
# Damping kernels
# ---------------------------------------------------------------------------


def test_exp_integrals_collapse_at_equal_times():
    e1v, e2v, e3v = exp_integrals(3.7, 0.4, 0.4)
    assert e1v == 1.0
    assert e2v == 0.0
    assert e3v == 0.0


def test_exp_integrals_closed_forms():
    # gamma=2, t-s=0.5 so gamma*(t-s)=1
    e1v, e2v, e3v = exp_integrals(2.0, 0.25, 0.75)
    assert e1v == pytest.approx(math.exp(-1.0), rel=1e-14)
    assert e2v == pytest.approx((1.0 - math.exp(-1.0)) / 2.0, rel=1e-14)
    assert e3v == pytest.approx((0.5 + (math.exp(-1.0) - 1.0) / 2.0) / 2.0, rel=1e-14)


def test_exp_integrals_small_friction_limits():
    # the exact Taylor remainder is gamma*dt^2/2, so dt=0.1 keeps it below 1e-10
    dt = 0.1
    _, e2v, e3v = exp_integrals(1e-8, 0.0, dt)
    assert abs(e2v - dt) <= 1e-10
    assert abs(e3v - dt**2 / 2.0) <= 1e-10


def test_exp_integrals_reject_reversed_times():
    with pytest.raises(ValueError):
        exp_integrals(1.0, 0.5, 0.4)
    with pytest.raises(ValueError):
        exp_integrals(-1.0, 0.0, 0.5)


def test_sigma_coefficients_small_friction_polynomials():
    # gamma -> 0 limits; the exact deviation is O(gamma*h), so gamma=1e-9
    # puts every coefficient within 1e-8 of its polynomial limit
    h = 1.0
    sig = sigma_coefficients(1e-9, h)
    assert abs(sig.s11 - h) <= 1e-8
    assert abs(sig.s12 - h**2 / 2.0) <= 1e-8
    assert abs(sig.s22 - h**3 / 3.0) <= 1e-8
    assert abs(sig.delta - h**4 / 12.0) <= 1e-8


def test_sigma_coefficients_cancellation_free_at_tiny_friction():
    # first-order series sigma11 = h(1-w), sigma12 = h^2(1-w)/2,
    # sigma22 = h^3(1/3 - w/4); remainders are O(w^2) = 1e-12, so agreement
    # to 1e-11 shows the evaluation loses no precision to cancellation
    w = 1e-6
    sig = sigma_coefficients(w, 1.0)
    assert abs(sig.s11 - (1.0 - w)) <= 1e-11
    assert abs(sig.s12 - 0.5 * (1.0 - w)) <= 1e-11
    assert abs(sig.s22 - (1.0 / 3.0 - w / 4.0)) <= 1e-11


def test_sigma_coefficients_match_quadrature():
    gamma, h = 1.0, 0.1

    def E1(t):
        return math.exp(-gamma * (h - t))

    def E2(t):
        return (1.0 - math.exp(-gamma * (h - t))) / gamma

    s11 = quad(lambda t: E1(t) ** 2, 0.0, h, epsabs=1e-14)[0]
    s12 = quad(lambda t: E1(t) * E2(t), 0.0, h, epsabs=1e-14)[0]
    s22 = quad(lambda t: E2(t) ** 2, 0.0, h, epsabs=1e-14)[0]
    sig = sigma_coefficients(gamma, h)
    assert sig.s11 == pytest.approx(s11, abs=1e-12)
    assert sig.s12 == pytest.approx(s12, abs=1e-12)
    assert sig.s22 == pytest.approx(s22, abs=1e-12)


def test_sigma_coefficients_positive_definite_across_scales():
    for gamma in (0.0, 1e-9, 0.01, 1.0, 25.0):
        for h in (1e-4, 0.1, 1.0, 3.0):
            sig = sigma_coefficients(gamma, h)
            assert sig.s11 > 0 and sig.s22 > 0
            assert sig.delta > 0  # strict Cauchy-Schwarz

    # the 2x2 solve inverts the Gram system
    sig = sigma_coefficients(0.8, 0.4)
    b1, b2 = np.array([1.3]), np.array([-0.7])
    x1, x2 = sig.solve(b1, b2)
    assert sig.s11 * x1 + sig.s12 * x2 == pytest.approx(b1[0], rel=1e-12)
    assert sig.s12 * x1 + sig.s22 * x2 == pytest.approx(b2[0], rel=1e-12)


def test_discrete_sigma_converges_to_analytic():
    gamma, h = 1.3, 0.5
    exact = sigma_coefficients(gamma, h)
    errs = []
    for m in (8, 16, 32):
        hat = discrete_sigma_coefficients(gamma, h, m)
        errs.append(abs(hat.s22 - exact.s22))
    assert errs[0] > errs[1] > errs[2]
    assert isinstance(discrete_sigma_coefficients(gamma, h, 8), SigmaCoefficients)


# ---------------------------------------------------------------------------
# Overdamped integrators
# ---------------------------------------------------------------------------


def test_em_single_step_hand_value():
    # one Euler step of dX = -X dt: 1 - 0.1*1 = 0.9
    pot = IsotropicQuadratic(1)
    grid = TimeGrid(0.1, 1, 1)
    nodes = simulate_elementary_ld(pot, grid, np.array([1.0]), np.zeros((1, 1, 1)))
    assert nodes[0, 1, 0] == pytest.approx(0.9, rel=1e-15)


def test_em_free_potential_is_shifted_brownian():
    pot = IsotropicQuadratic(2, scale=0.0)
    grid = TimeGrid(1.0, 2, 4)
    xi = noise_matrix(3, 3, grid.n_cells, 2)
    x0 = np.array([[1.0, -2.0], [0.0, 0.5], [3.0, 3.0]])
    nodes = simulate_elementary_ld(pot, grid, x0, xi)
    expect = x0[:, None, :] + np.sqrt(2.0) * brownian_partial_sums(xi, grid.eta)
    np.testing.assert_allclose(nodes, expect, rtol=1e-13, atol=1e-14)


def test_midpoint_overdamped_hand_values():
    # h=0.2, tau=0.1, x0=1, no noise, V = x^2/2:
    #   X+ = 1 - 0.1*1 = 0.9; node at 0.1: 1 - 0.1*0.9 = 0.91; endpoint 0.82
    pot = IsotropicQuadratic(1)
    grid = TimeGrid(0.2, 1, 2)
    sched = OverdampedSchedule.deterministic(grid, fraction=0.5)
    assert sched.taus[0] == pytest.approx(0.1)
    traj = simulate_mlmc(pot, sched, np.array([1.0]), np.zeros((1, 2, 1)))
    assert traj.x_plus[0, 0, 0] == pytest.approx(0.9, rel=1e-15)
    assert traj.x[0, 1, 0] == pytest.approx(0.91, rel=1e-15)
    assert traj.x[0, 2, 0] == pytest.approx(0.82, rel=1e-15)


def test_midpoint_at_zero_offset_matches_euler():
    # with m=1 and tau=0 the midpoint update IS one Euler step per step
    pot = PerturbedQuadratic((1.0,), amplitude=0.2, frequency=1.0)
    grid = TimeGrid(0.5, 5, 1)
    sched = OverdampedSchedule.deterministic(grid, fraction=0.0)
    np.testing.assert_array_equal(sched.indices, 0)
    xi = noise_matrix(11, 2, grid.n_cells, 1)
    x0 = np.array([[0.3], [-1.1]])
    traj = simulate_mlmc(pot, sched, x0, xi)
    nodes = simulate_elementary_ld(pot, grid, x0, xi)
    np.testing.assert_allclose(traj.x, nodes, rtol=1e-14, atol=1e-15)


def test_midpoint_overdamped_affine_superposition():
    # for quadratic V the scheme map is affine in (x0, xi) jointly
    pot = AnisotropicQuadratic((0.5, 1.5))
    grid = TimeGrid(0.4, 2, 4)
    sched = OverdampedSchedule.deterministic(grid, fraction=0.5)
    rng = np.random.default_rng(7)
    x0 = np.zeros((4, 2))
    xi = np.zeros((4, grid.n_cells, 2))
    x0[0], x0[1] = rng.normal(size=2), rng.normal(size=2)
    xi[0], xi[1] = rng.normal(size=xi[0].shape), rng.normal(size=xi[0].shape)
    x0[3] = x0[0] + x0[1]
    xi[3] = xi[0] + xi[1]
    out = simulate_mlmc(pot, sched, x0, xi).x
    np.testing.assert_allclose(out[0] + out[1] - out[2], out[3], rtol=1e-12, atol=1e-12)


def test_gradient_query_counters():
    rng = np.random.default_rng(0)
    pot = IsotropicQuadratic(2)
    grid = TimeGrid(0.5, 4, 2)
    xi = rng.normal(size=(1, grid.n_cells, 2))
    x0 = np.zeros((1, 2))
    over = OverdampedSchedule.deterministic(grid, fraction=0.5)
    assert simulate_mlmc(pot, over, x0, xi).grad_queries == 2 * grid.N
    assert simulate_ulmc(pot, grid, 1.0, x0, x0, xi).grad_queries == grid.N
    under = UnderdampedSchedule.deterministic(grid)
    assert simulate_dmulmc(pot, under, 1.0, x0, x0, xi).grad_queries == 3 * grid.N


def test_blowup_error_names_the_step():
    # undamped Euler at eta >> 1/beta doubles each cell and overflows
    pot = IsotropicQuadratic(1)
    grid = TimeGrid(4e9, 40, 1)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrajectoryBlowupError, match=r"step \d+"):
            simulate_elementary_ld(pot, grid, np.array([1.0]), np.zeros((1, 40, 1)))


# ---------------------------------------------------------------------------
# Kinetic integrators
# ---------------------------------------------------------------------------


def _e2_closed(gamma, t):
    return (1.0 - math.exp(-gamma * t)) / gamma


def _e3_closed(gamma, t):
    return (t + (math.exp(-gamma * t) - 1.0) / gamma) / gamma


def test_frozen_gradient_kinetic_hand_values():
    # gamma=1, h=0.1, x0=1, p0=0, no noise, V = x^2/2
    pot = IsotropicQuadratic(1)
    grid = TimeGrid(0.1, 1, 4)
    traj = simulate_ulmc(pot, grid, 1.0, np.array([1.0]), np.array([0.0]), np.zeros((1, 4, 1)))
    for n in range(grid.m + 1):
        t = n * grid.eta
        assert traj.p[0, n, 0] == pytest.approx(-_e2_closed(1.0, t), abs=1e-14)
        assert traj.x[0, n, 0] == pytest.approx(1.0 - _e3_closed(1.0, t), abs=1e-14)


def test_frozen_gradient_free_potential_decay():
    # zero forcing: momentum decays exponentially, position integrates it
    pot = IsotropicQuadratic(1, scale=0.0)
    gamma = 0.7
    grid = TimeGrid(0.5, 1, 5)
    traj = simulate_ulmc(pot, grid, gamma, np.array([2.0]), np.array([1.5]), np.zeros((1, 5, 1)))
    for n in range(grid.m + 1):
        t = n * grid.eta
        assert traj.p[0, n, 0] == pytest.approx(1.5 * math.exp(-gamma * t), rel=1e-13)
        assert traj.x[0, n, 0] == pytest.approx(2.0 + 1.5 * _e2_closed(gamma, t), rel=1e-13)


def test_double_midpoint_marginal_hand_values():
    # gamma=1, h=0.3, tau-=0.1, tau+=0.15 (thirds/halves on m=6), no noise
    pot = IsotropicQuadratic(1)
    grid = TimeGrid(0.3, 1, 6)
    sched = UnderdampedSchedule.deterministic(grid)
    assert sched.taus_minus[0] == pytest.approx(0.1)
    assert sched.taus_plus[0] == pytest.approx(0.15)
    xs, ps = simulate_dmulmc_marginal(
        pot, sched, 1.0, np.array([1.0]), np.array([0.0]), np.zeros((1, 6, 1))
    )
    x_minus = 1.0 - _e3_closed(1.0, 0.1)
    x_plus = 1.0 - _e3_closed(1.0, 0.15)
    assert xs[0, 1, 0] == pytest.approx(1.0 - _e3_closed(1.0, 0.3) * x_minus, rel=1e-13)
    assert ps[0, 1, 0] == pytest.approx(-_e2_closed(1.0, 0.3) * x_plus, rel=1e-13)


def test_double_midpoint_interpolation_hits_marginal_endpoints():
    rng = np.random.default_rng(3)
    pot = AnisotropicQuadratic((0.6, 1.4))
    grid = TimeGrid(0.6, 3, 8)
    sched = UnderdampedSchedule.randomized(grid, seed=4, stream=0)
    x0 = rng.normal(size=(5, 2))
    p0 = rng.normal(size=(5, 2))
    xi = noise_matrix(8, 5, grid.n_cells, 2)
    traj = simulate_dmulmc(pot, sched, 1.2, x0, p0, xi)
    xs, ps = simulate_dmulmc_marginal(pot, sched, 1.2, x0, p0, xi)
    for k in range(grid.N + 1):
        np.testing.assert_allclose(traj.x[:, k * grid.m], xs[:, k], atol=1e-10)
        np.testing.assert_allclose(traj.p[:, k * grid.m], ps[:, k], atol=1e-10)


def test_double_midpoint_affine_superposition():
    pot = AnisotropicQuadratic((0.5, 1.5))
    grid = TimeGrid(0.4, 2, 4)
    sched = UnderdampedSchedule.deterministic(grid)
    rng = np.random.default_rng(9)
    x0 = np.zeros((4, 2))
    p0 = np.zeros((4, 2))
    xi = np.zeros((4, grid.n_cells, 2))
    for arr in (x0, p0, xi):
        arr[0] = rng.normal(size=arr[0].shape)
        arr[1] = rng.normal(size=arr[0].shape)
        arr[3] = arr[0] + arr[1]
    traj = simulate_dmulmc(pot, sched, 1.0, x0, p0, xi)
    for out in (traj.x, traj.p):
        np.testing.assert_allclose(out[0] + out[1] - out[2], out[3], atol=5e-10)


def test_double_midpoint_rejects_oversized_steps():
    pot = IsotropicQuadratic(1)
    grid = TimeGrid(10.0, 1, 4)
    sched = UnderdampedSchedule.deterministic(grid)
    with pytest.raises(StepSizeError):
        simulate_dmulmc(pot, sched, 1.0, np.array([1.0]), np.array([0.0]), np.zeros((1, 4, 1)))


def test_kinetic_rejects_nonpositive_friction():
    pot = IsotropicQuadratic(1)
    grid = TimeGrid(0.1, 1, 2)
    z = np.array([1.0])
    with pytest.raises(ValueError):
        simulate_ulmc(pot, grid, 0.0, z, z, np.zeros((1, 2, 1)))
    with pytest.raises(ValueError):
        simulate_dmulmc(
            pot, UnderdampedSchedule.deterministic(grid), -1.0, z, z, np.zeros((1, 2, 1))
        )


# ---------------------------------------------------------------------------
# Exact Ornstein-Uhlenbeck reference flows
# ---------------------------------------------------------------------------


def test_exact_overdamped_flow_mean_decay():
    # no noise, no residual: pure exponential contraction e^{-t}
    pot = IsotropicQuadratic(1)
    eta = 0.05
    n = 10
    nodes = exact_ou_flow_ld(pot, np.array([2.0]), np.zeros((1, n, 1)), eta, np.zeros((1, n, 1)))
    for i in range(n + 1):
        assert nodes[0, i, 0] == pytest.approx(2.0 * math.exp(-i * eta), rel=1e-13)


def test_exact_overdamped_flow_preserves_stationary_variance():
    # per eigenmode: phi^2/lam + mean_coef^2 + resid^2 == 1/lam
    pot = AnisotropicQuadratic((0.5, 2.0))
    lam = np.linalg.eigvalsh(np.diag([0.5, 2.0]))
    _, phi, mean_coef, resid_sd = ou_cell_ld(pot, 0.3)
    out = phi**2 / lam + mean_coef**2 + resid_sd**2
    np.testing.assert_allclose(out, 1.0 / lam, rtol=1e-12)


def test_exact_overdamped_flow_free_potential_is_brownian():
    pot = IsotropicQuadratic(2, scale=0.0)
    eta = 0.125
    xi = noise_matrix(13, 2, 8, 2)
    x0 = np.array([[0.0, 1.0], [2.0, -1.0]])
    nodes = exact_ou_flow_ld(pot, x0, xi, eta, noise_matrix(14, 2, 8, 2))
    expect = x0[:, None, :] + np.sqrt(2.0) * brownian_partial_sums(xi, eta)
    np.testing.assert_allclose(nodes, expect, rtol=1e-12, atol=1e-13)


def test_exact_kinetic_cell_covariance_matches_quadrature():
    # full cell covariance = mean part + residual part = int_0^eta e^{Au} Q e^{A'u} du
    pot = IsotropicQuadratic(1, scale=0.7)
    gamma, eta = 1.3, 0.21
    Phi, mean_coef, resid_half = ou_cell_uld(pot, gamma, eta)
    total = mean_coef @ mean_coef.T + resid_half @ resid_half.T
    A = np.array([[0.0, 1.0], [-0.7, -gamma]])
    Q = np.diag([0.0, 2.0 * gamma])

    def integrand(u, i, j):
        from scipy.linalg import expm

        E = expm(A * u)
        return (E @ Q @ E.T)[i, j]

    for i in range(2):
        for j in range(2):
            ref = quad(integrand, 0.0, eta, args=(i, j), epsabs=1e-13)[0]
            assert total[i, j] == pytest.approx(ref, abs=1e-10)


def test_exact_kinetic_flow_preserves_stationary_covariance():
    # stationary law: x ~ N(0, H^{-1}), p ~ N(0, I), independent
    pot = AnisotropicQuadratic((0.8, 1.7))
    gamma, eta = 0.9, 0.4
    Phi, mean_coef, resid_half = ou_cell_uld(pot, gamma, eta)
    stat = np.zeros((4, 4))
    stat[:2, :2] = np.diag([1.0 / 0.8, 1.0 / 1.7])
    stat[2:, 2:] = np.eye(2)
    out = Phi @ stat @ Phi.T + mean_coef @ mean_coef.T + resid_half @ resid_half.T
    np.testing.assert_allclose(out, stat, atol=1e-10)


def test_exact_kinetic_flow_deterministic_part():
    # no noise: z evolves by the propagator alone
    pot = IsotropicQuadratic(1)
    gamma, eta, n = 1.1, 0.1, 6
    Phi, _, _ = ou_cell_uld(pot, gamma, eta)
    xs, ps = exact_ou_flow_uld(
        pot, gamma, np.array([1.0]), np.array([-0.5]), np.zeros((1, n, 1)), eta, np.zeros((1, n, 2))
    )
    z = np.array([1.0, -0.5])
    for i in range(n + 1):
        assert xs[0, i, 0] == pytest.approx(z[0], abs=1e-13)
        assert ps[0, i, 0] == pytest.approx(z[1], abs=1e-13)
        z = Phi @ z


def test_exact_flows_require_quadratic_potentials():
    pot = PerturbedQuadratic((1.0,), amplitude=0.2, frequency=1.0)
    with pytest.raises(UnsupportedPotentialError):
        exact_ou_flow_ld(pot, np.array([1.0]), np.zeros((1, 2, 1)), 0.1, np.zeros((1, 2, 1)))
