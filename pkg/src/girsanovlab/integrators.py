"""Langevin discretizations as deterministic maps of (state, noise, schedule).

Schemes (all driven by one :class:`~girsanovlab.paths.NoisePath` on the inner
grid, increments √η·ξ_i):

* ``step_em_ld`` / ``simulate_elementary_ld`` — Euler–Maruyama on the inner
  grid itself (gradient refreshed every cell); the elementary reference
  discretization of the overdamped diffusion.
* ``step_mlmc`` / ``simulate_mlmc`` — overdamped midpoint scheme: one gradient
  at the step start builds the midpoint X⁺ = x₀ − τ∇V(x₀) + √2·B_τ, a second
  at X⁺ drives the whole step, X_t = x₀ − t∇V(X⁺) + √2·B_t.  τ = 0 degenerates
  to one Euler step per outer step.
* ``step_ulmc`` / ``simulate_ulmc`` — kinetic (underdamped) exponential Euler
  with the gradient frozen at the step start; stochastic integrals ∫E_j dB are
  realized as left-endpoint Itô sums on the inner grid.
* ``step_dmulmc_marginal`` — kinetic double-midpoint scheme: explicit
  midpoints X⁻ (position) and X⁺ (momentum), then one exponential step using
  ∇V(X⁻) in the position line and ∇V(X⁺) in the momentum line.  Exactly three
  gradient evaluations per outer step.
* ``solve_dmulmc_step`` / ``simulate_dmulmc`` — the inner-grid interpolation
  of the double-midpoint scheme: the implicit fixed point for (X̂, λ₁, λ₂)
  whose drift G^opt_t = ∇V(X̂_t) − E₁(t,h)λ₁ − E₂(t,h)λ₂ satisfies the two
  marginal constraints η·Σ_j E₁(jη,h)G^opt_j = E₂(0,h)∇V(X⁺) and
  η·Σ_j E₂(jη,h)G^opt_j = E₃(0,h)∇V(X⁻).  Its endpoint reproduces the
  marginal update exactly (the multipliers solve the constraints by
  construction), so iteration only refines interior nodes.
* ``exact_ou_flow_ld`` / ``exact_ou_flow_uld`` — exact Gaussian transitions
  of the continuous dynamics for quadratic potentials, coupled to the same
  increments: the cell update draws from the exact conditional law given the
  cell's Brownian increment (conditional mean from the cross-covariance, plus
  an independent residual supplied by the caller).  Marginally exact, and
  synchronously coupled to any scheme sharing the ξ array.

Batch convention: states are (B, d), per-step increments (B, m, d), full
horizons (B, N·m, d); single paths pass B = 1.  Trajectory node arrays have
shape (B, N·m + 1, d) with node k·m + n holding X̂_{nη} of outer step k.

Gradient-query counts follow the algorithms' marginal updates (M-LMC 2/step
with ∇V(x₀) shared and 1 when τ=0, ULMC 1/step, DM-ULMC 3/step, elementary
m/step); fixed-point-solver evaluations are weight machinery and not counted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh, expm

from .kernels import StepKernels
from .paths import OverdampedSchedule, TimeGrid, UnderdampedSchedule
from .potentials import Potential

__all__ = [
    "TrajectoryBlowupError",
    "StepSizeError",
    "UnsupportedPotentialError",
    "OverdampedTrajectory",
    "UnderdampedTrajectory",
    "DmStepSolution",
    "step_em_ld",
    "step_mlmc",
    "step_ulmc",
    "step_dmulmc_marginal",
    "solve_dmulmc_step",
    "simulate_elementary_ld",
    "simulate_mlmc",
    "simulate_ulmc",
    "simulate_dmulmc",
    "simulate_dmulmc_marginal",
    "ou_cell_ld",
    "ou_cell_uld",
    "exact_ou_flow_ld",
    "exact_ou_flow_uld",
]

#: Contraction margin for the implicit interpolation: require h·√β ≤ this.
DM_STEP_MARGIN = 0.5
FIXED_POINT_TOL = 1e-12
FIXED_POINT_MAX_ITERS = 100


class TrajectoryBlowupError(RuntimeError):
    """A simulated state became non-finite."""


class StepSizeError(ValueError):
    """Step size violates the contraction condition of an implicit solve."""


class UnsupportedPotentialError(TypeError):
    """Operation requires a quadratic potential."""


def _batch(x: np.ndarray, d: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != d:
        raise ValueError(f"{name} must have shape (B, {d}), got {x.shape}")
    return x


def _batch_noise(xi: np.ndarray, n_cells: int, d: int) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if xi.ndim == 2:
        xi = xi[None]
    if xi.ndim != 3 or xi.shape[1:] != (n_cells, d):
        raise ValueError(f"increments must have shape (B, {n_cells}, {d}), got {xi.shape}")
    return xi


def _check_finite(x: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(x)):
        raise TrajectoryBlowupError(f"state is non-finite after step {step}")


@dataclass(frozen=True)
class OverdampedTrajectory:
    """Inner-grid overdamped trajectory with per-step midpoint states.

    ``x`` has shape (B, N·m + 1, d); ``x_plus`` (B, N, d) holds X⁺_k.
    """

    grid: TimeGrid
    schedule: OverdampedSchedule
    x: np.ndarray
    x_plus: np.ndarray
    grad_queries: int


@dataclass(frozen=True)
class UnderdampedTrajectory:
    """Inner-grid kinetic trajectory.

    For the double-midpoint scheme, ``x_minus``/``x_plus`` hold the midpoint
    states and ``lambda1``/``lambda2`` the per-step multipliers of the
    interpolation (all (B, N, d)); ``iterations[k]`` counts fixed-point sweeps
    of step k.  The frozen-gradient baseline has no midpoints or multipliers
    (``schedule is None``, multipliers zero).
    """

    grid: TimeGrid
    gamma: float
    schedule: UnderdampedSchedule | None
    x: np.ndarray
    p: np.ndarray
    x_minus: np.ndarray | None
    x_plus: np.ndarray | None
    lambda1: np.ndarray
    lambda2: np.ndarray
    iterations: np.ndarray
    grad_queries: int


# ---------------------------------------------------------------------------
# Overdamped steps
# ---------------------------------------------------------------------------


def step_em_ld(
    potential: Potential, x0: np.ndarray, xi: np.ndarray, eta: float
) -> np.ndarray:
    """Euler–Maruyama recursion over one outer step's inner cells.

    x_{n+1} = x_n − η∇V(x_n) + √(2η)·ξ_n.  Returns nodes (B, m+1, d).
    """
    m = xi.shape[-2]
    nodes = np.empty(xi.shape[:-2] + (m + 1, xi.shape[-1]))
    nodes[..., 0, :] = x0
    coef = np.sqrt(2.0 * eta)
    x = x0
    for n in range(m):
        x = x - eta * potential.gradient(x) + coef * xi[..., n, :]
        _check_finite(x, n)
        nodes[..., n + 1, :] = x
    return nodes


def step_mlmc(
    potential: Potential, x0: np.ndarray, xi: np.ndarray, eta: float, r: int
) -> tuple[np.ndarray, np.ndarray, int]:
    """One overdamped midpoint step on the inner grid.

    X⁺ = x₀ − rη·∇V(x₀) + √(2η)·Σ_{j<r}ξ_j, then
    X̂_n = x₀ − nη·∇V(X⁺) + √(2η)·Σ_{j<n}ξ_j for n = 0..m.

    Returns (nodes (B, m+1, d), x_plus (B, d), gradient queries).
    """
    m = xi.shape[-2]
    sums = np.zeros(xi.shape[:-2] + (m + 1, xi.shape[-1]))
    np.cumsum(xi, axis=-2, out=sums[..., 1:, :])
    coef = np.sqrt(2.0 * eta)
    g0 = potential.gradient(x0)
    x_plus = x0 - (r * eta) * g0 + coef * sums[..., r, :]
    if r == 0:
        g_plus, queries = g0, 1
    else:
        g_plus, queries = potential.gradient(x_plus), 2
    n_eta = eta * np.arange(m + 1)
    nodes = x0[..., None, :] - n_eta[:, None] * g_plus[..., None, :] + coef * sums
    _check_finite(nodes[..., m, :], m)
    return nodes, x_plus, queries


# ---------------------------------------------------------------------------
# Kinetic steps
# ---------------------------------------------------------------------------


def _node_noise(K: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Left-endpoint Itô sums Σ_{j<n} K[n,j]·ξ_j for all nodes n."""
    B, m, d = xi.shape
    flat = K @ xi.transpose(1, 0, 2).reshape(m, B * d)  # one BLAS product
    return flat.reshape(K.shape[0], B, d).transpose(1, 0, 2)


def step_ulmc(
    kern: StepKernels, potential: Potential, x0: np.ndarray, p0: np.ndarray, xi: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Frozen-gradient exponential Euler step; returns inner node arrays.

    X̂_n = x₀ + E₂(0,nη)p₀ − E₃(0,nη)∇V(x₀) + √(2γη)·Σ_{j<n}E₂(jη,nη)ξ_j and
    the matching momentum line with E₁/E₂.  One gradient query.
    """
    g0 = potential.gradient(x0)
    c = np.sqrt(2.0 * kern.gamma * kern.eta)
    x_nodes = (
        x0[:, None, :]
        + kern.e2_0[:, None] * p0[:, None, :]
        - kern.e3_0[:, None] * g0[:, None, :]
        + c * _node_noise(kern.K2, xi)
    )
    p_nodes = (
        kern.e1_0[:, None] * p0[:, None, :]
        - kern.e2_0[:, None] * g0[:, None, :]
        + c * _node_noise(kern.K1, xi)
    )
    return x_nodes, p_nodes


def _dm_midpoints(
    kern: StepKernels,
    potential: Potential,
    x0: np.ndarray,
    p0: np.ndarray,
    xi: np.ndarray,
    r_minus: int,
    r_plus: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Explicit midpoint states (X⁻, X⁺) and the shared start gradient."""
    g0 = potential.gradient(x0)
    c = np.sqrt(2.0 * kern.gamma * kern.eta)
    mids = []
    for r in (r_minus, r_plus):
        mids.append(
            x0
            + kern.e2_0[r] * p0
            - kern.e3_0[r] * g0
            + c * np.einsum("j,bjd->bd", kern.K2[r], xi)
        )
    return mids[0], mids[1], g0


def step_dmulmc_marginal(
    kern: StepKernels,
    potential: Potential,
    x0: np.ndarray,
    p0: np.ndarray,
    xi: np.ndarray,
    r_minus: int,
    r_plus: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """One double-midpoint kinetic step (closed-form marginal update).

    Returns (x_h, p_h, x_minus, x_plus); exactly 3 gradient queries
    (∇V(x₀) shared by both midpoints, then ∇V(X⁻) and ∇V(X⁺)).
    """
    m = kern.m
    x_minus, x_plus, _ = _dm_midpoints(kern, potential, x0, p0, xi, r_minus, r_plus)
    g_minus = potential.gradient(x_minus)
    g_plus = potential.gradient(x_plus)
    c = np.sqrt(2.0 * kern.gamma * kern.eta)
    x_h = (
        x0
        + kern.e2_0[m] * p0
        - kern.e3_0[m] * g_minus
        + c * np.einsum("j,bjd->bd", kern.K2[m], xi)
    )
    p_h = (
        kern.e1_0[m] * p0
        - kern.e2_0[m] * g_plus
        + c * np.einsum("j,bjd->bd", kern.K1[m], xi)
    )
    return x_h, p_h, x_minus, x_plus


@dataclass(frozen=True)
class DmStepSolution:
    """Converged inner interpolation of one double-midpoint step.

    The endpoint (x_nodes[:, m], p_nodes[:, m]) equals the closed-form
    marginal update exactly: the multipliers solve the marginal constraints
    for the final drift evaluation by construction, so the fixed point only
    moves interior nodes.
    """

    x_nodes: np.ndarray  # (B, m+1, d)
    p_nodes: np.ndarray
    lam1: np.ndarray  # (B, d)
    lam2: np.ndarray
    x_minus: np.ndarray
    x_plus: np.ndarray
    iterations: int


def solve_dmulmc_step(
    kern: StepKernels,
    potential: Potential,
    x0: np.ndarray,
    p0: np.ndarray,
    xi: np.ndarray,
    r_minus: int,
    r_plus: int,
) -> DmStepSolution:
    """Solve the implicit inner-grid interpolation of one DM step.

    Iterates X̂ ↦ x₀ + E₂(0,·)p₀ − η·Σ E₂(jη,·)G^opt_j + noise with
    G^opt_j = ∇V(X̂_j) − E₁(jη,h)λ₁ − E₂(jη,h)λ₂ and (λ₁, λ₂) solved from the
    2×2 Gram system so the marginal constraints hold exactly at every sweep.
    Converges to 1e−12 in the grid max-norm under h·√β ≤ 0.5.
    """
    if kern.h * np.sqrt(max(potential.beta, 0.0)) > DM_STEP_MARGIN:
        raise StepSizeError(
            f"implicit interpolation requires h*sqrt(beta) <= {DM_STEP_MARGIN} "
            f"(h={kern.h}, beta={potential.beta}); reduce the step size"
        )
    m, eta = kern.m, kern.eta
    x_minus, x_plus, g0 = _dm_midpoints(kern, potential, x0, p0, xi, r_minus, r_plus)
    g_minus = potential.gradient(x_minus)
    g_plus = potential.gradient(x_plus)
    gx = kern.e3_0[m] * g_minus  # constraint targets
    gp = kern.e2_0[m] * g_plus

    c = np.sqrt(2.0 * kern.gamma * eta)
    base = (
        x0[:, None, :]
        + kern.e2_0[:, None] * p0[:, None, :]
        + c * _node_noise(kern.K2, xi)
    )
    x_nodes = base - kern.e3_0[:, None] * g0[:, None, :]  # frozen-gradient start
    lam1 = lam2 = np.zeros_like(x0)
    g_opt = np.zeros_like(xi)
    for it in range(1, FIXED_POINT_MAX_ITERS + 1):
        g = potential.gradient(x_nodes[:, :m])
        s1 = eta * np.einsum("j,bjd->bd", kern.e1_left, g)
        s2 = eta * np.einsum("j,bjd->bd", kern.e2_left, g)
        lam1, lam2 = kern.sigma_hat.solve(s1 - gp, s2 - gx)
        g_opt = g - kern.e1_left[:, None] * lam1[:, None, :] - kern.e2_left[:, None] * lam2[:, None, :]
        x_new = base - eta * _node_noise(kern.K2, g_opt)
        delta = float(np.max(np.abs(x_new - x_nodes)))
        x_nodes = x_new
        if not np.isfinite(delta):
            raise StepSizeError(
                "implicit interpolation diverged; the step violates the "
                "contraction condition h ~ 1/sqrt(beta)"
            )
        if delta <= FIXED_POINT_TOL:
            break
    else:
        raise StepSizeError(
            f"implicit interpolation did not converge in {FIXED_POINT_MAX_ITERS} "
            "sweeps; the step violates the contraction condition h ~ 1/sqrt(beta)"
        )
    p_nodes = (
        kern.e1_0[:, None] * p0[:, None, :]
        - eta * _node_noise(kern.K1, g_opt)
        + c * _node_noise(kern.K1, xi)
    )
    return DmStepSolution(
        x_nodes=x_nodes,
        p_nodes=p_nodes,
        lam1=lam1,
        lam2=lam2,
        x_minus=x_minus,
        x_plus=x_plus,
        iterations=it,
    )


# ---------------------------------------------------------------------------
# Full-horizon simulators
# ---------------------------------------------------------------------------


def simulate_elementary_ld(
    potential: Potential, grid: TimeGrid, x0: np.ndarray, xi: np.ndarray
) -> np.ndarray:
    """Euler–Maruyama on the whole inner grid; returns nodes (B, N·m+1, d)."""
    x0 = _batch(x0, potential.d, "x0")
    xi = _batch_noise(xi, grid.n_cells, potential.d)
    return step_em_ld(potential, x0, xi, grid.eta)


def simulate_mlmc(
    potential: Potential, schedule: OverdampedSchedule, x0: np.ndarray, xi: np.ndarray
) -> OverdampedTrajectory:
    """Chain overdamped midpoint steps across the horizon."""
    grid = schedule.grid
    x0 = _batch(x0, potential.d, "x0")
    xi = _batch_noise(xi, grid.n_cells, potential.d)
    B, d, m = x0.shape[0], potential.d, grid.m
    nodes = np.empty((B, grid.n_cells + 1, d))
    nodes[:, 0] = x0
    x_plus = np.empty((B, grid.N, d))
    queries = 0
    x = x0
    for k in range(grid.N):
        seg, xp, q = step_mlmc(
            potential, x, xi[:, k * m : (k + 1) * m], grid.eta, int(schedule.indices[k])
        )
        nodes[:, k * m + 1 : (k + 1) * m + 1] = seg[:, 1:]
        x_plus[:, k] = xp
        queries += q
        x = seg[:, m]
        _check_finite(x, k)
    return OverdampedTrajectory(grid=grid, schedule=schedule, x=nodes, x_plus=x_plus, grad_queries=queries)


def simulate_ulmc(
    potential: Potential,
    grid: TimeGrid,
    gamma: float,
    x0: np.ndarray,
    p0: np.ndarray,
    xi: np.ndarray,
) -> UnderdampedTrajectory:
    """Chain frozen-gradient exponential Euler steps across the horizon."""
    if not (np.isfinite(gamma) and gamma > 0):
        raise ValueError(f"friction must be positive, got {gamma}")
    x0 = _batch(x0, potential.d, "x0")
    p0 = _batch(p0, potential.d, "p0")
    xi = _batch_noise(xi, grid.n_cells, potential.d)
    kern = StepKernels.build(gamma, grid.h, grid.m)
    B, d, m = x0.shape[0], potential.d, grid.m
    xs = np.empty((B, grid.n_cells + 1, d))
    ps = np.empty((B, grid.n_cells + 1, d))
    xs[:, 0], ps[:, 0] = x0, p0
    x, p = x0, p0
    for k in range(grid.N):
        xn, pn = step_ulmc(kern, potential, x, p, xi[:, k * m : (k + 1) * m])
        xs[:, k * m + 1 : (k + 1) * m + 1] = xn[:, 1:]
        ps[:, k * m + 1 : (k + 1) * m + 1] = pn[:, 1:]
        x, p = xn[:, m], pn[:, m]
        _check_finite(x, k)
    zeros = np.zeros((B, grid.N, d))
    return UnderdampedTrajectory(
        grid=grid,
        gamma=gamma,
        schedule=None,
        x=xs,
        p=ps,
        x_minus=None,
        x_plus=None,
        lambda1=zeros,
        lambda2=np.zeros_like(zeros),
        iterations=np.zeros(grid.N, dtype=int),
        grad_queries=grid.N,
    )


def simulate_dmulmc(
    potential: Potential,
    schedule: UnderdampedSchedule,
    gamma: float,
    x0: np.ndarray,
    p0: np.ndarray,
    xi: np.ndarray,
) -> UnderdampedTrajectory:
    """Chain interpolated double-midpoint steps (fixed point per step)."""
    if not (np.isfinite(gamma) and gamma > 0):
        raise ValueError(f"friction must be positive, got {gamma}")
    grid = schedule.grid
    x0 = _batch(x0, potential.d, "x0")
    p0 = _batch(p0, potential.d, "p0")
    xi = _batch_noise(xi, grid.n_cells, potential.d)
    kern = StepKernels.build(gamma, grid.h, grid.m)
    B, d, m = x0.shape[0], potential.d, grid.m
    xs = np.empty((B, grid.n_cells + 1, d))
    ps = np.empty((B, grid.n_cells + 1, d))
    xs[:, 0], ps[:, 0] = x0, p0
    x_minus = np.empty((B, grid.N, d))
    x_plus = np.empty((B, grid.N, d))
    lam1 = np.empty((B, grid.N, d))
    lam2 = np.empty((B, grid.N, d))
    iters = np.zeros(grid.N, dtype=int)
    x, p = x0, p0
    for k in range(grid.N):
        sol = solve_dmulmc_step(
            kern,
            potential,
            x,
            p,
            xi[:, k * m : (k + 1) * m],
            int(schedule.indices_minus[k]),
            int(schedule.indices_plus[k]),
        )
        xs[:, k * m + 1 : (k + 1) * m + 1] = sol.x_nodes[:, 1:]
        ps[:, k * m + 1 : (k + 1) * m + 1] = sol.p_nodes[:, 1:]
        x_minus[:, k], x_plus[:, k] = sol.x_minus, sol.x_plus
        lam1[:, k], lam2[:, k] = sol.lam1, sol.lam2
        iters[k] = sol.iterations
        x, p = sol.x_nodes[:, m], sol.p_nodes[:, m]
        _check_finite(x, k)
    return UnderdampedTrajectory(
        grid=grid,
        gamma=gamma,
        schedule=schedule,
        x=xs,
        p=ps,
        x_minus=x_minus,
        x_plus=x_plus,
        lambda1=lam1,
        lambda2=lam2,
        iterations=iters,
        grad_queries=3 * grid.N,
    )


def simulate_dmulmc_marginal(
    potential: Potential,
    schedule: UnderdampedSchedule,
    gamma: float,
    x0: np.ndarray,
    p0: np.ndarray,
    xi: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Chain closed-form marginal updates only (no interpolation solve).

    Returns outer-node arrays (x, p), each (B, N+1, d).
    """
    if not (np.isfinite(gamma) and gamma > 0):
        raise ValueError(f"friction must be positive, got {gamma}")
    grid = schedule.grid
    x0 = _batch(x0, potential.d, "x0")
    p0 = _batch(p0, potential.d, "p0")
    xi = _batch_noise(xi, grid.n_cells, potential.d)
    kern = StepKernels.build(gamma, grid.h, grid.m)
    B, d, m = x0.shape[0], potential.d, grid.m
    xs = np.empty((B, grid.N + 1, d))
    ps = np.empty((B, grid.N + 1, d))
    xs[:, 0], ps[:, 0] = x0, p0
    x, p = x0, p0
    for k in range(grid.N):
        x, p, _, _ = step_dmulmc_marginal(
            kern,
            potential,
            x,
            p,
            xi[:, k * m : (k + 1) * m],
            int(schedule.indices_minus[k]),
            int(schedule.indices_plus[k]),
        )
        _check_finite(x, k)
        xs[:, k + 1], ps[:, k + 1] = x, p
    return xs, ps


# ---------------------------------------------------------------------------
# Exact Ornstein–Uhlenbeck reference flows (quadratic potentials)
# ---------------------------------------------------------------------------


def _require_quadratic(potential: Potential) -> np.ndarray:
    if not potential.is_quadratic:
        raise UnsupportedPotentialError(
            "exact reference flows require a quadratic potential"
        )
    return np.asarray(potential.constant_hessian, dtype=float)


def ou_cell_ld(potential: Potential, eta: float):
    """Per-cell transition of dX = −HX dt + √2 dB over one inner cell.

    Returns (U, phi, mean_coef, resid_sd): eigenvectors of H and, per
    eigenvalue, the decay factor e^{−λη}, the coefficient of ξ in the
    conditional mean given the cell increment, and the residual standard
    deviation.  All elementwise in the eigenbasis.
    """
    H = _require_quadratic(potential)
    lam, U = eigh(H)
    w = lam * eta
    # S = ∫₀^η e^{−λu}du and C = 2∫₀^η e^{−2λu}du, stable as λ→0.
    s = eta * np.where(w == 0.0, 1.0, -np.expm1(-w) / np.where(w == 0.0, 1.0, w))
    cvar = eta * np.where(w == 0.0, 2.0, -np.expm1(-2 * w) / np.where(w == 0.0, 1.0, w))
    phi = np.exp(-w)
    # noise = √2·S·ΔB/η + residual; ΔB = √η ξ ⟹ ξ-coefficient √2 s/√η.
    mean_coef = np.sqrt(2.0) * s / np.sqrt(eta)
    resid_var = np.clip(cvar - 2.0 * s**2 / eta, 0.0, None)
    return U, phi, mean_coef, np.sqrt(resid_var)


def exact_ou_flow_ld(
    potential: Potential,
    x0: np.ndarray,
    xi: np.ndarray,
    eta: float,
    residual: np.ndarray,
) -> np.ndarray:
    """Exact overdamped flow for quadratic V, coupled to the increments ξ.

    ``residual`` supplies one independent standard normal d-vector per cell
    (same shape as ξ); the returned nodes (B, n+1, d) have the exact
    transition law cell by cell.
    """
    x0 = _batch(x0, potential.d, "x0")
    xi = _batch_noise(xi, xi.shape[-2], potential.d)
    residual = _batch_noise(residual, xi.shape[-2], potential.d)
    U, phi, mean_coef, resid_sd = ou_cell_ld(potential, eta)
    n = xi.shape[1]
    nodes = np.empty((x0.shape[0], n + 1, potential.d))
    y = x0 @ U  # eigen coordinates (rows)
    nodes[:, 0] = y
    for i in range(n):
        y = phi * y + mean_coef * (xi[:, i] @ U) + resid_sd * (residual[:, i] @ U)
        nodes[:, i + 1] = y
    return nodes @ U.T


def ou_cell_uld(potential: Potential, gamma: float, eta: float):
    """Per-cell transition of the kinetic diffusion for quadratic V.

    Drift matrix A = [[0, I], [−H, −γI]] on z = (x, p), noise √(2γ) on the
    momentum line.  Returns (Phi, mean_coef, resid_half): the cell propagator
    e^{Aη} (2d×2d), the matrix multiplying ξ in the conditional mean given the
    cell increment (2d×d), and a symmetric square root of the residual
    covariance (2d×2d).  Covariances come from a block-matrix exponential.
    """
    H = _require_quadratic(potential)
    d = H.shape[0]
    A = np.zeros((2 * d, 2 * d))
    A[:d, d:] = np.eye(d)
    A[d:, :d] = -H
    A[d:, d:] = -gamma * np.eye(d)
    Q = np.zeros((2 * d, 2 * d))
    Q[d:, d:] = 2.0 * gamma * np.eye(d)
    # C = ∫₀^η e^{Au} Q e^{Aᵀu} du via the (1,2) block of a 4d×4d exponential.
    M = np.zeros((4 * d, 4 * d))
    M[: 2 * d, : 2 * d] = A
    M[: 2 * d, 2 * d :] = Q
    M[2 * d :, 2 * d :] = -A.T
    E = expm(M * eta)
    Phi = E[: 2 * d, : 2 * d]
    C = E[: 2 * d, 2 * d :] @ Phi.T
    C = 0.5 * (C + C.T)
    # J = ∫₀^η e^{Au} du from an augmented exponential (robust for singular A).
    M2 = np.zeros((4 * d, 4 * d))
    M2[: 2 * d, : 2 * d] = A
    M2[: 2 * d, 2 * d :] = np.eye(2 * d)
    J = expm(M2 * eta)[: 2 * d, 2 * d :]
    # Cross-covariance with the increment: S = J·Σ, Σ = [[0], [√(2γ)I]].
    S = np.sqrt(2.0 * gamma) * J[:, d:]
    R = C - S @ S.T / eta
    vals, vecs = eigh(0.5 * (R + R.T))
    resid_half = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
    mean_coef = S / np.sqrt(eta)  # ΔB = √η ξ ⟹ S·ΔB/η = (S/√η)·ξ
    return Phi, mean_coef, resid_half


def exact_ou_flow_uld(
    potential: Potential,
    gamma: float,
    x0: np.ndarray,
    p0: np.ndarray,
    xi: np.ndarray,
    eta: float,
    residual: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact kinetic flow for quadratic V, coupled to the increments ξ.

    ``residual`` supplies one independent standard normal 2d-vector per cell,
    shape (B, n, 2d).  Returns node arrays (x, p), each (B, n+1, d).
    """
    d = potential.d
    x0 = _batch(x0, d, "x0")
    p0 = _batch(p0, d, "p0")
    xi = _batch_noise(xi, xi.shape[-2], d)
    residual = _batch_noise(residual, xi.shape[1], 2 * d)
    Phi, mean_coef, resid_half = ou_cell_uld(potential, gamma, eta)
    n = xi.shape[1]
    z = np.concatenate([x0, p0], axis=1)  # (B, 2d)
    nodes = np.empty((x0.shape[0], n + 1, 2 * d))
    nodes[:, 0] = z
    for i in range(n):
        z = z @ Phi.T + xi[:, i] @ mean_coef.T + residual[:, i] @ resid_half.T
        nodes[:, i + 1] = z
    return nodes[..., :d], nodes[..., d:]
