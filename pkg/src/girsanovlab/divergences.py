"""Divergence estimators on pathwise log weights, and Gaussian references.

The pathwise weight M satisfies E_P[M] = 1 with P the scheme's path law and
Q the diffusion's, so

    KL(P‖Q)  = E_P[−log M],
    R_q(P‖Q) = (1/(q−1))·log E_P[M^{1−q}]   (q > 1),

and both are estimated from sampled log M values.  Paths flagged
non-invertible are excluded and counted; estimates carrying more than 1%
rejections are marked unreliable.  For quadratic targets the module also
provides exact stationary/diffusion marginal moments and the closed-form
Gaussian KL used in data-processing cross-checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp
from scipy.stats import t as student_t

from .girsanov import LogWeight
from .integrators import ou_cell_uld
from .potentials import Potential

__all__ = [
    "DivergenceEstimate",
    "LocalErrorReport",
    "SlopeFit",
    "REJECTION_RELIABILITY_LIMIT",
    "estimate_kl",
    "estimate_renyi",
    "gaussian_kl",
    "pinsker_tv_bound",
    "stationary_moments",
    "diffusion_marginal_ld",
    "diffusion_marginal_uld",
    "fit_loglog_slope",
    "local_error_sweep",
]

#: Estimates with a larger rejected fraction are flagged unreliable.
REJECTION_RELIABILITY_LIMIT = 0.01


@dataclass(frozen=True)
class DivergenceEstimate:
    """Point estimate with a jackknife standard error and rejection counts.

    ``kind`` is "kl" or "renyi-q"; ``direction`` names the (P, Q) pair the
    estimate refers to — P is the simulated law, Q the reweighting target.
    Swapping direction requires re-simulation under the other law, never
    reweighting alone.
    """

    value: float
    se: float
    n_used: int
    n_rejected: int
    kind: str = "kl"
    direction: tuple[str, str] = ("scheme", "diffusion")

    @property
    def reliable(self) -> bool:
        total = self.n_used + self.n_rejected
        return (
            total > 0
            and np.isfinite(self.value)
            and self.n_rejected <= REJECTION_RELIABILITY_LIMIT * total
        )


def _usable_log_weights(weights) -> tuple[np.ndarray, int]:
    if hasattr(weights, "log_weight") and hasattr(weights, "invertible"):
        mask = np.asarray(weights.invertible, dtype=bool)
        return np.asarray(weights.log_weight, dtype=float)[mask], int((~mask).sum())
    logw = np.asarray(weights, dtype=float)
    mask = np.isfinite(logw)
    return logw[mask], int((~mask).sum())


def estimate_kl(weights) -> DivergenceEstimate:
    """KL(P‖Q) = E_P[−log M], sample mean with its standard error.

    ``weights`` is a :class:`LogWeight` (non-invertible paths excluded and
    counted as rejections) or a raw array of log M values (non-finite entries
    rejected).  For a sample mean the jackknife standard error coincides with
    the usual one, std/√n.
    """
    logw, n_rej = _usable_log_weights(weights)
    n = logw.size
    if n < 2:
        return DivergenceEstimate(np.nan, np.inf, n, n_rej, kind="kl")
    value = float(np.mean(-logw))
    se = float(np.std(-logw, ddof=1) / np.sqrt(n))
    return DivergenceEstimate(value, se, n, n_rej, kind="kl")


def estimate_renyi(weights, q: float) -> DivergenceEstimate:
    """Rényi divergence R_q(P‖Q) of order q > 1 with leave-one-out jackknife.

    R_q = (1/(q−1))·log(mean of exp(−(q−1)·log M)), computed through
    log-sum-exp; the standard error comes from the n leave-one-out replicas
    (the estimator is nonlinear, so the plain CLT error would be wrong).
    """
    if not q > 1.0:
        raise ValueError(f"Renyi order must satisfy q > 1, got {q}")
    kind = f"renyi-{q:g}"
    logw, n_rej = _usable_log_weights(weights)
    n = logw.size
    if n < 2:
        return DivergenceEstimate(np.nan, np.inf, n, n_rej, kind=kind)
    a = -(q - 1.0) * logw
    total = float(logsumexp(a))
    value = (total - np.log(n)) / (q - 1.0)
    # leave-one-out log-sum-exp; exact cancellation means one path dominates
    with np.errstate(divide="ignore", invalid="ignore"):
        loo = total + np.log1p(-np.exp(a - total))
    if not np.all(np.isfinite(loo)):
        return DivergenceEstimate(float(value), np.inf, n, n_rej, kind=kind)
    reps = (loo - np.log(n - 1)) / (q - 1.0)
    se = float(np.sqrt((n - 1) / n * np.sum((reps - reps.mean()) ** 2)))
    return DivergenceEstimate(float(value), se, n, n_rej, kind=kind)


def gaussian_kl(
    mean0: np.ndarray, cov0: np.ndarray, mean1: np.ndarray, cov1: np.ndarray
) -> float:
    """KL(N(mean0, cov0) ‖ N(mean1, cov1)) in nats, by Cholesky factorization."""
    mean0 = np.asarray(mean0, dtype=float)
    mean1 = np.asarray(mean1, dtype=float)
    cov0 = np.asarray(cov0, dtype=float)
    cov1 = np.asarray(cov1, dtype=float)
    d = mean0.size
    try:
        c0 = cho_factor(cov0, lower=True)
        c1 = cho_factor(cov1, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"covariances must be symmetric positive definite: {exc}")
    logdet0 = 2.0 * np.sum(np.log(np.diag(c0[0])))
    logdet1 = 2.0 * np.sum(np.log(np.diag(c1[0])))
    trace = float(np.trace(cho_solve(c1, cov0)))
    diff = mean1 - mean0
    maha = float(diff @ cho_solve(c1, diff))
    return 0.5 * (trace + maha - d + logdet1 - logdet0)


def pinsker_tv_bound(kl: float) -> float:
    """Total-variation bound min(1, √(KL/2)) from Pinsker's inequality."""
    if kl < 0:
        raise ValueError(f"KL must be nonnegative, got {kl}")
    return float(min(1.0, np.sqrt(kl / 2.0)))


def _quadratic_hessian(potential: Potential) -> np.ndarray:
    if not potential.is_quadratic:
        raise ValueError("Gaussian reference moments require a quadratic potential")
    return potential.hessian(np.zeros((1, potential.d)))[0]


def stationary_moments(
    potential: Potential, kinetic: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Moments of the target: N(0, H⁻¹), or N(0, diag(H⁻¹, I)) in phase space."""
    H = _quadratic_hessian(potential)
    w, Q = np.linalg.eigh(H)
    if np.any(w <= 0):
        raise ValueError("stationary law needs a strictly convex quadratic")
    cov_x = (Q / w) @ Q.T
    d = potential.d
    if not kinetic:
        return np.zeros(d), cov_x
    cov = np.zeros((2 * d, 2 * d))
    cov[:d, :d] = cov_x
    cov[d:, d:] = np.eye(d)
    return np.zeros(2 * d), cov


def diffusion_marginal_ld(
    potential: Potential, T: float, mean0: np.ndarray, cov0: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Exact marginal of dX = −∇V(X)dt + √2·dB at time T from N(mean0, cov0)."""
    H = _quadratic_hessian(potential)
    w, Q = np.linalg.eigh(H)
    decay = np.exp(-w * T)
    # ∫₀ᵀ e^{−2ws}·2 ds = (1 − e^{−2wT})/w, with the w → 0 limit 2T
    wt = 2.0 * w * T
    var = 2.0 * T * np.where(wt == 0.0, 1.0, -np.expm1(-wt) / np.where(wt == 0.0, 1.0, wt))
    m = Q @ (decay * (Q.T @ np.asarray(mean0, dtype=float)))
    c0r = Q.T @ np.asarray(cov0, dtype=float) @ Q
    cov = Q @ (decay[:, None] * c0r * decay[None, :] + np.diag(var)) @ Q.T
    return m, cov


def diffusion_marginal_uld(
    potential: Potential,
    gamma: float,
    T: float,
    mean0: np.ndarray,
    cov0: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact phase-space marginal of the kinetic diffusion at time T.

    dX = P dt, dP = (−γP − ∇V(X))dt + √(2γ)dB, state ordered (x, p).
    """
    Phi, mean_coef, resid_half = ou_cell_uld(potential, gamma, T)
    noise_cov = mean_coef @ mean_coef.T + resid_half @ resid_half.T
    mean = Phi @ np.asarray(mean0, dtype=float)
    cov = Phi @ np.asarray(cov0, dtype=float) @ Phi.T + noise_cov
    return mean, cov


@dataclass(frozen=True)
class SlopeFit:
    """Least-squares slope of log(y) against log(x).

    ``ci95`` is the half-width of the 95% confidence interval for the slope
    (t-distribution, n − 2 degrees of freedom); ``r_squared`` the usual
    coefficient of determination of the log–log fit.
    """

    slope: float
    intercept: float
    r_squared: float
    ci95: float
    n_points: int


def fit_loglog_slope(x: np.ndarray, y: np.ndarray) -> SlopeFit:
    """Fit log(y) = slope·log(x) + intercept by ordinary least squares.

    All inputs must be strictly positive; at least three points are required
    so the confidence interval is defined (it is infinite for exactly three
    collinear-degrees-of-freedom-free data only when residuals vanish).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d arrays of equal length")
    if x.size < 3:
        raise ValueError("need at least 3 points to fit a slope with a CI")
    if np.any(x <= 0.0) or np.any(y <= 0.0):
        raise ValueError("log-log fit requires strictly positive x and y")
    lx = np.log(x)
    ly = np.log(y)
    n = x.size
    mx = lx.mean()
    my = ly.mean()
    sxx = float(np.sum((lx - mx) ** 2))
    sxy = float(np.sum((lx - mx) * (ly - my)))
    slope = sxy / sxx
    intercept = my - slope * mx
    resid = ly - (slope * lx + intercept)
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((ly - my) ** 2))
    r_squared = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    dof = n - 2
    sigma2 = ss_res / dof
    stderr = np.sqrt(sigma2 / sxx)
    ci95 = float(student_t.ppf(0.975, dof) * stderr)
    return SlopeFit(
        slope=float(slope),
        intercept=float(intercept),
        r_squared=float(r_squared),
        ci95=ci95,
        n_points=int(n),
    )


@dataclass(frozen=True)
class LocalErrorReport:
    """One-step strong/weak errors of a scheme against the true diffusion.

    All error columns are squared quantities indexed by the step sizes ``h``:
    ``strong_*`` is E‖Δ‖² for the position (x) and momentum (p) component of
    the one-step defect Δ = (scheme step) − (diffusion step) under a
    synchronous coupling (identical Brownian increments).  ``weak_*`` is the
    squared conditional mean defect E‖E[Δ | z₀]‖², estimated without bias by
    the cross product ⟨Δ⁽¹⁾, Δ⁽²⁾⟩ of two replicas that share the initial
    state but use independent Brownian paths; it may fluctuate below zero
    when the true value is tiny.  Overdamped schemes carry zeros in the
    momentum columns.  ``slopes`` maps the four column names to log–log
    fits over the positive columns.
    """

    scheme: str
    h: np.ndarray
    m: np.ndarray
    strong_x: np.ndarray
    strong_x_se: np.ndarray
    strong_p: np.ndarray
    strong_p_se: np.ndarray
    weak_x: np.ndarray
    weak_x_se: np.ndarray
    weak_p: np.ndarray
    weak_p_se: np.ndarray
    n_paths: int
    slopes: dict[str, SlopeFit]


def _exact_kinetic_reference(potential, gamma, x0, p0, xi, eta, residual):
    from .integrators import exact_ou_flow_uld

    xs, ps = exact_ou_flow_uld(potential, gamma, x0, p0, xi, eta, residual)
    return xs[:, -1], ps[:, -1]


def _exact_overdamped_reference(potential, x0, xi, eta, residual):
    from .integrators import exact_ou_flow_ld

    xs = exact_ou_flow_ld(potential, x0, xi, eta, residual)
    return xs[:, -1]


def _refined_reference(kinetic, potential, grid, gamma, x0, p0, xi, seed, start, levels=5):
    """Fallback diffusion reference for non-quadratic targets.

    Bridge-refines the driving increments ``levels`` times (so the reference
    cell is 2^levels finer than the scheme's finest cell) and integrates with
    the elementary scheme on the refined grid, consuming bridge normals from
    the residual stream.  The reference carries its own discretization error,
    so only slopes over steps much coarser than the refined cell are
    meaningful.
    """
    from .integrators import simulate_elementary_ld, simulate_ulmc
    from .paths import LABEL_RESIDUAL, noise_matrix

    B, m, d = xi.shape
    zetas = noise_matrix(
        seed, B, m * ((1 << levels) - 1), d, label=LABEL_RESIDUAL, start=start
    )
    fine_grid, fine_xi, used, root_half = grid, xi, 0, np.sqrt(0.5)
    for _ in range(levels):
        ncur = fine_xi.shape[1]
        zeta = zetas[:, used : used + ncur]
        used += ncur
        child = np.empty((B, 2 * ncur, d))
        child[:, 0::2] = (fine_xi + zeta) * root_half
        child[:, 1::2] = (fine_xi - zeta) * root_half
        fine_xi, fine_grid = child, fine_grid.refined()
    if kinetic:
        traj = simulate_ulmc(potential, fine_grid, gamma, x0, p0, fine_xi)
        return traj.x[:, -1], traj.p[:, -1]
    nodes = simulate_elementary_ld(potential, fine_grid, x0, fine_xi)
    return nodes[:, -1], None


def local_error_sweep(
    scheme: str,
    potential: Potential,
    grids,
    *,
    gamma: float | None = None,
    n_paths: int = 4096,
    seed: int = 0,
    init: tuple[np.ndarray, np.ndarray] | None = None,
    chunk: int = 4096,
) -> LocalErrorReport:
    """One-step error sweep over a family of single-step grids.

    Each entry of ``grids`` must be a TimeGrid with N = 1 whose horizon plays
    the role of the step size h; its ``m`` sets the midpoint resolution.  The
    initial state is drawn from ``init`` = (mean, cov) in the scheme's state
    space (default: the stationary law of the target dynamics).  Strong
    errors use replica 1 only; weak errors pair two replicas sharing the
    initial state.  Deterministic midpoint schedules are used throughout.
    """
    from .integrators import simulate_dmulmc, simulate_elementary_ld, simulate_mlmc, simulate_ulmc
    from .paths import (
        LABEL_INIT,
        LABEL_PATH,
        LABEL_RESIDUAL,
        OverdampedSchedule,
        UnderdampedSchedule,
        noise_matrix,
    )

    kinetic = scheme in ("ulmc", "dmulmc")
    if kinetic and gamma is None:
        raise ValueError("kinetic schemes require gamma")
    d = potential.d
    zdim = 2 * d if kinetic else d
    if init is None:
        mean0, cov0 = stationary_moments(potential, kinetic=kinetic)
    else:
        mean0 = np.asarray(init[0], dtype=float)
        cov0 = np.asarray(init[1], dtype=float)
    chol0 = np.linalg.cholesky(cov0 + 0.0)
    exact = potential.is_quadratic

    hs, ms = [], []
    cols = {k: ([], []) for k in ("strong_x", "strong_p", "weak_x", "weak_p")}
    for grid in grids:
        if grid.N != 1:
            raise ValueError("local_error_sweep expects single-step grids (N = 1)")
        eta = grid.h / grid.m
        sx = np.empty(n_paths)
        sp = np.empty(n_paths)
        wx = np.empty(n_paths)
        wp = np.empty(n_paths)
        for lo in range(0, n_paths, chunk):
            hi = min(lo + chunk, n_paths)
            rows = hi - lo
            u0 = noise_matrix(seed, rows, 1, zdim, label=LABEL_INIT, start=lo)[:, 0]
            z0 = mean0 + u0 @ chol0.T
            x0 = z0[:, :d]
            p0 = z0[:, d:] if kinetic else None
            deltas = []
            for rep in range(2):
                off = rep * n_paths + lo
                xi = noise_matrix(seed, rows, grid.m, d, label=LABEL_PATH, start=off)
                if scheme == "mlmc":
                    sched = OverdampedSchedule.deterministic(grid, 0.5)
                    traj = simulate_mlmc(potential, sched, x0, xi)
                    x_alg, p_alg = traj.x[:, -1], None
                elif scheme == "em-ld":
                    nodes = simulate_elementary_ld(potential, grid, x0, xi)
                    x_alg, p_alg = nodes[:, -1], None
                elif scheme == "ulmc":
                    traj = simulate_ulmc(potential, grid, gamma, x0, p0, xi)
                    x_alg, p_alg = traj.x[:, -1], traj.p[:, -1]
                elif scheme == "dmulmc":
                    sched = UnderdampedSchedule.deterministic(grid)
                    traj = simulate_dmulmc(potential, sched, gamma, x0, p0, xi)
                    x_alg, p_alg = traj.x[:, -1], traj.p[:, -1]
                else:
                    raise ValueError(f"unknown scheme {scheme!r}")
                if exact:
                    if kinetic:
                        resid = noise_matrix(
                            seed, rows, grid.m, 2 * d, label=LABEL_RESIDUAL, start=off
                        )
                        x_ref, p_ref = _exact_kinetic_reference(
                            potential, gamma, x0, p0, xi, eta, resid
                        )
                    else:
                        resid = noise_matrix(
                            seed, rows, grid.m, d, label=LABEL_RESIDUAL, start=off
                        )
                        x_ref = _exact_overdamped_reference(potential, x0, xi, eta, resid)
                        p_ref = None
                else:
                    x_ref, p_ref = _refined_reference(
                        kinetic, potential, grid, gamma, x0, p0, xi, seed, off
                    )
                dx = x_alg - x_ref
                dp = (p_alg - p_ref) if kinetic else np.zeros_like(dx)
                deltas.append((dx, dp))
            (dx1, dp1), (dx2, dp2) = deltas
            sx[lo:hi] = np.sum(dx1**2, axis=1)
            sp[lo:hi] = np.sum(dp1**2, axis=1)
            wx[lo:hi] = np.sum(dx1 * dx2, axis=1)
            wp[lo:hi] = np.sum(dp1 * dp2, axis=1)
        hs.append(grid.h)
        ms.append(grid.m)
        for name, arr in (("strong_x", sx), ("strong_p", sp), ("weak_x", wx), ("weak_p", wp)):
            cols[name][0].append(float(arr.mean()))
            cols[name][1].append(float(arr.std(ddof=1) / np.sqrt(n_paths)))

    h_arr = np.asarray(hs)
    slopes: dict[str, SlopeFit] = {}
    for name, (vals, _) in cols.items():
        v = np.asarray(vals)
        if v.size >= 3 and np.all(v > 0.0):
            slopes[name] = fit_loglog_slope(h_arr, v)
    return LocalErrorReport(
        scheme=scheme,
        h=h_arr,
        m=np.asarray(ms, dtype=int),
        strong_x=np.asarray(cols["strong_x"][0]),
        strong_x_se=np.asarray(cols["strong_x"][1]),
        strong_p=np.asarray(cols["strong_p"][0]),
        strong_p_se=np.asarray(cols["strong_p"][1]),
        weak_x=np.asarray(cols["weak_x"][0]),
        weak_x_se=np.asarray(cols["weak_x"][1]),
        weak_p=np.asarray(cols["weak_p"][0]),
        weak_p_se=np.asarray(cols["weak_p"][1]),
        n_paths=n_paths,
        slopes=slopes,
    )
