"""Named experiments over the weight machinery, with deterministic CSV reports.

Each experiment consumes a validated :class:`~girsanovlab.config.ExperimentConfig`,
produces rows for a versioned CSV schema, and evaluates built-in pass/fail
thresholds.  All numeric CSV content is a deterministic function of
(config, seed) — independent of thread count and wall clock — so re-running a
config reproduces the file byte for byte.  Per-row runtimes are kept on the
in-memory rows for console display but never written to the CSV.

CSV schemas (version tag in the first ``#`` comment line):

* ``report-v1``: experiment, config_hash, h, d, q, m, gamma, estimate, se,
  slope, rejections, status.  Used by normalization, adapted-equivalence,
  fd-malliavin, eta-refinement, kl-order-sweep, trace-diagnostics.
  The q column holds the divergence order (1 = KL) where applicable.
* ``local-error-v1``: per-h strong/weak squared one-step errors with their
  standard errors, position and momentum separately.
* ``complexity-v1``: per (scheme, epsilon) rows of the gradient-query table,
  plus fitted-exponent rows.

Not-applicable cells are left empty.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .affine import quadratic_path_kl, scheme_marginal_gaussian, step_maps_for_schedule
from .config import ExperimentConfig
from .divergences import (
    REJECTION_RELIABILITY_LIMIT,
    estimate_kl,
    estimate_renyi,
    fit_loglog_slope,
    gaussian_kl,
    local_error_sweep,
    stationary_moments,
)
from .engine import GRAD_QUERIES_PER_STEP, generic_log_weights, run_weights
from .girsanov import (
    drift_dmulmc,
    drift_mlmc,
    drift_ulmc,
    malliavin_blocks_dmulmc,
    malliavin_blocks_mlmc,
    malliavin_blocks_ulmc,
    trace_diagnostics_mlmc,
)
from .integrators import simulate_dmulmc, simulate_mlmc, simulate_ulmc
from .paths import (
    LABEL_INIT,
    NoisePath,
    OverdampedSchedule,
    TimeGrid,
    UnderdampedSchedule,
    noise_matrix,
    normal_block,
    refine_noise,
)
from .potentials import AnisotropicQuadratic, IsotropicQuadratic, Potential

__all__ = [
    "Check",
    "RunResult",
    "EXPERIMENT_CRITERIA",
    "KL_SLOPE_THRESHOLDS",
    "run",
    "run_experiment",
]

CSV_SCHEMA_REPORT = "report-v1"
CSV_SCHEMA_LOCAL = "local-error-v1"
CSV_SCHEMA_COMPLEXITY = "complexity-v1"

REPORT_COLUMNS = (
    "experiment", "config_hash", "h", "d", "q", "m", "gamma",
    "estimate", "se", "slope", "rejections", "status",
)
LOCAL_COLUMNS = (
    "experiment", "config_hash", "h", "d", "m", "gamma",
    "strong_x", "strong_x_se", "strong_p", "strong_p_se",
    "weak_x", "weak_x_se", "weak_p", "weak_p_se", "status",
)
COMPLEXITY_COLUMNS = (
    "experiment", "config_hash", "scheme", "epsilon", "d", "m", "gamma",
    "h", "n_steps", "queries", "kl", "marginal_kl", "exponent", "status",
)

#: acceptance criteria each experiment exercises (documentation + summaries)
EXPERIMENT_CRITERIA = {
    "normalization": (1,),
    "adapted-equivalence": (2,),
    "fd-malliavin": (3,),
    "eta-refinement": (9,),
    "kl-order-sweep": (6, 7, 10),
    "local-error-sweep": (8,),
    "trace-diagnostics": (5,),
    "complexity-table": (12,),
}

#: one-sided log-log slope thresholds for the KL order sweep: the
#: bound-implied decay order minus the 0.5 fitting tolerance (0.2 for the
#: overdamped midpoint, whose acceptance threshold is pinned at 0.8).
KL_SLOPE_THRESHOLDS = {"em-ld": 0.5, "mlmc": 0.8, "ulmc": 1.5, "dmulmc": 2.5}

#: momentum local-error slope thresholds for the double-midpoint scheme
#: (squared-error slopes: strong bound h^5, weak bound h^6, minus 0.5).
LOCAL_ERROR_THRESHOLDS = {"dmulmc": {"strong_p": 4.5, "weak_p": 5.5}}

#: trace gaps must at least nearly halve per inner-grid doubling
TRACE_GAP_RATIO_LIMIT = 1.0 / 1.7

#: finite-difference agreement for derivative blocks
FD_REL_TOL = 1e-5
FD_ABS_FLOOR = 1e-10
FD_PROBE = 1e-5

#: built-in accuracy ladder and search cap for the complexity table
EPSILON_LADDER = (0.18, 0.12, 0.08, 0.05, 0.03)
COMPLEXITY_STEP_CAP = 2**14


@dataclass(frozen=True)
class Check:
    """One built-in threshold evaluation of an experiment."""

    label: str
    passed: bool
    detail: str


@dataclass
class RunResult:
    """Rows, rendered CSV text, and threshold outcomes of one experiment."""

    experiment: str
    config_hash: str
    schema: str
    columns: tuple[str, ...]
    rows: list[dict]
    checks: list[Check]
    csv_text: str = ""
    csv_path: str | None = None
    runtime_ms: dict[int, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def summary_lines(self) -> list[str]:
        lines = []
        for c in self.checks:
            lines.append(f"[{self.experiment}] {c.label}: {c.detail}: "
                         f"{'PASS' if c.passed else 'FAIL'}")
        return lines


def _fmt(value) -> str:
    """CSV cell: 17 significant digits for floats, plain ints, '' for n/a."""
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return "%.17g" % float(value)


def render_csv(result: RunResult, cfg: ExperimentConfig) -> str:
    lines = [
        f"# girsanovlab csv schema {result.schema}",
        f"# experiment={cfg.experiment} config_hash={cfg.config_hash} seed={cfg.seed}",
        ",".join(result.columns),
    ]
    for row in result.rows:
        lines.append(",".join(_fmt(row.get(col)) for col in result.columns))
    return "\n".join(lines) + "\n"


def _base_row(cfg: ExperimentConfig, **kv) -> dict:
    row = {
        "experiment": cfg.experiment,
        "config_hash": cfg.config_hash,
        "d": cfg.potential.d,
        "gamma": cfg.gamma if cfg.scheme in ("ulmc", "dmulmc") else None,
        "status": "ok",
    }
    row.update(kv)
    return row


def _build_schedule(scheme: str, grid: TimeGrid, mode: str, seed: int, stream: int = 0):
    """Schedule object for a scheme, or None for schedule-free schemes."""
    if scheme == "em-ld":
        return OverdampedSchedule.zero(grid)
    if scheme == "mlmc":
        if mode == "deterministic":
            return OverdampedSchedule.deterministic(grid)
        if mode == "zero":
            return OverdampedSchedule.zero(grid)
        return OverdampedSchedule.randomized(grid, seed, stream)
    if scheme == "ulmc":
        return None
    if mode == "deterministic":
        return UnderdampedSchedule.deterministic(grid)
    if mode == "zero":
        zeros = np.zeros(grid.N, dtype=int)
        return UnderdampedSchedule(grid, zeros, zeros.copy())
    return UnderdampedSchedule.randomized(grid, seed, stream)


def _default_init(potential: Potential, kinetic: bool):
    """Stationary start when available, else a fixed Gaussian reference."""
    if potential.is_quadratic:
        return "stationary"
    d = potential.d
    scale = potential.alpha if potential.alpha > 0 else 1.0
    cov_x = np.eye(d) / scale
    if not kinetic:
        return ("gaussian", np.zeros(d), cov_x)
    cov = np.zeros((2 * d, 2 * d))
    cov[:d, :d] = cov_x
    cov[d:, d:] = np.eye(d)
    return ("gaussian", np.zeros(2 * d), cov)


def _draw_initial(potential: Potential, kinetic: bool, seed: int, n: int) -> np.ndarray:
    """First n rows of the engine's initialization stream for this seed."""
    init = _default_init(potential, kinetic)
    d = potential.d
    zdim = 2 * d if kinetic else d
    if init == "stationary":
        mean, cov = stationary_moments(potential, kinetic=kinetic)
    else:
        _, mean, cov = init
    chol = np.linalg.cholesky(cov)
    blocks = []
    from .paths import BLOCK_PATHS

    for block in range((n + BLOCK_PATHS - 1) // BLOCK_PATHS):
        rows = normal_block(seed, 1, zdim, block, label=LABEL_INIT)[:, 0]
        blocks.append(rows)
    normals = np.concatenate(blocks, axis=0)[:n]
    return mean + normals @ chol.T


# ---------------------------------------------------------------------------
# normalization: E[M] = 1
# ---------------------------------------------------------------------------


def _run_normalization(cfg: ExperimentConfig, threads: int) -> RunResult:
    result = RunResult(cfg.experiment, cfg.config_hash, CSV_SCHEMA_REPORT,
                       REPORT_COLUMNS, [], [])
    for i, grid in enumerate(cfg.grids()):
        t0 = time.perf_counter()
        schedule = _build_schedule(cfg.scheme, grid, cfg.schedule_mode, cfg.seed, i)
        wr = run_weights(
            cfg.scheme, cfg.potential, schedule=schedule, grid=grid,
            gamma=cfg.gamma, n_paths=cfg.n_paths, seed=cfg.seed,
            init=_default_init(cfg.potential, cfg.scheme in ("ulmc", "dmulmc")),
            threads=threads,
        )
        logw = wr.log_weight[wr.invertible]
        with np.errstate(over="ignore"):
            w = np.exp(logw)
        ok = w.size >= 2 and bool(np.all(np.isfinite(w)))
        est = float(np.mean(w)) if ok else float("inf")
        se = float(np.std(w, ddof=1) / np.sqrt(w.size)) if ok else float("inf")
        row = _base_row(
            cfg, h=grid.h, q=None, m=grid.m, estimate=est, se=se, slope=None,
            rejections=wr.n_rejected, status="ok" if ok else "failed",
        )
        result.rows.append(row)
        result.runtime_ms[len(result.rows) - 1] = 1e3 * (time.perf_counter() - t0)
        gap = abs(est - 1.0)
        passed = ok and gap <= 3.0 * se and se <= 0.01
        result.checks.append(Check(
            f"h={grid.h:g} weight normalization",
            passed,
            f"|mean(M) - 1| = {gap:.3g} vs 3*SE = {3 * se:.3g}, SE = {se:.3g} <= 0.01",
        ))
    return result


# ---------------------------------------------------------------------------
# adapted-equivalence: frozen-gradient overdamped weights match the classical
# adapted change of measure, with an exactly vanishing determinant correction
# ---------------------------------------------------------------------------


def _run_adapted_equivalence(cfg: ExperimentConfig, threads: int) -> RunResult:
    result = RunResult(cfg.experiment, cfg.config_hash, CSV_SCHEMA_REPORT,
                       REPORT_COLUMNS, [], [])
    if cfg.scheme != "em-ld":
        raise ValueError(
            "the adapted-equivalence experiment applies to the EM-LD scheme "
            f"(got {cfg.scheme_label!r})"
        )
    potential = cfg.potential
    d = potential.d
    for grid in cfg.grids():
        t0 = time.perf_counter()
        schedule = OverdampedSchedule.zero(grid)
        n = cfg.n_paths
        x0 = _draw_initial(potential, False, cfg.seed, n)
        xi = noise_matrix(cfg.seed, n, grid.n_cells, d)
        traj = simulate_mlmc(potential, schedule, x0, xi)
        drift = drift_mlmc(potential, traj)
        blocks = malliavin_blocks_mlmc(potential, traj, q=1.0)
        lw = generic_log_weights("em-ld", potential, schedule, grid, None, x0, xi)
        # classical adapted exponent: -sum psi.xi - energy (Ito integral form)
        ito = np.einsum("bid,bid->b", drift.psi, xi.reshape(n, grid.n_cells, d))
        classical = -ito - drift.energy
        max_cf = float(np.max(np.abs(lw.log_cf_det)))
        max_diff = float(np.max(np.abs(lw.log_weight - classical)))
        max_trace = float(np.max(np.abs(
            np.trace(blocks.diag, axis1=-2, axis2=-1))))
        row = _base_row(
            cfg, h=grid.h, q=None, m=grid.m, estimate=max_diff, se=None,
            slope=None, rejections=int((~lw.invertible).sum()), status="ok",
        )
        result.rows.append(row)
        result.runtime_ms[len(result.rows) - 1] = 1e3 * (time.perf_counter() - t0)
        result.checks.append(Check(
            f"h={grid.h:g} determinant correction vanishes",
            max_cf == 0.0 and max_trace == 0.0,
            f"max |log_cf_det| = {max_cf:.3g} (exact zero required)",
        ))
        result.checks.append(Check(
            f"h={grid.h:g} classical Girsanov agreement",
            max_diff <= 1e-10,
            f"max |log_weight - classical| = {max_diff:.3g} <= 1e-10",
        ))
    return result


# ---------------------------------------------------------------------------
# fd-malliavin: analytic derivative blocks vs central finite differences
# ---------------------------------------------------------------------------


def _simulate_and_drift(scheme: str, potential: Potential, schedule, grid: TimeGrid,
                        gamma, z0: np.ndarray, xi: np.ndarray):
    """(trajectory, drift) for any scheme, from explicit noise and start."""
    d = potential.d
    if scheme in ("em-ld", "mlmc"):
        traj = simulate_mlmc(potential, schedule, z0, xi)
        return traj, drift_mlmc(potential, traj)
    if scheme == "ulmc":
        traj = simulate_ulmc(potential, grid, gamma, z0[:, :d], z0[:, d:], xi)
        return traj, drift_ulmc(potential, traj)
    traj = simulate_dmulmc(potential, schedule, gamma, z0[:, :d], z0[:, d:], xi)
    return traj, drift_dmulmc(traj)


def _analytic_full_blocks(scheme: str, potential: Potential, traj) -> np.ndarray:
    if scheme in ("em-ld", "mlmc"):
        return malliavin_blocks_mlmc(potential, traj, q=1.0, include_offdiag=True).full
    if scheme == "ulmc":
        return malliavin_blocks_ulmc(potential, traj, q=1.0, include_offdiag=True).full
    return malliavin_blocks_dmulmc(potential, traj, q=1.0, include_offdiag=True).full


def _run_fd_malliavin(cfg: ExperimentConfig, threads: int) -> RunResult:
    result = RunResult(cfg.experiment, cfg.config_hash, CSV_SCHEMA_REPORT,
                       REPORT_COLUMNS, [], [])
    potential = cfg.potential
    d = potential.d
    kinetic = cfg.scheme in ("ulmc", "dmulmc")
    n = min(cfg.n_paths, 64)  # derivative checks need few paths
    for i, grid in enumerate(cfg.grids()):
        t0 = time.perf_counter()
        schedule = _build_schedule(cfg.scheme, grid, cfg.schedule_mode, cfg.seed, i)
        z0 = _draw_initial(potential, kinetic, cfg.seed, n)
        xi = noise_matrix(cfg.seed, n, grid.n_cells, d)
        traj, _ = _simulate_and_drift(cfg.scheme, potential, schedule, grid,
                                      cfg.gamma, z0, xi)
        analytic = _analytic_full_blocks(cfg.scheme, potential, traj)
        s = grid.n_cells * d
        numeric = np.empty((n, s, s))
        for cell in range(grid.n_cells):
            for a in range(d):
                col = cell * d + a
                for sign in (+1.0, -1.0):
                    pert = xi.copy()
                    pert[:, cell, a] += sign * FD_PROBE
                    _, dr = _simulate_and_drift(cfg.scheme, potential, schedule,
                                                grid, cfg.gamma, z0, pert)
                    flat = dr.psi.reshape(n, s)
                    if sign > 0:
                        numeric[:, :, col] = flat
                    else:
                        numeric[:, :, col] -= flat
        numeric /= 2.0 * FD_PROBE
        scaled = np.abs(analytic - numeric) / np.maximum(
            np.abs(analytic), FD_ABS_FLOOR / FD_REL_TOL)
        worst = float(scaled.max())
        row = _base_row(
            cfg, h=grid.h, q=None, m=grid.m, estimate=worst, se=None,
            slope=None, rejections=0, status="ok",
        )
        result.rows.append(row)
        result.runtime_ms[len(result.rows) - 1] = 1e3 * (time.perf_counter() - t0)
        result.checks.append(Check(
            f"h={grid.h:g} derivative blocks vs finite differences",
            worst <= FD_REL_TOL,
            f"max scaled error = {worst:.3g} <= {FD_REL_TOL:g} "
            f"(relative, absolute floor {FD_ABS_FLOOR:g})",
        ))
    return result


# ---------------------------------------------------------------------------
# eta-refinement: log-weight stability under nested inner-grid refinement
# ---------------------------------------------------------------------------


def _refine_noise_batch(xi: np.ndarray, seed: int, level: int) -> np.ndarray:
    out = np.empty((xi.shape[0], 2 * xi.shape[1], xi.shape[2]))
    for b in range(xi.shape[0]):
        path = NoisePath(xi=xi[b], seed=seed, stream=b, level=level)
        out[b] = refine_noise(path).xi
    return out


def _run_eta_refinement(cfg: ExperimentConfig, threads: int,
                        n_doublings: int = 4) -> RunResult:
    result = RunResult(cfg.experiment, cfg.config_hash, CSV_SCHEMA_REPORT,
                       REPORT_COLUMNS, [], [])
    potential = cfg.potential
    d = potential.d
    kinetic = cfg.scheme in ("ulmc", "dmulmc")
    n = min(cfg.n_paths, 100)
    for i, grid in enumerate(cfg.grids()):
        t0 = time.perf_counter()
        schedule = _build_schedule(cfg.scheme, grid, cfg.schedule_mode, cfg.seed, i)
        z0 = _draw_initial(potential, kinetic, cfg.seed, n)
        xi = noise_matrix(cfg.seed, n, grid.n_cells, d)
        cur_grid, cur_schedule, cur_xi = grid, schedule, xi
        logws = []
        keep = np.ones(n, dtype=bool)
        for level in range(n_doublings + 1):
            lw = generic_log_weights(cfg.scheme, potential, cur_schedule,
                                     cur_grid, cfg.gamma, z0, cur_xi)
            logws.append(lw.log_weight)
            keep &= lw.invertible
            if level < n_doublings:
                cur_xi = _refine_noise_batch(cur_xi, cfg.seed, level)
                if cur_schedule is not None:
                    cur_schedule = cur_schedule.refined()
                    cur_grid = cur_schedule.grid
                else:
                    cur_grid = cur_grid.refined()
        n_rej = int((~keep).sum())
        gaps = []
        for level in range(n_doublings):
            delta = np.abs(logws[level + 1][keep] - logws[level][keep])
            gaps.append(float(delta.max()) if delta.size else float("nan"))
            row = _base_row(
                cfg, h=grid.h, q=None, m=grid.m * 2**level, estimate=gaps[-1],
                se=None, slope=None, rejections=n_rej, status="ok",
            )
            result.rows.append(row)
        result.runtime_ms[len(result.rows) - 1] = 1e3 * (time.perf_counter() - t0)
        decreasing = all(gaps[j + 1] < gaps[j] for j in range(len(gaps) - 1))
        gap_text = " > ".join(f"{g:.3g}" for g in gaps)
        result.checks.append(Check(
            f"h={grid.h:g} log-weight refinement stability",
            decreasing and n_rej == 0,
            f"max |log_weight(m) - log_weight(2m)| sequence {gap_text} "
            f"({n_rej} rejected)",
        ))
    return result


# ---------------------------------------------------------------------------
# kl-order-sweep: KL(P||Q) decay order in h, with the marginal lower bound
# ---------------------------------------------------------------------------


def _run_kl_order_sweep(cfg: ExperimentConfig, threads: int) -> RunResult:
    result = RunResult(cfg.experiment, cfg.config_hash, CSV_SCHEMA_REPORT,
                       REPORT_COLUMNS, [], [])
    potential = cfg.potential
    kinetic = cfg.scheme in ("ulmc", "dmulmc")
    init = _default_init(potential, kinetic)
    hs, kls, ses = [], [], []
    for i, grid in enumerate(cfg.grids()):
        t0 = time.perf_counter()
        schedule = _build_schedule(cfg.scheme, grid, cfg.schedule_mode, cfg.seed, i)
        wr = run_weights(
            cfg.scheme, potential, schedule=schedule, grid=grid, gamma=cfg.gamma,
            n_paths=cfg.n_paths, seed=cfg.seed, init=init, threads=threads,
        )
        est = estimate_kl(wr)
        ok = est.reliable and np.isfinite(est.value)
        row = _base_row(
            cfg, h=grid.h, q=1.0, m=grid.m, estimate=est.value, se=est.se,
            slope=None, rejections=est.n_rejected,
            status="ok" if ok else "failed",
        )
        result.rows.append(row)
        result.runtime_ms[len(result.rows) - 1] = 1e3 * (time.perf_counter() - t0)
        if not est.reliable:
            result.checks.append(Check(
                f"h={grid.h:g} rejection rate",
                False,
                f"{est.n_rejected} of {cfg.n_paths} paths rejected "
                f"(> {100 * REJECTION_RELIABILITY_LIMIT:g}% invalidates the estimate)",
            ))
        hs.append(grid.h)
        kls.append(est.value)
        ses.append(est.se)
        for q in cfg.q_list:
            if q > 1.0:
                renyi = estimate_renyi(wr, q)
                result.rows.append(_base_row(
                    cfg, h=grid.h, q=q, m=grid.m, estimate=renyi.value,
                    se=renyi.se, slope=None, rejections=renyi.n_rejected,
                    status="ok" if renyi.reliable else "failed",
                ))
        if potential.is_quadratic:
            mean0, cov0 = stationary_moments(potential, kinetic=kinetic)
            sm_mean, sm_cov = scheme_marginal_gaussian(
                cfg.scheme, potential, schedule if schedule is not None else grid,
                mean0, cov0, gamma=cfg.gamma)
            marginal = gaussian_kl(sm_mean, sm_cov, mean0, cov0)
            bound_ok = marginal <= est.value + 3.0 * est.se
            result.checks.append(Check(
                f"h={grid.h:g} marginal lower bound",
                bool(bound_ok),
                f"gaussian_kl(marginals) = {marginal:.3g} <= "
                f"path KL {est.value:.3g} + 3*SE = {est.value + 3 * est.se:.3g}",
            ))
    finite = [(h, k) for h, k in zip(hs, kls) if np.isfinite(k) and k > 0]
    monotone = all(kls[j + 1] < kls[j] for j in range(len(kls) - 1))
    result.checks.append(Check(
        "KL estimates decrease monotonically in h",
        monotone and len(finite) == len(kls),
        "KL sequence " + " > ".join(f"{k:.4g}" for k in kls),
    ))
    threshold = KL_SLOPE_THRESHOLDS[cfg.scheme]
    if len(finite) >= 3:
        fit = fit_loglog_slope(np.array([f[0] for f in finite]),
                               np.array([f[1] for f in finite]))
        result.rows.append(_base_row(
            cfg, h=None, q=1.0, m=None, estimate=fit.slope, se=None,
            slope=fit.slope, rejections=None, status="ok",
        ))
        result.checks.append(Check(
            "fitted KL decay order",
            fit.slope >= threshold,
            f"log-log slope {fit.slope:.3f} >= {threshold:g} "
            f"(R^2 = {fit.r_squared:.4f})",
        ))
    else:
        result.checks.append(Check(
            "fitted KL decay order", False,
            f"only {len(finite)} positive finite estimates; need >= 3 for a fit",
        ))
    return result


# ---------------------------------------------------------------------------
# local-error-sweep: one-step strong/weak errors under synchronous coupling
# ---------------------------------------------------------------------------


def _run_local_error_sweep(cfg: ExperimentConfig, threads: int) -> RunResult:
    result = RunResult(cfg.experiment, cfg.config_hash, CSV_SCHEMA_LOCAL,
                       LOCAL_COLUMNS, [], [])
    potential = cfg.potential
    if not potential.is_quadratic:
        raise ValueError(
            "the local-error sweep couples against the exact Gaussian flow "
            "and needs a quadratic potential"
        )
    kinetic = cfg.scheme in ("ulmc", "dmulmc")
    grids = [TimeGrid(h, 1, m) for h, m in zip(cfg.h_list, cfg.m_list)]
    t0 = time.perf_counter()
    report = local_error_sweep(
        cfg.scheme, potential, grids, gamma=cfg.gamma,
        n_paths=cfg.n_paths, seed=cfg.seed,
    )
    for i, grid in enumerate(grids):
        result.rows.append({
            "experiment": cfg.experiment,
            "config_hash": cfg.config_hash,
            "h": grid.h,
            "d": potential.d,
            "m": grid.m,
            "gamma": cfg.gamma if kinetic else None,
            "strong_x": report.strong_x[i], "strong_x_se": report.strong_x_se[i],
            "strong_p": report.strong_p[i], "strong_p_se": report.strong_p_se[i],
            "weak_x": report.weak_x[i], "weak_x_se": report.weak_x_se[i],
            "weak_p": report.weak_p[i], "weak_p_se": report.weak_p_se[i],
            "status": "ok",
        })
    result.runtime_ms[0] = 1e3 * (time.perf_counter() - t0)
    thresholds = LOCAL_ERROR_THRESHOLDS.get(cfg.scheme, {})
    lx = np.log(np.asarray(report.h, dtype=float))
    mx = lx.mean()
    sxx = float(np.sum((lx - mx) ** 2))
    coef = (lx - mx) / sxx
    for name in ("strong_x", "strong_p", "weak_x", "weak_p"):
        values = np.asarray(getattr(report, name), dtype=float)
        se_vals = np.asarray(getattr(report, name + "_se"), dtype=float)
        fit = report.slopes.get(name)
        if fit is None:
            if name in thresholds:
                result.checks.append(Check(
                    f"{name} squared-error decay order", False,
                    "column has non-positive entries; no log-log fit possible",
                ))
            continue
        if name in thresholds:
            if np.all(values > 0):
                # slope standard error propagated from the per-point SEs
                slope_se = float(np.sqrt(np.sum(coef**2 * (se_vals / values) ** 2)))
            else:
                slope_se = float("inf")
            bound = thresholds[name]
            passed = np.all(values > 0) and fit.slope - slope_se >= bound
            result.checks.append(Check(
                f"{name} squared-error decay order",
                bool(passed),
                f"slope {fit.slope:.3f} - SE {slope_se:.3f} >= {bound:g}",
            ))
        else:
            result.checks.append(Check(
                f"{name} squared-error decay order (informational)",
                True,
                f"slope {fit.slope:.3f} (R^2 = {fit.r_squared:.4f})",
            ))
    return result


# ---------------------------------------------------------------------------
# trace-diagnostics: discrete block traces against their refinement limits
# ---------------------------------------------------------------------------


def _run_trace_diagnostics(cfg: ExperimentConfig, threads: int) -> RunResult:
    result = RunResult(cfg.experiment, cfg.config_hash, CSV_SCHEMA_REPORT,
                       REPORT_COLUMNS, [], [])
    if cfg.scheme != "mlmc":
        raise ValueError(
            "trace diagnostics are defined for the overdamped midpoint scheme "
            f"(got {cfg.scheme_label!r})"
        )
    potential = cfg.potential
    d = potential.d
    n = min(cfg.n_paths, 4096)
    gaps = []
    zero_ok = True
    for i, grid in enumerate(cfg.grids()):
        t0 = time.perf_counter()
        schedule = _build_schedule(cfg.scheme, grid, cfg.schedule_mode, cfg.seed, i)
        x0 = _draw_initial(potential, False, cfg.seed, n)
        xi = noise_matrix(cfg.seed, n, grid.n_cells, d)
        traj = simulate_mlmc(potential, schedule, x0, xi)
        diag = trace_diagnostics_mlmc(potential, traj)
        zero_ok &= bool(np.all(diag.tr_a2 == 0.0))
        per_path = np.maximum(
            np.abs(diag.tr_ba - diag.limit_ba),
            np.abs(diag.tr_b2 - diag.limit_b2),
        ).mean(axis=1)
        est = float(per_path.mean())
        se = float(per_path.std(ddof=1) / np.sqrt(n))
        gaps.append(est)
        result.rows.append(_base_row(
            cfg, h=grid.h, q=None, m=grid.m, estimate=est, se=se, slope=None,
            rejections=0, status="ok",
        ))
        result.runtime_ms[len(result.rows) - 1] = 1e3 * (time.perf_counter() - t0)
    result.checks.append(Check(
        "strictly-triangular trace vanishes",
        zero_ok,
        "tr(A^2) = 0 exactly on every path and step",
    ))
    doubling = [j for j in range(len(gaps) - 1)
                if cfg.m_list[j + 1] == 2 * cfg.m_list[j]]
    for j in doubling:
        ratio = gaps[j + 1] / gaps[j] if gaps[j] > 0 else float("inf")
        result.checks.append(Check(
            f"trace gap halves from m={cfg.m_list[j]} to m={cfg.m_list[j + 1]}",
            ratio <= TRACE_GAP_RATIO_LIMIT,
            f"gap ratio {ratio:.3f} <= {TRACE_GAP_RATIO_LIMIT:.3f}",
        ))
    if not doubling:
        result.checks.append(Check(
            "trace gap halving", False,
            "config has no m-doubling pairs; give grids with doubled m",
        ))
    return result


# ---------------------------------------------------------------------------
# complexity-table: gradient queries to reach epsilon accuracy (qualitative)
# ---------------------------------------------------------------------------


def _complexity_kls(scheme: str, potential: Potential, T: float, n_steps: int,
                    m: int, gamma) -> tuple[float, float]:
    """(path KL, marginal KL certificate) of a scheme at stationary start.

    The path-space KL between the scheme law and the diffusion law is the
    quantity the change-of-measure machinery bounds, and by data processing
    it dominates the marginal gaussian_kl at the horizon — the second value
    returned, which certifies the marginal accuracy the table claims.
    """
    grid = TimeGrid(T, n_steps, m)
    kinetic = scheme in ("ulmc", "dmulmc")
    if scheme == "mlmc":
        schedule = OverdampedSchedule.deterministic(grid)
    elif scheme == "em-ld":
        schedule = OverdampedSchedule.zero(grid)
    elif scheme == "dmulmc":
        schedule = UnderdampedSchedule.deterministic(grid)
    else:
        schedule = grid
    mean0, cov0 = stationary_moments(potential, kinetic=kinetic)
    maps = step_maps_for_schedule(scheme, potential, schedule,
                                  gamma=gamma if kinetic else None)
    path_kl = quadratic_path_kl(maps, mean0, cov0)
    mean, cov = scheme_marginal_gaussian(scheme, potential, schedule, mean0,
                                         cov0, gamma=gamma)
    return path_kl, gaussian_kl(mean, cov, mean0, cov0)


def _dm_inner_cells(n_steps: int, T: float) -> int:
    """Inner resolution rule for the double-midpoint scheme: m ~ h^{-3/2}.

    Balances the inner-quadrature contribution to the weight against the
    scheme's h^3 path-KL decay so the fitted order reflects the scheme, not
    the inner grid; gradient queries per step do not depend on m.
    """
    h = T / n_steps
    return max(3, int(np.ceil(3.0 * (1.0 / (8.0 * h)) ** 1.5)))


def _step_bound_floor(scheme: str, potential: Potential, T: float,
                      q_max: float) -> int:
    if scheme == "mlmc":
        bound = 1.0 / (potential.beta * q_max)
    elif scheme == "dmulmc":
        bound = 0.5 / np.sqrt(potential.beta * q_max)
    else:
        bound = np.inf
    if not np.isfinite(bound):
        return 1
    return max(1, int(np.ceil(T / bound - 1e-12)))


def _search_steps(scheme: str, potential: Potential, T: float, m_cfg: int,
                  gamma, eps2: float, q_max: float
                  ) -> tuple[int | None, float, float]:
    """Smallest step count with path KL <= eps^2 (largest usable h).

    Returns (n_steps, path KL, marginal KL); n_steps is None when the cap is
    exhausted, with the last evaluated values reported.
    """

    def kl_at(n_steps: int) -> tuple[float, float]:
        m = _dm_inner_cells(n_steps, T) if scheme == "dmulmc" else m_cfg
        return _complexity_kls(scheme, potential, T, n_steps, m, gamma)

    lo = _step_bound_floor(scheme, potential, T, q_max)
    value, marginal = kl_at(lo)
    if value <= eps2:
        return lo, value, marginal
    hi = lo
    while True:
        hi *= 2
        if hi > COMPLEXITY_STEP_CAP:
            return None, value, marginal
        value, marginal = kl_at(hi)
        if value <= eps2:
            break
    lo_fail = hi // 2
    while hi - lo_fail > 1:
        mid = (hi + lo_fail) // 2
        if kl_at(mid)[0] <= eps2:
            hi = mid
        else:
            lo_fail = mid
    value, marginal = kl_at(hi)
    return hi, value, marginal


def _double_dimension(potential: Potential) -> Potential:
    if isinstance(potential, IsotropicQuadratic):
        return IsotropicQuadratic(2 * potential.d, potential.beta)
    if isinstance(potential, AnisotropicQuadratic):
        return AnisotropicQuadratic(np.tile(potential.spectrum, 2))
    raise ValueError("dimension doubling needs a quadratic potential")


def _run_complexity_table(cfg: ExperimentConfig, threads: int) -> RunResult:
    result = RunResult(cfg.experiment, cfg.config_hash, CSV_SCHEMA_COMPLEXITY,
                       COMPLEXITY_COLUMNS, [], [])
    potential = cfg.potential
    if not potential.is_quadratic:
        raise ValueError(
            "the complexity table measures accuracy via gaussian_kl and "
            "needs a quadratic potential"
        )
    T = cfg.T
    m_cfg = cfg.m_list[0]
    q_max = max(cfg.q_list)
    t0 = time.perf_counter()
    exponents: dict[str, float] = {}
    certificate_ok = True
    for scheme in ("mlmc", "ulmc", "dmulmc"):
        gamma = cfg.gamma if cfg.gamma is not None else float(np.sqrt(potential.beta))
        gamma = gamma if scheme in ("ulmc", "dmulmc") else None
        points = []
        for eps in EPSILON_LADDER:
            n_steps, kl, marginal = _search_steps(scheme, potential, T, m_cfg,
                                                  gamma, eps * eps, q_max)
            m_used = (_dm_inner_cells(n_steps or 1, T) if scheme == "dmulmc"
                      else m_cfg)
            row = {
                "experiment": cfg.experiment,
                "config_hash": cfg.config_hash,
                "scheme": scheme,
                "epsilon": eps,
                "d": potential.d,
                "m": m_used,
                "gamma": gamma,
                "h": (T / n_steps) if n_steps else None,
                "n_steps": n_steps,
                "queries": (n_steps * GRAD_QUERIES_PER_STEP[scheme]
                            if n_steps else None),
                "kl": kl if n_steps else None,
                "marginal_kl": marginal if n_steps else None,
                "exponent": None,
                "status": "ok" if n_steps else "unreachable",
            }
            result.rows.append(row)
            if n_steps is not None:
                certificate_ok &= marginal <= kl <= eps * eps
                points.append((1.0 / eps, n_steps))
        if len(points) >= 3:
            fit = fit_loglog_slope(np.array([p[0] for p in points]),
                                   np.array([p[1] for p in points], dtype=float))
            exponents[scheme] = fit.slope
            result.rows.append({
                "experiment": cfg.experiment,
                "config_hash": cfg.config_hash,
                "scheme": scheme,
                "d": potential.d,
                "gamma": gamma,
                "exponent": fit.slope,
                "status": "ok",
            })
    result.runtime_ms[0] = 1e3 * (time.perf_counter() - t0)
    result.checks.append(Check(
        "marginal accuracy certificate",
        certificate_ok,
        "gaussian_kl(marginals) <= path KL <= eps^2 on every reachable row",
    ))
    have_all = all(s in exponents for s in ("mlmc", "ulmc", "dmulmc"))
    if have_all:
        e_m, e_u, e_d = exponents["mlmc"], exponents["ulmc"], exponents["dmulmc"]
        result.checks.append(Check(
            "step-count exponent ordering (qualitative)",
            e_d <= e_u <= e_m,
            f"N ~ (1/eps)^a with a: double-midpoint {e_d:.3f} <= "
            f"frozen-gradient {e_u:.3f} <= overdamped midpoint {e_m:.3f}",
        ))
    else:
        result.checks.append(Check(
            "step-count exponent ordering (qualitative)", False,
            "some scheme had fewer than 3 reachable accuracy targets",
        ))
    # dimension-doubling ordering at a mid-ladder accuracy
    eps_mid = EPSILON_LADDER[len(EPSILON_LADDER) // 2]
    doubled = _double_dimension(potential)
    factors = {}
    for scheme in ("mlmc", "dmulmc"):
        gamma = None
        if scheme == "dmulmc":
            gamma = cfg.gamma if cfg.gamma is not None else float(np.sqrt(potential.beta))
        pair = []
        for pot in (potential, doubled):
            n_steps, kl, marginal = _search_steps(scheme, pot, T, m_cfg, gamma,
                                                  eps_mid * eps_mid, q_max)
            m_used = (_dm_inner_cells(n_steps or 1, T) if scheme == "dmulmc"
                      else m_cfg)
            result.rows.append({
                "experiment": cfg.experiment,
                "config_hash": cfg.config_hash,
                "scheme": scheme,
                "epsilon": eps_mid,
                "d": pot.d,
                "m": m_used,
                "gamma": gamma,
                "h": (T / n_steps) if n_steps else None,
                "n_steps": n_steps,
                "queries": (n_steps * GRAD_QUERIES_PER_STEP[scheme]
                            if n_steps else None),
                "kl": kl if n_steps else None,
                "marginal_kl": marginal if n_steps else None,
                "exponent": None,
                "status": "ok" if n_steps else "unreachable",
            })
            pair.append(n_steps)
        if pair[0] and pair[1]:
            factors[scheme] = pair[1] / pair[0]
    if "mlmc" in factors and "dmulmc" in factors:
        result.checks.append(Check(
            "dimension-doubling ordering (qualitative)",
            factors["mlmc"] >= factors["dmulmc"],
            f"doubling d multiplies N by {factors['mlmc']:.3f} (overdamped "
            f"midpoint) >= {factors['dmulmc']:.3f} (double-midpoint)",
        ))
    else:
        result.checks.append(Check(
            "dimension-doubling ordering (qualitative)", False,
            f"accuracy eps = {eps_mid:g} unreachable for some scheme",
        ))
    return result


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


_RUNNERS = {
    "normalization": _run_normalization,
    "adapted-equivalence": _run_adapted_equivalence,
    "fd-malliavin": _run_fd_malliavin,
    "eta-refinement": _run_eta_refinement,
    "kl-order-sweep": _run_kl_order_sweep,
    "local-error-sweep": _run_local_error_sweep,
    "trace-diagnostics": _run_trace_diagnostics,
    "complexity-table": _run_complexity_table,
}


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> RunResult:
    """Execute the named experiment; no file output."""
    result = _RUNNERS[cfg.experiment](cfg, threads)
    result.csv_text = render_csv(result, cfg)
    return result


def run(cfg: ExperimentConfig, threads: int = 1,
        output: str | None = None) -> RunResult:
    """Execute the experiment and write its CSV report.

    The output path comes from ``output``, else the config's ``output`` key,
    else ``<experiment>.csv`` in the working directory.
    """
    result = run_experiment(cfg, threads)
    path = output or cfg.output or f"{cfg.experiment}.csv"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(result.csv_text)
    result.csv_path = path
    return result
