"""Anticipating-Girsanov machinery for midpoint Langevin discretizations.

Given a simulated trajectory, this module assembles the elementary drift
difference ψ between the scheme's path law and the target diffusion, its
Malliavin derivative ∂ψ_i/∂ξ_j as per-step block matrices, the Skorohod
adjoint δψ, the Carleman–Fredholm log-determinant, and the pathwise
log Radon–Nikodym weight

    log M = log|det₂(I + Dψ)| − δψ − ½Σ‖ψ_i‖²,

where det₂ is the Carleman–Fredholm (trace-removed) determinant and
δψ = Σ⟨ψ_i, ξ_i⟩ − tr(Dψ).  M reweights scheme paths into diffusion paths:
E_P[Z(T(ξ))·M] = E_P[Z] with T(ξ) = ξ + ψ(ξ), so E_P[M] = 1 and
KL(P‖Q) = E_P[−log M].

Drift conventions (left-endpoint cell realization, cells i = 0..m−1 per
outer step, √η elementary scaling):

* overdamped midpoint:  ψ_i = √(η/2)·(∇V(X̂_{iη}) − ∇V(X⁺))
* frozen-gradient kinetic:  ψ_i = √(η/(2γ))·(∇V(X̂_{iη}) − ∇V(x₀))
* double-midpoint kinetic:  ψ_i = √(η/(2γ))·(E₁(iη,h)λ₁ + E₂(iη,h)λ₂)

Derivative structure: within a step, ξ_j enters ψ_i directly; across steps
only through the (adapted) step-start state.  The full derivative matrix is
therefore block lower-triangular with the per-step blocks on the diagonal,
det(I + Dψ) = Π_k det(I + D_k), and only diagonal blocks carry trace.  Blocks
store the raw derivative together with the scale q at which they will be
consumed; the log-determinant applies q, the Skorohod trace requires q = 1.

All functions are batched with a leading path axis and are pure; nothing is
shared across paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .integrators import (
    OverdampedTrajectory,
    StepSizeError,
    UnderdampedTrajectory,
)
from .kernels import StepKernels
from .potentials import Potential

__all__ = [
    "DriftRealization",
    "MalliavinBlocks",
    "LogWeight",
    "TraceDiagnostics",
    "drift_mlmc",
    "drift_ulmc",
    "drift_dmulmc",
    "malliavin_blocks_mlmc",
    "malliavin_blocks_ulmc",
    "malliavin_blocks_dmulmc",
    "skorohod_adjoint",
    "carleman_fredholm_logdet",
    "spectral_radius_estimate",
    "rn_log_weight",
    "trace_diagnostics_mlmc",
    "SPECTRAL_RADIUS_LIMIT",
]

#: Invertibility flag threshold on the per-block spectral-radius estimate.
SPECTRAL_RADIUS_LIMIT = 0.9
_POWER_ITERATIONS = 20
_DERIV_TOL = 1e-12
_DERIV_MAX_ITERS = 100


@dataclass(frozen=True)
class DriftRealization:
    """Per-cell elementary drift differences ψ with their energy.

    ``psi`` has shape (B, N·m, d); ``energy`` = ½Σ_i‖ψ_i‖² per path.
    """

    scheme: str
    psi: np.ndarray
    energy: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "energy", 0.5 * np.sum(self.psi**2, axis=(-2, -1)))


@dataclass(frozen=True)
class MalliavinBlocks:
    """Per-step derivative blocks ∂ψ_i/∂ξ_j, raw (unscaled by q).

    ``diag`` has shape (B, N, m·d, m·d): diagonal (within-step) blocks in cell
    ordering, each d×d spatial entry flattened in place.  ``full``, when
    assembled, is the complete (B, N·m·d, N·m·d) block lower-triangular
    derivative including cross-step chains; its diagonal blocks equal
    ``diag``.  ``q`` is applied by consumers, never baked into the arrays.
    """

    scheme: str
    diag: np.ndarray
    q: float
    full: np.ndarray | None = None


@dataclass(frozen=True)
class LogWeight:
    """Pieces of the pathwise log Radon–Nikodym weight, per path.

    ``log_weight = log_cf_det − skorohod − energy``; ``invertible`` is False
    where the spectral-radius diagnostic fails (estimate ≥ 0.9) or a block is
    exactly singular (log_cf_det = −inf); such paths should be excluded by
    estimators and counted as rejections.  ``negative_det`` flags paths where
    some block determinant came out negative despite a passing diagnostic —
    an anomaly counter, expected to stay zero under the scheme step bounds.
    """

    log_cf_det: np.ndarray
    skorohod: np.ndarray
    energy: np.ndarray
    spectral_radius: np.ndarray
    invertible: np.ndarray
    negative_det: np.ndarray

    @property
    def log_weight(self) -> np.ndarray:
        return self.log_cf_det - self.skorohod - self.energy


# ---------------------------------------------------------------------------
# Drift realizations
# ---------------------------------------------------------------------------


def _left_nodes(traj_x: np.ndarray, N: int, m: int) -> np.ndarray:
    """(B, N·m+1, d) nodes → (B, N, m, d) left endpoints of every cell."""
    B, _, d = traj_x.shape
    return traj_x[:, :-1].reshape(B, N, m, d)


def drift_mlmc(potential: Potential, traj: OverdampedTrajectory) -> DriftRealization:
    """ψ_i = √(η/2)·(∇V(X̂_{iη}) − ∇V(X⁺_k)) on each cell of each step."""
    grid = traj.grid
    left = _left_nodes(traj.x, grid.N, grid.m)
    g_nodes = potential.gradient(left)
    g_plus = potential.gradient(traj.x_plus)
    psi = np.sqrt(grid.eta / 2.0) * (g_nodes - g_plus[:, :, None, :])
    return DriftRealization("mlmc", psi.reshape(psi.shape[0], grid.n_cells, -1))


def drift_ulmc(potential: Potential, traj: UnderdampedTrajectory) -> DriftRealization:
    """ψ_i = √(η/(2γ))·(∇V(X̂_{iη}) − ∇V(x_{kh})) for the frozen-gradient scheme."""
    grid = traj.grid
    left = _left_nodes(traj.x, grid.N, grid.m)
    g_nodes = potential.gradient(left)
    g_start = g_nodes[:, :, :1]  # cell 0 of each step sits at the step start
    psi = np.sqrt(grid.eta / (2.0 * traj.gamma)) * (g_nodes - g_start)
    return DriftRealization("ulmc", psi.reshape(psi.shape[0], grid.n_cells, -1))


def drift_dmulmc(traj: UnderdampedTrajectory) -> DriftRealization:
    """ψ_i = √(η/(2γ))·(E₁(iη,h)λ_{k,1} + E₂(iη,h)λ_{k,2}) per cell.

    The multipliers must come from a solved interpolation (the trajectory's
    ``lambda1``/``lambda2`` fields).
    """
    if traj.schedule is None:
        raise ValueError("trajectory carries no interpolation multipliers")
    grid = traj.grid
    kern = StepKernels.build(traj.gamma, grid.h, grid.m)
    # (B, N, m, d) = e-kernels (m,) × multipliers (B, N, d)
    comb = (
        kern.e1_left[:, None] * traj.lambda1[:, :, None, :]
        + kern.e2_left[:, None] * traj.lambda2[:, :, None, :]
    )
    psi = np.sqrt(grid.eta / (2.0 * traj.gamma)) * comb
    return DriftRealization("dmulmc", psi.reshape(psi.shape[0], grid.n_cells, -1))


# ---------------------------------------------------------------------------
# Malliavin blocks
# ---------------------------------------------------------------------------


def _flatten_block(block: np.ndarray) -> np.ndarray:
    """(B, m, d, m, d) cell-indexed entries → (B, m·d, m·d)."""
    B, m, d = block.shape[0], block.shape[1], block.shape[2]
    return block.transpose(0, 1, 2, 3, 4).reshape(B, m * d, m * d)


def malliavin_blocks_mlmc(
    potential: Potential,
    traj: OverdampedTrajectory,
    q: float = 1.0,
    include_offdiag: bool = False,
) -> MalliavinBlocks:
    """Exact derivative blocks of the overdamped midpoint drift.

    Within step k (cells i, j = 0..m−1, H_i = ∇²V(X̂_{iη}), H⁺ = ∇²V(X⁺_k)):

        ∂ψ_i/∂ξ_j = η·[H_i·1_{j<i} − (iη·H_i·H⁺ + H⁺)·1_{j<r_k}],

    the 1_{j<r} column band carrying the anticipating dependence through X⁺.
    Cross-step chains (``include_offdiag``) run through the step-start state.
    """
    grid = traj.grid
    N, m, eta = grid.N, grid.m, grid.eta
    B, d = traj.x.shape[0], traj.x.shape[2]
    left = _left_nodes(traj.x, N, m)
    H_nodes = potential.hessian(left)  # (B, N, m, d, d)
    H_plus = potential.hessian(traj.x_plus)  # (B, N, d, d)

    lower = (np.arange(m)[:, None] > np.arange(m)[None, :]).astype(float)
    i_eta = eta * np.arange(m)
    diag = np.empty((B, N, m * d, m * d))
    for k in range(N):
        r = int(traj.schedule.indices[k])
        colband = (np.arange(m) < r).astype(float)
        Hi = H_nodes[:, k]  # (B, m, d, d)
        Hp = H_plus[:, k]  # (B, d, d)
        mid = i_eta[:, None, None] * np.einsum("biac,bce->biae", Hi, Hp) + Hp[:, None]
        block = eta * (
            np.einsum("ij,biac->biajc", lower, Hi)
            - np.einsum("j,biac->biajc", colband, mid)
        )
        diag[:, k] = _flatten_block(block)

    full = None
    if include_offdiag:
        # ∂ψ^{(k)}/∂x_k, the endpoint Jacobians J_k = ∂x_{k+1}/∂x_k, and the
        # endpoint noise maps V_k[j] = ∂x_{k+1}/∂ξ_j chain the cross-step part.
        I = np.eye(d)
        S_psi = np.empty((B, N, m, d, d))
        J = np.empty((B, N, d, d))
        V = np.empty((B, N, m, d, d))
        starts = traj.x[:, :: m][:, :N]  # (B, N, d) step-start states
        H0 = potential.hessian(starts)
        root2eta = np.sqrt(2.0 * eta)
        for k in range(N):
            r = int(traj.schedule.indices[k])
            tau = r * eta
            P = I - tau * H0[:, k]  # ∂X⁺/∂x_k
            HpP = np.einsum("bac,bce->bae", H_plus[:, k], P)
            dXdx = I - i_eta[:, None, None] * HpP[:, None]  # ∂X̂_i/∂x_k
            S_psi[:, k] = np.sqrt(eta / 2.0) * (
                np.einsum("biac,bice->biae", H_nodes[:, k], dXdx) - HpP[:, None]
            )
            J[:, k] = I - grid.h * HpP
            colband = (np.arange(m) < r).astype(float)
            V[:, k] = root2eta * (
                I - grid.h * colband[:, None, None] * H_plus[:, k][:, None]
            )
        full = _assemble_full(diag, S_psi, J, V)
    return MalliavinBlocks("mlmc", diag, float(q), full)


def malliavin_blocks_ulmc(
    potential: Potential,
    traj: UnderdampedTrajectory,
    q: float = 1.0,
    include_offdiag: bool = False,
) -> MalliavinBlocks:
    """Derivative blocks of the frozen-gradient kinetic drift.

    ∂ψ_i/∂ξ_j = η·E₂(jη, iη)·H_i·1_{j<i}: strictly lower in the temporal
    index (the scheme is adapted), so every determinant is exactly one.
    """
    grid = traj.grid
    N, m, eta = grid.N, grid.m, grid.eta
    B, d = traj.x.shape[0], traj.x.shape[2]
    kern = StepKernels.build(traj.gamma, grid.h, m)
    left = _left_nodes(traj.x, N, m)
    H_nodes = potential.hessian(left)
    K2_cells = kern.K2[:m]  # rows are cells 0..m−1, strictly lower
    diag = np.empty((B, N, m * d, m * d))
    for k in range(N):
        block = eta * np.einsum("ij,biac->biajc", K2_cells, H_nodes[:, k])
        diag[:, k] = _flatten_block(block)

    full = None
    if include_offdiag:
        I = np.eye(d)
        coef = np.sqrt(eta / (2.0 * traj.gamma))
        c = np.sqrt(2.0 * traj.gamma * eta)
        S_psi = np.empty((B, N, m, d, 2 * d))
        J = np.empty((B, N, 2 * d, 2 * d))
        V = np.empty((B, N, m, 2 * d, d))
        starts_x = traj.x[:, :: m][:, :N]
        H0 = potential.hessian(starts_x)
        for k in range(N):
            Hi = H_nodes[:, k]
            H0k = H0[:, k]
            # ∂X̂_i/∂(x₀,p₀) = [I − E₃(0,iη)H₀ , E₂(0,iη)I]
            dXdx = I - kern.e3_0[:m, None, None] * H0k[:, None]
            dpsi_x = coef * (np.einsum("biac,bice->biae", Hi, dXdx) - H0k[:, None])
            dpsi_p = coef * kern.e2_0[:m, None, None] * Hi
            S_psi[:, k, :, :, :d] = dpsi_x
            S_psi[:, k, :, :, d:] = dpsi_p
            J[:, k, :d, :d] = I - kern.e3_0[m] * H0k
            J[:, k, :d, d:] = kern.e2_0[m] * I
            J[:, k, d:, :d] = -kern.e2_0[m] * H0k
            J[:, k, d:, d:] = kern.e1_0[m] * I
            V[:, k, :, :d] = c * kern.K2[m][:, None, None] * I
            V[:, k, :, d:] = c * kern.K1[m][:, None, None] * I
        full = _assemble_full(diag, S_psi, J, V)
    return MalliavinBlocks("ulmc", diag, float(q), full)


def _dm_step_derivatives(
    kern: StepKernels,
    potential: Potential,
    x_nodes: np.ndarray,
    x_minus: np.ndarray,
    x_plus: np.ndarray,
    x0: np.ndarray,
    r_minus: int,
    r_plus: int,
):
    """Solve the linear derivative fixed point of one double-midpoint step.

    Differentiates the converged interpolation with respect to every input
    u ∈ (ξ_0..ξ_{m−1}, x₀, p₀) simultaneously, keeping the implicit
    dependence of the multipliers (nothing is dropped).  Returns
    (Dλ₁, Dλ₂, DX_m, DP_m), each (B, d, U) with U = m·d + 2d; the first m·d
    input columns are the ξ entries, then d for x₀ and d for p₀.
    """
    m, eta, d = kern.m, kern.eta, x0.shape[-1]
    B = x0.shape[0]
    U = m * d + 2 * d
    I = np.eye(d)
    c = np.sqrt(2.0 * kern.gamma * eta)

    # Explicit part DX⁰_n[u] (path-independent except through nothing):
    DX0 = np.zeros((m + 1, d, U))
    for n in range(m + 1):
        for j in range(m):
            DX0[n, :, j * d : (j + 1) * d] = c * kern.K2[n, j] * I
        DX0[n, :, m * d : m * d + d] = I
        DX0[n, :, m * d + d :] = kern.e2_0[n] * I
    DX0 = np.broadcast_to(DX0, (B, m + 1, d, U))

    def mid_derivative(r: int, H0: np.ndarray) -> np.ndarray:
        out = np.zeros((B, d, U))
        for j in range(m):
            out[:, :, j * d : (j + 1) * d] = c * kern.K2[r, j] * I
        out[:, :, m * d : m * d + d] = I - kern.e3_0[r] * H0
        out[:, :, m * d + d :] = kern.e2_0[r] * I
        return out

    H0 = potential.hessian(x0)
    Dmid_minus = mid_derivative(r_minus, H0)
    Dmid_plus = mid_derivative(r_plus, H0)
    DGx = kern.e3_0[m] * np.einsum("bac,bcU->baU", potential.hessian(x_minus), Dmid_minus)
    DGp = kern.e2_0[m] * np.einsum("bac,bcU->baU", potential.hessian(x_plus), Dmid_plus)

    H_left = potential.hessian(x_nodes[:, :m])  # (B, m, d, d)
    DX = np.array(DX0)
    Dlam1 = Dlam2 = np.zeros((B, d, U))
    DG = np.zeros((B, m, d, U))
    for _ in range(_DERIV_MAX_ITERS):
        Dg = np.einsum("bjac,bjcU->bjaU", H_left, DX[:, :m])
        DS1 = eta * np.einsum("j,bjaU->baU", kern.e1_left, Dg)
        DS2 = eta * np.einsum("j,bjaU->baU", kern.e2_left, Dg)
        Dlam1, Dlam2 = kern.sigma_hat.solve(DS1 - DGp, DS2 - DGx)
        DG = (
            Dg
            - kern.e1_left[:, None, None] * Dlam1[:, None]
            - kern.e2_left[:, None, None] * Dlam2[:, None]
        )
        DX_new = DX0 - eta * np.einsum("nj,bjaU->bnaU", kern.K2, DG)
        delta = float(np.max(np.abs(DX_new - DX)))
        DX = DX_new
        if not np.isfinite(delta):
            raise StepSizeError(
                "derivative fixed point diverged; the step violates the "
                "contraction condition h ~ 1/sqrt(beta)"
            )
        if delta <= _DERIV_TOL:
            break
    else:
        raise StepSizeError(
            f"derivative fixed point did not converge in {_DERIV_MAX_ITERS} sweeps"
        )
    DP_m = -eta * np.einsum("j,bjaU->baU", kern.K1[m], DG)
    DP_m[:, :, m * d + d :] += kern.e1_0[m] * I
    for j in range(m):
        DP_m[:, :, j * d : (j + 1) * d] += c * kern.K1[m, j] * I
    return Dlam1, Dlam2, DX[:, m], DP_m


def malliavin_blocks_dmulmc(
    potential: Potential,
    traj: UnderdampedTrajectory,
    q: float = 1.0,
    include_offdiag: bool = False,
) -> MalliavinBlocks:
    """Derivative blocks of the double-midpoint drift.

    ψ_i is temporally rank-two in (λ₁, λ₂), so the within-step block is
    ∂ψ_i/∂ξ_j = √(η/(2γ))·(E₁(iη,h)·∂λ₁/∂ξ_j + E₂(iη,h)·∂λ₂/∂ξ_j) with the
    multiplier derivatives from the exact linear fixed point (the implicit
    dependence of the optimal drift is kept, not dropped).
    """
    if traj.schedule is None:
        raise ValueError("trajectory carries no interpolation multipliers")
    grid = traj.grid
    N, m, eta = grid.N, grid.m, grid.eta
    B, d = traj.x.shape[0], traj.x.shape[2]
    kern = StepKernels.build(traj.gamma, grid.h, m)
    coef = np.sqrt(eta / (2.0 * traj.gamma))

    diag = np.empty((B, N, m * d, m * d))
    if include_offdiag:
        S_psi = np.empty((B, N, m, d, 2 * d))
        J = np.empty((B, N, 2 * d, 2 * d))
        V = np.empty((B, N, m, 2 * d, d))
    for k in range(N):
        x_nodes = traj.x[:, k * m : (k + 1) * m + 1]
        Dlam1, Dlam2, DXm, DPm = _dm_step_derivatives(
            kern,
            potential,
            x_nodes,
            traj.x_minus[:, k],
            traj.x_plus[:, k],
            traj.x[:, k * m],
            int(traj.schedule.indices_minus[k]),
            int(traj.schedule.indices_plus[k]),
        )
        # (B, m, d, U): outer product of e-kernels with multiplier derivatives
        Dpsi = coef * (
            kern.e1_left[:, None, None] * Dlam1[:, None]
            + kern.e2_left[:, None, None] * Dlam2[:, None]
        )
        diag[:, k] = Dpsi[:, :, :, : m * d].reshape(B, m * d, m * d)
        if include_offdiag:
            S_psi[:, k] = Dpsi[:, :, :, m * d :]
            J[:, k, :d] = DXm[:, :, m * d :]
            J[:, k, d:] = DPm[:, :, m * d :]
            Vx = DXm[:, :, : m * d].reshape(B, d, m, d)
            Vp = DPm[:, :, : m * d].reshape(B, d, m, d)
            V[:, k, :, :d] = Vx.transpose(0, 2, 1, 3)
            V[:, k, :, d:] = Vp.transpose(0, 2, 1, 3)
    full = _assemble_full(diag, S_psi, J, V) if include_offdiag else None
    return MalliavinBlocks("dmulmc", diag, float(q), full)


def _assemble_full(
    diag: np.ndarray, S_psi: np.ndarray, J: np.ndarray, V: np.ndarray
) -> np.ndarray:
    """Assemble the complete block lower-triangular derivative matrix.

    diag: (B, N, m·d, m·d); S_psi: (B, N, m, d, z) = ∂ψ^{(k)}/∂(state_k);
    J: (B, N, z, z) = ∂state_{k+1}/∂state_k; V: (B, N, m, z, d) =
    ∂state_{k'+1}/∂ξ_j.  Cross-step block (k, k') = S_ψk·J_{k−1}···J_{k'+1}·V_{k'}.
    """
    B, N, s, _ = diag.shape
    m = S_psi.shape[2]
    d = s // m
    full = np.zeros((B, N * s, N * s))
    for k in range(N):
        full[:, k * s : (k + 1) * s, k * s : (k + 1) * s] = diag[:, k]
        chain = None  # J_{k−1}···J_{k'+1}, built backwards from k' = k−1
        for kp in range(k - 1, -1, -1):
            prop = V[:, kp] if chain is None else np.einsum(
                "bze,bjef->bjzf", chain, V[:, kp]
            )
            block = np.einsum("biaz,bjzf->biajf", S_psi[:, k], prop)
            full[:, k * s : (k + 1) * s, kp * s : (kp + 1) * s] = block.reshape(B, s, s)
            chain = J[:, kp] if chain is None else np.einsum("bze,bef->bzf", chain, J[:, kp])
    return full


# ---------------------------------------------------------------------------
# Skorohod adjoint, determinant, weight
# ---------------------------------------------------------------------------


def skorohod_adjoint(
    drift: DriftRealization, blocks: MalliavinBlocks, xi: np.ndarray
) -> np.ndarray:
    """δψ = Σ_i⟨ψ_i, ξ_i⟩ − Σ_k tr(D_k), trace over temporal and spatial indices.

    Mean zero under the sampling law (Gaussian integration by parts).
    Requires blocks at q = 1 — the trace of the raw derivative.
    """
    if blocks.q != 1.0:
        raise ValueError(f"Skorohod adjoint needs blocks at q=1, got q={blocks.q}")
    ito = np.einsum("bid,bid->b", drift.psi, np.asarray(xi, dtype=float))
    trace = np.trace(blocks.diag, axis1=-2, axis2=-1).sum(axis=-1)
    return ito - trace


def carleman_fredholm_logdet(blocks: MalliavinBlocks) -> tuple[np.ndarray, np.ndarray]:
    """Σ_k [log|det(I + q·D_k)| − q·tr(D_k)] per path, by dense LU per block.

    The full derivative is block lower-triangular, so diagonal blocks carry
    the whole determinant.  Returns (value, negative_det): an exactly singular
    block yields −inf; ``negative_det`` marks paths where some block
    determinant is negative (anomaly under the scheme step bounds).
    """
    q = blocks.q
    s = blocks.diag.shape[-1]
    eye = np.eye(s)
    sign, logabs = np.linalg.slogdet(eye + q * blocks.diag)
    trace = np.trace(blocks.diag, axis1=-2, axis2=-1)
    value = np.where(sign == 0.0, -np.inf, logabs - q * trace).sum(axis=-1)
    negative = np.any(sign < 0.0, axis=-1)
    return value, negative


def spectral_radius_estimate(blocks: MalliavinBlocks, iters: int = _POWER_ITERATIONS) -> np.ndarray:
    """Power-iteration estimate of max_k ρ(q·D_k) per path.

    Deterministic start vector (ones plus a linear tilt) so results are
    reproducible; ``iters`` matrix-vector products per block.
    """
    B, N, s, _ = blocks.diag.shape
    v = np.ones(s) + np.linspace(0.0, 1.0, s)
    v = np.broadcast_to(v / np.linalg.norm(v), (B, N, s)).copy()
    rho = np.zeros((B, N))
    for _ in range(iters):
        w = np.einsum("bnij,bnj->bni", blocks.diag, v)
        nrm = np.linalg.norm(w, axis=-1)
        rho = nrm
        safe = np.where(nrm > 0.0, nrm, 1.0)[..., None]
        v = np.where(nrm[..., None] > 0.0, w / safe, v)
    return abs(blocks.q) * rho.max(axis=-1)


def rn_log_weight(
    drift: DriftRealization, blocks: MalliavinBlocks, xi: np.ndarray
) -> LogWeight:
    """Assemble log M = log_cf_det − δψ − energy with invertibility diagnostics.

    Blocks must be at q = 1.  ``invertible`` requires the spectral-radius
    estimate below 0.9 and a nonsingular determinant; consumers exclude
    non-invertible paths and count them as rejections.
    """
    log_cf, negative = carleman_fredholm_logdet(blocks)
    sk = skorohod_adjoint(drift, blocks, xi)
    rho = spectral_radius_estimate(blocks)
    invertible = (rho < SPECTRAL_RADIUS_LIMIT) & np.isfinite(log_cf)
    return LogWeight(
        log_cf_det=log_cf,
        skorohod=sk,
        energy=drift.energy,
        spectral_radius=rho,
        invertible=invertible,
        negative_det=negative,
    )


# ---------------------------------------------------------------------------
# Trace diagnostics (overdamped midpoint)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TraceDiagnostics:
    """Discrete traces of the anticipating block structure and their limits.

    Per path and step, for A = √2·η·∇²V(X̂_i)·1_{j<i} and the rank-one band
    B = √2·η·∇²V(X⁺)·1_{j<r}, both restricted to the leading r×r sub-block:

    * ``tr_a2`` = tr(A²) — exactly zero (strictly lower triangular);
    * ``tr_ba`` = tr(B·A), with limit ``limit_ba`` = 2∫₀^τ t·tr(∇²V(X⁺)∇²V(X_t))dt
      (trapezoid on the trajectory's own nodes);
    * ``tr_b2`` = tr(B²), with limit ``limit_b2`` = 2τ²·tr((∇²V(X⁺))²).
    """

    tr_a2: np.ndarray
    tr_ba: np.ndarray
    tr_b2: np.ndarray
    limit_ba: np.ndarray
    limit_b2: np.ndarray


def trace_diagnostics_mlmc(
    potential: Potential, traj: OverdampedTrajectory
) -> TraceDiagnostics:
    """Compute the discrete block traces and their refinement limits.

    All arrays are (B, N).  Traces are evaluated from the assembled matrices,
    not from closed forms, so they test the block structure itself.
    """
    grid = traj.grid
    N, m, eta = grid.N, grid.m, grid.eta
    B, d = traj.x.shape[0], traj.x.shape[2]
    left = _left_nodes(traj.x, N, m)
    H_nodes = potential.hessian(left)
    H_plus = potential.hessian(traj.x_plus)
    root2eta = np.sqrt(2.0) * eta

    tr_a2 = np.zeros((B, N))
    tr_ba = np.zeros((B, N))
    tr_b2 = np.zeros((B, N))
    limit_ba = np.zeros((B, N))
    limit_b2 = np.zeros((B, N))
    lower = np.tri(m, m, -1)
    for k in range(N):
        r = int(traj.schedule.indices[k])
        tau = r * eta
        Hp = H_plus[:, k]
        limit_b2[:, k] = 2.0 * tau**2 * np.einsum("bac,bca->b", Hp, Hp)
        if r == 0:
            continue
        Hi = H_nodes[:, k, :r]  # (B, r, d, d)
        A = root2eta * np.einsum("ij,biac->biajc", lower[:r, :r], Hi).reshape(
            B, r * d, r * d
        )
        Bmat = root2eta * np.broadcast_to(
            Hp[:, None, :, None, :], (B, r, d, r, d)
        ).reshape(B, r * d, r * d)
        tr_a2[:, k] = np.einsum("bij,bji->b", A, A)
        tr_ba[:, k] = np.einsum("bij,bji->b", Bmat, A)
        tr_b2[:, k] = np.einsum("bij,bji->b", Bmat, Bmat)
        # trapezoid of f(t) = 2t·tr(∇²V(X⁺)∇²V(X_t)) on nodes 0..r
        Ht = H_nodes[:, k, : r + 1]  # includes the node at τ itself
        f = 2.0 * (eta * np.arange(r + 1)) * np.einsum("bac,bica->bi", Hp, Ht)
        limit_ba[:, k] = np.trapezoid(f, dx=eta, axis=-1)
    return TraceDiagnostics(tr_a2, tr_ba, tr_b2, limit_ba, limit_b2)
