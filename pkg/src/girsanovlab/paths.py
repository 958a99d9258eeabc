"""Time grids, midpoint schedules, and reproducible Brownian increments.

Discretization layout
---------------------
A horizon [0, T] is split into N outer steps of length h = T/N, each refined
into m inner cells of length η = h/m (any positive m; doubling m nests).  All
randomness is expressed through standard normal increments ξ with shape
(n_cells, d), where √η·ξ_i realizes the Brownian increment over inner cell i.

Reproducibility
---------------
Increments come from counter-based Philox streams:

* key  = (seed, purpose label) — independent streams per purpose,
* counter = [0, level, block, 0] — paths are generated in fixed blocks of
  ``BLOCK_PATHS`` paths; path ``stream`` lives at row ``stream % BLOCK_PATHS``
  of block ``stream // BLOCK_PATHS``.

Uniform doubles are mapped through the inverse normal CDF (one 64-bit word per
normal, shifted by 2⁻⁵⁴ so u = 0 cannot occur).  Fixed consumption per normal
is what makes the block layout — and therefore every estimate — independent of
how work is divided across threads.

Refinement
----------
``refine_noise`` splits each increment with a fresh midpoint variable ζ from a
level-keyed stream: ξ′₂ᵢ = (ξᵢ+ζᵢ)/√2, ξ′₂ᵢ₊₁ = (ξᵢ−ζᵢ)/√2.  Coarsening the
result reproduces the parent increments exactly (up to one floating add), so
weights can be compared across nested inner grids on the *same* underlying
Brownian path.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy.special import ndtri

__all__ = [
    "BLOCK_PATHS",
    "TimeGrid",
    "OverdampedSchedule",
    "UnderdampedSchedule",
    "NoisePath",
    "sample_noise",
    "refine_noise",
    "coarsen_noise",
    "brownian_partial_sums",
    "normal_block",
]

#: Paths per Philox generation block.  Fixed: part of the determinism contract.
BLOCK_PATHS = 4096

# Purpose labels (second Philox key word).
LABEL_PATH = 0x1
LABEL_BRIDGE = 0x2
LABEL_INIT = 0x3
LABEL_RESIDUAL = 0x4
LABEL_SCHEDULE = 0x5


@dataclass(frozen=True)
class TimeGrid:
    """Horizon T split into N outer steps, each with m inner cells."""

    T: float
    N: int
    m: int

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise ValueError(f"horizon must be positive, got {self.T}")
        if self.N < 1:
            raise ValueError(f"need at least one outer step, got N={self.N}")
        if self.m < 1:
            raise ValueError(f"inner cell count must be positive, got m={self.m}")

    @property
    def h(self) -> float:
        return self.T / self.N

    @property
    def eta(self) -> float:
        return self.T / (self.N * self.m)

    @property
    def n_cells(self) -> int:
        return self.N * self.m

    def refined(self) -> "TimeGrid":
        """Same horizon and outer steps, doubled inner resolution."""
        return TimeGrid(self.T, self.N, 2 * self.m)

    def node_times(self) -> np.ndarray:
        """All inner node times, shape (N·m + 1,)."""
        return self.eta * np.arange(self.n_cells + 1)


def _snap_index(fraction: float, m: int) -> int:
    """Nearest inner-grid index to τ = fraction·h, clipped into [0, m−1]."""
    if not (0.0 <= fraction < 1.0):
        raise ValueError(f"midpoint fraction must lie in [0, 1), got {fraction}")
    return min(int(round(fraction * m)), m - 1)


@dataclass(frozen=True)
class OverdampedSchedule:
    """Per-step midpoint indices r_k (τ_k = r_k·η) for the overdamped scheme.

    Indices are stored, not times, so snapped midpoints are exact grid nodes.
    r_k = 0 degenerates the midpoint to the step start, which recovers plain
    Euler–Maruyama with the gradient frozen over the step.
    """

    grid: TimeGrid
    indices: np.ndarray  # (N,) ints in [0, m−1]

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=int)
        if idx.shape != (self.grid.N,):
            raise ValueError(f"need one index per outer step, got shape {idx.shape}")
        if np.any(idx < 0) or np.any(idx >= self.grid.m):
            raise ValueError("midpoint indices must lie in [0, m-1]")
        object.__setattr__(self, "indices", idx)

    @property
    def taus(self) -> np.ndarray:
        return self.grid.eta * self.indices

    @classmethod
    def deterministic(cls, grid: TimeGrid, fraction: float = 0.5) -> "OverdampedSchedule":
        r = _snap_index(fraction, grid.m)
        return cls(grid, np.full(grid.N, r, dtype=int))

    @classmethod
    def zero(cls, grid: TimeGrid) -> "OverdampedSchedule":
        """The Euler–Maruyama degenerate schedule (τ ≡ 0)."""
        return cls(grid, np.zeros(grid.N, dtype=int))

    @classmethod
    def randomized(cls, grid: TimeGrid, seed: int, stream: int) -> "OverdampedSchedule":
        gen = _generator(seed, LABEL_SCHEDULE, 0, stream)
        idx = gen.integers(0, grid.m, size=grid.N)
        return cls(grid, idx)

    def refined(self) -> "OverdampedSchedule":
        """Same midpoint times on the doubled inner grid."""
        return OverdampedSchedule(self.grid.refined(), 2 * self.indices)


@dataclass(frozen=True)
class UnderdampedSchedule:
    """Per-step double-midpoint indices (r⁻_k, r⁺_k) for the kinetic scheme.

    The deterministic choice is τ⁻ = h/3 (position midpoint) and τ⁺ = h/2
    (momentum midpoint), snapped to the inner grid.
    """

    grid: TimeGrid
    indices_minus: np.ndarray
    indices_plus: np.ndarray

    def __post_init__(self):
        for name in ("indices_minus", "indices_plus"):
            idx = np.asarray(getattr(self, name), dtype=int)
            if idx.shape != (self.grid.N,):
                raise ValueError(f"need one {name} per outer step, got {idx.shape}")
            if np.any(idx < 0) or np.any(idx >= self.grid.m):
                raise ValueError("midpoint indices must lie in [0, m-1]")
            object.__setattr__(self, name, idx)

    @property
    def taus_minus(self) -> np.ndarray:
        return self.grid.eta * self.indices_minus

    @property
    def taus_plus(self) -> np.ndarray:
        return self.grid.eta * self.indices_plus

    @classmethod
    def deterministic(
        cls,
        grid: TimeGrid,
        fraction_minus: float = 1.0 / 3.0,
        fraction_plus: float = 0.5,
    ) -> "UnderdampedSchedule":
        rm = _snap_index(fraction_minus, grid.m)
        rp = _snap_index(fraction_plus, grid.m)
        return cls(
            grid,
            np.full(grid.N, rm, dtype=int),
            np.full(grid.N, rp, dtype=int),
        )

    @classmethod
    def randomized(cls, grid: TimeGrid, seed: int, stream: int) -> "UnderdampedSchedule":
        gen = _generator(seed, LABEL_SCHEDULE, 0, stream)
        idx = gen.integers(0, grid.m, size=(2, grid.N))
        return cls(grid, idx.min(axis=0), idx.max(axis=0))

    def refined(self) -> "UnderdampedSchedule":
        return UnderdampedSchedule(
            self.grid.refined(), 2 * self.indices_minus, 2 * self.indices_plus
        )


# ---------------------------------------------------------------------------
# Philox noise factory
# ---------------------------------------------------------------------------


def _generator(seed: int, label: int, level: int, block: int) -> np.random.Generator:
    if not (0 <= seed < 2**64):
        raise ValueError(f"seed must fit in uint64, got {seed}")
    key = np.array([seed, label], dtype=np.uint64)
    counter = np.array([0, level, block, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


def _normals(gen: np.random.Generator, n: int) -> np.ndarray:
    # One 64-bit word per normal: u ∈ [2⁻⁵⁴, 1), then inverse CDF.  Fixed
    # consumption keeps block layouts identical regardless of call pattern.
    u = gen.random(n) + 2.0**-54
    return ndtri(u)


@lru_cache(maxsize=8)
def _cached_block(
    seed: int, label: int, level: int, block: int, n_cells: int, d: int
) -> np.ndarray:
    gen = _generator(seed, label, level, block)
    out = _normals(gen, BLOCK_PATHS * n_cells * d).reshape(BLOCK_PATHS, n_cells, d)
    out.setflags(write=False)
    return out


def normal_block(
    seed: int, n_cells: int, d: int, block: int, *, level: int = 0, label: int = LABEL_PATH
) -> np.ndarray:
    """One generation block of standard normals, shape (BLOCK_PATHS, n_cells, d).

    Read-only; row r holds the increments of path ``stream = block·BLOCK_PATHS + r``.
    """
    return _cached_block(int(seed), int(label), int(level), int(block), int(n_cells), int(d))


@dataclass(frozen=True)
class NoisePath:
    """Standard normal increments of a single path, with its stream identity.

    ``level`` counts bridge refinements applied since the path was sampled
    (the inner cell count of ``xi`` is 2^level times the sampled one).
    """

    xi: np.ndarray  # (n_cells, d)
    seed: int
    stream: int
    level: int = 0

    @property
    def n_cells(self) -> int:
        return self.xi.shape[0]

    @property
    def d(self) -> int:
        return self.xi.shape[1]


def sample_noise(seed: int, stream: int, n_cells: int, d: int) -> NoisePath:
    """Increments of path ``stream``: row of its Philox generation block."""
    if stream < 0:
        raise ValueError(f"stream must be >= 0, got {stream}")
    block, row = divmod(int(stream), BLOCK_PATHS)
    xi = normal_block(seed, n_cells, d, block)[row].copy()
    return NoisePath(xi=xi, seed=int(seed), stream=int(stream), level=0)


def noise_matrix(
    seed: int,
    n_paths: int,
    n_cells: int,
    d: int,
    *,
    label: int = LABEL_PATH,
    start: int = 0,
) -> np.ndarray:
    """Increments of paths ``start .. start+n_paths−1`` stacked, (n_paths, n_cells, d).

    Row p is bit-identical to ``sample_noise(seed, start+p, n_cells, d).xi``
    for the path label, so batch and per-path consumers agree exactly.
    """
    if n_paths <= 0 or start < 0:
        raise ValueError("need n_paths > 0 and start >= 0")
    out = np.empty((n_paths, n_cells, d))
    first, last = start // BLOCK_PATHS, (start + n_paths - 1) // BLOCK_PATHS
    for block in range(first, last + 1):
        lo = max(start, block * BLOCK_PATHS)
        hi = min(start + n_paths, (block + 1) * BLOCK_PATHS)
        rows = normal_block(seed, n_cells, d, block, label=label)
        out[lo - start : hi - start] = rows[lo - block * BLOCK_PATHS : hi - block * BLOCK_PATHS]
    return out


def refine_noise(path: NoisePath) -> NoisePath:
    """Split each increment in two with a fresh level-keyed midpoint variable."""
    block, row = divmod(path.stream, BLOCK_PATHS)
    zeta = normal_block(
        path.seed, path.n_cells, path.d, block, level=path.level, label=LABEL_BRIDGE
    )[row]
    child = np.empty((2 * path.n_cells, path.d))
    root_half = np.sqrt(0.5)
    child[0::2] = (path.xi + zeta) * root_half
    child[1::2] = (path.xi - zeta) * root_half
    return replace(path, xi=child, level=path.level + 1)


def coarsen_noise(path: NoisePath) -> NoisePath:
    """Merge adjacent increments; inverts :func:`refine_noise` up to rounding."""
    if path.n_cells % 2 != 0:
        raise ValueError("cannot coarsen an odd number of cells")
    if path.level < 1:
        raise ValueError("path is already at its sampled resolution")
    parent = (path.xi[0::2] + path.xi[1::2]) * np.sqrt(0.5)
    return replace(path, xi=parent, level=path.level - 1)


def brownian_partial_sums(xi: np.ndarray, eta: float) -> np.ndarray:
    """Brownian node values B_{nη} = √η Σ_{j<n} ξ_j, with the leading zero.

    Accepts (..., n_cells, d); returns (..., n_cells+1, d).
    """
    xi = np.asarray(xi, dtype=float)
    if not (np.isfinite(eta) and eta > 0):
        raise ValueError(f"cell length must be positive, got {eta}")
    out = np.zeros(xi.shape[:-2] + (xi.shape[-2] + 1, xi.shape[-1]))
    np.cumsum(xi, axis=-2, out=out[..., 1:, :])
    out[..., 1:, :] *= np.sqrt(eta)
    return out
