"""Time grids, reproducible noise, bridge refinement, midpoint schedules."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from girsanovlab import (
    NoisePath,
    OverdampedSchedule,
    TimeGrid,
    UnderdampedSchedule,
    noise_matrix,
    refine_noise,
)
from girsanovlab.paths import (
    LABEL_BRIDGE,
    LABEL_PATH,
    brownian_partial_sums,
    coarsen_noise,
    sample_noise,
)


def test_grid_fields_exact():
    grid = TimeGrid(0.5, 4, 8)
    assert grid.h == 0.5 / 4
    assert grid.eta == grid.h / 8
    assert grid.n_cells == 32
    assert grid.N * grid.h == grid.T


def test_grid_refined_doubles_m():
    grid = TimeGrid(1.0, 2, 4)
    fine = grid.refined()
    assert (fine.N, fine.m) == (2, 8)
    assert fine.eta == grid.eta / 2


def test_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid(-1.0, 2, 4)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 0, 4)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 2, 0)


def test_noise_deterministic_and_stream_separated():
    a = sample_noise(seed=11, stream=3, n_cells=16, d=2)
    b = sample_noise(seed=11, stream=3, n_cells=16, d=2)
    np.testing.assert_array_equal(a.xi, b.xi)
    c = sample_noise(seed=11, stream=4, n_cells=16, d=2)
    assert not np.array_equal(a.xi, c.xi)
    e = sample_noise(seed=12, stream=3, n_cells=16, d=2)
    assert not np.array_equal(a.xi, e.xi)


def test_noise_matrix_rows_independent_of_batch_size():
    small = noise_matrix(5, 10, 8, 2)
    large = noise_matrix(5, 6000, 8, 2)
    np.testing.assert_array_equal(small, large[:10])


def test_noise_moments():
    xi = noise_matrix(0, 100, 100, 1).ravel()  # 1e4 draws
    n = xi.size
    assert abs(xi.mean()) <= 4.0 / np.sqrt(n)
    assert abs(xi.var() - 1.0) <= 4.0 * np.sqrt(2.0 / n)


def test_disjoint_streams_uncorrelated():
    # pair the increments of streams 0..2047 against streams 2048..4095
    draws = noise_matrix(0, 4096, 49, 1)
    a = draws[:2048].ravel()
    b = draws[2048:].ravel()
    n = a.size  # 100352 paired draws from disjoint streams
    corr = np.corrcoef(a, b)[0, 1]
    assert abs(corr) <= 4.0 / np.sqrt(n)


def test_refine_preserves_coarse_path():
    path = sample_noise(seed=3, stream=0, n_cells=12, d=3)
    fine = refine_noise(path)
    assert fine.n_cells == 24
    merged = (fine.xi[0::2] + fine.xi[1::2]) * np.sqrt(0.5)
    np.testing.assert_allclose(merged, path.xi, rtol=1e-15, atol=1e-15)


def test_refine_then_coarsen_round_trip():
    path = sample_noise(seed=4, stream=7, n_cells=8, d=2)
    back = coarsen_noise(refine_noise(path))
    np.testing.assert_allclose(back.xi, path.xi, rtol=1e-15, atol=1e-15)
    assert back.level == path.level


def test_double_refinement_nests():
    path = sample_noise(seed=5, stream=1, n_cells=4, d=1)
    f2 = refine_noise(refine_noise(path))
    assert f2.n_cells == 16
    # coarse-graining two levels reproduces the original increments
    once = (f2.xi[0::2] + f2.xi[1::2]) * np.sqrt(0.5)
    twice = (once[0::2] + once[1::2]) * np.sqrt(0.5)
    np.testing.assert_allclose(twice, path.xi, rtol=1e-14, atol=1e-14)


def test_refined_midpoints_are_standard_normal():
    # children are unit normals: sample variance over many cells within 4 SE
    children = [
        refine_noise(sample_noise(seed=6, stream=s, n_cells=256, d=1)).xi
        for s in range(64)
    ]
    pool = np.concatenate(children).ravel()
    v = pool.var()
    assert abs(v - 1.0) <= 4.0 * np.sqrt(2.0 / pool.size)


def test_refinement_deterministic_per_level():
    path = sample_noise(seed=9, stream=2, n_cells=8, d=2)
    np.testing.assert_array_equal(refine_noise(path).xi, refine_noise(path).xi)
    # bridge draws differ from the path draws themselves
    assert LABEL_BRIDGE != LABEL_PATH


def test_brownian_partial_sums_oracle():
    xi = np.ones((8, 1))
    sums = brownian_partial_sums(xi, eta=0.25)
    assert sums[0, 0] == 0.0
    assert sums[-1, 0] == pytest.approx(np.sqrt(0.25) * 8)
    diffs = np.diff(sums, axis=0)
    np.testing.assert_allclose(diffs, np.sqrt(0.25) * xi)


def test_overdamped_schedule_snapping():
    grid = TimeGrid(1.0, 4, 8)
    sched = OverdampedSchedule.deterministic(grid, fraction=0.5)
    np.testing.assert_array_equal(sched.indices, 4)
    np.testing.assert_allclose(sched.taus, grid.h / 2)
    # snapped tau is within eta/2 of the request for a non-grid fraction
    odd = OverdampedSchedule.deterministic(grid, fraction=0.3)
    assert np.all(np.abs(odd.taus - 0.3 * grid.h) <= grid.eta / 2 + 1e-15)


def test_underdamped_schedule_deterministic_thirds():
    grid = TimeGrid(0.9, 3, 6)
    sched = UnderdampedSchedule.deterministic(grid)
    np.testing.assert_allclose(sched.taus_minus, grid.h / 3)
    np.testing.assert_allclose(sched.taus_plus, grid.h / 2)


def test_randomized_schedules_reproducible_and_in_range():
    grid = TimeGrid(1.0, 5, 8)
    a = OverdampedSchedule.randomized(grid, seed=1, stream=0)
    b = OverdampedSchedule.randomized(grid, seed=1, stream=0)
    np.testing.assert_array_equal(a.indices, b.indices)
    assert np.all((a.indices >= 0) & (a.indices < grid.m))
    c = UnderdampedSchedule.randomized(grid, seed=1, stream=0)
    assert np.all(c.indices_minus <= c.indices_plus)
    assert np.all((c.indices_minus >= 0) & (c.indices_plus < grid.m))


def test_schedule_refinement_keeps_physical_taus():
    grid = TimeGrid(1.0, 3, 4)
    sched = OverdampedSchedule.randomized(grid, seed=2, stream=5)
    fine = sched.refined()
    np.testing.assert_allclose(fine.taus, sched.taus)
    ud = UnderdampedSchedule.randomized(grid, seed=2, stream=5).refined()
    assert ud.grid.m == 8


@settings(deadline=None, max_examples=25)
@given(st.integers(0, 2**32 - 1), st.integers(1, 16), st.integers(1, 3))
def test_refine_round_trip_property(seed, n_cells, d):
    path = sample_noise(seed=seed, stream=0, n_cells=n_cells, d=d)
    merged = coarsen_noise(refine_noise(path))
    np.testing.assert_allclose(merged.xi, path.xi, rtol=1e-14, atol=1e-14)
