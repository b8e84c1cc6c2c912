import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ramnet.events import EventStream
from ramnet.representation import (EVENTSCAPE, MVSEC, build_voxel_grid, depth_to_normalized,
                                   normalize_voxel, normalized_to_depth)


def stream(t, x, y, p, w=8, h=8):
    return EventStream(np.asarray(t), np.asarray(x), np.asarray(y), np.asarray(p), w, h)


def random_events(rng, n, w=8, h=6, t_max=40_000):
    t = np.sort(rng.integers(0, t_max + 1, n))
    return stream(t, rng.integers(0, w, n), rng.integers(0, h, n), rng.choice([-1, 1], n), w, h)


def naive_voxel(ev, h, w, bins, t0, t1):
    grid = np.zeros((bins, h, w))
    for t, x, y, p in zip(ev.t, ev.x, ev.y, ev.p):
        ts = (bins - 1) * (t - t0) / (t1 - t0)
        for b in range(bins):
            grid[b, y, x] += p * max(0.0, 1.0 - abs(b - ts))
    return grid


def test_event_at_window_start():
    g = build_voxel_grid(stream([0, 100], [3, 0], [4, 0], [1, 0 + 1]), 8, 8, 5, 0, 100).grid
    assert g[0, 4, 3] == 1.0
    g = build_voxel_grid(stream([0], [3], [4], [1]), 8, 8, 5, 0, 100).grid
    assert g[0, 4, 3] == 1.0 and g.sum() == 1.0


def test_event_at_midpoint_and_split():
    g = build_voxel_grid(stream([50], [1], [2], [1]), 8, 8, 5, 0, 100).grid
    assert g[2, 2, 1] == 1.0 and np.count_nonzero(g) == 1
    g = build_voxel_grid(stream([62_500], [1], [2], [-1]), 8, 8, 5, 0, 100_000).grid
    assert g[2, 2, 1] == -0.5 and g[3, 2, 1] == -0.5 and np.count_nonzero(g) == 2


def test_empty_window_is_zero():
    g = build_voxel_grid(EventStream.empty(8, 8), 8, 8, 5, 0, 40_000).grid
    assert g.shape == (5, 8, 8) and not g.any()


def test_voxel_validation():
    with pytest.raises(ValueError):
        build_voxel_grid(stream([10], [0], [0], [1]), 8, 8, 5, 20, 40)
    with pytest.raises(ValueError):
        build_voxel_grid(stream([10], [9], [0], [1]), 8, 8, 5, 0, 40)
    with pytest.raises(ValueError):
        build_voxel_grid(stream([10], [0], [0], [1]), 8, 8, 0, 0, 40)


@pytest.mark.parametrize("seed", range(3))
def test_matches_naive_accumulation_exactly(seed):
    rng = np.random.default_rng(seed)
    ev = random_events(rng, 1000)
    g = build_voxel_grid(ev, 6, 8, 5, 0, 40_000, dtype=np.float64).grid
    np.testing.assert_array_equal(g, naive_voxel(ev, 6, 8, 5, 0, 40_000))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 300), st.integers(1, 9))
def test_conservation_property(seed, n, bins):
    ev = random_events(np.random.default_rng(seed), n)
    g64 = build_voxel_grid(ev, 6, 8, bins, 0, 40_000, dtype=np.float64).grid
    assert abs(g64.sum() - ev.p.sum()) <= 1e-9


def test_kernel_mass_is_one_for_interior_events():
    for ts in np.linspace(0.0, 4.0, 41):
        t = int(round(ts * 10_000))
        g = build_voxel_grid(stream([t], [0], [0], [1]), 8, 8, 5, 0, 40_000, dtype=np.float64).grid
        assert g.sum() == pytest.approx(1.0, abs=1e-12)


def test_normalize_examples():
    z = np.zeros((2, 3, 3), dtype=np.float32)
    np.testing.assert_array_equal(normalize_voxel(z), z)
    g = np.zeros((1, 2, 2), dtype=np.float32)
    g[0, 0, 0], g[0, 1, 1] = 1, 3
    out = normalize_voxel(g)
    assert out[0, 0, 0] == -1 and out[0, 1, 1] == 1 and out[0, 0, 1] == 0
    g[0, 1, 1] = 1
    assert not normalize_voxel(g).any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_normalize_idempotent(seed):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((3, 5, 5)) * (rng.random((3, 5, 5)) < 0.5)
    once = normalize_voxel(g)
    np.testing.assert_allclose(normalize_voxel(once), once, atol=1e-6)


def test_depth_normalization_values():
    a, dmax = EVENTSCAPE
    n = depth_to_normalized(np.array([dmax, dmax * math.exp(-a), 100.0]), a, dmax).normalized
    assert n[0] == 1.0
    assert n[1] == pytest.approx(0.0, abs=1e-12)
    assert n[2] == pytest.approx(1 - math.log(10) / 5.7, abs=1e-5)
    assert normalized_to_depth(np.array(1.0), a, dmax) == pytest.approx(dmax)
    assert normalized_to_depth(np.array(0.5), a, dmax) == pytest.approx(1000 * math.exp(-2.85), rel=1e-12)
    assert normalized_to_depth(np.array(0.5), a, dmax) == pytest.approx(57.84, abs=0.01)


def test_depth_clamp_and_mask():
    a, dmax = MVSEC
    dm = depth_to_normalized(np.array([1e-3, 500.0, np.inf]), a, dmax)
    np.testing.assert_array_equal(dm.normalized, [0.0, 1.0, 0.0])
    np.testing.assert_array_equal(dm.valid_mask, [True, True, False])
    with pytest.raises(ValueError):
        depth_to_normalized(np.array([-1.0]), a, dmax, mask=np.array([True]))


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_depth_round_trip_and_monotone(u, v):
    a, dmax = EVENTSCAPE
    lo = dmax * math.exp(-a)
    d1, d2 = lo * (dmax / lo) ** u, lo * (dmax / lo) ** v
    n = depth_to_normalized(np.array([d1, d2]), a, dmax).normalized
    back = normalized_to_depth(n, a, dmax)
    np.testing.assert_allclose(back, [d1, d2], rtol=1e-4)
    if d1 < d2:
        assert n[0] < n[1] or d2 - d1 < 1e-9 * d2
