import math

import numpy as np
import pytest

from anchorsim import kernels
from anchorsim._accel import HAVE_NUMBA, backend
from anchorsim.scenario import AgentState, Pose2, collision_check

from oracles import raster_overlap, sat_margin

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="compiled path disabled")


def _boxes(rng, n):
    x = rng.uniform(-6, 6, n)
    y = rng.uniform(-6, 6, n)
    h = rng.uniform(-math.pi, math.pi, n)
    length = rng.uniform(3, 6, n)
    width = rng.uniform(1.5, 2.5, n)
    return x, y, h, length, width


@needs_numba
def test_backend_flag_reported():
    assert backend() == "numba"


@needs_numba
def test_obb_matrix_paths_agree():
    rng = np.random.default_rng(0)
    for _ in range(20):
        b = _boxes(rng, 12)
        act = rng.random(12) < 0.8
        assert np.array_equal(kernels.obb_overlap_matrix_loop(*b, act), kernels.obb_overlap_matrix_numpy(*b, act))


@needs_numba
def test_points_in_polygon_paths_agree():
    rng = np.random.default_rng(1)
    ang = np.sort(rng.uniform(0, 2 * math.pi, 9))
    rad = rng.uniform(3, 8, 9)
    poly = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    px, py = rng.uniform(-9, 9, 2000), rng.uniform(-9, 9, 2000)
    assert np.array_equal(kernels.points_in_polygon_loop(px, py, poly), kernels.points_in_polygon_numpy(px, py, poly))


@needs_numba
def test_segment_distance_paths_agree():
    rng = np.random.default_rng(2)
    segs = rng.normal(size=(30, 4))
    px, py = rng.normal(size=500) * 3, rng.normal(size=500) * 3
    a = kernels.min_segment_distance_loop(px, py, segs)
    b = kernels.min_segment_distance_numpy(px, py, segs)
    assert np.allclose(a, b, rtol=0, atol=1e-12)


@needs_numba
def test_nearest_token_and_kdisk_paths_agree():
    rng = np.random.default_rng(3)
    segs = rng.normal(size=(400, 2, 3))
    toks = rng.normal(size=(20, 2, 3))
    i1, d1 = kernels.nearest_token_loop(segs, toks, 1.0)
    i2, d2 = kernels.nearest_token_numpy(segs, toks, 1.0)
    assert np.array_equal(i1, i2)
    assert np.allclose(d1, d2, atol=1e-12)
    order = rng.permutation(400)
    z = np.zeros((1, 2, 3))
    assert np.array_equal(
        kernels.kdisk_greedy_loop(segs, order, z, 1.5, 1.0, 50), kernels.kdisk_greedy_numpy(segs, order, z, 1.5, 1.0, 50)
    )


def test_wrap_angle_range_and_passthrough():
    a = np.linspace(-20, 20, 4001)
    w = kernels.wrap_angle(a)
    assert np.all((w > -math.pi) & (w <= math.pi))
    assert np.allclose(np.sin(w), np.sin(a), atol=1e-9)
    assert kernels.wrap_angle(0.3) == 0.3
    assert kernels.wrap_angle(-math.pi) == pytest.approx(math.pi)


def test_sat_agrees_with_raster_oracle():
    """Boxes with a clear margin (>= 0.1 m) must match the rasterized overlap."""
    rng = np.random.default_rng(4)
    checked = 0
    while checked < 1000:
        b1 = tuple(float(v[0]) for v in _boxes(rng, 1))
        b2 = tuple(float(v[0]) for v in _boxes(rng, 1))
        if abs(sat_margin(b1, b2)) < 0.1:
            continue
        a = AgentState(Pose2(b1[0], b1[1], b1[2]), 0.0, b1[3], b1[4])
        b = AgentState(Pose2(b2[0], b2[1], b2[2]), 0.0, b2[3], b2[4])
        assert collision_check(a, b) == raster_overlap(b1, b2)
        checked += 1


def test_collision_edge_cases():
    a = AgentState(Pose2(0, 0, 0), 0, 4, 2)
    assert collision_check(a, AgentState(Pose2(4.0, 0, 0), 0, 4, 2))  # touching counts
    assert not collision_check(a, AgentState(Pose2(4.01, 0, 0), 0, 4, 2))
    assert collision_check(a, a)
    # rotated square inside a larger one
    assert collision_check(AgentState(Pose2(0, 0, 0.7), 0, 10, 10), AgentState(Pose2(0, 0, 0), 0, 1, 1))


def test_pairs_match_matrix():
    rng = np.random.default_rng(5)
    b = _boxes(rng, 10)
    m = kernels.obb_overlap_matrix_numpy(*b, np.ones(10, bool))
    x, y, h, l, w = b
    pairs = kernels.obb_overlap_pairs(x[:, None], y[:, None], h[:, None], l[:, None], w[:, None], x, y, h, l, w)
    iu = np.triu_indices(10, 1)
    assert np.array_equal(pairs[iu], m[iu])


def test_numpy_fallback_in_subprocess():
    """The env flag must switch the dispatch to the pure-numpy kernels."""
    import subprocess
    import sys

    code = (
        "from anchorsim import kernels, _accel;"
        "assert not _accel.HAVE_NUMBA;"
        "assert kernels.gae is kernels.gae_numpy;"
        "print(_accel.backend())"
    )
    out = subprocess.run(
        [sys.executable, "-c", code], env={**__import__("os").environ, "ANCHORSIM_NUMBA": "0"}, capture_output=True, text=True
    )
    assert out.returncode == 0, out.stderr
    assert out.stdout.strip() == "numpy"
