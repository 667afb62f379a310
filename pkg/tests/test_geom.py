import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tasksample.errors import ArgumentError
from tasksample.geom import (GeneratedSet, PointCloud, SampleSelection, chamfer, nearest_in,
                             normalize_unit_sphere, pairwise_sq_dist)


def loop_sq_dist(a, b):
    out = np.zeros((len(a), len(b)))
    for i, p in enumerate(a):
        for j, q in enumerate(b):
            out[i, j] = sum((float(p[t]) - float(q[t])) ** 2 for t in range(3))
    return out


coords = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
clouds = st.integers(1, 12).flatmap(lambda m: arrays(np.float64, (m, 3), elements=coords))


def test_pairwise_trivial():
    assert pairwise_sq_dist([[0, 0, 0]], [[0, 0, 0]]).tolist() == [[0.0]]
    assert pairwise_sq_dist([[0, 0, 0]], [[1, 0, 0], [0, 2, 0]]).tolist() == [[1.0, 4.0]]


def test_pairwise_matches_loop(rng):
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(7, 3))
    np.testing.assert_allclose(pairwise_sq_dist(a, b), loop_sq_dist(a, b), rtol=0, atol=1e-12)


def test_pairwise_empty():
    with pytest.raises(ArgumentError):
        pairwise_sq_dist(np.empty((0, 3)), [[0, 0, 0]])
    with pytest.raises(ArgumentError):
        pairwise_sq_dist([[0, 0, 0]], np.empty((0, 3)))


@settings(max_examples=60, deadline=None)
@given(clouds, clouds)
def test_pairwise_properties(a, b):
    d = pairwise_sq_dist(a, b)
    assert np.all(d >= 0)
    np.testing.assert_allclose(d, loop_sq_dist(a, b), rtol=1e-12, atol=1e-12)
    s = pairwise_sq_dist(a, a)
    np.testing.assert_array_equal(s, s.T)


def test_nearest_in():
    assert nearest_in([0, 0, 0], [[1, 0, 0], [0, 0, 0]]) == (1, 0.0)
    cloud = np.array([[5, 5, 5], [3, 0, 0], [1, 0, 0], [9, 9, 9], [0, 3, 0], [-1, 0, 0]], float)
    assert nearest_in([0, 0, 0], cloud)[0] == 2
    with pytest.raises(ArgumentError):
        nearest_in([0, 0, 0], np.empty((0, 3)))


def test_nearest_in_linear_scan(rng):
    cloud = rng.normal(size=(100, 3))
    for q in rng.normal(size=(50, 3)):
        best, bd = 0, np.inf
        for j, p in enumerate(cloud):
            d = float(((q - p) ** 2).sum())
            if d < bd:
                best, bd = j, d
        i, d = nearest_in(q, cloud)
        assert i == best
        assert d == pytest.approx(bd, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(clouds, clouds)
def test_chamfer_symmetric_and_zero(a, b):
    assert chamfer(a, b) == chamfer(b, a)
    assert chamfer(a, a) == 0.0


def test_chamfer_single_pair():
    assert chamfer([[0, 0, 0]], [[1, 0, 0]]) == 2.0
    with pytest.raises(ArgumentError):
        chamfer([], [[1, 0, 0]])


def test_types_validate():
    pc = PointCloud(np.ones((4, 3)), 1, "a")
    assert pc.n == 4
    with pytest.raises(ValueError):
        pc.points[0, 0] = 2.0
    with pytest.raises(ArgumentError):
        PointCloud(np.array([[np.nan, 0, 0]]))
    assert GeneratedSet(np.zeros((2, 3)) + 7.0).k == 2
    with pytest.raises(ArgumentError):
        SampleSelection((1, 1), "fps", 3)
    with pytest.raises(ArgumentError):
        SampleSelection((0, 3), "fps", 3)
    with pytest.raises(ArgumentError):
        SampleSelection((0,), "magic", 3)


def test_normalize_unit_sphere(rng):
    pts = normalize_unit_sphere(rng.normal(size=(50, 3)) * 7 + 3)
    assert np.sqrt((pts ** 2).sum(axis=1)).max() == pytest.approx(1.0)
    np.testing.assert_allclose(pts.mean(axis=0), 0, atol=1e-12)
