import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tasksample import sampler
from tasksample.errors import ArgumentError
from tasksample.geom import GeneratedSet, SampleSelection
from tasksample.sampler import (EpsilonBall, critical_set_sample, emd_match, fps, interpolate_sample,
                                nn_match, progressive_order, progressive_sample, random_sample)


def brute_fps(pts, k, start):
    """O(n^2 k) greedy reference using per-pair loops."""
    n = len(pts)

    def d(i, j):
        return sum((pts[i][t] - pts[j][t]) ** 2 for t in range(3))

    sel = [start]
    while len(sel) < k:
        best, best_val = None, -1.0
        for c in range(n):
            if c in sel:
                continue
            v = min(d(c, s) for s in sel)
            if v > best_val:
                best, best_val = c, v
        sel.append(best)
    return sel


def brute_nn_match(g, pts, k):
    assign = []
    for x in g:
        best, bd = 0, math.inf
        for j, y in enumerate(pts):
            dd = float(((x - y) ** 2).sum())
            if dd < bd:
                best, bd = j, dd
        assign.append(best)
    uniq = []
    for a in assign:
        if a not in uniq:
            uniq.append(a)
    if len(uniq) < k:
        tail = brute_fps_from(pts, uniq, k)
        return tail, len(uniq)
    return uniq, len(uniq)


def brute_fps_from(pts, sel, k):
    sel = list(sel)
    while len(sel) < k:
        best, best_val = None, -1.0
        for c in range(len(pts)):
            if c in sel:
                continue
            v = min(float(((pts[c] - pts[s]) ** 2).sum()) for s in sel)
            if v > best_val:
                best, best_val = c, v
        sel.append(best)
    return sel


def test_random_sample_basics():
    pts = np.random.default_rng(0).normal(size=(20, 3))
    full = random_sample(pts, 20, 3)
    assert sorted(full.indices) == list(range(20))
    assert random_sample(pts, 1, 7).indices == random_sample(pts, 1, 7).indices
    with pytest.raises(ArgumentError):
        random_sample(pts, 21, 0)


def test_random_sample_uniform():
    pts = np.zeros((10, 3))
    counts = np.zeros(10)
    draws = 100_000
    for s in range(draws):
        counts[random_sample(pts, 1, s).indices[0]] += 1
    expected = draws / 10
    sigma = math.sqrt(draws * 0.1 * 0.9)
    assert np.all(np.abs(counts - expected) <= 3 * sigma)
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert chi2 < 27.88  # chi-square(9) upper 0.1% point


def test_fps_trivial(rng):
    pts = rng.normal(size=(12, 3))
    assert fps(pts, 1, start=4).indices == (4,)
    full = fps(pts, 12, start=0)
    assert sorted(full.indices) == list(range(12))
    assert list(full.indices) == brute_fps(pts, 12, 0)
    with pytest.raises(ArgumentError):
        fps(pts, 13, start=0)
    with pytest.raises(ArgumentError):
        fps(pts, 2, start=SampleSelection((0, 1, 2), "fps", 12))


def test_fps_matches_brute_force(rng):
    for _ in range(50):
        n = int(rng.integers(2, 65))
        k = int(rng.integers(1, min(n, 16) + 1))
        pts = rng.normal(size=(n, 3))
        assert list(fps(pts, k, start=0).indices) == brute_fps(pts, k, 0)


def test_fps_continue_and_seeded_start(rng):
    pts = rng.normal(size=(30, 3))
    head = fps(pts, 4, start=3)
    cont = fps(pts, 10, start=head)
    assert cont.indices[:4] == head.indices
    assert cont.indices == fps(pts, 10, start=3).indices
    assert fps(pts, 5, rng_seed=11).indices == fps(pts, 5, rng_seed=11).indices


def test_fps_duplicate_points_stay_unique():
    pts = np.zeros((6, 3))
    pts[3] = 1.0
    sel = fps(pts, 6, start=0)
    assert sorted(sel.indices) == list(range(6))


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 30), st.integers(1, 10), st.integers(0, 2**31))
def test_fps_permutation_covariant(n, k, seed):
    k = min(k, n)
    r = np.random.default_rng(seed)
    pts = r.normal(size=(n, 3))
    perm = r.permutation(n)  # new position p holds old point perm[p]
    inv = np.argsort(perm)
    a = fps(pts, k, start=0).indices
    b = fps(pts[perm], k, start=int(inv[0])).indices
    assert tuple(int(perm[i]) for i in b) == a


def test_nn_match_exact_subset(rng):
    pts = rng.normal(size=(40, 3))
    idx = [7, 3, 30, 11, 0]
    rep = nn_match(GeneratedSet(pts[idx]), pts, 5)
    assert list(rep.selection.indices) == idx
    assert rep.completion_count == 0
    assert rep.unique_matches == 5
    assert rep.max_match_dist == 0.0


def test_nn_match_full_collision(rng):
    pts = rng.normal(size=(20, 3))
    g = np.repeat(pts[5:6] + 1e-3, 6, axis=0)
    rep = nn_match(g, pts, 6)
    assert rep.unique_matches == 1
    assert rep.completion_count == 5
    assert rep.selection.indices[0] == 5
    assert len(set(rep.selection.indices)) == 6


def test_nn_match_oracle(rng):
    for _ in range(40):
        n = int(rng.integers(5, 60))
        k = int(rng.integers(1, n + 1))
        pts = rng.normal(size=(n, 3))
        # draw generated points near a few cloud points to force collisions
        g = pts[rng.integers(0, n, size=k)] + rng.normal(scale=0.3, size=(k, 3))
        rep = nn_match(g, pts, k)
        sel, uniq = brute_nn_match(g, pts, k)
        assert list(rep.selection.indices) == sel
        assert rep.unique_matches == uniq
        assert rep.unique_matches == len(set(rep.assignment))
        assert rep.unique_matches + rep.completion_count == k


def test_nn_match_errors(rng):
    pts = rng.normal(size=(4, 3))
    with pytest.raises(ArgumentError):
        nn_match(rng.normal(size=(5, 3)), pts, 5)
    with pytest.raises(ArgumentError):
        nn_match(rng.normal(size=(3, 3)), pts, 2)


def plan_cost(assign, cost):
    return cost[np.arange(len(assign)), assign].sum()


def test_auction_against_enumeration(rng):
    for size in range(1, 8):
        for _ in range(5):
            cost = rng.uniform(0, 3, size=(size, size))
            assign, ok = sampler.auction_assignment(cost)
            assert ok
            best = min(plan_cost(np.array(p), cost) for p in itertools.permutations(range(size)))
            assert plan_cost(assign, cost) <= best * 1.05 + 1e-12


def enumerate_transport_optimum(g, pts):
    """Optimal discretized uniform transport cost by exhaustive permutation enumeration."""
    k, n = len(g), len(pts)
    size = math.lcm(k, n)
    pg = np.repeat(np.arange(k), size // k)
    pp = np.repeat(np.arange(n), size // n)
    cost = ((g[pg][:, None, :] - pts[pp][None, :, :]) ** 2).sum(-1)
    best = min(plan_cost(np.array(p), cost) for p in itertools.permutations(range(size)))
    return best / size


@pytest.mark.parametrize("k,n", [(1, 3), (2, 4), (3, 6), (2, 6), (4, 4), (1, 6), (2, 3)])
def test_emd_plan_cost_near_optimal(rng, k, n):
    for _ in range(3):
        pts = rng.normal(size=(n, 3))
        g = rng.normal(size=(k, 3))
        plan, ok = sampler.transport_plan(g, pts)
        assert ok
        np.testing.assert_allclose(plan.sum(axis=1), 1.0 / k)
        np.testing.assert_allclose(plan.sum(axis=0), 1.0 / n)
        d = ((g[:, None, :] - pts[None]) ** 2).sum(-1)
        cost = (plan * d).sum()
        opt = enumerate_transport_optimum(g, pts)
        assert cost <= opt * 1.05 + 1e-12
        rep = emd_match(g, pts, k)
        assert list(rep.assignment) == list(np.argmax(plan, axis=1))
        assert rep.unique_matches + rep.completion_count == k


def test_emd_identity(rng):
    pts = rng.normal(size=(6, 3))
    rep = emd_match(pts, pts, 6)
    assert rep.selection.indices == tuple(range(6))
    assert rep.completion_count == 0


def test_emd_collision_completes_like_nn(rng):
    pts = rng.normal(size=(8, 3))
    g = np.repeat(pts[2:3], 4, axis=0)
    rep = emd_match(g, pts, 4)
    assert len(set(rep.selection.indices)) == 4
    assert rep.unique_matches + rep.completion_count == 4


def test_emd_fallback_warns(rng):
    pts = rng.normal(size=(8, 3))
    g = rng.normal(size=(4, 3))
    with pytest.warns(RuntimeWarning):
        rep = emd_match(g, pts, 4, max_rounds=1)
    assert not rep.converged
    assert rep.selection.indices == nn_match(g, pts, 4, provenance="emd").selection.indices


def test_interpolate_sample(rng):
    g = rng.normal(size=(5, 3))
    s = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(interpolate_sample(g, s, EpsilonBall(0.0)), s)
    np.testing.assert_array_equal(interpolate_sample(g, s, sampler.UNBOUNDED), g)
    out = interpolate_sample([[1, 0, 0]], [[0, 0, 0]], 0.05)
    np.testing.assert_allclose(out, [[0.05, 0, 0]], atol=1e-15)
    with pytest.raises(ArgumentError):
        interpolate_sample(g, s[:4], 0.1)
    with pytest.raises(ArgumentError):
        EpsilonBall(-1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.floats(0, 2), st.integers(0, 2**31))
def test_interpolate_within_ball(k, eps, seed):
    r = np.random.default_rng(seed)
    g, s = r.normal(size=(k, 3)), r.normal(size=(k, 3))
    out = interpolate_sample(g, s, eps)
    assert np.all(np.sqrt(((out - s) ** 2).sum(axis=1)) <= eps + 1e-12)


def test_critical_set_sample(rng):
    pts = rng.normal(size=(10, 3))
    assert critical_set_sample(pts, np.zeros(10), 4).indices == (0, 1, 2, 3)
    onehot = np.zeros(10)
    onehot[6] = 3
    assert critical_set_sample(pts, onehot, 3).indices[0] == 6
    counts = rng.integers(0, 4, size=10)
    ref = sorted(range(10), key=lambda i: (-counts[i], i))[:5]
    assert list(critical_set_sample(pts, counts, 5).indices) == ref
    with pytest.raises(ArgumentError):
        critical_set_sample(pts, counts, 11)
    with pytest.raises(ArgumentError):
        critical_set_sample(pts, counts[:9], 2)


def test_progressive_prefix_by_construction(rng):
    pts = rng.normal(size=(32, 3))
    g = pts[rng.integers(0, 32, size=32)] + rng.normal(scale=0.2, size=(32, 3))
    full = progressive_order(g, pts).selection.indices
    assert sorted(full) == list(range(32))
    for c in (1, 2, 4, 8, 16, 32):
        assert progressive_sample(g, pts, c).indices == full[:c]
