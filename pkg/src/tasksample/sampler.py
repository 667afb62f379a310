"""Non-learned samplers and matching of generated points back onto the input cloud."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .geom import GeneratedSet, SampleSelection, as_points, nearest_indices, pairwise_sq_dist


@dataclass(frozen=True)
class EpsilonBall:
    epsilon: float

    def __post_init__(self):
        if not (self.epsilon >= 0):
            raise ArgumentError(f"epsilon must be >= 0, got {self.epsilon}")


UNBOUNDED = EpsilonBall(math.inf)


@dataclass(frozen=True)
class MatchReport:
    selection: SampleSelection
    unique_matches: int
    completion_count: int
    max_match_dist: float
    # per generated point, the input index it was matched to (before dedup)
    assignment: tuple[int, ...] = ()
    converged: bool = True


def _check_k(k, n):
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ArgumentError(f"k must be a positive integer, got {k!r}")
    if k > n:
        raise ArgumentError(f"k={k} exceeds cloud size n={n}")


def _points(x, name):
    if isinstance(x, GeneratedSet):
        return x.points
    if hasattr(x, "points") and not isinstance(x, np.ndarray):
        return x.points
    return as_points(x, name)


def random_sample(cloud, k, rng_seed=None) -> SampleSelection:
    pts = _points(cloud, "cloud")
    n = pts.shape[0]
    _check_k(k, n)
    rng = np.random.default_rng(rng_seed)
    idx = rng.permutation(n)[:k]
    return SampleSelection(tuple(idx), "random", n)


def _fps_continue(pts, selected, k):
    n = pts.shape[0]
    order = list(selected)
    mind = np.full(n, np.inf)
    for i in order:
        d = pts - pts[i]
        mind = np.minimum(mind, (d * d).sum(axis=1))
    mind[order] = -1.0
    while len(order) < k:
        i = int(np.argmax(mind))
        order.append(i)
        d = pts - pts[i]
        mind = np.minimum(mind, (d * d).sum(axis=1))
        mind[order] = -1.0
    return order


def fps(cloud, k, start=None, rng_seed=None, provenance="fps") -> SampleSelection:
    """Greedy farthest point sampling.

    ``start`` is either an index, an existing ``SampleSelection`` / index
    sequence to continue from, or None for a seeded-random start point.
    Ties in the max-min distance go to the lowest index.
    """
    pts = _points(cloud, "cloud")
    n = pts.shape[0]
    _check_k(k, n)
    if start is None:
        seed_idx = [int(np.random.default_rng(rng_seed).integers(n))]
    elif isinstance(start, (int, np.integer)):
        if not 0 <= start < n:
            raise ArgumentError(f"start index {start} out of range [0, {n})")
        seed_idx = [int(start)]
    else:
        seed_idx = list(start.indices if isinstance(start, SampleSelection) else start)
        if len(seed_idx) > k:
            raise ArgumentError(f"start selection of size {len(seed_idx)} larger than k={k}")
        if seed_idx and (min(seed_idx) < 0 or max(seed_idx) >= n):
            raise ArgumentError("start selection index out of range")
        if len(set(seed_idx)) != len(seed_idx):
            raise ArgumentError("start selection has duplicates")
        if not seed_idx:
            seed_idx = [int(np.random.default_rng(rng_seed).integers(n))]
    return SampleSelection(tuple(_fps_continue(pts, seed_idx, k)), provenance, n)


def _dedup_complete(assign, pts, k, provenance):
    seen = set()
    unique = []
    for i in assign:
        i = int(i)
        if i not in seen:
            seen.add(i)
            unique.append(i)
    order = _fps_continue(pts, unique, k) if len(unique) < k else unique
    return SampleSelection(tuple(order), provenance, pts.shape[0]), len(unique)


def nn_match(generated, cloud, k=None, provenance="snet") -> MatchReport:
    """Replace each generated point by its nearest input point, dedup, FPS-complete.

    Duplicates keep their first occurrence so the generated order survives
    into the selection; completion indices follow the matched ones.
    """
    g = _points(generated, "generated")
    pts = _points(cloud, "cloud")
    if k is None:
        k = g.shape[0]
    _check_k(k, pts.shape[0])
    if g.shape[0] != k:
        raise ArgumentError(f"|generated|={g.shape[0]} != k={k}")
    assign, d = nearest_indices(g, pts)
    sel, u = _dedup_complete(assign, pts, k, provenance)
    return MatchReport(sel, u, k - u, float(d.max()), tuple(int(i) for i in assign))


def auction_assignment(cost, eps_final=None, max_rounds=None, scale=4.0):
    """Minimum-cost square assignment by a Jacobi auction with epsilon scaling.

    Returns ``(person_to_object, converged)``. When ``max_rounds`` bidding
    rounds are exhausted the current (possibly partial) assignment is
    returned with ``converged=False``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    m = cost.shape[0]
    if cost.shape != (m, m):
        raise ArgumentError("auction needs a square cost matrix")
    benefit = -cost
    spread = float(benefit.max() - benefit.min())
    if spread == 0.0:
        return np.arange(m), True
    if eps_final is None:
        eps_final = spread * 1e-4 / m
    if max_rounds is None:
        max_rounds = 50 * m
    prices = np.zeros(m)
    eps = spread / scale
    rounds = 0
    rows = np.arange(m)
    while True:
        owner = np.full(m, -1)
        assigned = np.full(m, -1)
        while True:
            free = np.flatnonzero(assigned < 0)
            if free.size == 0:
                break
            if rounds >= max_rounds:
                return assigned, False
            rounds += 1
            vals = benefit[free] - prices
            if m == 1:
                best = np.zeros(free.size, dtype=np.int64)
                gap = np.full(free.size, eps)
            else:
                top2 = np.argpartition(-vals, 1, axis=1)[:, :2]
                v0 = vals[np.arange(free.size), top2[:, 0]]
                v1 = vals[np.arange(free.size), top2[:, 1]]
                swap = v1 > v0
                best = np.where(swap, top2[:, 1], top2[:, 0])
                gap = np.abs(v0 - v1) + eps
            bids = prices[best] + gap
            # highest bid per object wins; lowest bidder index on ties
            order = np.lexsort((free, -bids, best))
            first = np.ones(order.size, dtype=bool)
            first[1:] = best[order][1:] != best[order][:-1]
            win = order[first]
            objs = best[win]
            prev = owner[objs]
            assigned[prev[prev >= 0]] = -1
            owner[objs] = free[win]
            assigned[free[win]] = objs
            prices[objs] = bids[win]
        if eps <= eps_final:
            break
        eps = max(eps / scale, eps_final)
    assert np.array_equal(np.sort(assigned), rows)
    return assigned, True


def transport_plan(generated, cloud, max_size=4096, max_rounds=None):
    """Approximate uniform-mass transport plan between generated and cloud.

    Both sides are replicated to ``lcm(k, n)`` unit masses and solved as an
    assignment problem. Returns ``(plan, converged)`` with ``plan[i, j]`` the
    mass moved from generated point i to input point j (rows sum to 1/k).
    """
    g = _points(generated, "generated")
    pts = _points(cloud, "cloud")
    k, n = g.shape[0], pts.shape[0]
    size = math.lcm(k, n)
    if size > max_size:
        return None, False
    reps_g, reps_p = size // k, size // n
    pg = np.repeat(np.arange(k), reps_g)
    pp = np.repeat(np.arange(n), reps_p)
    cost = pairwise_sq_dist(g, pts)[np.ix_(pg, pp)]
    assigned, ok = auction_assignment(cost, max_rounds=max_rounds)
    if not ok:
        return None, False
    plan = np.zeros((k, n))
    np.add.at(plan, (pg, pp[assigned]), 1.0 / size)
    return plan, True


def emd_match(generated, cloud, k=None, max_rounds=None, provenance="emd") -> MatchReport:
    """Transport-based matching: each generated point takes its max-mass input point.

    Falls back to :func:`nn_match` (with ``converged=False`` and a warning) if the
    auction does not finish within its round budget.
    """
    g = _points(generated, "generated")
    pts = _points(cloud, "cloud")
    if k is None:
        k = g.shape[0]
    _check_k(k, pts.shape[0])
    if g.shape[0] != k:
        raise ArgumentError(f"|generated|={g.shape[0]} != k={k}")
    plan, ok = transport_plan(g, pts, max_rounds=max_rounds)
    if not ok:
        warnings.warn("emd_match: assignment did not converge, falling back to nn_match",
                      RuntimeWarning, stacklevel=2)
        rep = nn_match(g, pts, k, provenance=provenance)
        return MatchReport(rep.selection, rep.unique_matches, rep.completion_count,
                           rep.max_match_dist, rep.assignment, converged=False)
    assign = np.argmax(plan, axis=1)
    d = ((g - pts[assign]) ** 2).sum(axis=1)
    sel, u = _dedup_complete(assign, pts, k, provenance)
    return MatchReport(sel, u, k - u, float(d.max()), tuple(int(i) for i in assign))


def interpolate_sample(generated, matched_points, eps) -> np.ndarray:
    """Move each matched point toward its generated point, at most ``eps`` away."""
    g = _points(generated, "generated")
    s = _points(matched_points, "matched_points")
    if g.shape != s.shape:
        raise ArgumentError(f"length mismatch: {g.shape[0]} generated vs {s.shape[0]} matched")
    e = eps.epsilon if isinstance(eps, EpsilonBall) else float(eps)
    if not e >= 0:
        raise ArgumentError("epsilon must be >= 0")
    if math.isinf(e):
        return g.copy()
    diff = g - s
    dist = np.sqrt((diff * diff).sum(axis=1))
    out = g.copy()
    far = dist > e
    out[far] = s[far] + e * diff[far] / dist[far, None]
    return out


def critical_set_sample(cloud, contributions, k) -> SampleSelection:
    """The k points with the largest max-pool contribution counts."""
    pts = _points(cloud, "cloud")
    n = pts.shape[0]
    c = np.asarray(contributions)
    if c.shape != (n,):
        raise ArgumentError(f"contributions length {c.shape} != n={n}")
    _check_k(k, n)
    order = np.argsort(-c, kind="stable")[:k]
    return SampleSelection(tuple(order), "critical", n)


def progressive_order(generated_full, cloud) -> MatchReport:
    """Match the whole ProgressiveNet output once; any prefix is a sample."""
    g = _points(generated_full, "generated")
    return nn_match(g, cloud, g.shape[0], provenance="progressive")


def progressive_sample(generated_full, cloud, k) -> SampleSelection:
    rep = progressive_order(generated_full, cloud)
    _check_k(k, len(rep.selection))
    return SampleSelection(rep.selection.indices[:k], "progressive", rep.selection.n)
