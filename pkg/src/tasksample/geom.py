"""Point-cloud value types and brute-force geometric kernels.

All distances are squared Euclidean distances computed in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError

PROVENANCES = ("random", "fps", "snet", "progressive", "critical", "emd")


def as_points(a, name="points") -> np.ndarray:
    """Coerce ``a`` to a non-empty, finite ``(m, 3)`` float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ArgumentError(f"{name}: expected shape (m, 3), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ArgumentError(f"{name}: empty point list")
    if not np.all(np.isfinite(arr)):
        raise ArgumentError(f"{name}: non-finite coordinates")
    return arr


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    label: int | None = None
    id: str = ""

    def __post_init__(self):
        pts = as_points(self.points, "PointCloud")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class GeneratedSet:
    """Raw simplification-network output; not required to lie on the input."""

    points: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        pts = as_points(self.points, "GeneratedSet")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def k(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class SampleSelection:
    indices: tuple[int, ...]
    provenance: str
    n: int = field(default=0, compare=False)

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if self.provenance not in PROVENANCES:
            raise ArgumentError(f"unknown provenance {self.provenance!r}")
        if len(idx) == 0:
            raise ArgumentError("empty selection")
        if len(set(idx)) != len(idx):
            raise ArgumentError("selection has duplicate indices")
        if self.n and (min(idx) < 0 or max(idx) >= self.n):
            raise ArgumentError(f"selection index out of range [0, {self.n})")

    @property
    def k(self) -> int:
        return len(self.indices)

    def __len__(self):
        return len(self.indices)

    def array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.int64)

    def take(self, cloud) -> np.ndarray:
        return np.asarray(cloud)[self.array()]


def pairwise_sq_dist(a, b) -> np.ndarray:
    """``D[i, j] = ||a_i - b_j||^2`` computed from coordinate differences."""
    a = as_points(a, "a")
    b = as_points(b, "b")
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def nearest_in(query, cloud) -> tuple[int, float]:
    """Index and squared distance of the nearest cloud point (lowest index on ties)."""
    q = as_points(query, "query")
    if q.shape[0] != 1:
        raise ArgumentError("query must be a single point")
    d = pairwise_sq_dist(q, cloud)[0]
    i = int(np.argmin(d))
    return i, float(d[i])


def nearest_indices(a, b) -> tuple[np.ndarray, np.ndarray]:
    """For each row of ``a``: index of nearest ``b`` point and its squared distance."""
    d = pairwise_sq_dist(a, b)
    idx = np.argmin(d, axis=1)
    return idx, d[np.arange(d.shape[0]), idx]


def chamfer(a, b) -> float:
    d = pairwise_sq_dist(a, b)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def normalize_unit_sphere(points, center=None) -> np.ndarray:
    """Translate to ``center`` (default: centroid) and scale so the max norm is 1."""
    pts = as_points(points)
    c = pts.mean(axis=0) if center is None else np.asarray(center, dtype=np.float64)
    out = pts - c
    r = np.sqrt((out * out).sum(axis=1)).max()
    if r > 0:
        out = out / r
    return out
