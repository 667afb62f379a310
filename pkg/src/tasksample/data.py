"""Synthetic shape datasets: generators, augmentation, splits and file I/O.

Shapes are generated around the origin (the up axis is z), posed by a random
rotation about the up axis, perturbed by surface noise and scaled to the
unit sphere.
"""
from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, FormatError
from .geom import PointCloud, as_points

DATASET_MAGIC = b"TASD"
DATASET_VERSION = 1
SPLITS = ("train", "val", "test")

CLASSES = ("sphere", "cube", "cylinder", "cone", "torus", "pyramid", "ellipsoid", "cross")


def _unit(v):
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sphere(n, rng):
    return _unit(rng.normal(size=(n, 3)))


def _box_surface(n, rng, half):
    """Area-uniform samples on the surface of an axis-aligned box with half extents."""
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * np.asarray(half)
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * np.asarray(half)[axis]
    return pts


def _cube(n, rng):
    return _box_surface(n, rng, (1.0, 1.0, 1.0))


def _cylinder(n, rng):
    r = rng.uniform(0.4, 0.7)
    h = rng.uniform(0.8, 1.2)  # half height
    side, cap = 2 * math.pi * r * 2 * h, math.pi * r * r
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * math.pi, size=n)
    rad = np.where(part == 0, r, r * np.sqrt(rng.uniform(size=n)))
    z = np.where(part == 0, rng.uniform(-h, h, size=n), np.where(part == 1, h, -h))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _cone(n, rng):
    r = rng.uniform(0.6, 0.9)
    h = rng.uniform(1.4, 1.8)
    slant = math.sqrt(r * r + h * h)
    lateral, base = math.pi * r * slant, math.pi * r * r
    part = rng.uniform(size=n) < lateral / (lateral + base)
    theta = rng.uniform(0, 2 * math.pi, size=n)
    # lateral: distance from apex ~ sqrt(u) for area uniformity
    t = np.sqrt(rng.uniform(size=n))
    rad = np.where(part, r * t, r * np.sqrt(rng.uniform(size=n)))
    z = np.where(part, h * (1.0 - t), 0.0) - h / 2
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _torus(n, rng):
    big = 1.0
    small = rng.uniform(0.25, 0.45)
    out = np.empty((0, 3))
    while out.shape[0] < n:
        m = 2 * n
        u = rng.uniform(0, 2 * math.pi, size=m)
        v = rng.uniform(0, 2 * math.pi, size=m)
        keep = rng.uniform(size=m) < (big + small * np.cos(v)) / (big + small)
        u, v = u[keep], v[keep]
        ring = big + small * np.cos(v)
        out = np.vstack([out, np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1)])
    return out[:n]


def _triangles(n, rng, tris):
    tris = np.asarray(tris, dtype=np.float64)
    areas = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    which = rng.choice(len(tris), size=n, p=areas / areas.sum())
    a, b = rng.uniform(size=(2, n))
    flip = a + b > 1
    a[flip], b[flip] = 1 - a[flip], 1 - b[flip]
    t = tris[which]
    return t[:, 0] + a[:, None] * (t[:, 1] - t[:, 0]) + b[:, None] * (t[:, 2] - t[:, 0])


def _pyramid(n, rng):
    s = rng.uniform(0.8, 1.0)
    h = rng.uniform(1.3, 1.7)
    c = [(-s, -s, 0), (s, -s, 0), (s, s, 0), (-s, s, 0)]
    apex = (0, 0, h)
    tris = [(c[0], c[1], c[2]), (c[0], c[2], c[3])]
    tris += [(c[i], c[(i + 1) % 4], apex) for i in range(4)]
    pts = _triangles(n, rng, tris)
    pts[:, 2] -= h / 2
    return pts


def _ellipsoid(n, rng):
    axes = np.array([1.0, rng.uniform(0.45, 0.65), rng.uniform(0.2, 0.35)])
    return _sphere(n, rng) * axes


def _cross(n, rng):
    w = rng.uniform(0.18, 0.28)
    boxes = [(1.0, w, w), (w, 1.0, w), (w, w, 1.0)]
    out = np.empty((0, 3))
    while out.shape[0] < n:
        parts = [_box_surface(n, rng, b) for b in boxes]
        pts = np.vstack(parts)
        inside = np.zeros(len(pts), dtype=bool)
        for b in boxes:
            inside |= np.all(np.abs(pts) < np.asarray(b) - 1e-9, axis=1)
        out = np.vstack([out, pts[~inside]])
    return out[rng.permutation(out.shape[0])[:n]]


GENERATORS = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
    "pyramid": _pyramid,
    "ellipsoid": _ellipsoid,
    "cross": _cross,
}


def rotation_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def generate_shape(cls, n, rng, noise=0.01, scale_range=(0.7, 1.0), label=None, id=""):
    """n surface points of ``cls`` with random up-axis pose, scale and noise, unit-sphere normalized."""
    if cls not in GENERATORS:
        raise ArgumentError(f"unknown shape class {cls!r}; choose from {', '.join(CLASSES)}")
    if n < 8:
        raise ArgumentError("n must be >= 8")
    rng = np.random.default_rng(rng)
    pts = GENERATORS[cls](n, rng)
    pts = pts @ rotation_z(rng.uniform(0, 2 * math.pi)).T
    pts = pts * rng.uniform(*scale_range)
    if noise > 0:
        pts = pts + rng.normal(scale=noise, size=pts.shape)
    pts = pts / np.sqrt((pts * pts).sum(axis=1)).max()
    return PointCloud(pts, label, id)


def augment(cloud, rng, sigma=0.02, clip=0.05, angle=None):
    """Random rotation about the up axis plus clipped Gaussian jitter."""
    rng = np.random.default_rng(rng)
    pts = cloud.points if isinstance(cloud, PointCloud) else as_points(cloud)
    theta = rng.uniform(0, 2 * math.pi) if angle is None else angle
    out = pts @ rotation_z(theta).T
    if sigma > 0:
        out = out + np.clip(rng.normal(scale=sigma, size=out.shape), -clip, clip)
    if isinstance(cloud, PointCloud):
        return PointCloud(out, cloud.label, cloud.id)
    return out


def augment_batch(points, rng, sigma=0.02, clip=0.05):
    """Vectorized :func:`augment` over a ``(B, N, 3)`` array."""
    b = points.shape[0]
    theta = rng.uniform(0, 2 * math.pi, size=b)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.zeros((b, 3, 3))
    rot[:, 0, 0], rot[:, 0, 1], rot[:, 1, 0], rot[:, 1, 1], rot[:, 2, 2] = c, -s, s, c, 1.0
    out = np.einsum("bnj,bij->bni", points, rot)
    if sigma > 0:
        out = out + np.clip(rng.normal(scale=sigma, size=out.shape), -clip, clip)
    return out


@dataclass
class DatasetConfig:
    classes: tuple[str, ...] = CLASSES
    per_class: int = 640
    n: int = 256
    seed: int = 0
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1)
    noise: float = 0.01

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.splits = tuple(float(s) for s in self.splits)
        if len(self.splits) != 3 or abs(sum(self.splits) - 1.0) > 1e-9 or min(self.splits) < 0:
            raise ArgumentError(f"split fractions must be three non-negative numbers summing to 1, got {self.splits}")
        for c in self.classes:
            if c not in GENERATORS:
                raise ArgumentError(f"unknown shape class {c!r}")
        if self.per_class < 1:
            raise ArgumentError("per_class must be >= 1")

    def to_text(self) -> str:
        return "\n".join([
            f"classes={','.join(self.classes)}",
            f"per_class={self.per_class}",
            f"n={self.n}",
            f"seed={self.seed}",
            f"splits={','.join(repr(s) for s in self.splits)}",
            f"noise={self.noise!r}",
        ]) + "\n"

    @classmethod
    def from_dict(cls, kv: dict) -> "DatasetConfig":
        out = cls()
        if "classes" in kv:
            out.classes = tuple(c.strip() for c in str(kv["classes"]).split(",") if c.strip())
        for key, conv in (("per_class", int), ("n", int), ("seed", int), ("noise", float)):
            if key in kv:
                setattr(out, key, conv(kv[key]))
        if "splits" in kv:
            out.splits = tuple(float(s) for s in str(kv["splits"]).split(","))
        out.__post_init__()
        return out

    @classmethod
    def from_text(cls, text: str) -> "DatasetConfig":
        return cls.from_dict(parse_kv(text))


RECONSTRUCTION_CLASSES = ("sphere", "cube", "cylinder", "cone")


def reconstruction_config(**kw) -> DatasetConfig:
    opts = dict(classes=RECONSTRUCTION_CLASSES, splits=(0.85, 0.05, 0.10))
    opts.update(kw)
    return DatasetConfig(**opts)


def parse_kv(text: str) -> dict:
    """Parse a ``key=value`` config text; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ArgumentError(f"config line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


@dataclass
class Dataset:
    points: np.ndarray          # (M, n, 3)
    labels: np.ndarray          # (M,)
    ids: list[str]
    splits: np.ndarray          # (M,) index into SPLITS
    classes: tuple[str, ...]
    config_text: str = ""
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return self.points.shape[0]

    @property
    def n(self) -> int:
        return self.points.shape[1]

    def mask(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ArgumentError(f"unknown split {split!r}")
        return self.splits == SPLITS.index(split)

    def split(self, split: str):
        m = self.mask(split)
        return self.points[m], self.labels[m]

    def split_ids(self, split: str) -> list[str]:
        return [i for i, keep in zip(self.ids, self.mask(split)) if keep]

    def cloud(self, i: int) -> PointCloud:
        return PointCloud(self.points[i], int(self.labels[i]), self.ids[i])

    def with_points(self, points) -> "Dataset":
        """Same labels/splits with replaced (e.g. sampled) clouds."""
        return Dataset(np.asarray(points, dtype=np.float64), self.labels.copy(), list(self.ids),
                       self.splits.copy(), self.classes, self.config_text)


def cloud_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), int(index)])


def build_dataset(config: DatasetConfig) -> Dataset:
    """Deterministic dataset: every cloud draws from its own derived seed."""
    m = len(config.classes) * config.per_class
    points = np.empty((m, config.n, 3))
    labels = np.empty(m, dtype=np.int64)
    ids, splits = [], np.empty(m, dtype=np.int64)
    split_rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0x5e1]))
    n_train = int(round(config.splits[0] * config.per_class))
    n_val = int(round(config.splits[1] * config.per_class))
    i = 0
    for label, cls in enumerate(config.classes):
        order = split_rng.permutation(config.per_class)
        assign = np.empty(config.per_class, dtype=np.int64)
        assign[order[:n_train]] = 0
        assign[order[n_train:n_train + n_val]] = 1
        assign[order[n_train + n_val:]] = 2
        for j in range(config.per_class):
            rng = np.random.default_rng(cloud_seed(config.seed, i))
            pc = generate_shape(cls, config.n, rng, noise=config.noise)
            points[i] = pc.points
            labels[i] = label
            ids.append(f"{cls}_{j:05d}")
            splits[i] = assign[j]
            i += 1
    return Dataset(points, labels, ids, splits, config.classes, config.to_text())


def dataset_bytes(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    cfg = ds.config_text.encode("utf-8")
    classes = ",".join(ds.classes).encode("utf-8")
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<I", DATASET_VERSION))
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(classes)))
    buf.write(classes)
    buf.write(struct.pack("<I", len(ds)))
    for i in range(len(ds)):
        raw = ds.ids[i].encode("utf-8")
        pts = np.ascontiguousarray(ds.points[i], dtype="<f8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<iBI", int(ds.labels[i]), int(ds.splits[i]), pts.shape[0]))
        buf.write(pts.tobytes())
    return buf.getvalue()


def save_dataset(ds: Dataset, path) -> str:
    data = dataset_bytes(ds)
    with open(path, "wb") as f:
        f.write(data)
    return hashlib.sha256(data).hexdigest()


def dataset_from_bytes(data: bytes) -> Dataset:
    pos = 0

    def take(nbytes):
        nonlocal pos
        if pos + nbytes > len(data):
            raise FormatError("dataset file truncated")
        chunk = data[pos:pos + nbytes]
        pos += nbytes
        return chunk

    if take(4) != DATASET_MAGIC:
        raise FormatError("not a dataset file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version} (this build reads version {DATASET_VERSION})")
    (ln,) = struct.unpack("<I", take(4))
    cfg = take(ln).decode("utf-8")
    (ln,) = struct.unpack("<I", take(4))
    classes = tuple(c for c in take(ln).decode("utf-8").split(",") if c)
    (count,) = struct.unpack("<I", take(4))
    pts_list, labels, ids, splits = [], [], [], []
    for _ in range(count):
        (ln,) = struct.unpack("<I", take(4))
        ids.append(take(ln).decode("utf-8"))
        label, split, n = struct.unpack("<iBI", take(9))
        if split >= len(SPLITS):
            raise FormatError(f"bad split code {split}")
        arr = np.frombuffer(take(24 * n), dtype="<f8").reshape(n, 3)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"non-finite coordinates in cloud {ids[-1]}")
        pts_list.append(arr.astype(np.float64))
        labels.append(label)
        splits.append(split)
    if pos != len(data):
        raise FormatError("trailing bytes after dataset records")
    if len({p.shape[0] for p in pts_list}) > 1:
        raise FormatError("clouds of different sizes in one dataset")
    points = np.stack(pts_list) if pts_list else np.empty((0, 0, 3))
    return Dataset(points, np.asarray(labels, dtype=np.int64), ids,
                   np.asarray(splits, dtype=np.int64), classes, cfg)


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        return dataset_from_bytes(f.read())


def save_xyz(points, path):
    np.savetxt(path, as_points(points), fmt="%.17g")


def load_xyz(path) -> np.ndarray:
    try:
        arr = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as e:
        raise FormatError(f"bad XYZ file {path}: {e}") from e
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise FormatError(f"XYZ file {path} must have 3 columns")
    return arr
