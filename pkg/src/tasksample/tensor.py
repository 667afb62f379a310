"""A small layer-level reverse-mode autodiff engine for PointNet-style networks.

Networks are chains of: shared per-point dense layers, feature-wise max
pooling over points, dense layers, batch normalization and ReLU. ``forward``
records every primitive on a :class:`Tape`; ``backward`` replays the tape in
reverse, accumulating parameter gradients into a :class:`ParamStore`.

Eval mode uses an elementwise accumulation kernel instead of BLAS so every
output row depends only on its own input row. That makes outputs exactly
invariant to point order, duplication and batch composition.
"""
from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, FormatError, TrainingError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
CHECKPOINT_MAGIC = b"TASN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetSpec:
    """Shared per-point layers -> max pool -> dense layers.

    ``dense_widths[-1]`` is the output size. With ``out_points`` set the flat
    output is reshaped to ``(out_points, 3)``.
    """

    name: str
    point_widths: tuple[int, ...]
    dense_widths: tuple[int, ...]
    in_dim: int = 3
    out_points: int | None = None
    bn: bool = True
    n_points: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "point_widths", tuple(int(w) for w in self.point_widths))
        object.__setattr__(self, "dense_widths", tuple(int(w) for w in self.dense_widths))
        if not self.dense_widths:
            raise ArgumentError(f"{self.name}: at least one dense layer is required")
        if any(w < 1 for w in self.point_widths + self.dense_widths):
            raise ArgumentError(f"{self.name}: layer widths must be >= 1")
        if self.out_points is not None and self.dense_widths[-1] != 3 * self.out_points:
            raise ArgumentError(f"{self.name}: output width {self.dense_widths[-1]} != 3*{self.out_points}")

    @property
    def pooled_dim(self) -> int:
        return self.point_widths[-1] if self.point_widths else self.in_dim

    def layers(self):
        """Yield ``(kind, prefix, fan_in, fan_out, hidden)`` for every dense layer."""
        d = self.in_dim
        for i, w in enumerate(self.point_widths):
            yield "point", f"{self.name}.p{i}", d, w, True
            d = w
        last = len(self.dense_widths) - 1
        for i, w in enumerate(self.dense_widths):
            yield "dense", f"{self.name}.d{i}", d, w, i < last
            d = w


class ParamStore:
    """Named parameter arrays with gradient buffers and Adam state."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.trainable: set[str] = set()
        self.step = 0

    def add(self, name, value, trainable=True):
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        if trainable:
            self.trainable.add(name)
            self.grads[name] = np.zeros_like(value)
            self.m[name] = np.zeros_like(value)
            self.v[name] = np.zeros_like(value)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return sorted(self.params)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def num_trainable(self) -> int:
        return int(sum(self.params[n].size for n in self.trainable))

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n in self.names():
            out.add(n, self.params[n].copy(), n in self.trainable)
            if n in self.trainable:
                out.m[n] = self.m[n].copy()
                out.v[n] = self.v[n].copy()
        out.step = self.step
        return out

    def update(self, other: "ParamStore"):
        """Merge another store's parameters (e.g. combine networks for saving)."""
        for n in other.names():
            self.add(n, other.params[n], n in other.trainable)

    def subset(self, prefix: str) -> "ParamStore":
        out = ParamStore()
        for n in self.names():
            if n.startswith(prefix + "."):
                out.add(n, self.params[n], n in self.trainable)
        return out

    def astype(self, dtype):
        for n in self.names():
            self.params[n] = self.params[n].astype(dtype)
        return self

    def digest(self) -> str:
        return hashlib.sha256(checkpoint_bytes(self)).hexdigest()


def init_params(spec: NetSpec, rng, store: ParamStore | None = None) -> ParamStore:
    """Uniform fan-in weights, zero biases, unit/zero BN scale/shift."""
    store = ParamStore() if store is None else store
    rng = np.random.default_rng(rng)
    for _, prefix, fan_in, fan_out, hidden in spec.layers():
        limit = math.sqrt(6.0 / fan_in) if hidden else math.sqrt(1.0 / fan_in)
        store.add(f"{prefix}.W", rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        store.add(f"{prefix}.b", np.zeros(fan_out))
        if hidden and spec.bn:
            store.add(f"{prefix}.bn.gamma", np.ones(fan_out))
            store.add(f"{prefix}.bn.beta", np.zeros(fan_out))
            store.add(f"{prefix}.bn.mean", np.zeros(fan_out), trainable=False)
            store.add(f"{prefix}.bn.var", np.ones(fan_out), trainable=False)
    return store


@dataclass
class MaxPoolRecord:
    """Per-(item, feature) argmax point index of a max-pool layer."""

    indices: np.ndarray
    activations: np.ndarray

    def contributions(self) -> np.ndarray:
        """``(B, N)`` counts of pooled features won by each point."""
        b, n, _ = self.activations.shape
        out = np.zeros((b, n), dtype=np.int64)
        for i in range(b):
            out[i] = np.bincount(self.indices[i], minlength=n)
        return out


@dataclass
class Tape:
    train: bool = False
    exact: bool = True
    ops: list = field(default_factory=list)
    pool_records: list = field(default_factory=list)
    activations: dict = field(default_factory=dict)
    relu_masks: list = field(default_factory=list)
    mults: int = 0
    consumed: bool = False

    def signature(self) -> tuple:
        """Discrete state of the forward pass (ReLU masks, pool argmaxes)."""
        return tuple(m.tobytes() for m in self.relu_masks) + tuple(
            r.indices.tobytes() for r in self.pool_records)


def exact_linear(x2, W, b):
    """Row-independent ``x2 @ W + b`` (fixed left-to-right accumulation)."""
    out = np.empty((x2.shape[0], W.shape[1]), dtype=np.result_type(x2, W))
    out[...] = b
    for c in range(W.shape[0]):
        out += x2[:, c:c + 1] * W[c]
    return out


def _linear(tape: Tape, x, params, prefix):
    W = params[f"{prefix}.W"]
    b = params[f"{prefix}.b"]
    if x.shape[-1] != W.shape[0]:
        raise ArgumentError(f"layer {prefix}: input width {x.shape[-1]} != {W.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.reshape(-1, x.shape[-1])
    y2 = exact_linear(x2, W, b) if tape.exact else x2 @ W + b
    tape.mults += x2.shape[0] * W.shape[0] * W.shape[1]

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = {f"{prefix}.W": x2.T @ g2, f"{prefix}.b": g2.sum(axis=0)}
        return (g2 @ W.T).reshape(x.shape), grads

    tape.ops.append((f"{prefix}.linear", back))
    return y2.reshape(lead + (W.shape[1],))


def _batchnorm(tape: Tape, x, params, prefix, update_stats):
    gamma = params[f"{prefix}.bn.gamma"]
    beta = params[f"{prefix}.bn.beta"]
    axes = tuple(range(x.ndim - 1))
    if tape.train:
        m = int(np.prod(x.shape[:-1]))
        mu = x.mean(axis=axes)
        xc = x - mu
        var = (xc * xc).mean(axis=axes)
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = xc * inv
        y = xhat * gamma + beta
        tape.mults += 3 * x.size
        if update_stats:
            unbiased = var * m / (m - 1) if m > 1 else var
            rm = params.params[f"{prefix}.bn.mean"]
            rv = params.params[f"{prefix}.bn.var"]
            rm *= BN_MOMENTUM
            rm += (1.0 - BN_MOMENTUM) * mu
            rv *= BN_MOMENTUM
            rv += (1.0 - BN_MOMENTUM) * unbiased

        def back(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gamma
            dx = (inv / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
            return dx, {f"{prefix}.bn.gamma": dgamma, f"{prefix}.bn.beta": dbeta}
    else:
        mean = params[f"{prefix}.bn.mean"]
        inv = 1.0 / np.sqrt(params[f"{prefix}.bn.var"] + BN_EPS)
        scale = gamma * inv
        xc = x - mean
        y = xc * scale + beta
        tape.mults += x.size

        def back(g):
            return g * scale, {f"{prefix}.bn.gamma": (g * xc * inv).sum(axis=axes),
                               f"{prefix}.bn.beta": g.sum(axis=axes)}

    tape.ops.append((f"{prefix}.bn", back))
    return y


def _relu(tape: Tape, x, prefix):
    mask = x > 0
    tape.relu_masks.append(mask)

    def back(g):
        return g * mask, {}

    tape.ops.append((f"{prefix}.relu", back))
    return np.where(mask, x, 0.0)


def _maxpool(tape: Tape, x, prefix):
    idx = np.argmax(x, axis=1)  # (B, C); first maximum wins
    rec = MaxPoolRecord(idx, x)
    tape.pool_records.append(rec)
    b, n, c = x.shape
    bi = np.arange(b)[:, None]
    ci = np.arange(c)[None, :]

    def back(g):
        dx = np.zeros((b, n, c), dtype=g.dtype)
        dx[bi, idx, ci] = g
        return dx, {}

    tape.ops.append((f"{prefix}.maxpool", back))
    return x[bi, idx, ci]


def _reshape(tape: Tape, x, shape, prefix):
    orig = x.shape

    def back(g):
        return g.reshape(orig), {}

    tape.ops.append((f"{prefix}.reshape", back))
    return x.reshape(shape)


def forward(spec: NetSpec, params: ParamStore, batch, train=False, exact=None, update_stats=True):
    """Run ``spec`` on a ``(B, N, in_dim)`` batch; returns ``(outputs, tape)``.

    ``tape.activations`` holds ``"pooled"`` (global feature) and
    ``"descriptor"`` (input of the final dense layer).
    """
    x = np.asarray(batch)
    if x.ndim != 3 or x.shape[2] != spec.in_dim:
        raise ArgumentError(f"{spec.name}: expected batch (B, N, {spec.in_dim}), got {x.shape}")
    if x.shape[1] < 1:
        raise ArgumentError(f"{spec.name}: clouds must have at least one point")
    if spec.n_points is not None and x.shape[1] != spec.n_points:
        raise ArgumentError(f"{spec.name}: expected {spec.n_points} points per cloud, got {x.shape[1]}")
    dtype = params[f"{spec.name}.d0.W"].dtype
    x = x.astype(dtype, copy=False)
    tape = Tape(train=train, exact=(not train) if exact is None else exact)
    for kind, prefix, _, _, hidden in spec.layers():
        if kind == "dense" and x.ndim == 3:
            x = _maxpool(tape, x, f"{spec.name}.pool")
            tape.activations["pooled"] = x
        if kind == "dense" and not hidden:
            tape.activations["descriptor"] = x
        x = _linear(tape, x, params, prefix)
        if hidden:
            if spec.bn:
                x = _batchnorm(tape, x, params, prefix, update_stats)
            x = _relu(tape, x, prefix)
    if spec.out_points is not None:
        x = _reshape(tape, x, (x.shape[0], spec.out_points, 3), spec.name)
    return x, tape


def evaluate(spec: NetSpec, params: ParamStore, batch):
    """Eval-mode outputs without keeping the tape."""
    out, _ = forward(spec, params, batch, train=False)
    return out


def backward(tape: Tape, output_grad, params: ParamStore | None = None):
    """Reverse the tape. Accumulates (+=) into ``params.grads`` unless ``params`` is None.

    Returns the gradient w.r.t. the network input.
    """
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward pass")
    tape.consumed = True
    g = np.asarray(output_grad)
    for _, back in reversed(tape.ops):
        g, grads = back(g)
        if params is not None:
            for name, val in grads.items():
                if name in params.trainable:
                    params.grads[name] += val
    return g


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = logits.shape[0]
    loss = -logp[np.arange(b), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return float(loss), grad / b


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    decay_rate: float = 0.7
    decay_steps: int = 60000

    def learning_rate(self, step: int) -> float:
        return self.lr * self.decay_rate ** (step // self.decay_steps)


def adam_step(params: ParamStore, hyper: AdamConfig = AdamConfig()):
    """One bias-corrected Adam update with staircase decay; zeroes the gradients."""
    for name in sorted(params.trainable):
        if not np.all(np.isfinite(params.grads[name])):
            raise TrainingError(f"non-finite gradient in parameter {name}")
    lr = hyper.learning_rate(params.step)
    params.step += 1
    t = params.step
    bc1 = 1.0 - hyper.beta1 ** t
    bc2 = 1.0 - hyper.beta2 ** t
    for name in sorted(params.trainable):
        g = params.grads[name]
        m = params.m[name]
        v = params.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * (g * g)
        params.params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.eps_hat)
        g.fill(0.0)
    return params


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: tuple[str, int] | None
    checked: int
    excluded: list = field(default_factory=list)

    def ok(self, tol=1e-4) -> bool:
        return self.max_rel_err <= tol


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(spec: NetSpec, params: ParamStore, batch, loss_fn, h=1e-5, train=True,
               max_params=5000, floor=1e-6) -> GradCheckReport:
    """Compare backward against central differences for every trainable entry.

    ``loss_fn(outputs) -> (loss, d loss / d outputs)``. Entries whose ±h
    perturbation changes a ReLU mask or a max-pool argmax are reported as
    excluded instead of compared.
    """
    n_params = params.num_trainable()
    if n_params > max_params:
        raise ArgumentError(f"grad_check capped at {max_params} parameters, network has {n_params}")
    work = params.copy()
    work.zero_grad()
    out, tape = forward(spec, work, batch, train=train, exact=False, update_stats=False)
    _, dout = loss_fn(out)
    backward(tape, dout, work)
    base_sig = tape.signature()
    worst, worst_err, checked, excluded = None, 0.0, 0, []
    for name in sorted(work.trainable):
        p = work.params[name]
        flat = p.reshape(-1)
        analytic = work.grads[name].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            op, tp = forward(spec, work, batch, train=train, exact=False, update_stats=False)
            lp = loss_fn(op)[0]
            flat[i] = old - h
            om, tm = forward(spec, work, batch, train=train, exact=False, update_stats=False)
            lm = loss_fn(om)[0]
            flat[i] = old
            if tp.signature() != base_sig or tm.signature() != base_sig:
                excluded.append((name, i))
                continue
            num = (lp - lm) / (2 * h)
            err = rel_err(analytic[i], num, floor)
            checked += 1
            if err > worst_err or worst is None:
                worst_err, worst = err, (name, i)
    return GradCheckReport(worst_err, worst, checked, excluded)


def checkpoint_bytes(params: ParamStore) -> bytes:
    buf = io.BytesIO()
    names = params.names()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(names)))
    for name in names:
        arr = np.ascontiguousarray(params.params[name], dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_params(params: ParamStore, path):
    data = checkpoint_bytes(params)
    with open(path, "wb") as f:
        f.write(data)
    return hashlib.sha256(data).hexdigest()


def _non_trainable(name: str) -> bool:
    return name.endswith(".bn.mean") or name.endswith(".bn.var")


def params_from_bytes(data: bytes) -> ParamStore:
    view = memoryview(data)
    pos = 0

    def take(nbytes):
        nonlocal pos
        if pos + nbytes > len(view):
            raise FormatError("checkpoint truncated")
        chunk = view[pos:pos + nbytes]
        pos += nbytes
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    store = ParamStore()
    for _ in range(count):
        (ln,) = struct.unpack("<I", take(4))
        name = bytes(take(ln)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(bytes(take(8 * size)), dtype="<f8").reshape(shape)
        store.add(name, arr.astype(np.float64), trainable=not _non_trainable(name))
    if pos != len(view):
        raise FormatError("trailing bytes after checkpoint records")
    return store


def load_params(path) -> ParamStore:
    with open(path, "rb") as f:
        return params_from_bytes(f.read())
