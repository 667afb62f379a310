"""Network definitions and training loops.

Four networks share one PointNet-like skeleton (``tensor.NetSpec``):

* task classifier: per-point layers, max pool, dense layers ending in logits
* autoencoder: per-point encoder, max pool to a latent code, dense decoder to n x 3
* S-NET: per-point layers, max pool, dense layers ending in k x 3 generated points
* ProgressiveNet: an S-NET with k == n whose output order ranks points
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset, augment_batch
from .errors import ArgumentError, TrainingError
from .geom import GeneratedSet, as_points, pairwise_sq_dist
from .loss import (CHAMFER_ONLY, PROGRESSIVE_CLASSIFICATION, RECONSTRUCTION, SNET_CLASSIFICATION,
                   LossWeights, check_sizes, default_sizes, sampling_loss)

WIDE_CLS_POINT_WIDTHS = (64, 64, 64, 128, 128)
WIDE_CLS_DENSE_WIDTHS = (256, 256, 256)


@dataclass(frozen=True)
class TaskClassifierSpec:
    num_classes: int
    point_widths: tuple[int, ...] = (32, 32, 64)
    dense_widths: tuple[int, ...] = (64, 32)
    bn: bool = True
    name: str = "task"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ArgumentError("num_classes must be >= 2")
        if not self.dense_widths:
            raise ArgumentError("need a penultimate dense layer for the descriptor")

    @property
    def descriptor_index(self) -> int:
        return len(self.dense_widths) - 1

    def net(self) -> T.NetSpec:
        return T.NetSpec(self.name, self.point_widths, tuple(self.dense_widths) + (self.num_classes,), bn=self.bn)


@dataclass(frozen=True)
class SNetSpec:
    k: int
    point_widths: tuple[int, ...] = (32, 32, 64)
    dense_widths: tuple[int, ...] = (64, 64)
    bn: bool = True
    n: int | None = None
    name: str = "snet"

    def __post_init__(self):
        if self.k < 1:
            raise ArgumentError("k must be >= 1")

    def net(self) -> T.NetSpec:
        return T.NetSpec(self.name, self.point_widths, tuple(self.dense_widths) + (3 * self.k,),
                         out_points=self.k, bn=self.bn, n_points=self.n)


@dataclass(frozen=True)
class ProgressiveSpec:
    n: int
    sizes: tuple[int, ...] = ()
    point_widths: tuple[int, ...] = (32, 32, 64)
    dense_widths: tuple[int, ...] = (64, 64)
    bn: bool = True
    name: str = "prog"

    def __post_init__(self):
        sizes = tuple(self.sizes) if self.sizes else tuple(default_sizes(self.n))
        object.__setattr__(self, "sizes", tuple(check_sizes(sizes, self.n)))

    def net(self) -> T.NetSpec:
        return T.NetSpec(self.name, self.point_widths, tuple(self.dense_widths) + (3 * self.n,),
                         out_points=self.n, bn=self.bn, n_points=self.n)


@dataclass(frozen=True)
class AutoencoderSpec:
    n: int
    encoder_widths: tuple[int, ...] = (32, 64)
    latent: int = 32
    decoder_widths: tuple[int, ...] = (128, 256)
    bn: bool = True
    name: str = "ae"

    def net(self) -> T.NetSpec:
        return T.NetSpec(self.name, tuple(self.encoder_widths) + (self.latent,),
                         tuple(self.decoder_widths) + (3 * self.n,), out_points=self.n, bn=self.bn)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    adam: T.AdamConfig = field(default_factory=T.AdamConfig)
    weights: LossWeights = SNET_CLASSIFICATION
    seed: int = 0
    augment: bool = True
    deterministic: bool = False
    divide_by_sizes: bool = False
    eval_every: int = 1
    log: list | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ArgumentError("epochs and batch_size must be >= 1")


def _record(cfg: TrainConfig, history, epoch, split, metric, value):
    row = (epoch, split, metric, float(value))
    history.append(row)
    if cfg.log is not None:
        cfg.log.append(row)


def format_log(history) -> str:
    return "".join(f"{e}\t{s}\t{m}\t{v:.6g}\n" for e, s, m, v in history)


def _check_finite(value, what, epoch):
    if not math.isfinite(value):
        raise TrainingError(f"{what} diverged (non-finite loss) in epoch {epoch}")


def _batches(m, batch_size, rng):
    order = rng.permutation(m)
    for s in range(0, m, batch_size):
        yield order[s:s + batch_size]


def _as_batch(cloud):
    pts = cloud.points if hasattr(cloud, "points") and not isinstance(cloud, np.ndarray) else cloud
    pts = np.asarray(pts, dtype=np.float64)
    return pts[None] if pts.ndim == 2 else pts


# -- inference ----------------------------------------------------------------


def classify_batch(spec: TaskClassifierSpec, params, batch, chunk=64):
    """Eval-mode logits, descriptors and critical contributions for a ``(B, N, 3)`` batch."""
    net = spec.net()
    batch = np.asarray(batch, dtype=np.float64)
    logits, desc, contrib = [], [], []
    for s in range(0, batch.shape[0], chunk):
        out, tape = T.forward(net, params, batch[s:s + chunk], train=False)
        logits.append(out)
        desc.append(tape.activations["descriptor"])
        contrib.append(tape.pool_records[0].contributions())
    return np.concatenate(logits), np.concatenate(desc), np.concatenate(contrib)


def classify(spec: TaskClassifierSpec, params, cloud):
    logits, desc, contrib = classify_batch(spec, params, _as_batch(cloud))
    return {"logits": logits[0], "descriptor": desc[0], "critical_contributions": contrib[0]}


def generate_batch(spec, params, batch, chunk=64):
    net = spec.net()
    batch = np.asarray(batch, dtype=np.float64)
    outs = [T.evaluate(net, params, batch[s:s + chunk]) for s in range(0, batch.shape[0], chunk)]
    return np.concatenate(outs)


def snet_generate(spec, params, cloud, source_id="") -> GeneratedSet:
    pts = as_points(cloud.points if hasattr(cloud, "points") else cloud)
    if getattr(spec, "n", None) is not None and pts.shape[0] != spec.n:
        raise ArgumentError(f"{spec.name}: expected {spec.n} input points, got {pts.shape[0]}")
    g = generate_batch(spec, params, pts[None])[0]
    return GeneratedSet(g, source_id or getattr(cloud, "id", ""))


def reconstruct_batch(spec: AutoencoderSpec, params, batch, chunk=64):
    return generate_batch(spec, params, batch, chunk)


def accuracy(spec, params, points, labels) -> float:
    logits, _, _ = classify_batch(spec, params, points)
    return float((logits.argmax(axis=1) == labels).mean())


def chamfer_grad(recon, target):
    """Chamfer distance of one pair and its gradient w.r.t. ``recon``."""
    br = sampling_loss(recon, target, CHAMFER_ONLY)
    return br.l_s, br.grad_g


def mean_chamfer(recon_batch, target_batch) -> float:
    vals = []
    for r, t in zip(recon_batch, target_batch):
        d = pairwise_sq_dist(r, t)
        vals.append(d.min(axis=1).mean() + d.min(axis=0).mean())
    return float(np.mean(vals))


# -- training -----------------------------------------------------------------


def train_task_classifier(dataset: Dataset, spec: TaskClassifierSpec, cfg: TrainConfig, params=None):
    """Train the classifier on the train split; returns ``(params, history)``."""
    net = spec.net()
    rng = np.random.default_rng(cfg.seed)
    params = T.init_params(net, rng) if params is None else params
    x_tr, y_tr = dataset.split("train")
    x_te, y_te = dataset.split("test")
    if len(y_tr) == 0:
        raise ArgumentError("dataset has no training clouds")
    history = []
    for epoch in range(1, cfg.epochs + 1):
        losses, correct = [], 0
        for idx in _batches(len(y_tr), cfg.batch_size, rng):
            xb = x_tr[idx]
            if cfg.augment:
                xb = augment_batch(xb, rng)
            logits, tape = T.forward(net, params, xb, train=True)
            loss, dlogits = T.softmax_cross_entropy(logits, y_tr[idx])
            _check_finite(loss, "classifier training", epoch)
            T.backward(tape, dlogits, params)
            T.adam_step(params, cfg.adam)
            losses.append(loss * len(idx))
            correct += int((logits.argmax(axis=1) == y_tr[idx]).sum())
        _record(cfg, history, epoch, "train", "loss", sum(losses) / len(y_tr))
        _record(cfg, history, epoch, "train", "accuracy", correct / len(y_tr))
        if len(y_te) and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            _record(cfg, history, epoch, "test", "accuracy", accuracy(spec, params, x_te, y_te))
    return params, history


@dataclass
class FrozenTask:
    """A pre-trained task network whose parameters are never updated."""

    spec: TaskClassifierSpec | AutoencoderSpec
    params: T.ParamStore

    @property
    def kind(self) -> str:
        return "cls" if isinstance(self.spec, TaskClassifierSpec) else "ae"

    def loss(self, g_batch, labels, targets):
        """Mean task loss over the batch and its gradient w.r.t. the generated points."""
        out, tape = T.forward(self.spec.net(), self.params, g_batch, train=False, exact=False)
        if self.kind == "cls":
            loss, dout = T.softmax_cross_entropy(out, labels)
        else:
            b = out.shape[0]
            dout = np.empty_like(out)
            loss = 0.0
            for i in range(b):
                li, gi = chamfer_grad(out[i], targets[i])
                loss += li / b
                dout[i] = gi / b
        return loss, T.backward(tape, dout, None)


def _sampler_step(net, sparams, task: FrozenTask, xb, yb, targets, weights, sizes, divide, adam):
    """One optimizer step of S-NET (``sizes`` None) or ProgressiveNet; returns the batch loss."""
    g, tape = T.forward(net, sparams, xb, train=True)
    b = g.shape[0]
    dg = np.zeros_like(g)
    total = 0.0
    terms = [g.shape[1]] if sizes is None else sizes
    dists = [pairwise_sq_dist(g[i], xb[i]) for i in range(b)]
    for c in terms:
        t_loss, t_grad = task.loss(g[:, :c], yb, targets)
        total += t_loss
        dg[:, :c] += t_grad
        for i in range(b):
            br = sampling_loss(g[i, :c], xb[i], weights, dist=dists[i][:c])
            total += weights.alpha * br.l_s / b
            dg[i, :c] += weights.alpha * br.grad_g / b
    if sizes is not None and divide:
        total /= len(sizes)
        dg /= len(sizes)
    T.backward(tape, dg, sparams)
    T.adam_step(sparams, adam)
    return total


def _train_sampler(dataset, task, spec, cfg, sizes, params=None, targets_from=None):
    net = spec.net()
    rng = np.random.default_rng(cfg.seed)
    sparams = T.init_params(net, rng) if params is None else params
    x_tr, y_tr = dataset.split("train")
    x_te, _ = dataset.split("test")
    if len(y_tr) == 0:
        raise ArgumentError("dataset has no training clouds")
    before = task.params.digest()
    history = []
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in _batches(len(y_tr), cfg.batch_size, rng):
            xb = x_tr[idx]
            if cfg.augment:
                xb = augment_batch(xb, rng)
            loss = _sampler_step(net, sparams, task, xb, y_tr[idx], xb, cfg.weights, sizes,
                                 cfg.divide_by_sizes, cfg.adam)
            _check_finite(loss, f"{spec.name} training", epoch)
            losses.append(loss * len(idx))
        _record(cfg, history, epoch, "train", "loss", sum(losses) / len(y_tr))
        if len(x_te) and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            g = generate_batch(spec, sparams, x_te)
            lf = np.mean([sampling_loss(g[i], x_te[i], cfg.weights).l_f for i in range(len(x_te))])
            _record(cfg, history, epoch, "test", "l_f", lf)
    if task.params.digest() != before:
        raise TrainingError("task network parameters changed during sampler training")
    return sparams, history


def train_snet(dataset: Dataset, task: FrozenTask, k: int, cfg: TrainConfig, spec: SNetSpec | None = None,
               params=None):
    """Train an S-NET for sample size k through the frozen task network."""
    spec = SNetSpec(k) if spec is None else spec
    if spec.k != k:
        raise ArgumentError(f"spec.k={spec.k} != k={k}")
    if k > dataset.n:
        raise ArgumentError(f"k={k} exceeds cloud size {dataset.n}")
    return _train_sampler(dataset, task, spec, cfg, None, params)


def train_progressivenet(dataset: Dataset, task: FrozenTask, sizes, cfg: TrainConfig,
                         spec: ProgressiveSpec | None = None, params=None):
    """Train a ProgressiveNet with one S-NET loss term per prefix size."""
    spec = ProgressiveSpec(dataset.n, tuple(sizes) if sizes else ()) if spec is None else spec
    return _train_sampler(dataset, task, spec, cfg, list(spec.sizes), params)


def train_autoencoder(dataset: Dataset, spec: AutoencoderSpec, cfg: TrainConfig, params=None, split="train"):
    """Minimize Chamfer distance between clouds and their reconstructions."""
    net = spec.net()
    rng = np.random.default_rng(cfg.seed)
    params = T.init_params(net, rng) if params is None else params
    x_tr, _ = dataset.split(split)
    x_te, _ = dataset.split("test")
    history = []
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in _batches(len(x_tr), cfg.batch_size, rng):
            xb = x_tr[idx]
            if cfg.augment:
                xb = augment_batch(xb, rng)
            recon, tape = T.forward(net, params, xb, train=True)
            b = recon.shape[0]
            drecon = np.empty_like(recon)
            loss = 0.0
            for i in range(b):
                li, gi = chamfer_grad(recon[i], xb[i])
                loss += li / b
                drecon[i] = gi / b
            _check_finite(loss, "autoencoder training", epoch)
            T.backward(tape, drecon, params)
            T.adam_step(params, cfg.adam)
            losses.append(loss * b)
        _record(cfg, history, epoch, split, "chamfer", sum(losses) / len(x_tr))
        if len(x_te) and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            _record(cfg, history, epoch, "test", "chamfer",
                    mean_chamfer(reconstruct_batch(spec, params, x_te), x_te))
    return params, history


def _widths(params, prefix, kind):
    out, i = [], 0
    while f"{prefix}.{kind}{i}.W" in params:
        out.append(params[f"{prefix}.{kind}{i}.W"].shape[1])
        i += 1
    return tuple(out)


def spec_from_params(params: T.ParamStore):
    """Recover the network spec of a checkpoint from its parameter names and shapes."""
    names = {n.split(".", 1)[0] for n in params.names()}
    if len(names) != 1:
        raise ArgumentError(f"checkpoint holds several networks: {sorted(names)}")
    name = names.pop()
    pw, dw = _widths(params, name, "p"), _widths(params, name, "d")
    if not dw:
        raise ArgumentError(f"checkpoint {name!r} has no dense layers")
    if f"{name}.p0.W" in params and params[f"{name}.p0.W"].shape[0] != 3:
        raise ArgumentError(f"checkpoint {name!r} does not take 3D points")
    bn = any(n.endswith(".bn.gamma") for n in params.names())
    if name == "task":
        return TaskClassifierSpec(dw[-1], pw, dw[:-1], bn=bn)
    if name == "ae":
        return AutoencoderSpec(dw[-1] // 3, pw[:-1], pw[-1], dw[:-1], bn=bn)
    if name == "prog":
        return ProgressiveSpec(dw[-1] // 3, point_widths=pw, dense_widths=dw[:-1], bn=bn)
    return SNetSpec(dw[-1] // 3, pw, dw[:-1], bn=bn, name=name)


def adversarial_simplify(input_cloud, target_cloud, task: FrozenTask, k: int, cfg: TrainConfig,
                         spec: SNetSpec | None = None):
    """Train an S-NET on one pair: sample near ``input_cloud``, reconstruct ``target_cloud``.

    Returns ``(params, GeneratedSet, history)``. Batch norm is disabled since
    the batch holds a single cloud.
    """
    if task.kind != "ae":
        raise ArgumentError("adversarial simplification needs an autoencoder task network")
    x = as_points(getattr(input_cloud, "points", input_cloud))[None]
    tgt = as_points(getattr(target_cloud, "points", target_cloud))[None]
    spec = SNetSpec(k, bn=False, name="adv") if spec is None else spec
    net = spec.net()
    rng = np.random.default_rng(cfg.seed)
    sparams = T.init_params(net, rng)
    history = []
    w = cfg.weights
    for step in range(1, cfg.epochs + 1):
        g, tape = T.forward(net, sparams, x, train=True)
        t_loss, t_grad = task.loss(g, None, tgt)
        br = sampling_loss(g[0], x[0], w)
        loss = t_loss + w.alpha * br.l_s
        _check_finite(loss, "adversarial training", step)
        T.backward(tape, t_grad + w.alpha * br.grad_g[None], sparams)
        T.adam_step(sparams, cfg.adam)
        if step % cfg.eval_every == 0 or step == cfg.epochs:
            _record(cfg, history, step, "train", "task", t_loss)
            _record(cfg, history, step, "train", "l_f", br.l_f)
    g = T.evaluate(net, sparams, x)[0]
    return sparams, GeneratedSet(g, getattr(input_cloud, "id", "")), history


__all__ = [
    "TaskClassifierSpec", "SNetSpec", "ProgressiveSpec", "AutoencoderSpec", "TrainConfig", "FrozenTask",
    "classify", "classify_batch", "snet_generate", "generate_batch", "reconstruct_batch", "accuracy",
    "train_task_classifier", "train_snet", "train_progressivenet", "train_autoencoder",
    "adversarial_simplify", "spec_from_params", "mean_chamfer", "format_log", "PROGRESSIVE_CLASSIFICATION", "RECONSTRUCTION",
]
