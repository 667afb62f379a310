"""Evaluation protocols, resource accounting and result tables."""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from . import nets as N
from . import tensor as T
from .data import Dataset
from .errors import ArgumentError, ConfigurationError
from .geom import pairwise_sq_dist
from .sampler import (critical_set_sample, emd_match, fps, interpolate_sample, nn_match,
                      progressive_sample, random_sample)

METHODS = ("random", "fps", "snet", "progressive", "critical", "generated", "epsilon", "snet+fps", "emd")
TABLE_HEADER = ("method", "k", "sampling_ratio", "metric", "value", "seed")


@dataclass(frozen=True)
class ResultRow:
    method: str
    k: int
    sampling_ratio: float
    metric: str
    value: float
    seed: int


@dataclass
class ExperimentResult:
    rows: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def add(self, method, k, n, metric, value, seed):
        if k < 1 or k > n:
            raise ArgumentError(f"row k={k} outside [1, {n}]")
        self.rows.append(ResultRow(method, int(k), n / k, metric, float(value), int(seed)))

    def extend(self, other: "ExperimentResult"):
        self.rows.extend(other.rows)
        self.provenance.update(other.provenance)
        return self

    def value(self, method, k, metric, seed=None):
        vals = [r.value for r in self.rows
                if r.method == method and r.k == k and r.metric == metric and (seed is None or r.seed == seed)]
        if not vals:
            raise KeyError((method, k, metric, seed))
        return vals[0] if seed is not None else vals

    def sorted_rows(self):
        return sorted(self.rows, key=lambda r: (r.method, r.k, r.seed))


@dataclass
class SamplerBank:
    """Trained samplers available to the evaluation protocols.

    ``snet`` maps ``(k, seed)`` or ``k`` to ``(SNetSpec, params)``. ``critical``
    is the network whose max-pool record ranks points (usually the task net).
    """

    snet: dict = field(default_factory=dict)
    progressive: tuple | None = None
    critical: tuple | None = None

    def snet_for(self, k, seed):
        for key in ((k, seed), k):
            if key in self.snet:
                return self.snet[key]
        raise ConfigurationError(f"missing S-NET checkpoint for k={k} (seed {seed})")

    def snet_below(self, k, seed):
        ks = sorted({key[0] if isinstance(key, tuple) else key for key in self.snet})
        below = [c for c in ks if c <= k]
        if not below:
            raise ConfigurationError(f"missing S-NET checkpoint with k <= {k}")
        return below[-1], self.snet_for(below[-1], seed)

    def need_progressive(self):
        if self.progressive is None:
            raise ConfigurationError("missing ProgressiveNet checkpoint")
        return self.progressive

    def need_critical(self):
        if self.critical is None:
            raise ConfigurationError("missing task checkpoint for critical-set sampling")
        return self.critical


def _contributions(spec, params, batch):
    net = spec.net() if hasattr(spec, "net") else spec
    out = []
    for s in range(0, batch.shape[0], 64):
        _, tape = T.forward(net, params, batch[s:s + 64])
        out.append(tape.pool_records[0].contributions())
    return np.concatenate(out)


def sample_batch(points, method, k, seed=0, bank: SamplerBank | None = None, epsilon=None,
                 deterministic=False):
    """Sample every cloud of a ``(B, n, 3)`` batch down to ``(B, k, 3)``.

    ``k == n`` returns the full clouds for every method. Cloud ``i`` draws
    its randomness from ``SeedSequence([seed, i])``.
    """
    pts = np.asarray(points, dtype=np.float64)
    b, n, _ = pts.shape
    if method not in METHODS:
        raise ArgumentError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= n:
        raise ArgumentError(f"k must be in [1, {n}], got {k!r}")
    if k == n:
        return pts.copy()
    bank = SamplerBank() if bank is None else bank
    seeds = [np.random.SeedSequence([int(seed), i]) for i in range(b)]
    out = np.empty((b, k, 3))
    if method == "random":
        for i in range(b):
            out[i] = random_sample(pts[i], k, seeds[i]).take(pts[i])
    elif method == "fps":
        for i in range(b):
            start = 0 if deterministic else None
            out[i] = fps(pts[i], k, start=start, rng_seed=seeds[i]).take(pts[i])
    elif method == "critical":
        spec, params = bank.need_critical()
        contrib = _contributions(spec, params, pts)
        for i in range(b):
            out[i] = critical_set_sample(pts[i], contrib[i], k).take(pts[i])
    elif method == "progressive":
        spec, params = bank.need_progressive()
        g = N.generate_batch(spec, params, pts)
        for i in range(b):
            out[i] = progressive_sample(g[i], pts[i], k).take(pts[i])
    elif method == "snet+fps":
        kk, (spec, params) = bank.snet_below(k, seed)
        g = N.generate_batch(spec, params, pts)
        for i in range(b):
            start = nn_match(g[i], pts[i], kk).selection
            out[i] = fps(pts[i], k, start=start).take(pts[i])
    else:
        spec, params = bank.snet_for(k, seed)
        g = N.generate_batch(spec, params, pts)
        if method == "generated":
            return g
        if method == "epsilon" and epsilon is None:
            raise ArgumentError("method 'epsilon' needs an epsilon")
        for i in range(b):
            if method == "emd":
                out[i] = emd_match(g[i], pts[i], k).selection.take(pts[i])
                continue
            rep = nn_match(g[i], pts[i], k)
            if method == "snet":
                out[i] = rep.selection.take(pts[i])
            else:
                out[i] = interpolate_sample(g[i], pts[i][list(rep.assignment)], epsilon)
    return out


def sample_dataset(dataset: Dataset, method, k, seed=0, bank=None, epsilon=None, deterministic=False) -> Dataset:
    """Materialize sampled clouds for every split (retraining protocol)."""
    return dataset.with_points(sample_batch(dataset.points, method, k, seed, bank, epsilon, deterministic))


def _split(dataset: Dataset, split):
    x, y = dataset.split(split)
    if len(y) == 0:
        raise ArgumentError(f"split {split!r} is empty")
    return x, y


def _per_class_accuracy(pred, labels, classes):
    out = {}
    for c, name in enumerate(classes):
        m = labels == c
        if m.any():
            out[name] = float((pred[m] == c).mean())
    return out


def eval_classification(task_spec, task_params, dataset: Dataset, method, k_list, seeds=(0,), bank=None,
                        split="test", epsilon=None, deterministic=False) -> ExperimentResult:
    """Instance and per-class accuracy of the frozen classifier on sampled clouds."""
    x, y = _split(dataset, split)
    n = dataset.n
    res = ExperimentResult()
    for k in k_list:
        for seed in seeds:
            xs = sample_batch(x, method, k, seed, bank, epsilon, deterministic)
            logits, _, _ = N.classify_batch(task_spec, task_params, xs)
            pred = logits.argmax(axis=1)
            res.add(method, k, n, "accuracy", float((pred == y).mean()), seed)
            for name, acc in _per_class_accuracy(pred, y, dataset.classes).items():
                res.add(method, k, n, f"accuracy[{name}]", acc, seed)
    return res


# -- retrieval ------------------------------------------------------------------


def average_precision(dist_row, relevant):
    """AP of one ranked list, with precision taken at distinct-distance thresholds.

    Tied items are scored together: every relevant item of a tie group gets
    the precision at the end of the group. Returns ``(ap, recall, precision)``
    at each threshold that adds a relevant item.
    """
    d = np.asarray(dist_row, dtype=np.float64)
    rel = np.asarray(relevant, dtype=bool)
    total = int(rel.sum())
    if total == 0:
        raise ArgumentError("query without relevant items")
    order = np.argsort(d, kind="stable")
    d, rel = d[order], rel[order]
    ends = np.flatnonzero(np.r_[d[1:] != d[:-1], True])  # last index of each tie group
    hits = np.cumsum(rel)[ends]
    gained = np.diff(np.r_[0, hits])
    precision = hits / (ends + 1)
    ap = float((gained * precision).sum() / total)
    keep = gained > 0
    return ap, hits[keep] / total, precision[keep]


def interpolated_precision(recall, precision, grid):
    """Max precision at recall >= r for every r in ``grid``."""
    recall = np.asarray(recall)
    env = np.maximum.accumulate(np.asarray(precision)[::-1])[::-1]
    pos = np.searchsorted(recall, grid, side="left")
    return np.where(pos < len(env), env[np.minimum(pos, len(env) - 1)], 0.0)


@dataclass
class RetrievalResult:
    macro_map: float
    class_ap: dict
    pr_recall: np.ndarray
    pr_precision: np.ndarray
    skipped: int


def retrieval_scores(descriptors, labels, classes=None) -> RetrievalResult:
    """Every item queries all others by L2 distance; macro mean AP over classes."""
    desc = np.asarray(descriptors, dtype=np.float64)
    labels = np.asarray(labels)
    # explicit differences: identical descriptors give exactly zero distance
    d = np.stack([((desc - row) ** 2).sum(axis=1) for row in desc]) if len(desc) else np.zeros((0, 0))
    m = len(labels)
    ap_by_class: dict = {}
    curves = []
    skipped = 0
    for q in range(m):
        others = np.arange(m) != q
        rel = labels[others] == labels[q]
        if not rel.any():
            skipped += 1
            continue
        ap, rec, prec = average_precision(d[q, others], rel)
        ap_by_class.setdefault(int(labels[q]), []).append(ap)
        curves.append((int(labels[q]), rec, prec))
    if not ap_by_class:
        raise ArgumentError("no query has a relevant item")
    grid = np.unique(np.concatenate([c[1] for c in curves]))
    by_class: dict = {}
    for c, rec, prec in curves:
        by_class.setdefault(c, []).append(interpolated_precision(rec, prec, grid))
    pr = np.mean([np.mean(v, axis=0) for _, v in sorted(by_class.items())], axis=0)
    class_ap = {(classes[c] if classes is not None else c): float(np.mean(v))
                for c, v in sorted(ap_by_class.items())}
    return RetrievalResult(float(np.mean(list(class_ap.values()))), class_ap, grid, pr, skipped)


def eval_retrieval(task_spec, task_params, dataset: Dataset, method, k, seed=0, bank=None,
                   query_split="test", epsilon=None, deterministic=False):
    """Retrieval among the query split using penultimate-layer descriptors of sampled clouds.

    Returns ``(ExperimentResult, RetrievalResult)``.
    """
    x, y = _split(dataset, query_split)
    xs = sample_batch(x, method, k, seed, bank, epsilon, deterministic)
    _, desc, _ = N.classify_batch(task_spec, task_params, xs)
    rr = retrieval_scores(desc, y, dataset.classes)
    res = ExperimentResult()
    res.add(method, k, dataset.n, "macro_map", rr.macro_map, seed)
    res.add(method, k, dataset.n, "skipped_queries", rr.skipped, seed)
    return res, rr


# -- reconstruction -------------------------------------------------------------


def reconstruction_errors(ae_spec, ae_params, sampled, targets):
    """Per-cloud Chamfer between the reconstruction of ``sampled`` and ``targets``."""
    recon = N.reconstruct_batch(ae_spec, ae_params, sampled)
    out = np.empty(len(targets))
    for i, (r, t) in enumerate(zip(recon, targets)):
        d = pairwise_sq_dist(r, t)
        out[i] = d.min(axis=1).mean() + d.min(axis=0).mean()
    return out


def eval_reconstruction(ae_spec, ae_params, dataset: Dataset, method, k_list, seeds=(0,), bank=None,
                        split="test", epsilon=None, deterministic=False) -> ExperimentResult:
    """NRE per (k, seed): mean error from samples over mean error from full clouds."""
    x, _ = _split(dataset, split)
    n = dataset.n
    full = reconstruction_errors(ae_spec, ae_params, x, x).mean()
    res = ExperimentResult()
    for k in k_list:
        for seed in seeds:
            xs = sample_batch(x, method, k, seed, bank, epsilon, deterministic)
            err = reconstruction_errors(ae_spec, ae_params, xs, x).mean()
            res.add(method, k, n, "nre", err / full, seed)
            res.add(method, k, n, "chamfer", err, seed)
    return res


# -- scalability ----------------------------------------------------------------


def scalability_workflow(large: Dataset, k, task_spec, cfg: N.TrainConfig, snet_cfg: N.TrainConfig | None = None,
                         snet_spec=None):
    """FPS-sample + train task, train S-NET, re-sample with S-NET, re-train task.

    Returns a dict with both test accuracies and the parameter digests.
    """
    snet_cfg = cfg if snet_cfg is None else snet_cfg
    report = {"k": int(k), "n": large.n}
    stage = "fps-train"
    try:
        fps_ds = sample_dataset(large, "fps", k, cfg.seed, deterministic=cfg.deterministic)
        task1, _ = N.train_task_classifier(fps_ds, task_spec, cfg)
        xt, yt = _split(fps_ds, "test")
        report["stage1_accuracy"] = N.accuracy(task_spec, task1, xt, yt)
        stage = "snet-train"
        spec = snet_spec or N.SNetSpec(k)
        sparams, _ = N.train_snet(large, N.FrozenTask(task_spec, task1), k, snet_cfg, spec)
        stage = "snet-resample"
        bank = SamplerBank(snet={k: (spec, sparams)})
        snet_ds = sample_dataset(large, "snet", k, cfg.seed, bank)
        stage = "retrain"
        task2, _ = N.train_task_classifier(snet_ds, task_spec, cfg)
        xt, yt = snet_ds.split("test")
        report["stage4_accuracy"] = N.accuracy(task_spec, task2, xt, yt)
    except Exception as e:
        raise type(e)(f"scalability stage '{stage}' failed: {e}") from e
    report["task1_sha256"] = task1.digest()
    report["snet_sha256"] = sparams.digest()
    report["task2_sha256"] = task2.digest()
    return report


# -- resources ------------------------------------------------------------------


@dataclass
class ResourceReport:
    networks: dict            # name -> {"params", "mults", "points"}
    cascade_mults: int
    full_mults: int
    layers: list = field(default_factory=list)   # (network, layer, rows, fan_in, fan_out, mults)

    @property
    def reduction(self) -> float:
        return 1.0 - self.cascade_mults / self.full_mults


def analytic_counts(net: T.NetSpec, n_points: int):
    """Closed-form trainable parameters and eval-mode multiplies for one cloud."""
    params = mults = 0
    layers = []
    for kind, prefix, a, b, hidden in net.layers():
        rows = n_points if kind == "point" else 1
        m = rows * a * b
        params += a * b + b
        if hidden and net.bn:
            m += rows * b
            params += 2 * b
        mults += m
        layers.append((prefix, rows, a, b, m))
    return params, mults, layers


def instrumented_mults(net: T.NetSpec, params, n_points: int) -> int:
    _, tape = T.forward(net, params, np.zeros((1, n_points, net.in_dim)))
    return tape.mults


def resource_report(sampler_spec, task_spec, n, k) -> ResourceReport:
    """Cost of sampler(n) + task(k) against task(n)."""
    snet = sampler_spec.net() if hasattr(sampler_spec, "net") else sampler_spec
    task = task_spec.net() if hasattr(task_spec, "net") else task_spec
    networks, layers = {}, []
    for name, net, pts in (("sampler", snet, n), ("task@k", task, k), ("task@n", task, n)):
        p, m, ls = analytic_counts(net, pts)
        networks[name] = {"params": p, "mults": m, "points": pts}
        layers.extend((name,) + l for l in ls)
    cascade = networks["sampler"]["mults"] + networks["task@k"]["mults"]
    return ResourceReport(networks, cascade, networks["task@n"]["mults"], layers)


# -- tables ---------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6g}"


def table_text(result: ExperimentResult, fmt="csv") -> str:
    if fmt not in ("csv", "tsv"):
        raise ArgumentError(f"unknown table format {fmt!r}")
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="," if fmt == "csv" else "\t", lineterminator="\n")
    w.writerow(TABLE_HEADER)
    for r in result.sorted_rows():
        w.writerow([r.method, r.k, _fmt(r.sampling_ratio), r.metric, _fmt(r.value), r.seed])
    return buf.getvalue()


def emit_table(result: ExperimentResult, path, fmt="csv") -> str:
    """Write the table and a ``.provenance`` key=value sidecar; returns the table sha256."""
    text = table_text(result, fmt)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    with open(f"{path}.provenance", "w", encoding="utf-8") as f:
        for key in sorted(result.provenance):
            f.write(f"{key}={result.provenance[key]}\n")
    return hashlib.sha256(text.encode()).hexdigest()


def read_table(path, fmt="csv") -> list[dict]:
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f, delimiter="," if fmt == "csv" else "\t"))
    for r in rows:
        r["k"] = int(r["k"])
        r["seed"] = int(r["seed"])
        r["sampling_ratio"] = float(r["sampling_ratio"])
        r["value"] = float(r["value"])
    return rows
