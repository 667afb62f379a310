"""Command-line driver.

Exit codes: 0 success, 2 argument/configuration error, 3 file format error,
4 training error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys

import numpy as np

from . import experiments as E
from . import nets as N
from . import tensor as T
from .data import (DatasetConfig, build_dataset, load_dataset, parse_kv, reconstruction_config,
                   save_dataset, save_xyz)
from .errors import ArgumentError, ConfigurationError, FormatError, TrainingError
from .loss import DESK_RECONSTRUCTION, PROGRESSIVE_CLASSIFICATION, SNET_CLASSIFICATION, LossWeights

DATA_KEYS = {"preset", "classes", "per_class", "n", "noise", "splits", "seed"}
TRAIN_KEYS = {"epochs", "batch_size", "lr", "decay_rate", "decay_steps", "augment", "alpha", "beta",
              "gamma", "delta", "lambda_c", "divide_by_sizes", "sizes", "task_widths", "eval_every"}
EXIT_OK, EXIT_ARGS, EXIT_FORMAT, EXIT_TRAIN = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgumentError(message)


def read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            kv = parse_kv(f.read())
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    unknown = set(kv) - DATA_KEYS - TRAIN_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return kv


def _bool(v) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"expected a boolean, got {v!r}")


def dataset_config(kv, seed) -> DatasetConfig:
    data_kv = {k: v for k, v in kv.items() if k in DATA_KEYS and k != "preset"}
    if seed is not None:
        data_kv["seed"] = seed
    preset = kv.get("preset", "classification")
    if preset == "reconstruction":
        base = reconstruction_config()
        cfg = DatasetConfig.from_dict({"classes": ",".join(base.classes),
                                       "splits": ",".join(map(str, base.splits)), **data_kv})
    elif preset == "classification":
        cfg = DatasetConfig.from_dict(data_kv)
    else:
        raise ConfigurationError(f"unknown dataset preset {preset!r}")
    return cfg


def train_config(kv, args, default_weights=SNET_CLASSIFICATION, epochs=20, augment=True) -> N.TrainConfig:
    try:
        adam = T.AdamConfig(lr=float(kv.get("lr", 1e-3)), decay_rate=float(kv.get("decay_rate", 0.7)),
                            decay_steps=int(kv.get("decay_steps", 60000)))
        w = default_weights
        weights = LossWeights(*(float(kv.get(name, getattr(w, name)))
                                for name in ("alpha", "beta", "gamma", "delta", "lambda_c")))
        return N.TrainConfig(epochs=int(kv.get("epochs", epochs)), batch_size=int(kv.get("batch_size", 32)),
                             adam=adam, weights=weights, seed=args.seed or 0,
                             augment=_bool(kv.get("augment", augment)), deterministic=args.deterministic,
                             divide_by_sizes=_bool(kv.get("divide_by_sizes", "false")),
                             eval_every=int(kv.get("eval_every", 1)))
    except ValueError as e:
        if isinstance(e, ArgumentError):
            raise
        raise ConfigurationError(f"bad config value: {e}") from None


def _load_data(path):
    if path is None:
        raise ConfigurationError("missing --data dataset file")
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise ConfigurationError(f"dataset file not found: {path}") from None


def _load_net(path, what):
    if path is None:
        raise ConfigurationError(f"missing {what} checkpoint")
    try:
        params = T.load_params(path)
    except FileNotFoundError:
        raise ConfigurationError(f"{what} checkpoint not found: {path}") from None
    return N.spec_from_params(params), params


def _file_sha(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def _k_list(args, n):
    if args.k is None:
        raise ArgumentError("--k is required")
    try:
        ks = [int(v) for v in str(args.k).split(",") if v.strip()]
    except ValueError:
        raise ArgumentError(f"--k must be a comma-separated list of integers, got {args.k!r}") from None
    for k in ks:
        if not 1 <= k <= n:
            raise ArgumentError(f"k={k} outside [1, {n}]")
    return ks


def _need_out(args):
    if not args.out:
        raise ArgumentError("--out is required")
    return args.out


def _bank(args):
    bank = E.SamplerBank()
    for path in args.snet or []:
        spec, params = _load_net(path, "S-NET")
        if not isinstance(spec, N.SNetSpec):
            raise ConfigurationError(f"{path} is not an S-NET checkpoint")
        bank.snet[spec.k] = (spec, params)
    if args.prognet:
        bank.progressive = _load_net(args.prognet, "ProgressiveNet")
    return bank


def _provenance(ds, args, extra=()):
    prov = {"config_sha256": hashlib.sha256(ds.config_text.encode()).hexdigest(), "seed": args.seed or 0,
            "deterministic": int(args.deterministic)}
    for path in list(args.snet or []) + [p for p in (args.prognet, args.task, args.ae) if p] + list(extra):
        prov[f"sha256[{path}]"] = _file_sha(path)
    return prov


def _save_net(params, path, history=None):
    digest = T.save_params(params, path)
    if history is not None:
        with open(f"{path}.log", "w", encoding="utf-8") as f:
            f.write(N.format_log(history))
    print(f"sha256={digest}")
    return digest


# -- subcommands ----------------------------------------------------------------


def cmd_gen_data(args, kv):
    cfg = dataset_config(kv, args.seed)
    ds = build_dataset(cfg)
    print(f"sha256={save_dataset(ds, _need_out(args))}")


def _task_spec(kv, ds):
    widths = kv.get("task_widths", "desk")
    if widths == "wide":
        return N.TaskClassifierSpec(len(ds.classes), N.WIDE_CLS_POINT_WIDTHS, N.WIDE_CLS_DENSE_WIDTHS)
    if widths != "desk":
        raise ConfigurationError(f"task_widths must be desk or wide, got {widths!r}")
    return N.TaskClassifierSpec(len(ds.classes))


def cmd_train_task(args, kv):
    ds = _load_data(args.data)
    spec = _task_spec(kv, ds)
    params, hist = N.train_task_classifier(ds, spec, train_config(kv, args, epochs=12))
    _save_net(params, _need_out(args), hist)


def _frozen_task(args):
    if args.task:
        spec, params = _load_net(args.task, "task")
    elif args.ae:
        spec, params = _load_net(args.ae, "autoencoder")
    else:
        raise ConfigurationError("missing task checkpoint (--task or --ae)")
    if not isinstance(spec, (N.TaskClassifierSpec, N.AutoencoderSpec)):
        raise ConfigurationError("task checkpoint must be a classifier or an autoencoder")
    return N.FrozenTask(spec, params)


def cmd_train_snet(args, kv):
    ds = _load_data(args.data)
    task = _frozen_task(args)
    k = _k_list(args, ds.n)[0]
    weights = SNET_CLASSIFICATION if task.kind == "cls" else DESK_RECONSTRUCTION
    cfg = train_config(kv, args, weights, epochs=5, augment=task.kind == "cls")
    params, hist = N.train_snet(ds, task, k, cfg)
    _save_net(params, _need_out(args), hist)


def cmd_train_prognet(args, kv):
    ds = _load_data(args.data)
    task = _frozen_task(args)
    sizes = tuple(int(s) for s in kv["sizes"].split(",")) if "sizes" in kv else ()
    weights = PROGRESSIVE_CLASSIFICATION if task.kind == "cls" else DESK_RECONSTRUCTION
    cfg = train_config(kv, args, weights, epochs=3, augment=task.kind == "cls")
    params, hist = N.train_progressivenet(ds, task, sizes, cfg)
    _save_net(params, _need_out(args), hist)


def cmd_train_ae(args, kv):
    ds = _load_data(args.data)
    spec = N.AutoencoderSpec(ds.n)
    params, hist = N.train_autoencoder(ds, spec, train_config(kv, args, epochs=30, augment=False))
    _save_net(params, _need_out(args), hist)


def _method(args, default="fps"):
    m = args.method or default
    if m not in E.METHODS:
        raise ArgumentError(f"unknown method {m!r}; expected one of {', '.join(E.METHODS)}")
    return m


def _critical_source(args, bank, kind):
    # the critical set is ranked by the downstream network's max pool
    path = args.task if kind == "cls" else args.ae
    if path:
        bank.critical = _load_net(path, "task")
    return bank


def cmd_sample(args, kv):
    ds = _load_data(args.data)
    k = _k_list(args, ds.n)[0]
    bank = _critical_source(args, _bank(args), "cls" if args.task else "ae")
    out = E.sample_dataset(ds, _method(args), k, args.seed or 0, bank, args.epsilon, args.deterministic)
    print(f"sha256={save_dataset(out, _need_out(args))}")


def cmd_eval_cls(args, kv):
    ds = _load_data(args.data)
    spec, params = _load_net(args.task, "task")
    bank = _critical_source(args, _bank(args), "cls")
    res = E.eval_classification(spec, params, ds, _method(args), _k_list(args, ds.n), (args.seed or 0,), bank,
                                epsilon=args.epsilon, deterministic=args.deterministic)
    res.provenance = _provenance(ds, args)
    _emit(res, args)


def cmd_eval_retrieval(args, kv):
    ds = _load_data(args.data)
    spec, params = _load_net(args.task, "task")
    bank = _critical_source(args, _bank(args), "cls")
    res = E.ExperimentResult(provenance=_provenance(ds, args))
    curves = []
    for k in _k_list(args, ds.n):
        r, rr = E.eval_retrieval(spec, params, ds, _method(args), k, args.seed or 0, bank,
                                 epsilon=args.epsilon, deterministic=args.deterministic)
        res.extend(r)
        curves.extend((k, float(a), float(b)) for a, b in zip(rr.pr_recall, rr.pr_precision))
    _emit(res, args)
    with open(f"{args.out}.pr", "w", encoding="utf-8") as f:
        f.write("k,recall,precision\n")
        f.writelines(f"{k},{a:.6g},{b:.6g}\n" for k, a, b in curves)


def cmd_eval_recon(args, kv):
    ds = _load_data(args.data)
    spec, params = _load_net(args.ae, "autoencoder")
    bank = _critical_source(args, _bank(args), "ae")
    res = E.eval_reconstruction(spec, params, ds, _method(args), _k_list(args, ds.n), (args.seed or 0,), bank,
                                epsilon=args.epsilon, deterministic=args.deterministic)
    res.provenance = _provenance(ds, args)
    _emit(res, args)


def cmd_scalability(args, kv):
    ds = _load_data(args.data)
    k = _k_list(args, ds.n)[0]
    cfg = train_config(kv, args, epochs=8)
    report = E.scalability_workflow(ds, k, _task_spec(kv, ds), cfg)
    report["config_sha256"] = hashlib.sha256(ds.config_text.encode()).hexdigest()
    text = json.dumps(report, sort_keys=True, indent=1) + "\n"
    with open(_need_out(args), "w", encoding="utf-8") as f:
        f.write(text)
    print(text, end="")


def _find(ds, ident):
    if ident is None:
        raise ArgumentError("--input-id and --target-id are required")
    try:
        return ds.ids.index(ident)
    except ValueError:
        raise ArgumentError(f"no cloud with id {ident!r}") from None


def cmd_adversarial(args, kv):
    ds = _load_data(args.data)
    task = _frozen_task(args)
    k = _k_list(args, ds.n)[0]
    src, tgt = ds.cloud(_find(ds, args.input_id)), ds.cloud(_find(ds, args.target_id))
    cfg = train_config(kv, args, DESK_RECONSTRUCTION, epochs=300, augment=False)
    _, g, hist = N.adversarial_simplify(src, tgt, task, k, cfg)
    out = _need_out(args)
    save_xyz(g.points, out)
    recon = N.reconstruct_batch(task.spec, task.params, g.points[None])[0]
    save_xyz(recon, f"{out}.recon.xyz")
    with open(f"{out}.log", "w", encoding="utf-8") as f:
        f.write(N.format_log(hist))


def cmd_resources(args, kv):
    n = int(kv.get("n", 256))
    res = E.ExperimentResult()
    rows = []
    for k in _k_list(args, n):
        rep = E.resource_report(N.SNetSpec(k), N.TaskClassifierSpec(8), n, k)
        for name, v in rep.networks.items():
            rows.append((k, name, v["params"], v["mults"]))
        rows.append((k, "cascade", rep.networks["sampler"]["params"] + rep.networks["task@k"]["params"],
                     rep.cascade_mults))
        res.add("resources", k, n, "reduction", rep.reduction, 0)
    text = "k,network,params,mults\n" + "".join(f"{k},{name},{p},{m}\n" for k, name, p, m in rows)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    print(text, end="")


def cmd_grad_check(args, kv):
    rng = np.random.default_rng(args.seed or 0)
    spec = T.NetSpec("mini", (6, 8), (8, 4))
    params = T.init_params(spec, rng)
    batch = rng.normal(size=(4, 7, 3))
    labels = rng.integers(0, 4, size=4)
    rep = T.grad_check(spec, params, batch, lambda out: T.softmax_cross_entropy(out, labels))
    print(f"params={params.num_trainable()} checked={rep.checked} excluded={len(rep.excluded)} "
          f"max_rel_err={rep.max_rel_err:.3e}")
    if not rep.ok():
        raise TrainingError(f"gradient check failed at {rep.worst}")


COMMANDS = {
    "gen-data": cmd_gen_data, "train-task": cmd_train_task, "train-snet": cmd_train_snet,
    "train-prognet": cmd_train_prognet, "train-ae": cmd_train_ae, "sample": cmd_sample,
    "eval-cls": cmd_eval_cls, "eval-retrieval": cmd_eval_retrieval, "eval-recon": cmd_eval_recon,
    "scalability": cmd_scalability, "adversarial": cmd_adversarial, "resources": cmd_resources,
    "grad-check": cmd_grad_check,
}


def _emit(res, args):
    fmt = "tsv" if str(_need_out(args)).endswith(".tsv") else "csv"
    digest = E.emit_table(res, args.out, fmt)
    print(f"sha256={digest}")


def build_parser():
    p = _Parser(prog="tasksample", description="Task-driven point cloud sampling experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config")
        s.add_argument("--seed", type=int)
        s.add_argument("--deterministic", action="store_true")
        s.add_argument("--method")
        s.add_argument("--k")
        s.add_argument("--epsilon", type=float)
        s.add_argument("--out")
        s.add_argument("--data")
        s.add_argument("--task")
        s.add_argument("--ae")
        s.add_argument("--snet", action="append")
        s.add_argument("--prognet")
        s.add_argument("--input-id")
        s.add_argument("--target-id")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ArgumentError("--seed must be an unsigned 64-bit integer")
        if args.epsilon is not None and not args.epsilon >= 0:
            raise ArgumentError("--epsilon must be >= 0")
        COMMANDS[args.command](args, read_config(args.config))
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except TrainingError as e:
        print(f"training error: {e}", file=sys.stderr)
        return EXIT_TRAIN
    except (ArgumentError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ARGS
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
