"""Command line entry points.

Every command accepts ``--config`` (JSON), ``--seed`` and ``--out``. Exit codes:
0 success, 1 I/O or validation failure, 2 numeric divergence (the last finite
checkpoint is still written).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import logging
import os
import sys

import numpy as np

from rotssl import config, engine, net, synth

log = logging.getLogger("rotssl")

GRAD_TOL = 1e-3


class UsageError(Exception):
    pass


def _load_cfg(args):
    cfg = config.load_config(args.config) if args.config else config.ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, seed=args.seed),
                                  train=dataclasses.replace(cfg.train, seed=args.seed))
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def _prepare_out(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    config.dump_config(cfg, os.path.join(cfg.out_dir, "config.json"))
    return cfg.out_dir


def _load_splits(data_dir, required):
    if not os.path.isdir(data_dir):
        raise UsageError(f"data directory {data_dir!r} does not exist (run gen-data first)")
    out = {}
    for split in synth.SPLITS:
        path = os.path.join(data_dir, split)
        if os.path.isdir(path):
            out[split] = synth.load_dataset(path)
        elif split in required:
            raise UsageError(f"missing split {split!r} under {data_dir!r}")
    return out


def _load_ckpt(path):
    if not os.path.isfile(path):
        raise UsageError(f"checkpoint {path!r} not found")
    return net.load_checkpoint(path)


def write_kv(path, items):
    """Flat ``key=value`` text, one pair per line, in insertion order."""
    with open(path, "w") as fh:
        for k, v in items.items():
            fh.write(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n")


def read_kv(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            k, _, v = line.rstrip("\n").partition("=")
            out[k] = v
    return out


def _table(rows):
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v:.4f}" if isinstance(v, float) else f"{k:<{width}}  {v}"
                     for k, v in rows)


def dataset_hash(root):
    """SHA-256 over every split's manifest and image blob, in split order."""
    h = hashlib.sha256()
    for split in synth.SPLITS:
        for name in ("manifest.json", "images.bin"):
            path = os.path.join(root, split, name)
            if os.path.exists(path):
                with open(path, "rb") as fh:
                    h.update(fh.read())
    return h.hexdigest()


def cmd_gen_data(args):
    cfg = _load_cfg(args)
    out = _prepare_out(cfg)
    dc = cfg.data
    data = synth.gen_dataset(dc.n_labeled, dc.n_unlabeled, dc.ood_frac, seed=dc.seed,
                             n_val=dc.n_val, n_test=dc.n_test)
    for split, ds in data.items():
        synth.save_dataset(ds, os.path.join(out, split))
    digest = dataset_hash(out)
    print(f"wrote {', '.join(f'{k}={len(v)}' for k, v in data.items())} to {out}")
    print(f"manifest sha256 {digest}")
    return 0


def _save_state(out, state):
    net.save_checkpoint(os.path.join(out, "student.bin"), state.student)
    net.save_checkpoint(os.path.join(out, "teacher.bin"), state.teacher)


def _report_training(out, state, data):
    items = {}
    for split in ("val", "test"):
        if split in data and len(data[split]):
            for k, v in engine.evaluate_params(state.student, data[split]).items():
                items[f"{split}_{k}"] = v
    if state.tau_history:
        for i, t in enumerate(state.tau_history, 1):
            items[f"tau_stage{i}"] = float(t)
    write_kv(os.path.join(out, "metrics.txt"), items)
    if items:
        print(_table(list(items.items())))


def _run_training(args, phase):
    cfg = _load_cfg(args)
    data = _load_splits(args.data, ("labeled", "unlabeled") if phase == 2 else ("labeled",))
    out = _prepare_out(cfg)
    logger = engine.CsvLog(os.path.join(out, "log.csv"))
    try:
        if phase == 1:
            init = _load_ckpt(args.init) if args.init else None
            state = engine.run_phase1(cfg, data, init=init, log_to=logger)
        else:
            p = _load_ckpt(args.init)
            start = engine.TrainState(student=p, teacher=p.copy(), ema_decay=cfg.train.ema_decay)
            state = engine.run_phase2(cfg, data, start, log_to=logger)
    except engine.DivergenceError as exc:
        if exc.last_good is not None:
            _save_state(out, exc.last_good)
        print(f"error: {exc}; last finite checkpoint kept in {out}", file=sys.stderr)
        return 2
    _save_state(out, state)
    _report_training(out, state, data)
    return 0


def cmd_train_sup(args):
    return _run_training(args, 1)


def cmd_train_ssl(args):
    return _run_training(args, 2)


def cmd_eval(args):
    cfg = _load_cfg(args)
    params = _load_ckpt(args.checkpoint)
    data = _load_splits(args.data, (args.split,))
    m = engine.evaluate_params(params, data[args.split])
    out = _prepare_out(cfg)
    write_kv(os.path.join(out, "metrics.txt"), m)
    print(_table(list(m.items())))
    return 0


def cmd_filter_stats(args):
    cfg = _load_cfg(args)
    params = _load_ckpt(args.checkpoint)
    ds = _load_splits(args.data, (args.split,))[args.split]
    delta = cfg.filter.delta if args.delta is None else args.delta
    if not 0.0 < delta <= 1.0:
        raise UsageError("--delta must lie in (0, 1]")
    fs = engine.filter_stats(params, ds, delta, bins=args.bins)
    out = _prepare_out(cfg)
    keep = fs["entropies"] <= fs["tau"]
    with open(os.path.join(out, "entropies.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "entropy", "is_ood", "kept"])
        for i, e, o, k in zip(ds.ids, fs["entropies"], ds.is_ood, keep):
            w.writerow([int(i), repr(float(e)), int(o), int(k)])
    with open(os.path.join(out, "histogram.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lo", "hi", "count"])
        e = fs["histogram_edges"]
        for lo, hi, c in zip(e[:-1], e[1:], fs["histogram_counts"]):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    n_rej = fs["rejected_ood"] + fs["rejected_id"]
    summary = {
        "count": len(ds),
        "delta": float(delta),
        "tau": fs["tau"],
        "kept": int(keep.sum()),
        "rejected": int(n_rej),
        "kept_ood": fs["kept_ood"],
        "kept_id": fs["kept_id"],
        "rejected_ood": fs["rejected_ood"],
        "rejected_id": fs["rejected_id"],
        "ood_fraction_overall": float(np.mean(ds.is_ood)) if len(ds) else 0.0,
        "ood_fraction_rejected": fs["rejected_ood"] / n_rej if n_rej else 0.0,
    }
    write_kv(os.path.join(out, "filter_stats.txt"), summary)
    print(_table(list(summary.items())))
    return 0


def cmd_grad_check(args):
    cfg = _load_cfg(args)
    out = _prepare_out(cfg)
    rng = np.random.default_rng(cfg.train.seed)
    p = net.init_params(rng)
    x = rng.random((synth.IMAGE_SIZE, synth.IMAGE_SIZE))
    res = {
        "nll": net.grad_check(p, x, "nll", rng),
        "cross_entropy": net.grad_check(p, x, "cross_entropy", rng),
        "zero_net_cross_entropy": net.grad_check(net.zero_params(), x, "cross_entropy", rng,
                                                 target=np.zeros((3, 3))),
    }
    write_kv(os.path.join(out, "grad_check.txt"), res)
    print(_table([(f"max_rel_err[{k}]", v) for k, v in res.items()]))
    worst = max(res.values())
    if worst > GRAD_TOL:
        print(f"error: gradient check failed ({worst:.3e} > {GRAD_TOL:g})", file=sys.stderr)
        return 1
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="rotssl", description=__doc__.splitlines()[0])
    ap.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="JSON experiment config (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override data and training seeds")
        p.add_argument("--out", help=out_help)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    common(p, "dataset directory (one sub-directory per split)")
    p.set_defaults(fn=cmd_gen_data)

    for name, fn, init_help in (("train-sup", cmd_train_sup, "optional starting checkpoint"),
                                ("train-ssl", cmd_train_ssl, "Phase1 checkpoint (required)")):
        p = sub.add_parser(name, help="supervised Phase1" if name == "train-sup" else "semi-supervised Phase2")
        common(p, "run directory for checkpoints, log.csv and metrics.txt")
        p.add_argument("--data", default="data", help="dataset directory from gen-data")
        p.add_argument("--init", required=name == "train-ssl", help=init_help)
        p.set_defaults(fn=fn)

    p = sub.add_parser("eval", help="pose metrics of a checkpoint on one split")
    common(p, "directory for metrics.txt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="data")
    p.add_argument("--split", default="test", choices=synth.SPLITS)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("filter-stats", help="entropy histogram and percentile filter diagnostics")
    common(p, "directory for entropies.csv, histogram.csv and filter_stats.txt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="data")
    p.add_argument("--split", default="unlabeled", choices=synth.SPLITS)
    p.add_argument("--delta", type=float, help="kept fraction (default: config filter.delta)")
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(fn=cmd_filter_stats)

    p = sub.add_parser("grad-check", help="finite-difference check of both losses through the net")
    common(p, "directory for grad_check.txt")
    p.set_defaults(fn=cmd_grad_check)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except FloatingPointError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return 2
    except (UsageError, config.ConfigError, synth.DatasetFormatError, net.CheckpointError,
            OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
