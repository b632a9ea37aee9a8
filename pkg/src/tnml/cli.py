"""Command line entry point: ``tnml train | eval | init-stats | spectrum | sweep``."""

import argparse
import csv
import dataclasses
import itertools
import json
import logging
import sys
import types
from pathlib import Path

import numpy as np

from tnml.dataset import load_mnist_dir, preprocess, train_val_split
from tnml.initializers import CopyInitPlan, InitSpec, sample_w_element
from tnml.netgraph import build_mps
from tnml.rankreg import write_spectrum
from tnml.train import (
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
    write_metrics,
)

log = logging.getLogger("tnml")

FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(name, text):
    """Parse one config value according to the TrainConfig field type."""
    if name not in FIELDS:
        raise SystemExit(f"unknown config key {name!r}")
    typ = FIELDS[name].type
    text = str(text).strip()
    options = typ.__args__ if isinstance(typ, types.UnionType) else (typ,)
    if type(None) in options and text.lower() in ("none", "null", ""):
        return None
    base = next(t for t in options if t is not type(None))
    if base is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise SystemExit(f"{name}: expected a boolean, got {text!r}")
    if base is tuple:
        return tuple(float(x) for x in text.split(","))
    try:
        return base(text)
    except ValueError:
        raise SystemExit(f"{name}: cannot read {text!r} as {base.__name__}") from None


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SystemExit(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def parse_overrides(extra) -> dict:
    """``--key value`` / ``--key=value`` pairs left over by argparse."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise SystemExit(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise SystemExit(f"--{key} needs a value")
            value = extra[i + 1]
            i += 2
        out[key.replace("-", "_")] = value
    return out


def build_config(args, extra) -> TrainConfig:
    raw = read_config_file(args.config) if args.config else {}
    raw.update(parse_overrides(extra))
    values = {k: _coerce(k, v) for k, v in raw.items()}
    if getattr(args, "full", False):
        return TrainConfig.full_scale(**values)
    return TrainConfig(**values)


def _load_datasets(cfg: TrainConfig):
    train_ds = load_mnist_dir(cfg.data_dir, "train")
    try:
        test_ds = load_mnist_dir(cfg.data_dir, "test")
    except FileNotFoundError:
        log.warning("no test split under %s; test accuracy not reported", cfg.data_dir)
        test_ds = None
    return train_ds, test_ds


def _run_training(cfg: TrainConfig, out: Path, quiet=False):
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = _load_datasets(cfg)

    def progress(epoch, rec):
        if not quiet:
            print(f"epoch {epoch:3d}  loss {rec.train_loss[-1]:.4f}  "
                  f"val_error {rec.val_error[-1]:.4f}  params {rec.params[-1]}", flush=True)

    records, models = train(cfg, train_ds, test_ds, progress=progress)
    write_metrics(out / "metrics.csv", records)
    if len(records) > 1:
        for k, rec in enumerate(records):
            write_metrics(out / f"metrics_run{k}.csv", [rec])
    save_checkpoint(out / "checkpoint.npz", models[0], cfg)
    if models[0].regs:
        write_spectrum(out / "spectrum.csv", models[0].regs, cfg.threshold)
    summary = {
        "runs": len(records),
        "diverged": [r.diverged for r in records],
        "final_val_error": [r.val_error[-1] if r.val_error else None for r in records],
        "test_accuracy": [r.test_accuracy for r in records],
        "params": [r.final_params for r in records],
    }
    accs = [a for a in summary["test_accuracy"] if a is not None]
    if accs:
        summary["test_accuracy_mean"] = float(np.mean(accs))
        summary["test_accuracy_std"] = float(np.std(accs))
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return records, summary


def cmd_train(args, extra):
    cfg = build_config(args, extra)
    records, summary = _run_training(cfg, Path(args.out), args.quiet)
    for r in records:
        if r.diverged:
            print(f"run diverged: {r.diverged}")
    print(json.dumps(summary))
    return 1 if all(r.diverged for r in records) else 0


def cmd_eval(args, extra):
    model, saved = load_checkpoint(args.checkpoint)
    saved = saved or {}
    feature = args.feature or saved.get("feature", "trig")
    data_dir = args.data_dir or saved.get("data_dir", "data/mnist")
    threshold = args.threshold if args.threshold is not None else saved.get("threshold", 0.5)
    if args.split == "test":
        ds = load_mnist_dir(data_dir, "test")
    else:
        full = load_mnist_dir(data_dir, "train")
        subset = saved.get("subset")
        full = full.head(subset) if subset else full
        tr, va = train_val_split(full, saved.get("val_fraction", 0.2), saved.get("seed", 0))
        ds = tr if args.split == "train" else va
    acc, params = evaluate(model, preprocess(ds.images, feature), ds.labels, threshold)
    print(json.dumps({"split": args.split, "accuracy": acc, "error": 1 - acc, "params": params,
                      "n": len(ds)}))
    return 0


def cmd_init_stats(args, extra):
    net = build_mps(args.n_sites, args.feature_dim, args.bond_dim, args.n_classes,
                    args.output_site)
    spec = InitSpec(args.scheme, args.distribution, args.seed, args.target_variance)
    plan = None
    if args.n_dense:
        plan = CopyInitPlan(args.n_dense, seed=args.seed)
    draws = sample_w_element(net, spec, args.samples, plan=plan, naive=args.naive)
    mean, var = float(draws.mean()), float(draws.var(ddof=1))
    report = {"samples": len(draws), "mean": mean, "variance": var,
              "std_error_mean": float(np.sqrt(var / len(draws))),
              "target_variance": args.target_variance}
    print(json.dumps(report))
    return 0


def cmd_spectrum(args, extra):
    model, saved = load_checkpoint(args.checkpoint)
    if not model.regs:
        raise SystemExit("checkpoint has no soft bond dimensions")
    threshold = args.threshold if args.threshold is not None else (saved or {}).get(
        "threshold", 0.5)
    write_spectrum(args.out, model.regs, threshold)
    print(f"wrote {len(model.regs)} rows to {args.out}")
    return 0


def cmd_sweep(args, extra):
    base = build_config(args, extra)
    grid = {}
    for item in args.grid:
        key, _, values = item.partition("=")
        key = key.replace("-", "_")
        grid[key] = [_coerce(key, v) for v in values.split(",")]
    keys = list(grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        changes = dict(zip(keys, combo))
        cfg = dataclasses.replace(base, **changes)
        name = "_".join(f"{k}-{v}" for k, v in changes.items()) or "base"
        print(f"== {name}", flush=True)
        records, summary = _run_training(cfg, out / name, quiet=True)
        rows.append({**changes,
                     "val_error": np.mean([r.val_error[-1] if r.val_error else np.nan
                                           for r in records]),
                     "test_accuracy": summary.get("test_accuracy_mean"),
                     "params": np.mean([r.final_params for r in records]),
                     "diverged": any(r.diverged for r in records)})
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys + ["val_error", "test_accuracy", "params",
                                                 "diverged"])
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")
    return 0


def make_parser():
    p = argparse.ArgumentParser(prog="tnml", description="Tensor-network classifiers on MNIST.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an MPS classifier; any config key may be "
                                     "passed as --key value")
    t.add_argument("--config", help="flat key=value file")
    t.add_argument("--out", default="runs/latest")
    t.add_argument("--full", action="store_true",
                   help="all training images, 100 epochs, 10 runs")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy and parameter count of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--data-dir")
    e.add_argument("--feature", choices=("trig", "linear"))
    e.add_argument("--threshold", type=float)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("init-stats", help="Monte-Carlo moments of one contracted element")
    s.add_argument("--n-sites", type=int, default=3)
    s.add_argument("--bond-dim", type=int, default=2)
    s.add_argument("--feature-dim", type=int, default=2)
    s.add_argument("--n-classes", type=int, default=2)
    s.add_argument("--output-site", type=int, default=0)
    s.add_argument("--scheme", default="variance")
    s.add_argument("--distribution", default="normal")
    s.add_argument("--target-variance", type=float, default=1.0)
    s.add_argument("--samples", type=int, default=100_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-dense", type=int, default=0, help="copy-node init with this many "
                                                           "dense nodes")
    s.add_argument("--naive", action="store_true", help="per-tensor fan init instead")
    s.set_defaults(func=cmd_init_stats)

    c = sub.add_parser("spectrum", help="soft and truncated bond dimensions as CSV")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--out", default="spectrum.csv")
    c.add_argument("--threshold", type=float)
    c.set_defaults(func=cmd_spectrum)

    w = sub.add_parser("sweep", help="grid of training runs")
    w.add_argument("--config")
    w.add_argument("--out", default="runs/sweep")
    w.add_argument("--full", action="store_true")
    w.add_argument("--grid", action="append", default=[],
                   help="key=v1,v2,... (repeatable)")
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    parser = make_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if extra and args.command not in ("train", "sweep"):
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    return args.func(args, extra)


if __name__ == "__main__":
    sys.exit(main())
