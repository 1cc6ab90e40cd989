"""Command-line surface: train, inject, landscape, sparsity, reproduce.

Exit codes: 0 success, 1 internal error, 2 usage/config error,
3 training divergence. Flags override values from an optional JSON config
file; the dataset root can also come from the QFAULT_DATA_ROOT
environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (Dataset, IdxParseError, load_idx, synthetic_blobs,
                   synthetic_images, take)
from .experiments import PRESETS, run_reproduce, select_rho
from .fault import FAULT_KINDS, sweep, sweep_csv
from .landscape import scan
from .nn import build_lenet5, build_mlp
from .train import (ConfigError, DivergenceError, SaqConfig, TrainConfig,
                    activation_sparsity, evaluate, train)

__all__ = ["main"]

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_DIVERGENCE = 3

DATA_ROOT_ENV = "QFAULT_DATA_ROOT"

FMNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class UsageError(ValueError):
    pass


def _find_idx_pair(root: Path, split: str) -> tuple[Path, Path]:
    images, labels = FMNIST_FILES[split]
    paths = []
    for name in (images, labels):
        plain, gz = root / name, root / f"{name}.gz"
        if plain.exists():
            paths.append(plain)
        elif gz.exists():
            paths.append(gz)
        else:
            raise UsageError(f"dataset file not found: {plain} (nor {gz})")
    return paths[0], paths[1]


def _load_split(args, split: str) -> Dataset:
    name = args.dataset
    seed = getattr(args, "seed", 0) or 0
    if name == "fmnist":
        root = Path(getattr(args, "data_root", None)
                    or os.environ.get(DATA_ROOT_ENV, "data"))
        images, labels = _find_idx_pair(root, split)
        return load_idx(images, labels, split=split)
    if name == "synthetic":
        return synthetic_blobs(classes=2, samples_per_class=250, dim=2,
                               spread=0.12, seed=seed, split=split)
    if name == "synthetic-images":
        n = getattr(args, "samples", 0) or (12_000 if split == "train" else 2_000)
        return synthetic_images(10, n // 10, seed=seed, split=split)
    raise UsageError(f"unknown dataset {name!r}")


def _train_eval_sets(args) -> tuple[Dataset, Dataset]:
    return _load_split(args, "train"), _load_split(args, "test")


TRAIN_DEFAULTS = {
    "arch": "lenet5",
    "dataset": "synthetic-images",
    "data_root": None,
    "epochs": 2,
    "batch_size": 64,
    "learning_rate": 0.05,
    "momentum": 0.9,
    "alpha": "0",
    "weight_decay": 5e-4,
    "bits": 4,
    "seed": 0,
    "saq": False,
    "rho": 0.05,
    "mlp_sizes": "",
    "samples": 0,
    "checkpoint": "model.ckpt.json",
    "report": "train_report.csv",
}


def _parse_alpha(text: str):
    parts = [p for p in str(text).split(",") if p != ""]
    if len(parts) == 1:
        return float(parts[0])
    return tuple(float(p) for p in parts)


def _parse_rates(text: str) -> tuple[float, ...]:
    if ".." in text:
        lo, hi = (float(p) for p in text.split("..", 1))
        n = int(round((hi - lo) / 0.01)) + 1
        return tuple(round(lo + 0.01 * i, 10) for i in range(n))
    return tuple(float(p) for p in text.split(","))


def cmd_train(args) -> int:
    merged = dict(TRAIN_DEFAULTS)
    if getattr(args, "config", None):
        with open(args.config) as f:
            file_cfg = json.load(f)
        unknown = set(file_cfg) - set(TRAIN_DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    merged.update({k: v for k, v in vars(args).items()
                   if k in TRAIN_DEFAULTS and v is not None})
    ns = argparse.Namespace(**merged)

    train_set, eval_set = _train_eval_sets(ns)
    if ns.samples:
        train_set = take(train_set, int(ns.samples), seed=int(ns.seed))
    if ns.arch == "lenet5":
        model = build_lenet5(int(ns.bits), seed=int(ns.seed))
    elif ns.arch == "mlp":
        if ns.mlp_sizes:
            sizes = [int(s) for s in str(ns.mlp_sizes).split(",")]
        else:
            n_in = int(np.prod(train_set.images.shape[1:]))
            sizes = [n_in, 64, train_set.num_classes]
        model = build_mlp(sizes, int(ns.bits), seed=int(ns.seed))
    else:
        raise UsageError(f"unknown architecture {ns.arch!r}")

    cfg = TrainConfig(
        learning_rate=float(ns.learning_rate), momentum=float(ns.momentum),
        epochs=int(ns.epochs), batch_size=int(ns.batch_size),
        alpha=_parse_alpha(ns.alpha), weight_decay=float(ns.weight_decay),
        seed=int(ns.seed), bits=int(ns.bits))
    saq = SaqConfig(rho=float(ns.rho)) if ns.saq else None
    report = train(model, train_set, cfg, saq, val=eval_set)
    save_checkpoint(ns.checkpoint, model,
                    train_config=_jsonable_cfg(cfg),
                    saq_config=None if saq is None else dataclasses.asdict(saq),
                    seed_provenance={"seed": int(ns.seed)})
    Path(ns.report).write_text(report.to_csv())
    final = report.final
    print(f"trained {model.arch}: loss={final.loss:.4f} "
          f"train_acc={final.train_acc:.4f} val_acc={final.val_acc} "
          f"sparsity={final.sparsity:.4f}")
    print(f"checkpoint: {ns.checkpoint}\nreport: {ns.report}")
    return EXIT_OK


def _jsonable_cfg(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    if not isinstance(d["alpha"], (int, float)):
        d["alpha"] = list(d["alpha"])
    return d


def cmd_inject(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    eval_set = _load_split(args, "test")
    if args.samples:
        eval_set = take(eval_set, args.samples, seed=args.seed)
    kinds = tuple(args.kinds.split(","))
    for k in kinds:
        if k not in FAULT_KINDS:
            raise UsageError(f"unknown fault kind {k!r} "
                             f"(choose from {','.join(FAULT_KINDS)})")
    rates = _parse_rates(args.rates)
    reports = sweep(model, eval_set, kinds, rates, args.trials, args.seed,
                    workers=args.threads)
    csv_text = sweep_csv(reports)
    Path(args.out).write_text(csv_text)
    sys.stdout.write(csv_text)
    return EXIT_OK


def cmd_landscape(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    eval_set = _load_split(args, "test")
    probe = take(eval_set, min(args.batch_samples, len(eval_set)), seed=args.seed)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    if len(seeds) != 2:
        raise UsageError("--seeds wants two comma-separated integers")
    grid = scan(model, (probe.images, probe.labels), args.extent, args.steps,
                (seeds[0], seeds[1]),
                batch_id=f"{eval_set.split}[:{len(probe)}]")
    out = Path(args.out)
    out.write_text(grid.to_csv())
    sidecar = out.with_suffix(".json")
    sidecar.write_text(json.dumps(grid.sidecar(), indent=1))
    print(f"grid: {out}\nsidecar: {sidecar} (center loss {grid.center_loss!r})")
    return EXIT_OK


def cmd_sparsity(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    eval_set = _load_split(args, args.split)
    if args.samples:
        eval_set = take(eval_set, args.samples, seed=0)
    rep = activation_sparsity(model, eval_set)
    acc = evaluate(model, eval_set)
    lines = ["layer,sparsity"]
    lines += [f"{i},{v!r}" for i, v in enumerate(rep.per_layer)]
    lines += [f"overall,{rep.overall!r}"]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    print(f"accuracy,{acc!r}")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    preset = PRESETS[args.preset]
    train_set, eval_set = _train_eval_sets(args)
    if args.select_rho:
        val = take(train_set, min(2000, len(train_set)), seed=preset.seed + 13)
        sub = take(train_set, preset.train_samples or len(train_set), seed=preset.seed)
        rho = select_rho(preset, sub, val, alpha=0.0)
        preset = dataclasses.replace(preset, rho=rho)
        print(f"selected rho = {rho}")
    result = run_reproduce(preset, train_set, eval_set, args.out_dir,
                           workers=args.threads)
    failed = [c for c in result.checks if not c.passed]
    print(f"{len(result.checks) - len(failed)}/{len(result.checks)} checks passed; "
          f"artifacts in {args.out_dir}")
    if failed and args.strict_checks:
        return EXIT_INTERNAL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="qfault",
        description="Quantized-network memory-fault workbench")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a quantized model")
    t.add_argument("--config", help="JSON file with defaults; flags override")
    t.add_argument("--arch", choices=("lenet5", "mlp"))
    t.add_argument("--dataset", choices=("fmnist", "synthetic", "synthetic-images"))
    t.add_argument("--data-root", dest="data_root")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--learning-rate", dest="learning_rate", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--alpha", help="L1 activation coefficient (scalar or comma list)")
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--bits", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--saq", action="store_const", const=True,
                   help="use the two-pass sharpness-aware step")
    t.add_argument("--rho", type=float)
    t.add_argument("--mlp-sizes", dest="mlp_sizes")
    t.add_argument("--samples", type=int, help="training subset size (0 = all)")
    t.add_argument("--checkpoint")
    t.add_argument("--report")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("inject", help="fault-injection sweep on a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--dataset", default="synthetic-images",
                   choices=("fmnist", "synthetic", "synthetic-images"))
    i.add_argument("--data-root", dest="data_root")
    i.add_argument("--kinds", default=",".join(FAULT_KINDS))
    i.add_argument("--rates", default="0.01..0.05",
                   help="comma list or inclusive range lo..hi (step 0.01)")
    i.add_argument("--trials", type=int, default=20)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--samples", type=int, default=0, help="eval subset (0 = all)")
    i.add_argument("--threads", type=int, default=1)
    i.add_argument("--out", default="fault_sweep.csv")
    i.set_defaults(func=cmd_inject)

    l = sub.add_parser("landscape", help="2D loss-landscape scan")
    l.add_argument("--checkpoint", required=True)
    l.add_argument("--dataset", default="synthetic-images",
                   choices=("fmnist", "synthetic", "synthetic-images"))
    l.add_argument("--data-root", dest="data_root")
    l.add_argument("--extent", type=float, default=1.0)
    l.add_argument("--steps", type=int, default=51)
    l.add_argument("--seeds", default="1,2")
    l.add_argument("--batch-samples", dest="batch_samples", type=int, default=1024)
    l.add_argument("--seed", type=int, default=0)
    l.add_argument("--out", default="landscape.csv")
    l.set_defaults(func=cmd_landscape)

    s = sub.add_parser("sparsity", help="activation sparsity of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", default="synthetic-images",
                   choices=("fmnist", "synthetic", "synthetic-images"))
    s.add_argument("--data-root", dest="data_root")
    s.add_argument("--split", default="test", choices=("train", "test"))
    s.add_argument("--samples", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sparsity)

    r = sub.add_parser("reproduce", help="four-arm comparison with sweeps")
    r.add_argument("--preset", default="quick", choices=sorted(PRESETS))
    r.add_argument("--dataset", default="fmnist",
                   choices=("fmnist", "synthetic-images"))
    r.add_argument("--data-root", dest="data_root")
    r.add_argument("--out-dir", dest="out_dir", default="reproduce_out")
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--samples", type=int, default=0,
                   help="synthetic train-set size (0 = preset default)")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--select-rho", dest="select_rho", action="store_true")
    r.add_argument("--strict-checks", dest="strict_checks", action="store_true")
    r.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (UsageError, ConfigError, CheckpointError, IdxParseError,
            FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:   # pragma: no cover - last-resort diagnostics
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
