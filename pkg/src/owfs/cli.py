"""Command-line entry point.

Subcommands: ``train``, ``eval``, ``crosseval``, ``bench``, ``sweep``,
``inspect-checkpoint``. Every run resolves its configuration first (config
file, then flag overrides), validates it, echoes the resolved text into the
output directory, and only then starts work, so a failed validation leaves
no partial outputs and any output directory can reproduce itself.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
arguments.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, inspect_checkpoint
from .config import RunConfig, load_config_file, parse_assignments
from .data import DataError, load_idx, load_image_tree, synth_blobs
from .embed import ConfigError
from .evaluate import bench, cross_evaluate, evaluate
from .model import load_model
from .train import build_splits, multi_seed, train_run

SWEEP_AXES = ("shots", "head", "order")


def _error(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", help="output directory (created if missing)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")
    p.add_argument("--seed", type=int, help="single training seed")
    p.add_argument("--seeds", help="comma-separated training seeds")
    p.add_argument("--head", help="head kind")
    p.add_argument("--shots", type=int, help="support examples per class")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="owfs",
        description="one-way few-shot training, evaluation, and benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and evaluate per seed")
    _add_common(p)
    p.set_defaults(func=cmd_train, needs_out=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its test split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval, needs_out=True)

    p = sub.add_parser("crosseval",
                       help="evaluate a checkpoint on an unmatched dataset")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", choices=("image_tree", "idx", "synth"),
                   required=True, help="the unmatched dataset kind")
    p.add_argument("--data-root")
    p.add_argument("--idx-images")
    p.add_argument("--idx-labels")
    p.add_argument("--synth-classes", type=int, default=10)
    p.add_argument("--synth-per-class", type=int, default=20)
    p.add_argument("--synth-spread", type=float, default=0.25)
    p.add_argument("--synth-seed", type=int, default=0)
    p.set_defaults(func=cmd_crosseval, needs_out=True)

    p = sub.add_parser("bench", help="seconds/epoch across head variants")
    _add_common(p)
    p.add_argument("--heads",
                   default="one_way_proto,two_way_proto,"
                           "one_way_normal,two_way_normal")
    p.add_argument("--epochs", type=int, default=4,
                   help="epochs per variant (first is warmup)")
    p.set_defaults(func=cmd_bench, needs_out=True)

    p = sub.add_parser("sweep", help="repeat a run along one axis")
    _add_common(p)
    p.add_argument("--axis", choices=SWEEP_AXES, required=True)
    p.add_argument("--values", required=True,
                   help="comma-separated axis values")
    p.set_defaults(func=cmd_sweep, needs_out=True)

    p = sub.add_parser("inspect-checkpoint", help="list checkpoint contents")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect, needs_out=False)

    return parser


# ---------------------------------------------------------------------------
# config resolution


def resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        cfg = load_config_file(path, cfg)
    pairs = []
    if getattr(args, "head", None):
        pairs.append(("head", args.head))
    if getattr(args, "shots", None) is not None:
        pairs.append(("shots", str(args.shots)))
    if getattr(args, "seed", None) is not None:
        pairs.append(("seeds", str(args.seed)))
    if getattr(args, "seeds", None):
        pairs.append(("seeds", args.seeds))
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        pairs.append((key.strip(), value))
    cfg = parse_assignments(pairs, cfg)
    cfg.validate()
    check_dataset_paths(cfg)
    return cfg


def check_dataset_paths(cfg: RunConfig) -> None:
    """Existence checks up front, before any output is created."""
    if cfg.dataset == "image_tree" and not Path(cfg.data_root).is_dir():
        raise ConfigError(f"data_root: {cfg.data_root} is not a directory")
    if cfg.dataset == "idx":
        for p in (cfg.idx_images, cfg.idx_labels):
            if not Path(p).is_file():
                raise ConfigError(f"idx file {p} does not exist")
    if cfg.split == "file":
        for p in (cfg.split_train_file, cfg.split_test_file):
            if not Path(p).is_file():
                raise ConfigError(f"split file {p} does not exist")


def prepare_out(out, cfg: RunConfig) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(cfg.to_text())
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = prepare_out(args.out, cfg)
    if len(cfg.seeds) == 1:
        from .evaluate import evaluate as _evaluate

        splits = build_splits(cfg)
        report, model = train_run(cfg, cfg.seeds[0], out_dir=out, splits=splits)
        ev = _evaluate(model, splits[1])
        (out / "eval.json").write_text(ev.to_json())
        (out / "eval.csv").write_text(ev.to_csv())
        print(f"seed {cfg.seeds[0]}: train acc {report.final_acc:.4f}, "
              f"test acc {ev.accuracy:.4f} "
              f"[{ev.ci_low:.4f}, {ev.ci_high:.4f}]")
        return 0
    result = multi_seed(cfg, out_dir=out)
    for row in result.per_seed:
        print(f"seed {row['seed']}: train acc {row['final_train_acc']:.4f}, "
              f"test acc {row['test_acc']:.4f}")
    for row in result.failures:
        print(f"seed {row['seed']}: FAILED ({row['error']})")
    if result.per_seed:
        agg = result.aggregate
        print(f"test acc mean {agg['test_acc_mean']:.4f} "
              f"std {agg['test_acc_std']:.4f}")
    return 1 if result.partial else 0


def cmd_eval(args) -> int:
    model, _ = load_model(args.checkpoint)
    cfg = resolve_config(args, base=model.cfg)
    model.cfg = cfg
    out = prepare_out(args.out, cfg)
    _, test_split, _ = build_splits(cfg)
    ev = evaluate(model, test_split)
    (out / "eval.json").write_text(ev.to_json())
    (out / "eval.csv").write_text(ev.to_csv())
    print(f"accuracy {ev.accuracy:.4f} [{ev.ci_low:.4f}, {ev.ci_high:.4f}] "
          f"over {ev.episodes} episodes")
    return 0


def _load_crosseval_dataset(args):
    if args.dataset == "image_tree":
        if not args.data_root or not Path(args.data_root).is_dir():
            raise ConfigError("crosseval: --data-root must be a directory")
        return load_image_tree(args.data_root, resize=None)
    if args.dataset == "idx":
        if not args.idx_images or not args.idx_labels:
            raise ConfigError("crosseval: --idx-images and --idx-labels required")
        for p in (args.idx_images, args.idx_labels):
            if not Path(p).is_file():
                raise ConfigError(f"crosseval: idx file {p} does not exist")
        return load_idx(args.idx_images, args.idx_labels)
    return synth_blobs(args.synth_classes, args.synth_per_class,
                       spread=args.synth_spread, seed=args.synth_seed)


def cmd_crosseval(args) -> int:
    model, _ = load_model(args.checkpoint)
    cfg = resolve_config(args, base=model.cfg)
    model.cfg = cfg
    raw = _load_crosseval_dataset(args)
    out = prepare_out(args.out, cfg)
    ev = cross_evaluate(model, raw)
    (out / "eval.json").write_text(ev.to_json())
    (out / "eval.csv").write_text(ev.to_csv())
    print(f"cross-dataset accuracy {ev.accuracy:.4f} "
          f"[{ev.ci_low:.4f}, {ev.ci_high:.4f}] on {raw.name}")
    return 0


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    heads = [h.strip() for h in args.heads.split(",") if h.strip()]
    out = prepare_out(args.out, cfg)
    report = bench(cfg, heads, epochs=args.epochs)
    (out / "bench.json").write_text(report.to_json())
    (out / "bench.csv").write_text(report.to_csv())
    (out / "ratios.csv").write_text(report.ratios_csv())
    for row in report.rows:
        print(f"{row['head']:20s} {row['seconds_per_epoch']:.3f} s/epoch")
    for row in report.ratios:
        print(f"{row['pair']}: {row['ratio']:.3f}")
    return 0


SWEEP_COLUMNS = ("axis_value,head,order,accuracy,ci_low,ci_high,"
                 "seconds_per_epoch,status")


def _sweep_variant(cfg: RunConfig, axis: str, value: str) -> RunConfig:
    if axis == "shots":
        return cfg.replace(shots=int(value))
    if axis == "head":
        return cfg.replace(head=value)
    return cfg.replace(order=value)


def cmd_sweep(args) -> int:
    base = resolve_config(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep: --values is empty")
    out = prepare_out(args.out, base)

    rows = []
    failed = False
    for value in values:
        cell_dir = out / f"{args.axis}_{value}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        try:
            cfg = _sweep_variant(base, args.axis, value)
            cfg.validate()
            splits = build_splits(cfg)
            report, model = train_run(cfg, cfg.seeds[0], out_dir=cell_dir,
                                      splits=splits)
            ev = evaluate(model, splits[1])
            last = report.epoch_seconds[-min(3, len(report.epoch_seconds)):]
            row = {
                "axis_value": value, "head": cfg.head, "order": cfg.order,
                "accuracy": ev.accuracy, "ci_low": ev.ci_low,
                "ci_high": ev.ci_high,
                "seconds_per_epoch": float(np.mean(last)),
                "status": "ok",
            }
            (cell_dir / "eval.json").write_text(ev.to_json())
        except Exception as exc:  # noqa: BLE001 - cells are isolated
            failed = True
            row = {
                "axis_value": value, "head": base.head, "order": base.order,
                "accuracy": None, "ci_low": None, "ci_high": None,
                "seconds_per_epoch": None, "status": "failed",
            }
            (cell_dir / "error.txt").write_text(
                f"{type(exc).__name__}: {exc}\n")
            print(f"cell {args.axis}={value}: FAILED ({exc})")
        rows.append(row)
        (cell_dir / "summary.json").write_text(
            json.dumps(row, sort_keys=True, indent=2) + "\n")

    lines = [SWEEP_COLUMNS]
    for r in rows:
        cells = [str(r["axis_value"]), r["head"], r["order"]]
        for key in ("accuracy", "ci_low", "ci_high", "seconds_per_epoch"):
            cells.append("" if r[key] is None else repr(r[key]))
        cells.append(r["status"])
        lines.append(",".join(cells))
    (out / "merged.csv").write_text("\n".join(lines) + "\n")
    print(f"sweep complete: {sum(r['status'] == 'ok' for r in rows)}/"
          f"{len(rows)} cells ok")
    return 1 if failed else 0


def cmd_inspect(args) -> int:
    entries, config_text = inspect_checkpoint(args.checkpoint)
    for name, shape in entries:
        print(f"{name}  {shape}")
    print("--- config ---")
    print(config_text, end="")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "needs_out", False) and not args.out:
        _error("--out is required")
        return 2
    try:
        return args.func(args)
    except (ConfigError, DataError, CheckpointError) as exc:
        _error(str(exc))
        return 2
    except Exception as exc:  # noqa: BLE001 - single CLI boundary
        _error(f"{type(exc).__name__}: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
