"""
Command-line entry point.

Usage:
    python -m sknet count --arch sknet50 --res 224 --format json
    python -m sknet count --arch resnext50 --arch sknet50 --format table
    python -m sknet count --grid dilation
    python -m sknet gradcheck --unit sk --channels 32 --seed 7
    python -m sknet train --arch configs/sknet29-cifar-tiny.json --dataset synthetic --epochs 5 --out log.csv
    python -m sknet analyze --checkpoint f.ckpt --scales 1.0,1.5,2.0 --out att.csv
    python -m sknet presets
    python -m sknet fetch --dataset cifar10 --data data/

Exit codes: 0 success, 1 usage error, 2 runtime failure.
Data goes to stdout unless --out is given; logs go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from sknet.config import (
    ANALYSIS_IMAGES,
    ANALYSIS_SCALES,
    CIFAR_RESOLUTION,
    DEFAULT_RESOLUTION,
    DEFAULT_SEED,
    LOG_FORMAT,
)
from sknet.core.errors import ConfigError, SKNetError
from sknet.ingestion.cifar import ChannelNormalizer, ImageSet, download_cifar, load_cifar_set
from sknet.ingestion.synthetic import (
    SyntheticScaleSpec,
    gen_synthetic,
    read_synthetic,
    synthetic_set,
    write_synthetic,
)
from sknet.models.arch import PRESETS, ArchSpec, build, load_spec
from sknet.models.checkpoint import read_checkpoint, write_checkpoint
from sknet.services import attention, cost, training
from sknet.services.gradcheck import run_gradcheck

logger = logging.getLogger("sknet.cli")

DATASETS = ("cifar10", "cifar100", "synthetic")
SYNTHETIC_TRAIN = 256
SYNTHETIC_HOLDOUT = 5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)
        logger.info("wrote %s", out)


def _scales(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--scales expects comma-separated floats, got {text!r}") from exc
    if not values or any(not math.isfinite(v) or v < 1.0 for v in values):
        raise UsageError(f"--scales values must be finite and >= 1, got {text!r}")
    return values


def _resolution(spec: ArchSpec, res: int | None) -> int:
    if res is not None:
        return res
    return DEFAULT_RESOLUTION if spec.stem.pool else CIFAR_RESOLUTION


def _variant(args) -> int:
    return 10 if args.dataset == "cifar10" else 100


def _synthetic_split(images: ImageSet, scales: np.ndarray, split: str) -> tuple[ImageSet, np.ndarray]:
    """Last fifth of a stored synthetic set is the test split, the rest is train."""
    held = len(images) // SYNTHETIC_HOLDOUT
    if held == 0:
        logger.warning("%d synthetic images are too few to hold out a test split; %s uses all of them", len(images), split)
        return images, scales
    cut = len(images) - held
    idx = np.arange(cut, len(images)) if split == "test" else np.arange(cut)
    return images.subset(idx), scales[idx]


def _load_data(args, split: str = "train", limit: int | None = None) -> tuple[ImageSet, np.ndarray | None]:
    """Images for ``args.dataset`` (and their scales for synthetic data)."""
    if limit is not None and limit < 1:
        raise UsageError(f"--limit must be at least 1, got {limit}")
    if args.dataset == "synthetic":
        if args.data and Path(args.data).is_dir():
            images, scales = _synthetic_split(*read_synthetic(args.data), split)
        else:
            count = limit or SYNTHETIC_TRAIN
            seed = args.seed if split == "train" else args.seed + 1
            images, scales = synthetic_set(SyntheticScaleSpec(seed=seed), count)
        if limit is not None:
            images, scales = images.subset(np.arange(min(limit, len(images)))), scales[:limit]
        return images, scales
    if not args.data:
        raise UsageError(f"--data is required for --dataset {args.dataset}")
    images = load_cifar_set(args.data, _variant(args), split)
    if limit is not None:
        images = images.subset(np.arange(min(limit, len(images))))
    return images, None


def _normalize(args, *sets: ImageSet) -> None:
    """Standardise ``sets`` with statistics fitted on the training split only."""
    if args.dataset == "synthetic":
        return
    source = Path(args.data)
    stats = ChannelNormalizer.cached(
        source if source.is_dir() else source.parent,
        lambda: load_cifar_set(source, _variant(args), "train").pixels,
        channels=sets[0].pixels.shape[1],
    )
    for images in sets:
        images.pixels = stats.apply(images.pixels)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_count(args) -> None:
    if args.grid == "dilation":
        specs = cost.dilation_group_grid()
    elif args.grid == "kernels":
        specs = cost.kernel_combination_grid()
    else:
        specs = [load_spec(a) for a in args.arch or ["sknet50"]]
    res = _resolution(specs[0], args.res)
    if len(specs) == 1:
        result = cost.count_flops(specs[0], res)
    else:
        result = cost.compare(specs, res)
    rendered = {"json": result.to_json, "csv": result.to_csv, "table": result.to_table}[args.format]()
    _emit(rendered if rendered.endswith("\n") else rendered + "\n", args.out)


def cmd_gradcheck(args) -> None:
    reports = run_gradcheck(args.unit, channels=args.channels, seed=args.seed)
    payload = {name: report.to_dict() for name, report in reports.items()}
    payload["passed"] = all(r.passed() for r in reports.values())
    _emit(json.dumps(payload, indent=2) + "\n", args.out)
    if not payload["passed"]:
        worst = max(reports.values(), key=lambda r: r.worst)
        raise SKNetError(f"gradient check failed: worst relative error {worst.worst:.3e}")


def _recipe(args) -> training.OptimConfig:
    if args.dataset == "synthetic":
        cfg = training.OptimConfig(lr0=0.05, weight_decay=5e-4, batch_size=32, epochs=10, seed=args.seed)
    else:
        cfg = training.cifar_recipe(_variant(args), seed=args.seed)
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.batch is not None:
        overrides["batch_size"] = args.batch
    if args.lr0 is not None:
        overrides["lr0"] = args.lr0
    return training.OptimConfig.model_validate({**cfg.model_dump(), **overrides})


def cmd_train(args) -> None:
    cfg = _recipe(args)
    data, _ = _load_data(args, "train", args.limit)
    eval_data, _ = _load_data(args, "test", args.limit)
    _normalize(args, data, eval_data)
    spec = load_spec(args.arch).with_classes(data.num_classes)
    logger.info("optimiser: %s", cfg.model_dump_json())
    net = build(spec, seed=args.seed)
    log = training.train(net, data, cfg, eval_data=eval_data)
    if args.checkpoint:
        write_checkpoint(net, args.checkpoint)
    if args.out and args.out.endswith(".json"):
        log.write(args.out)
    else:
        _emit(log.to_csv(), args.out)


def cmd_analyze(args) -> None:
    scales = _scales(args.scales)
    if args.checkpoint:
        net = read_checkpoint(args.checkpoint)
        if args.arch and args.arch != net.spec.name:
            logger.warning("--arch %s ignored; checkpoint holds %s", args.arch, net.spec.name)
    else:
        spec = load_spec(args.arch or "sknet29-cifar")
        logger.warning("no --checkpoint given; analysing an untrained %s", spec.name)
        net = build(spec, seed=args.seed)
    images, _ = _load_data(args, "test", args.limit)
    _normalize(args, images)
    summaries = attention.run_analysis(
        net,
        images.pixels,
        scales,
        units=args.units,
        labels=images.labels,
        by_class=args.by_class,
    )
    _emit(attention.format_csv(summaries, windows=args.windows), args.out)


def cmd_presets(args) -> None:
    if args.format == "json":
        _emit(json.dumps({name: spec.model_dump(mode="json") for name, spec in PRESETS.items()}, indent=2) + "\n", args.out)
    else:
        _emit("".join(f"{name}\n" for name in PRESETS), args.out)


def cmd_fetch(args) -> None:
    if args.dataset == "synthetic":
        spec = SyntheticScaleSpec(seed=args.seed)
        write_synthetic(gen_synthetic(spec, args.limit or SYNTHETIC_TRAIN), args.data, spec)
        return
    folder = download_cifar(_variant(args), args.data)
    _emit(f"{folder}\n", None)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sknet", description="Selective Kernel networks: costs, gradients, training, analysis")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    count_p = sub.add_parser("count", help="Parameter and multiply-add counts")
    count_p.add_argument("--arch", action="append", help="Preset name or ArchSpec JSON file (repeat to compare)")
    count_p.add_argument("--grid", choices=("dilation", "kernels"), help="Compare an ablation grid of SKNet-50 variants")
    count_p.add_argument("--res", type=int, default=None, help="Input resolution (default 224, 32 for CIFAR stems)")
    count_p.add_argument("--format", choices=("json", "table", "csv"), default="table")
    count_p.add_argument("--out", help="Output file (default stdout)")

    grad_p = sub.add_parser("gradcheck", help="Finite-difference gradient verification")
    grad_p.add_argument("--unit", choices=("sk", "naive", "primitives", "toy"), default="sk")
    grad_p.add_argument("--channels", type=int, default=32)
    grad_p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    grad_p.add_argument("--format", choices=("json",), default="json")
    grad_p.add_argument("--out")

    train_p = sub.add_parser("train", help="Train a network with SGD")
    train_p.add_argument("--arch", default="sknet29-cifar")
    train_p.add_argument("--dataset", choices=DATASETS, default="synthetic")
    train_p.add_argument("--data", help="Dataset directory or record file")
    train_p.add_argument("--epochs", type=int)
    train_p.add_argument("--batch", type=int)
    train_p.add_argument("--lr0", type=float)
    train_p.add_argument("--limit", type=int, help="Use at most this many images per split")
    train_p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    train_p.add_argument("--checkpoint", help="Write the trained network here")
    train_p.add_argument("--out", help="Training log (.csv or .json; default CSV to stdout)")

    analyze_p = sub.add_parser("analyze", help="Attention versus object scale")
    analyze_p.add_argument("--arch")
    analyze_p.add_argument("--checkpoint", help="Trained network to analyse")
    analyze_p.add_argument("--dataset", choices=DATASETS, default="synthetic")
    analyze_p.add_argument("--data")
    analyze_p.add_argument("--scales", default=",".join(str(s) for s in ANALYSIS_SCALES))
    analyze_p.add_argument("--units", action="append", help="Unit id or glob, e.g. 'SK_3_*' (repeatable)")
    analyze_p.add_argument("--limit", type=int, default=ANALYSIS_IMAGES)
    analyze_p.add_argument("--by-class", action="store_true")
    analyze_p.add_argument("--windows", action="store_true", help="Add 16-channel window averages")
    analyze_p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    analyze_p.add_argument("--out")

    presets_p = sub.add_parser("presets", help="List named architectures")
    presets_p.add_argument("--format", choices=("table", "json"), default="table")
    presets_p.add_argument("--out")

    fetch_p = sub.add_parser("fetch", help="Download CIFAR or write a synthetic dataset")
    fetch_p.add_argument("--dataset", choices=DATASETS, default="cifar10")
    fetch_p.add_argument("--data", required=True, help="Destination directory")
    fetch_p.add_argument("--limit", type=int, help="Synthetic image count")
    fetch_p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    return parser


COMMANDS = {
    "count": cmd_count,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "analyze": cmd_analyze,
    "presets": cmd_presets,
    "fetch": cmd_fetch,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format=LOG_FORMAT,
        stream=sys.stderr,
        force=True,
    )
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    logger.info("resolved config: %s", json.dumps(vars(args), sort_keys=True, default=str))
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigError, ValidationError) as exc:
        logger.error("%s", exc)
        return 1
    except (SKNetError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return 2
    except ValueError as exc:
        logger.error("%s: bad value: %s", args.command, exc)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
