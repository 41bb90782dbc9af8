"""Command-line entry point: train, evaluate, predict, toygen, sweep, bench.

Every command takes an optional YAML config plus flat ``key=value``
overrides (overrides > file > defaults) and echoes the resolved config,
seed, and code version into its output directory.  Exit codes: 0 success,
2 usage error, 3 config validation failure, 1 anything else; failures
print a machine-readable JSON error to stderr.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from ._version import __version__
from .config import RunConfig, load_run_config, save_resolved_config
from .core import (
    benchmark_throughput,
    build_model,
    evaluate_manifest,
    infer_heatmap,
    load_checkpoint,
    train,
)
from .data.manifest import load_manifest
from .data.preprocess import load_image, preprocess_image
from .data.toy import generate_toy_dataset
from .errors import ConfigError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3


def _write_run_metadata(cfg: RunConfig, out_dir: Path) -> None:
    save_resolved_config(cfg, out_dir)
    (out_dir / "run_meta.json").write_text(
        json.dumps({"seed": cfg.seed, "code_version": __version__}, indent=2) + "\n"
    )


def _load_config(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.overrides or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "device", None) is not None:
        overrides.append(f"device={args.device}")
    if getattr(args, "layout", None) is not None:
        overrides.append(f"data.layout={args.layout}")
    if getattr(args, "fpr_limit", None) is not None:
        overrides.append(f"eval.fpr_limit={args.fpr_limit}")
    return load_run_config(args.config, overrides)


def write_heatmap_png(anomaly, path: Path, scale_max: float | None = None) -> None:
    """8-bit colormapped PNG plus a JSON sidecar {score, min, max}.

    ``scale_max`` fixes the color scale (use 2 * n_scales for comparable
    images across runs); None rescales per image.
    """
    from matplotlib import colormaps
    from PIL import Image

    arr = anomaly.map.numpy()
    lo, hi = float(arr.min()), float(arr.max())
    if scale_max is None:
        span = (hi - lo) or 1.0
        unit = (arr - lo) / span
    else:
        unit = np.clip(arr / (scale_max or 1.0), 0.0, 1.0)
    rgba = colormaps["magma"](unit)
    Image.fromarray((rgba[..., :3] * 255).round().astype(np.uint8)).save(path)
    path.with_suffix(".json").write_text(
        json.dumps({"score": anomaly.score, "min": lo, "max": hi}) + "\n"
    )


def _cmd_toygen(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out)
    records = generate_toy_dataset(cfg.toy, out_dir)
    _write_run_metadata(cfg, out_dir)
    print(f"wrote {len(records)} samples under {out_dir}")
    return EXIT_OK


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_run_metadata(cfg, out_dir)
    records = load_manifest(cfg.data.root, cfg.data.layout)
    model, teacher = build_model(cfg)
    ckpt = train(model, teacher, records, cfg, out_dir)
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def _cmd_evaluate(args: argparse.Namespace) -> int:
    cfg_override = _load_config(args)
    model, teacher, cfg = load_checkpoint(args.checkpoint)
    # Evaluation-time knobs (data root, fpr limit, ...) come from the caller.
    cfg.data = cfg_override.data
    cfg.eval = cfg_override.eval
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_run_metadata(cfg, out_dir)
    records = load_manifest(cfg.data.root, cfg.data.layout)
    report = evaluate_manifest(model, teacher, records, cfg)
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    rows = report.csv_rows()
    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def _cmd_predict(args: argparse.Namespace) -> int:
    cfg_override = _load_config(args)
    model, teacher, cfg = load_checkpoint(args.checkpoint)
    cfg.data = cfg_override.data
    cfg.eval = cfg_override.eval
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_run_metadata(cfg, out_dir)
    paths: list[Path] = []
    for item in args.images:
        p = Path(item)
        paths.extend(sorted(p.glob("**/*.png")) if p.is_dir() else [p])
    if not paths:
        raise ConfigError("predict: no input images given")
    scale_max = 2.0 * len(cfg.teacher.stages) if cfg.eval.heatmap_scale == "fixed" else None
    for src in paths:
        with load_image(src) as img:
            tensor = preprocess_image(
                img, resize_to=cfg.data.resize_to, crop_to=cfg.data.crop_to,
                augment=False, mean=cfg.data.mean, std=cfg.data.std,
            )
        am = infer_heatmap(model, teacher, tensor)
        write_heatmap_png(am, out_dir / f"{src.stem}_heatmap.png", scale_max=scale_max)
    print(f"wrote {len(paths)} heatmaps under {out_dir}")
    return EXIT_OK


def _parse_axes(axis_args: list[str]) -> list[tuple[str, list]]:
    axes = []
    for item in axis_args:
        if "=" not in item:
            raise ConfigError(f"axis {item!r} is not of the form key=v1,v2,...")
        key, raw = item.split("=", 1)
        values = [v for v in raw.split(",") if v != ""]
        if not values:
            raise ConfigError(f"axis {item!r} lists no values")
        axes.append((key.strip(), values))
    return axes


def _cmd_sweep(args: argparse.Namespace) -> int:
    axes = _parse_axes(args.axis)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [k for k, _ in axes]
    merged: list[dict] = []
    for combo in itertools.product(*(v for _, v in axes)):
        overrides = list(args.overrides or [])
        overrides += [f"{k}={v}" for k, v in zip(names, combo)]
        ns = argparse.Namespace(
            config=args.config, overrides=overrides, seed=args.seed,
            device=args.device, layout=args.layout, fpr_limit=args.fpr_limit,
        )
        cfg = _load_config(ns)
        tag = "_".join(f"{k.split('.')[-1]}{v}" for k, v in zip(names, combo))
        run_dir = out_dir / f"run_{tag}"
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_run_metadata(cfg, run_dir)
        records = load_manifest(cfg.data.root, cfg.data.layout)
        model, teacher = build_model(cfg)
        train(model, teacher, records, cfg, run_dir)
        report = evaluate_manifest(model, teacher, records, cfg)
        (run_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        row = {k: v for k, v in zip(names, combo)}
        row.update(
            sample_auroc=report.sample_auroc,
            pixel_auroc=report.pixel_auroc,
            pro=report.pro,
        )
        merged.append(row)
        print(f"[sweep] {tag}: sample_auroc={report.sample_auroc}")
    with open(out_dir / "merged_results.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(merged[0].keys()))
        writer.writeheader()
        writer.writerows(merged)
    print(f"sweep finished: {len(merged)} runs, table at {out_dir / 'merged_results.csv'}")
    return EXIT_OK


def _cmd_bench(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    if args.checkpoint:
        model, teacher, cfg = load_checkpoint(args.checkpoint)
    else:
        model, teacher = build_model(cfg, load_pretrained=False)
    throughput = benchmark_throughput(
        model, teacher, input_side=cfg.data.crop_to, n_images=args.n_images
    )
    result = {
        "images_per_second": round(throughput, 2),
        "input_size": cfg.data.crop_to,
        "n_images": args.n_images,
        "hardware": {
            "platform": platform.platform(),
            "processor": platform.processor() or platform.machine(),
            "cpu_count": torch.get_num_threads(),
            "device": cfg.device,
        },
        "code_version": __version__,
    }
    print(json.dumps(result, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskrecon",
        description="Masked multi-scale feature reconstruction for anomaly detection",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--device", default=None)
        p.add_argument("--layout", default=None, choices=["mvtec", "aebad", "manifest_file"])
        p.add_argument("--fpr-limit", dest="fpr_limit", type=float, default=None)
        p.add_argument("overrides", nargs="*", metavar="key=value",
                       help="flat config overrides, e.g. masking.ratio=0.4")

    p = sub.add_parser("toygen", help="generate the procedural toy corpus")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=_cmd_toygen)

    p = sub.add_parser("train", help="train a model on the train split")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("predict", help="write heatmap PNGs for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--images", nargs="+", required=True)
    common(p)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("sweep", help="grid of train+evaluate runs over config axes")
    p.add_argument("--axis", action="append", required=True,
                   help="sweep axis, e.g. masking.ratio=0,0.4,0.9 (repeatable)")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("bench", help="report inference throughput (images/s)")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--n-images", dest="n_images", type=int, default=32)
    common(p)
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": "ConfigError", "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
