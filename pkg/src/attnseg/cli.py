"""Command-line entry point: ``attnseg {synth,train,eval,infer,replay}``.

Exit codes: 0 success, 1 usage or validation error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .data import (
    ISPRS_PALETTE,
    DataError,
    SynthSpec,
    decode_mask,
    default_palette,
    encode_mask,
    load_dataset,
    load_raster,
    save_raster,
    synth_dataset,
    write_manifest,
)
from .infer import heatmap_overlay, infer_image
from .metrics import ConfusionMatrix, accumulate, compute_report, format_csv, format_table
from .model import ModelConfig, build_model, load_checkpoint
from .tensor import ContractError, NonFiniteError
from .train import CHECKPOINT_NAME, HISTORY_NAME, TrainConfig, evaluate, train

log = logging.getLogger("attnseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_NAME = "run_manifest.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    now = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return now.isoformat(timespec="seconds")


def write_run_manifest(out: Path, command: str, argv: list[str], config: dict, seed, started: str) -> None:
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "seed": seed,
        "version": f"attnseg-v{__version__}",
        "started": started,
        "finished": _timestamp(),
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _class_list(text: str | None) -> list[int]:
    if not text:
        return []
    try:
        return sorted({int(v) for v in text.split(",") if v.strip()})
    except ValueError:
        raise ContractError(f"class list must be comma-separated integers, got {text!r}") from None


def _densities(text: str | None) -> dict[int, float] | None:
    if not text:
        return None
    out = {}
    try:
        for item in text.split(","):
            k, _, v = item.partition("=")
            out[int(k)] = float(v)
    except ValueError:
        raise ContractError(f"--density expects 'class=fraction,...', got {text!r}") from None
    return out


# commands --------------------------------------------------------------------


def cmd_synth(args, argv) -> int:
    started = _timestamp()
    spec = SynthSpec(
        num_tiles=args.num_tiles,
        tile_size=args.tile_size,
        num_classes=args.num_classes,
        shape_density=_densities(args.density),
        in_channels=args.bands,
    )
    if args.bands not in (3, 4):
        raise ContractError("--bands must be 3 or 4 (PNG RGB or RGBA)")
    tiles = synth_dataset(spec, args.seed)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    pairs = []
    for i, (image, mask) in enumerate(tiles):
        img_rel, mask_rel = Path("images") / f"tile_{i:04d}.png", Path("masks") / f"tile_{i:04d}.png"
        save_raster(image, out / img_rel)
        encode_mask(mask, out / mask_rel, ISPRS_PALETTE)
        pairs.append((img_rel, mask_rel))
    write_manifest(pairs, out / "dataset.txt", header=f"synthetic tiles, seed {args.seed}")
    config = {
        "num_tiles": spec.num_tiles,
        "tile_size": spec.tile_size,
        "num_classes": spec.num_classes,
        "shape_density": {str(k): v for k, v in sorted(spec.densities().items())},
        "bands": spec.in_channels,
    }
    write_run_manifest(out, "synth", argv, config, args.seed, started)
    print(f"wrote {len(tiles)} tiles to {out}")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    started = _timestamp()
    cfg = TrainConfig()
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise DataError(f"{args.config}: no such config file") from None
        cfg = TrainConfig.from_text(text)
    overrides = {
        k: str(v)
        for k, v in {"lr": args.lr, "epochs": args.epochs, "batch_size": args.batch_size, "seed": args.seed}.items()
        if v is not None
    }
    cfg = cfg.updated(overrides)

    dataset = load_dataset(args.data)
    eval_data = load_dataset(args.val_data) if args.val_data else None
    num_classes = args.num_classes or max(2, max(int(m.max()) for _, m in dataset) + 1)
    model_cfg = ModelConfig(
        in_channels=dataset[0][0].shape[0],
        num_classes=num_classes,
        encoder_widths=[int(w) for w in args.widths.split(",")],
        attention=args.attention,
        seed=cfg.seed,
    )
    model = build_model(model_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    excluded = _class_list(args.exclude_classes)
    try:
        model, history = train(model, dataset, cfg, out_dir=out, eval_data=eval_data, excluded=excluded)
    finally:
        config = {"train": cfg.to_text().splitlines(), "model": model_cfg.to_text().splitlines()}
        write_run_manifest(out, "train", argv, config, cfg.seed, started)
    (out / HISTORY_NAME).write_text(history.to_csv(include_seconds=args.timings))
    log.info("trained %d parameters for %d epochs", model.param_count(), cfg.epochs)
    if history.epochs:
        last = history.epochs[-1]
        print(f"final epoch {last.epoch}: loss {last.loss:.4f}, oa {last.oa:.4f}, miou {last.miou:.4f}")
    print(f"checkpoint: {out / CHECKPOINT_NAME}")
    return EXIT_OK


def _model_name(path: Path) -> str:
    return path.parent.name if path.name == CHECKPOINT_NAME else path.stem


def cmd_eval(args, argv) -> int:
    started = _timestamp()
    dataset = load_dataset(args.data)
    excluded = _class_list(args.exclude_classes)
    reports = []
    for ckpt in args.checkpoint:
        model = load_checkpoint(ckpt)
        k = model.config.num_classes
        top = max(int(m.max()) for _, m in dataset)
        if top >= k:
            raise DataError(f"ground truth uses class {top} but {ckpt} predicts only {k} classes")
        cm = evaluate(model, dataset)
        names = default_palette(k).names
        reports.append((_model_name(Path(ckpt)), compute_report(cm, excluded, args.oa_excludes, names)))
    table = format_table(reports)
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.txt").write_text(table)
        (out / "metrics.csv").write_text(format_csv(reports))
        config = {"checkpoints": args.checkpoint, "data": args.data, "excluded": excluded, "oa_excludes": args.oa_excludes}
        write_run_manifest(out, "eval", argv, config, None, started)
    return EXIT_OK


def cmd_infer(args, argv) -> int:
    started = _timestamp()
    model = load_checkpoint(args.checkpoint)
    image = load_raster(args.image)
    if image.shape[0] != model.config.in_channels:
        raise DataError(f"{args.image} has {image.shape[0]} bands, model expects {model.config.in_channels}")
    labels, logits = infer_image(model, image, args.window)
    palette = default_palette(model.config.num_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    encode_mask(labels, out / "prediction.png", palette)
    if args.heatmap_class is not None:
        overlay = heatmap_overlay(logits, image, args.heatmap_class, args.alpha)
        Image.fromarray(overlay).save(out / "heatmap.png")
    if args.mask:
        gt = decode_mask(args.mask, ISPRS_PALETTE).labels
        if gt.shape != labels.shape:
            raise DataError(f"{args.mask} is {gt.shape}, prediction is {labels.shape}")
        if int(gt.max()) >= model.config.num_classes:
            raise DataError(f"ground truth uses class {int(gt.max())}, model has {model.config.num_classes}")
        cm = accumulate(ConfusionMatrix(model.config.num_classes), labels, gt)
        rep = compute_report(cm, _class_list(args.exclude_classes), class_names=palette.names)
        (out / "metrics.csv").write_text(format_csv([(Path(args.image).stem, rep)]))
    config = {
        "checkpoint": args.checkpoint,
        "image": args.image,
        "window": args.window,
        "heatmap_class": args.heatmap_class,
        "alpha": args.alpha,
    }
    write_run_manifest(out, "infer", argv, config, None, started)
    print(f"prediction {labels.shape[1]}x{labels.shape[0]} written to {out / 'prediction.png'}")
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"{args.manifest}: no such manifest") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{args.manifest}: not valid JSON ({exc})") from None
    recorded = manifest.get("argv") if isinstance(manifest, dict) else None
    if not isinstance(recorded, list) or not all(isinstance(a, str) for a in recorded):
        raise DataError(f"{args.manifest}: manifest has no argv list")
    return main(recorded)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="attnseg", description="Attention-refined encoder-decoder segmentation toolkit")
    parser.add_argument("--version", action="version", version=f"attnseg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic labelled tile set")
    p.add_argument("--num-tiles", type=int, default=64)
    p.add_argument("--tile-size", type=int, default=64)
    p.add_argument("--num-classes", type=int, default=3)
    p.add_argument("--density", help="target pixel fraction per class, e.g. '1=0.25,2=0.15'")
    p.add_argument("--bands", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset manifest")
    p.add_argument("--data", required=True, help="manifest of 'image mask' lines")
    p.add_argument("--config", help="key=value file with TrainConfig fields")
    p.add_argument("--attention", default="cascade", choices=["none", "channel", "spatial", "cascade"])
    p.add_argument("--widths", default="16,32", help="encoder widths, comma separated")
    p.add_argument("--num-classes", type=int, help="default: highest label in the data + 1")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--val-data", help="manifest used for per-epoch metrics")
    p.add_argument("--exclude-classes", help="classes left out of MIoU/AF, e.g. '5'")
    p.add_argument("--timings", action="store_true", help="record wall-clock seconds in history.csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score checkpoints on a dataset")
    p.add_argument("--checkpoint", required=True, action="append", help="repeat to compare models")
    p.add_argument("--data", required=True)
    p.add_argument("--exclude-classes")
    p.add_argument("--oa-excludes", action="store_true", help="drop excluded-class pixels from OA too")
    p.add_argument("--out", help="directory for metrics.txt / metrics.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="tiled prediction of one raster")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--window", type=int, default=256)
    p.add_argument("--heatmap-class", type=int)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--mask", help="ground-truth mask for a metrics sidecar")
    p.add_argument("--exclude-classes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("replay", help="re-run the command recorded in a run manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except NonFiniteError as exc:
        print(f"attnseg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"attnseg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ContractError as exc:
        print(f"attnseg: invalid arguments: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
