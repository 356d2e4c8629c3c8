"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 checkpoint error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as D
from .config import RunConfig, build_model
from .engine import EvalResult, evaluate, load_checkpoint, predict_count, train
from .errors import CheckpointError, ConfigError, DatasetError, InvalidInputError, PromptCountError

log = logging.getLogger("promptcount")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4
OVERLAY_ALPHA = 0.5


def jet(values: np.ndarray) -> np.ndarray:
    """Classic jet ramp on [0, 1]: blue -> cyan -> yellow -> red."""
    v = np.clip(values, 0.0, 1.0)[..., None]
    centres = np.array([3.0, 2.0, 1.0])  # r, g, b
    return np.clip(1.5 - np.abs(4.0 * v - centres), 0.0, 1.0)


def render_overlay(image: np.ndarray, density: np.ndarray) -> np.ndarray:
    """Blend the max-normalised density colour map onto the image; returns uint8 RGB."""
    image = np.asarray(image, dtype=np.float64)
    peak = float(density.max()) if density.size else 0.0
    if peak > 0:
        image = (1 - OVERLAY_ALPHA) * image + OVERLAY_ALPHA * jet(density / peak)
    return (np.clip(image, 0.0, 1.0) * 255).round().astype(np.uint8)


def _dataset_root(cfg: RunConfig) -> Path:
    root = cfg.data.root
    if not root or not Path(root).is_dir():
        raise DatasetError(f"data.root: dataset directory not found: {root!r}")
    return Path(root)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config, args.set)
    root = _dataset_root(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", cfg.to_dict())

    records = D.load_dataset(root, cfg.data.train_split, cfg.data.layout)
    if not records:
        raise DatasetError(f"data.root: no usable {cfg.data.train_split} records under {root}")
    val = None
    if cfg.data.val_split and cfg.train.model_selection == "val":
        try:
            val = D.load_dataset(root, cfg.data.val_split, cfg.data.layout) or None
        except DatasetError as exc:
            log.warning("no validation data, keeping the final checkpoint: %s", exc)

    model = build_model(cfg)
    augment = cfg.augment if cfg.data.augment else None
    dataset = D.CountingDataset(records, cfg.backbone.input_side, cfg.density, augment,
                                cfg.data.use_cached_density, seed=cfg.train.seed)
    snapshot = cfg.model_snapshot()
    state = None
    if args.resume:
        state = load_checkpoint(args.resume, model, expected_config=snapshot, train_cfg=cfg.train)
    state = train(cfg.train, dataset, model, contrastive_cfg=cfg.contrastive, state=state,
                  config_snapshot=snapshot, out_dir=out, val_records=val, stride=cfg.inference.stride,
                  max_epochs=args.max_epochs, run_config=cfg.to_dict())
    print(json.dumps({"stage": state.stage, "epoch": state.epoch, "output_dir": str(out),
                      "empty_patch_samples": state.empty_patch_samples}))
    return EXIT_OK


def write_eval(result: EvalResult, out: Path, split: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / f"eval_{split}.json", result.to_dict())
    with (out / f"eval_{split}.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["image", "class", "pred", "gt"])
        writer.writeheader()
        writer.writerows(result.per_image)


def run_eval(cfg: RunConfig, predictor, split: str, out: Path) -> EvalResult:
    records = D.load_dataset(_dataset_root(cfg), split, cfg.data.layout)
    if not records:
        raise DatasetError(f"data.root: no usable {split} records")
    result = evaluate(predictor, records, stride=cfg.inference.stride)
    write_eval(result, out, split)
    print(json.dumps(result.to_dict()))
    return result


def cmd_eval(args) -> int:
    cfg = RunConfig.from_file(args.config, args.set)
    model = build_model(cfg)
    load_checkpoint(args.ckpt, model, expected_config=cfg.model_snapshot(), train_cfg=cfg.train)
    run_eval(cfg, model, args.split, Path(args.out or cfg.output_dir))
    return EXIT_OK


def cmd_predict(args) -> int:
    from .engine import read_checkpoint

    manifest, _ = read_checkpoint(args.ckpt)
    raw = manifest.get("run_config") or manifest["config"]
    if args.weights:
        raw.setdefault("backbone", {})["weights_path"] = args.weights
    try:
        cfg = RunConfig.from_dict(raw)
    except ConfigError as exc:
        raise CheckpointError(f"{args.ckpt}: stored configuration is invalid ({exc})") from exc
    model = build_model(cfg)
    load_checkpoint(args.ckpt, model, expected_config=cfg.model_snapshot(), train_cfg=cfg.train)
    try:
        image = D.load_image(args.image)
    except OSError as exc:
        raise DatasetError(f"cannot read image {args.image}: {exc}") from exc
    stride = args.stride or cfg.inference.stride
    density, count = predict_count(model, image, args.prompt, stride=stride, batch_size=cfg.inference.batch_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    D.write_density(out / "density.dens", density)
    resized = D._resize(image, *density.shape)
    Image.fromarray(render_overlay(resized, density)).save(out / "overlay.png")
    print(f"{count:.4f}")
    return EXIT_OK


def _attach_density_cache(out: Path) -> None:
    ann_path = out / D.ANNOTATIONS
    annotations = json.loads(ann_path.read_text())
    (out / "densities").mkdir(exist_ok=True)
    for name, entry in sorted(annotations.items()):
        image_path = out / entry.get("image", f"images/{name}")
        try:
            w, h = D._image_size(image_path)
            density = D.dots_to_density(entry["points"], h, w)
        except (OSError, InvalidInputError, KeyError) as exc:
            log.warning("no density cache for %s: %s", name, exc)
            continue
        rel = f"densities/{name.replace('/', '__')}.dens"
        D.write_density(out / rel, density)
        entry["density"] = rel
    D._dump(ann_path, annotations)


def cmd_prepare_data(args) -> int:
    root = Path(args.root)
    if not root.is_dir():
        raise DatasetError(f"--root: directory not found: {root}")
    out = Path(args.out) if args.out else root
    if args.layout == "fsc147":
        counts = D.convert_fsc147(root, out)
    else:
        splits = ("train", "test")
        counts = D.export_index({s: D.load_dataset(root, s, args.layout) for s in splits}, out)
    if args.density_cache:
        _attach_density_cache(out)
    classes = D.split_classes(out)
    report = {"counts": counts, "classes_disjoint": D.classes_disjoint(out),
              "classes": {s: len(c) for s, c in classes.items()}}
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_make_toy(args) -> int:
    root = D.make_toy_dataset(args.root, n_images=args.n, side=args.side, seed=args.seed)
    print(str(root))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptcount", description="Count objects named by a text prompt")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run both training stages")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--max-epochs", type=int, help="stop after this many epochs in this invocation")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a dotted config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="MAE/RMSE on a split")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=["val", "test"], required=True)
    p.add_argument("--out")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="count one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--out", default="prediction")
    p.add_argument("--weights", help="pretrained encoder archive (pretrained mode)")
    p.add_argument("--stride", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("prepare-data", help="write the internal annotation index")
    p.add_argument("--layout", choices=list(D.LAYOUTS), required=True)
    p.add_argument("--root", required=True)
    p.add_argument("--out")
    p.add_argument("--density-cache", action="store_true")
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("make-toy", help="write the synthetic toy dataset")
    p.add_argument("--root", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_toy)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DatasetError, InvalidInputError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PromptCountError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
