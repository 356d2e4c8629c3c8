"""Two-stage training, checkpointing, sliding-window inference and evaluation."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import zipfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .alignment import ContrastiveConfig, ContrastiveLoss
from .data import CountingDataset, CountingRecord, _resize, load_image
from .errors import CheckpointError, ConfigError, InvalidInputError, NumericalError
from .model import PromptCounter, parameter_groups, trainable_parameters

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
STAGE1_GROUPS = ("visual_prompts", "text_context", "patch_proj")
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class TrainConfig:
    stage1_epochs: int = 30
    stage2_epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-4
    lr_decay_factor: float = 0.33
    lr_decay_epoch: int = 100
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    model_selection: str = "val"  # "val": best validation MAE; "final": last epoch

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("train: epoch counts must be >= 0")
        if self.batch_size <= 0 or self.learning_rate <= 0 or self.lr_decay_factor <= 0:
            raise ConfigError("train: batch_size, learning_rate and lr_decay_factor must be > 0")
        if self.weight_decay < 0 or self.grad_clip <= 0:
            raise ConfigError("train: weight_decay must be >= 0 and grad_clip > 0")
        if self.lr_decay_epoch <= 0 or (self.stage2_epochs and self.lr_decay_epoch > self.stage2_epochs):
            raise ConfigError("train.lr_decay_epoch: must fall within stage 2")
        if self.model_selection not in ("val", "final"):
            raise ConfigError("train.model_selection: 'val' or 'final'")


def learning_rate_at(cfg: TrainConfig, stage: int, epoch: int) -> float:
    """Learning rate for a 0-based epoch of a stage; one drop in stage 2."""
    if stage == 2 and epoch >= cfg.lr_decay_epoch:
        return cfg.learning_rate * cfg.lr_decay_factor
    return cfg.learning_rate


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean of squared per-pixel differences."""
    if pred.shape != target.shape:
        raise InvalidInputError(f"mse_loss: shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


@dataclass
class TrainState:
    model: PromptCounter
    config: dict = field(default_factory=dict)
    stage: int = 1  # stage in progress; 3 once both stages are done
    epoch: int = 0  # completed epochs within ``stage``
    optimizer: torch.optim.Optimizer | None = None
    best_val_mae: float = math.inf
    empty_patch_samples: int = 0
    history: list = field(default_factory=list)
    run_config: dict | None = None  # full resolved config, informational (not hashed)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def model_dtype(model: PromptCounter) -> torch.dtype:
    return model.backbone.visual_prompts.dtype


def make_optimizer(model: PromptCounter, stage: int, cfg: TrainConfig) -> torch.optim.AdamW:
    groups = parameter_groups(model)
    names = STAGE1_GROUPS if stage == 1 else tuple(groups)
    params = [p for g in names for _, p in groups[g]]
    return torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


# ---------------------------------------------------------------------------
# checkpoints


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _le(arr: np.ndarray) -> np.ndarray:
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(state: TrainState, path) -> None:
    """Write a zip archive: manifest.json plus one little-endian .npy per tensor."""
    model = state.model
    named = trainable_parameters(model)
    arrays: dict[str, np.ndarray] = {f"param/{n}": _le(p.detach().cpu().numpy()) for n, p in named}
    steps = {}
    if state.optimizer is not None:
        by_param = {id(p): n for n, p in named}
        for p, st in state.optimizer.state.items():
            name = by_param[id(p)]
            steps[name] = float(st["step"])
            arrays[f"optim/{name}/exp_avg"] = _le(st["exp_avg"].detach().cpu().numpy())
            arrays[f"optim/{name}/exp_avg_sq"] = _le(st["exp_avg_sq"].detach().cpu().numpy())
    arrays["rng/torch"] = torch.get_rng_state().numpy()
    manifest = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash(state.config),
        "config": state.config,
        "frozen_digest": getattr(model, "_frozen_digest", None) or model.backbone.frozen_digest(),
        "stage": state.stage,
        "epoch": state.epoch,
        "best_val_mae": None if math.isinf(state.best_val_mae) else state.best_val_mae,
        "empty_patch_samples": state.empty_patch_samples,
        "has_optimizer": state.optimizer is not None,
        "optimizer_steps": steps,
        "history": state.history,
        "run_config": state.run_config,
        "arrays": {k: {"shape": list(v.shape), "dtype": v.dtype.str} for k, v in arrays.items()},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        def put(name, data):
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)

        put("manifest.json", json.dumps(manifest, sort_keys=True, indent=1))
        for name in sorted(arrays):
            put(f"{name}.npy", _npy_bytes(arrays[name]))
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse an archive fully; raises CheckpointError on any defect."""
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format_version") != FORMAT_VERSION:
                raise CheckpointError(
                    f"{path}: format version {manifest.get('format_version')} is incompatible (expected {FORMAT_VERSION})"
                )
            arrays = {}
            for name, meta in manifest["arrays"].items():
                arr = np.load(io.BytesIO(zf.read(f"{name}.npy")), allow_pickle=False)
                if list(arr.shape) != meta["shape"] or arr.dtype.str != meta["dtype"]:
                    raise CheckpointError(f"{path}: array {name} does not match its manifest entry")
                arrays[name] = arr
    except CheckpointError:
        raise
    except (zipfile.BadZipFile, zlib.error, KeyError, ValueError, OSError, EOFError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    return manifest, arrays


def load_checkpoint(path, model: PromptCounter | None = None, expected_config: dict | None = None,
                    train_cfg: TrainConfig | None = None) -> TrainState:
    """Restore a TrainState. The model is rebuilt from the stored config when not given.

    Nothing is written into ``model`` unless the whole archive validates.
    """
    manifest, arrays = read_checkpoint(path)
    if expected_config is not None and config_hash(expected_config) != manifest["config_hash"]:
        raise CheckpointError(f"{path}: checkpoint was written under a different configuration")
    if model is None:
        from .config import RunConfig, build_model

        model = build_model(RunConfig.from_dict(manifest["config"]))
    digest = model.backbone.frozen_digest()
    if manifest["frozen_digest"] != digest:
        raise CheckpointError(f"{path}: frozen encoder weights differ from the ones used for training")
    named = dict(trainable_parameters(model))
    for name, p in named.items():
        arr = arrays.get(f"param/{name}")
        if arr is None or tuple(arr.shape) != tuple(p.shape):
            raise CheckpointError(f"{path}: parameter {name} missing or mis-shaped")
    optimizer = None
    if manifest["has_optimizer"]:
        if train_cfg is None:
            from .config import RunConfig

            train_cfg = RunConfig.from_dict(manifest["config"]).train
        optimizer = make_optimizer(model, manifest["stage"], train_cfg)
        owned = {id(p) for g in optimizer.param_groups for p in g["params"]}
        for name in manifest["optimizer_steps"]:
            if name not in named or id(named[name]) not in owned:
                raise CheckpointError(f"{path}: optimizer state for unknown parameter {name}")

    with torch.no_grad():
        for name, p in named.items():
            arr = arrays[f"param/{name}"]
            p.copy_(torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))))
    if optimizer is not None:
        for name, step in manifest["optimizer_steps"].items():
            p = named[name]
            optimizer.state[p] = {
                "step": torch.tensor(step, dtype=torch.float32),
                "exp_avg": torch.from_numpy(arrays[f"optim/{name}/exp_avg"].copy()).to(p.dtype),
                "exp_avg_sq": torch.from_numpy(arrays[f"optim/{name}/exp_avg_sq"].copy()).to(p.dtype),
            }
    torch.set_rng_state(torch.from_numpy(arrays["rng/torch"].copy()))
    model._frozen_digest = digest
    best = manifest["best_val_mae"]
    return TrainState(
        model=model, config=manifest["config"], stage=manifest["stage"], epoch=manifest["epoch"],
        optimizer=optimizer, best_val_mae=math.inf if best is None else best,
        empty_patch_samples=manifest["empty_patch_samples"], history=manifest["history"],
        run_config=manifest.get("run_config"),
    )


# ---------------------------------------------------------------------------
# training


def _collate(dataset: CountingDataset, indices, epoch_key: int, dtype):
    images, densities, names = [], [], []
    for i in indices:
        img, den, name = dataset.get(int(i), epoch_key)
        images.append(img)
        densities.append(den)
        names.append(name)
    images = torch.from_numpy(np.stack(images)).to(dtype)
    densities = torch.from_numpy(np.stack(densities)).to(dtype)
    return images, densities, names


def run_epoch(model: PromptCounter, dataset: CountingDataset, optimizer, cfg: TrainConfig, stage: int, epoch: int,
              contrastive: ContrastiveLoss) -> float:
    order = np.random.default_rng([cfg.seed, stage, epoch]).permutation(len(dataset))
    dtype = model_dtype(model)
    clip_params = [p for g in optimizer.param_groups for p in g["params"]]
    total, seen = 0.0, 0
    for start in range(0, len(order), cfg.batch_size):
        batch = order[start:start + cfg.batch_size]
        images, densities, names = _collate(dataset, batch, stage * 1_000_000 + epoch, dtype)
        optimizer.zero_grad(set_to_none=True)
        if stage == 1:
            patches, text, _ = model.embed(images, names)
            loss = contrastive(patches, text.embedding, densities)
        else:
            loss = mse_loss(model(images, names), densities)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite loss in stage {stage}, epoch {epoch}")
        if loss.requires_grad:
            loss.backward()
            if stage == 2:
                torch.nn.utils.clip_grad_norm_(clip_params, cfg.grad_clip)
            optimizer.step()
        total += float(loss.detach()) * len(batch)
        seen += len(batch)
    return total / seen


def _append_log(out_dir: Path, row: dict) -> None:
    path = out_dir / "loss_log.csv"
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "stage", "loss", "lr"])
        if new:
            writer.writeheader()
        writer.writerow(row)


def train(cfg: TrainConfig, dataset: CountingDataset, model: PromptCounter | None = None, *,
          contrastive_cfg: ContrastiveConfig | None = None, state: TrainState | None = None,
          config_snapshot: dict | None = None, out_dir=None, val_records: Sequence[CountingRecord] | None = None,
          stride: int = 128, max_epochs: int | None = None, run_config: dict | None = None) -> TrainState:
    """Contrastive pretext stage, then density regression.

    Pass ``state`` (from ``load_checkpoint``) to resume. ``max_epochs`` stops
    after that many epochs in this call, leaving a resumable state.
    """
    if len(dataset) == 0:
        raise InvalidInputError("train: dataset is empty")
    if state is None:
        if model is None:
            raise InvalidInputError("train: need a model or a state to resume")
        state = TrainState(model=model, config=config_snapshot or {})
    if run_config is not None:
        state.run_config = run_config
    model = state.model
    model.train()
    if not getattr(model, "_frozen_digest", None):
        model._frozen_digest = model.backbone.frozen_digest()
    if contrastive_cfg is None:
        # one mask cell per patch
        ps = model.backbone.cfg.patch_size
        contrastive_cfg = ContrastiveConfig(pool_kernel=ps, pool_stride=ps)
    contrastive = ContrastiveLoss(contrastive_cfg)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    ran = 0
    while state.stage <= 2:
        total = cfg.stage1_epochs if state.stage == 1 else cfg.stage2_epochs
        while state.epoch < total:
            if max_epochs is not None and ran >= max_epochs:
                return state
            if state.optimizer is None:
                state.optimizer = make_optimizer(model, state.stage, cfg)
            lr = learning_rate_at(cfg, state.stage, state.epoch)
            for group in state.optimizer.param_groups:
                group["lr"] = lr
            try:
                loss = run_epoch(model, dataset, state.optimizer, cfg, state.stage, state.epoch, contrastive)
            except NumericalError:
                if out:
                    save_checkpoint(state, out / "diagnostic.ckpt")
                raise
            state.epoch += 1
            ran += 1
            state.empty_patch_samples += contrastive.empty_count
            contrastive.empty_count = 0
            row = {"epoch": state.epoch, "stage": state.stage, "loss": loss, "lr": lr}
            state.history.append(row)
            logger.info("stage %d epoch %d loss %.6g lr %.3g", state.stage, state.epoch, loss, lr)
            if state.stage == 2 and val_records and cfg.model_selection == "val":
                result = evaluate(model, val_records, stride=stride)
                if result.mae < state.best_val_mae:
                    state.best_val_mae = result.mae
                    if out:
                        save_checkpoint(state, out / "best.ckpt")
                model.train()
            if out:
                _append_log(out, row)
                save_checkpoint(state, out / "last.ckpt")
        if out:
            save_checkpoint(state, out / f"stage{state.stage}.ckpt")
        state.stage += 1
        state.epoch = 0
        state.optimizer = None
    if out:
        save_checkpoint(state, out / "final.ckpt")
    return state


# ---------------------------------------------------------------------------
# inference


def window_origins(length: int, window: int, stride: int) -> list[int]:
    """Window starts along one axis; the last window is snapped to the far edge."""
    if length < window:
        raise InvalidInputError(f"axis of length {length} is shorter than the window {window}")
    if stride <= 0 or stride > window:
        raise ConfigError(f"inference.stride: must lie in (0, {window}], got {stride}")
    origins = list(range(0, length - window + 1, stride))
    if origins[-1] + window < length:
        origins.append(length - window)
    return origins


def stitch_windows(window_maps, origins, height: int, width: int) -> np.ndarray:
    """Average overlapping window predictions into one (height, width) map."""
    acc = np.zeros((height, width), dtype=np.float64)
    cover = np.zeros((height, width), dtype=np.int64)
    for wmap, (y, x) in zip(window_maps, origins):
        wmap = np.asarray(wmap, dtype=np.float64)
        h, w = wmap.shape
        acc[y:y + h, x:x + w] += wmap
        cover[y:y + h, x:x + w] += 1
    if (cover == 0).any():
        raise RuntimeError("stitch_windows: tiling left pixels uncovered")
    return acc / cover


def resized_shape(height: int, width: int, side: int) -> tuple[int, int]:
    scale = side / min(height, width)
    return max(side, round(height * scale)), max(side, round(width * scale))


@torch.no_grad()
def predict_count(model: PromptCounter, image, prompt: str, stride: int = 128, batch_size: int = 8):
    """Density map at the resized resolution and its sum.

    The image (H, W, 3) in [0, 1] is resized so its shortest side equals the
    model input side, tiled with square windows, and overlaps are averaged.
    """
    if not isinstance(prompt, str) or not prompt.strip():
        raise InvalidInputError("predict_count: empty prompt")
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3 or min(image.shape[:2]) < 1:
        raise InvalidInputError(f"predict_count: expected (H, W, 3) image, got {image.shape}")
    side = model.input_side
    h, w = resized_shape(image.shape[0], image.shape[1], side)
    resized = _resize(image, h, w)
    origins = [(y, x) for y in window_origins(h, side, stride) for x in window_origins(w, side, stride)]
    was_training = model.training
    model.eval()
    dtype = model_dtype(model)
    maps = []
    for start in range(0, len(origins), batch_size):
        chunk = origins[start:start + batch_size]
        batch = torch.from_numpy(np.stack([resized[y:y + side, x:x + side] for y, x in chunk])).to(dtype)
        maps.extend(model(batch, [prompt] * len(chunk)).double().cpu().numpy())
    model.train(was_training)
    density = stitch_windows(maps, origins, h, w)
    return density, float(density.sum())


@dataclass
class EvalResult:
    mae: float
    rmse: float
    n_images: int
    per_image: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"MAE": self.mae, "RMSE": self.rmse, "N_I": self.n_images}


def count_metrics(predicted, truth) -> tuple[float, float]:
    """Mean absolute error and root mean squared error of two count sequences."""
    pred = np.asarray(predicted, dtype=np.float64)
    gt = np.asarray(truth, dtype=np.float64)
    if pred.shape != gt.shape or pred.size == 0:
        raise InvalidInputError("count_metrics: need two non-empty sequences of equal length")
    err = pred - gt
    return float(np.abs(err).mean()), float(np.sqrt((err ** 2).mean()))


def evaluate(model: PromptCounter | Callable, records: Sequence[CountingRecord], stride: int = 128) -> EvalResult:
    """MAE/RMSE over records. ``model`` may be a callable ``(image, prompt) -> count``."""
    if not records:
        raise InvalidInputError("evaluate: dataset is empty")
    if isinstance(model, PromptCounter):
        def predictor(img, prompt):
            return predict_count(model, img, prompt, stride=stride)[1]
    else:
        predictor = model
    rows = []
    for rec in records:
        pred = float(predictor(load_image(rec.image_path), rec.class_name))
        rows.append({"image": os.path.basename(rec.image_path), "class": rec.class_name,
                     "pred": pred, "gt": rec.count})
    mae, rmse = count_metrics([r["pred"] for r in rows], [r["gt"] for r in rows])
    return EvalResult(mae=mae, rmse=rmse, n_images=len(rows), per_image=rows)
