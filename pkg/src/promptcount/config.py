"""Run configuration: one JSON document, nested sections, strict keys."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .alignment import ContrastiveConfig
from .backbone import BackboneConfig
from .data import LAYOUTS, AugmentConfig, DensitySynthesisConfig
from .decoder import DecoderConfig
from .engine import TrainConfig
from .errors import ConfigError
from .interaction import InteractionConfig
from .model import PromptCounter


@dataclass
class DataConfig:
    root: str | None = None
    layout: str = "fsc147"
    train_split: str = "train"
    val_split: str | None = "val"
    use_cached_density: bool = False
    augment: bool = True

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ConfigError(f"data.layout: unknown layout {self.layout!r}")


@dataclass
class InferenceConfig:
    stride: int = 128
    batch_size: int = 8

    def __post_init__(self):
        if self.stride <= 0 or self.batch_size <= 0:
            raise ConfigError("inference: stride and batch_size must be > 0")


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    interaction: InteractionConfig = field(default_factory=InteractionConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    density: DensitySynthesisConfig = field(default_factory=DensitySynthesisConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    output_dir: str = "runs/default"

    def __post_init__(self):
        side = self.backbone.input_side
        if self.augment.crop_size != side:
            raise ConfigError(f"augment.crop_size: must equal backbone.input_side ({side})")
        if self.inference.stride > side:
            raise ConfigError(f"inference.stride: must not exceed the window side {side}")
        if self.contrastive.pool_stride * self.backbone.patch_grid_side != side:
            raise ConfigError("contrastive.pool_stride: pooled mask must have patch_grid_side cells per side")

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = json.loads(json.dumps(raw))  # private copy
        side = raw.get("backbone", {}).get("input_side", BackboneConfig.input_side) if isinstance(raw.get("backbone", {}), dict) else None
        if isinstance(raw.get("augment", {}), dict) and side is not None:
            raw.setdefault("augment", {}).setdefault("crop_size", side)
        if isinstance(raw.get("inference", {}), dict) and isinstance(side, int):
            raw.setdefault("inference", {}).setdefault("stride", min(InferenceConfig.stride, side))
        return _build(cls, raw, "")

    @classmethod
    def from_file(cls, path, overrides=()) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config: file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON in {path} ({exc})") from exc
        return cls.from_dict(apply_overrides(raw, overrides))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def model_snapshot(self) -> dict:
        """Sections that define the trained model; paths are left out."""
        d = self.to_dict()
        d["backbone"].pop("weights_path", None)
        for key in ("data", "inference", "output_dir"):
            d.pop(key, None)
        return d


def _check_type(value, default, path):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, (list, tuple))
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {type(value).__name__}")


def _build(cls, raw, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{prefix}{key}: unknown key")
    defaults = cls()
    kwargs = {}
    for name, value in raw.items():
        default = getattr(defaults, name)
        path = f"{prefix}{name}"
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, path + ".")
        else:
            if value is not None:
                _check_type(value, default, path)
            if isinstance(default, tuple):
                value = tuple(value)
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from exc


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` strings; values parse as JSON, else stay strings."""
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        key, sep, text = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r}: expected key=value")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: cannot descend into a non-object")
        node[parts[-1]] = value
    return raw


def build_model(cfg: RunConfig, load_weights: bool = True) -> PromptCounter:
    return PromptCounter(cfg.backbone, cfg.interaction, cfg.decoder, load_weights=load_weights)


def stub_config(**sections) -> RunConfig:
    """Desk-scale run configuration around the stub backbone."""
    stub = BackboneConfig.stub()
    raw = {
        "backbone": dataclasses.asdict(stub),
        "contrastive": {"pool_kernel": stub.patch_size, "pool_stride": stub.patch_size},
        "interaction": {"num_heads": 2},
        "decoder": {"channel_schedule": [32, 16, 8, 4, 2]},
        "train": {"stage1_epochs": 2, "stage2_epochs": 8, "batch_size": 8, "learning_rate": 1e-3,
                  "lr_decay_epoch": 6, "model_selection": "final"},
        "inference": {"stride": 32},
    }
    for key, value in sections.items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key].update(value)
        else:
            raw[key] = value
    return RunConfig.from_dict(raw)


def toy_config(data_root=None, output_dir: str = "runs/toy", seed: int = 0) -> RunConfig:
    """Overfitting recipe for the synthetic toy set (``make_toy_dataset``) on the stub backbone."""
    return stub_config(
        train={"stage1_epochs": 5, "stage2_epochs": 500, "batch_size": 1, "learning_rate": 3e-4,
               "lr_decay_epoch": 300, "seed": seed, "model_selection": "final"},
        data={"root": None if data_root is None else str(data_root), "augment": False, "val_split": None},
        output_dir=str(output_dir),
    )
