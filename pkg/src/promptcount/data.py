"""Dataset ingestion, density synthesis, count-preserving resizing and augmentation.

Internal index layout (what ``load_dataset(layout="fsc147")`` reads)::

    root/annotations.json  {image_name: {"class": str, "points": [[x, y], ...],
                                         "image": optional path relative to root,
                                         "density": optional density cache path}}
    root/splits.json       {"train": [image_name, ...], "val": [...], "test": [...]}
    root/images/<image_name>   (default location when "image" is absent)

Point coordinates are continuous pixel coordinates: pixel (row r, col c)
covers [c, c+1) x [r, r+1), so a point is in bounds iff 0 <= x < W and 0 <= y < H.
"""
from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DatasetError, InvalidInputError

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
LAYOUTS = ("fsc147", "carpk", "shanghaitech")
ANNOTATIONS = "annotations.json"
SPLIT_FILE = "splits.json"
DENSITY_MAGIC = b"PCDENS01"


@dataclass
class CountingRecord:
    image_path: str
    class_name: str
    points: list[tuple[float, float]]
    split: str
    density_path: str | None = None

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass
class DensitySynthesisConfig:
    sigma: float = 1.0
    truncation_radius: float = 4.0  # in multiples of sigma
    renormalize_per_point: bool = True

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigError("density.sigma: must be > 0")
        if self.truncation_radius < 3:
            raise ConfigError("density.truncation_radius: must be >= 3")


@dataclass
class AugmentConfig:
    crop_size: int = 224
    flip_prob: float = 0.5
    jitter_prob: float = 0.3
    blur_prob: float = 0.2
    jitter_strength: float = 0.4
    blur_sigma: tuple[float, float] = (0.1, 2.0)

    def __post_init__(self):
        for name in ("flip_prob", "jitter_prob", "blur_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"augment.{name}: must lie in [0, 1]")
        if self.crop_size <= 0:
            raise ConfigError("augment.crop_size: must be > 0")
        self.blur_sigma = tuple(self.blur_sigma)


class RecordList(list):
    """List of records that also remembers how many entries were skipped."""

    def __init__(self, records=(), skipped: int = 0):
        super().__init__(records)
        self.skipped = skipped


# ---------------------------------------------------------------------------
# density maps


def dots_to_density(points, height: int, width: int, cfg: DensitySynthesisConfig | None = None) -> np.ndarray:
    """Render dot annotations as truncated Gaussians, one unit of mass per point."""
    cfg = cfg or DensitySynthesisConfig()
    density = np.zeros((height, width), dtype=np.float64)
    radius = cfg.truncation_radius * cfg.sigma
    reach = int(math.ceil(radius)) + 1
    for x, y in points:
        if not (0 <= x < width and 0 <= y < height):
            raise InvalidInputError(f"point ({x}, {y}) outside {width}x{height} image")
        col, row = int(x), int(y)
        r0, r1 = max(row - reach, 0), min(row + reach + 1, height)
        c0, c1 = max(col - reach, 0), min(col + reach + 1, width)
        rr, cc = np.mgrid[r0:r1, c0:c1]
        d2 = (cc + 0.5 - x) ** 2 + (rr + 0.5 - y) ** 2
        kernel = np.where(d2 <= radius * radius, np.exp(-d2 / (2 * cfg.sigma ** 2)), 0.0)
        if cfg.renormalize_per_point:
            total = kernel.sum()
            if total > 0:
                kernel /= total
            else:
                kernel[row - r0, col - c0] = 1.0
        else:
            kernel /= 2 * math.pi * cfg.sigma ** 2
        density[r0:r1, c0:c1] += kernel
    return density


def write_density(path, density) -> None:
    """Little-endian cache: 8-byte magic, uint32 H, uint32 W, float32 grid."""
    arr = np.ascontiguousarray(density, dtype="<f4")
    if arr.ndim != 2:
        raise InvalidInputError("write_density expects a 2-D grid")
    with open(path, "wb") as fh:
        fh.write(DENSITY_MAGIC + struct.pack("<II", *arr.shape) + arr.tobytes())


def read_density(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:8] != DENSITY_MAGIC:
        raise DatasetError(f"{path}: not a density cache file")
    h, w = struct.unpack("<II", blob[8:16])
    if len(blob) != 16 + 4 * h * w:
        raise DatasetError(f"{path}: truncated density cache")
    return np.frombuffer(blob, dtype="<f4", offset=16).reshape(h, w).astype(np.float64)


# ---------------------------------------------------------------------------
# geometric / photometric transforms


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def _resize(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(arr))
    if t.dim() == 2:
        t = t[None, None]
    else:
        t = t.permute(2, 0, 1)[None]
    same = tuple(t.shape[-2:]) == (height, width)
    if not same:
        shrinking = height < t.shape[-2] or width < t.shape[-1]
        t = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False, antialias=shrinking)
    out = t[0, 0] if arr.ndim == 2 else t[0].permute(1, 2, 0)
    return out.numpy().astype(arr.dtype, copy=False)


def resize_with_density(image, density, target_h: int, target_w: int):
    """Bilinear resize of image and density; the density is rescaled to keep its sum."""
    if target_h <= 0 or target_w <= 0:
        raise InvalidInputError("resize_with_density: target size must be positive")
    density = np.asarray(density, dtype=np.float64)
    total = density.sum()
    out_img = None if image is None else _resize(np.asarray(image, dtype=np.float32), target_h, target_w)
    out_den = _resize(density, target_h, target_w)
    out_den = np.clip(out_den, 0.0, None)
    new_total = out_den.sum()
    if total > 0 and new_total > 0:
        out_den *= total / new_total
    elif total == 0:
        out_den[:] = 0.0
    return out_img, out_den


def resize_shortest_side(image, density, side: int):
    h, w = np.asarray(density).shape
    scale = side / min(h, w)
    th, tw = max(side, round(h * scale)), max(side, round(w * scale))
    return resize_with_density(image, density, th, tw)


def _jitter(image: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    lo, hi = 1 - strength, 1 + strength
    img = image * rng.uniform(lo, hi)
    mean = img.mean()
    img = (img - mean) * rng.uniform(lo, hi) + mean
    gray = img.mean(axis=2, keepdims=True)
    img = (img - gray) * rng.uniform(lo, hi) + gray
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def augment(image, density, rng_seed, cfg: AugmentConfig | None = None):
    """Random crop, horizontal flip, colour jitter and blur; deterministic for a given seed.

    Geometric steps act on image and density alike; photometric steps leave the
    density untouched.
    """
    cfg = cfg or AugmentConfig()
    image = np.asarray(image, dtype=np.float32)
    density = np.asarray(density, dtype=np.float64)
    if image.shape[:2] != density.shape:
        raise InvalidInputError("augment: image and density sizes differ")
    rng = np.random.default_rng(rng_seed)
    size = cfg.crop_size
    if min(density.shape) < size:
        image, density = resize_shortest_side(image, density, size)
    h, w = density.shape
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    image = image[top:top + size, left:left + size]
    density = density[top:top + size, left:left + size]
    if rng.random() < cfg.flip_prob:
        image, density = image[:, ::-1], density[:, ::-1]
    if rng.random() < cfg.jitter_prob:
        image = _jitter(image, rng, cfg.jitter_strength)
    if rng.random() < cfg.blur_prob:
        sigma = rng.uniform(*cfg.blur_sigma)
        image = gaussian_filter(image, sigma=(sigma, sigma, 0))
    return np.ascontiguousarray(image, dtype=np.float32), np.ascontiguousarray(density)


# ---------------------------------------------------------------------------
# loading


def _image_size(path) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.size  # (W, H)


def _validate(record: CountingRecord) -> str | None:
    if not record.class_name or not isinstance(record.class_name, str):
        return "missing class name"
    if not os.path.isfile(record.image_path):
        return f"image not found: {record.image_path}"
    try:
        w, h = _image_size(record.image_path)
    except OSError as exc:
        return f"unreadable image {record.image_path}: {exc}"
    for x, y in record.points:
        if not (0 <= x < w and 0 <= y < h):
            return f"point ({x}, {y}) outside {w}x{h}"
    if record.density_path and not os.path.isfile(record.density_path):
        return f"density cache not found: {record.density_path}"
    return None


def _finalize(candidates, split: str) -> RecordList:
    out = RecordList()
    for name, rec in candidates:
        problem = rec if isinstance(rec, str) else _validate(rec)
        if problem:
            logger.warning("skipping %s (%s split): %s", name, split, problem)
            out.skipped += 1
        else:
            out.append(rec)
    return out


def _read_json(path: Path):
    if not path.is_file():
        raise DatasetError(f"missing index file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc})") from exc


def _load_index(root: Path, split: str) -> RecordList:
    annotations = _read_json(root / ANNOTATIONS)
    splits = _read_json(root / SPLIT_FILE)
    if split not in splits:
        raise DatasetError(f"{root / SPLIT_FILE}: no '{split}' split")
    candidates = []
    for name in splits[split]:
        entry = annotations.get(name)
        try:
            points = [(float(x), float(y)) for x, y in entry["points"]]
            rec = CountingRecord(
                image_path=str(root / entry.get("image", f"images/{name}")),
                class_name=str(entry["class"]).strip(),
                points=points,
                split=split,
                density_path=str(root / entry["density"]) if entry.get("density") else None,
            )
        except (TypeError, KeyError, ValueError) as exc:
            rec = f"malformed annotation ({exc!r})"
        candidates.append((name, rec))
    records = _finalize(candidates, split)
    if split != "train" and "train" in splits:
        train_classes = {str(annotations[n]["class"]).strip() for n in splits["train"] if n in annotations}
        shared = train_classes & {r.class_name for r in records}
        if shared:
            logger.warning("%s split shares classes with train: %s", split, sorted(shared))
    return records


def _load_carpk(root: Path, split: str) -> RecordList:
    if split == "val":
        raise DatasetError("CARPK has no validation split")
    listing = root / "ImageSets" / f"{split}.txt"
    if not listing.is_file():
        raise DatasetError(f"missing index file: {listing}")
    candidates = []
    for stem in listing.read_text().split():
        ann = root / "Annotations" / f"{stem}.txt"
        try:
            points = []
            for line in ann.read_text().splitlines():
                if line.strip():
                    x1, y1, x2, y2 = (float(v) for v in line.split()[:4])
                    points.append(((x1 + x2) / 2, (y1 + y2) / 2))
            rec = CountingRecord(str(root / "Images" / f"{stem}.png"), "car", points, split)
        except (OSError, ValueError) as exc:
            rec = f"malformed annotation ({exc!r})"
        candidates.append((stem, rec))
    return _finalize(candidates, split)


def _load_shanghaitech(root: Path, split: str) -> RecordList:
    from scipy.io import loadmat

    if split == "val":
        raise DatasetError("ShanghaiTech has no validation split")
    images = root / f"{split}_data" / "images"
    if not images.is_dir():
        raise DatasetError(f"missing index file: {images}")
    candidates = []
    for img in sorted(images.glob("*.jpg")):
        gt = root / f"{split}_data" / "ground-truth" / f"GT_{img.stem}.mat"
        try:
            info = loadmat(gt)["image_info"]
            locations = np.asarray(info[0, 0][0, 0][0], dtype=np.float64).reshape(-1, 2)
            rec = CountingRecord(str(img), "people", [tuple(p) for p in locations.tolist()], split)
        except (OSError, KeyError, IndexError, ValueError) as exc:
            rec = f"malformed annotation ({exc!r})"
        candidates.append((img.name, rec))
    return _finalize(candidates, split)


def load_dataset(root, split: str, layout: str = "fsc147") -> RecordList:
    """Read and validate the records of one split.

    Malformed entries are logged and skipped; ``result.skipped`` counts them.
    Exemplar boxes, where a layout has them, are ignored.
    """
    if split not in SPLITS:
        raise InvalidInputError(f"unknown split {split!r}")
    root = Path(root)
    loaders = {"fsc147": _load_index, "carpk": _load_carpk, "shanghaitech": _load_shanghaitech}
    if layout not in loaders:
        raise InvalidInputError(f"unknown layout {layout!r}")
    return loaders[layout](root, split)


def split_classes(root) -> dict[str, set[str]]:
    annotations = _read_json(Path(root) / ANNOTATIONS)
    splits = _read_json(Path(root) / SPLIT_FILE)
    return {s: {str(annotations[n]["class"]).strip() for n in names if n in annotations}
            for s, names in splits.items()}


def classes_disjoint(root) -> bool:
    classes = split_classes(root)
    train = classes.get("train", set())
    return all(not (train & classes.get(s, set())) for s in ("val", "test"))


# ---------------------------------------------------------------------------
# index preparation


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def convert_fsc147(root, out=None) -> dict[str, int]:
    """Convert the published FSC-147 annotation files into the internal index."""
    root = Path(root)
    out = Path(out) if out else root
    ann = _read_json(root / "annotation_FSC147_384.json")
    split_file = _read_json(root / "Train_Test_Val_FSC_147.json")
    class_file = root / "ImageClasses_FSC147.txt"
    if not class_file.is_file():
        raise DatasetError(f"missing index file: {class_file}")
    classes = {}
    for line in class_file.read_text().splitlines():
        if line.strip():
            name, _, cls = line.partition("\t")
            classes[name.strip()] = cls.strip()
    image_dir = "images_384_VarV2" if (root / "images_384_VarV2").is_dir() else "images"
    prefix = os.path.relpath(root / image_dir, out)
    annotations = {
        name: {"class": classes.get(name, ""), "points": entry["points"], "image": f"{prefix}/{name}"}
        for name, entry in ann.items()
    }
    splits = {s: sorted(split_file.get(s, [])) for s in SPLITS}
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / ANNOTATIONS, annotations)
    _dump(out / SPLIT_FILE, splits)
    return {s: len(v) for s, v in splits.items()}


def export_index(records_by_split: dict[str, Sequence[CountingRecord]], out) -> dict[str, int]:
    """Write records loaded from any layout as an internal index under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    annotations, splits = {}, {}
    for split, records in records_by_split.items():
        names = []
        for rec in records:
            name = f"{split}/{Path(rec.image_path).name}"
            annotations[name] = {"class": rec.class_name, "points": [list(p) for p in rec.points],
                                 "image": os.path.relpath(rec.image_path, out)}
            names.append(name)
        splits[split] = sorted(names)
    _dump(out / ANNOTATIONS, annotations)
    _dump(out / SPLIT_FILE, splits)
    return {s: len(v) for s, v in splits.items()}


def make_toy_dataset(root, n_images: int = 8, side: int = 64, seed: int = 0,
                     class_name: str = "circle", max_objects: int = 6) -> Path:
    """Write a small synthetic set of bright discs on a dark background."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    annotations, names = {}, []
    for i in range(n_images):
        k = 1 + i % max_objects
        pts: list[tuple[float, float]] = []
        while len(pts) < k:
            x, y = rng.uniform(6, side - 6, size=2)
            if all((x - a) ** 2 + (y - b) ** 2 > 64 for a, b in pts):
                pts.append((round(float(x), 2), round(float(y), 2)))
        img = 0.1 + 0.05 * rng.random((side, side))
        for x, y in pts:
            img = np.where((xx - x) ** 2 + (yy - y) ** 2 <= 9, 0.9, img)
        rgb = (np.stack([img, img * 0.8, img * 0.6], axis=-1) * 255).astype(np.uint8)
        name = f"toy_{i:02d}.png"
        Image.fromarray(rgb).save(root / "images" / name)
        annotations[name] = {"class": class_name, "points": [list(p) for p in pts]}
        names.append(name)
    _dump(root / ANNOTATIONS, annotations)
    _dump(root / SPLIT_FILE, {"train": names, "val": names, "test": names})
    return root


# ---------------------------------------------------------------------------
# training samples


class CountingDataset:
    """Serves (image, density, class_name) triples at the model resolution.

    Images are resized so the shortest side equals ``input_side``; with
    ``augment_cfg`` a random crop and the photometric steps follow, otherwise a
    centre crop. Randomness derives from ``(seed, epoch, index)`` only.
    """

    def __init__(self, records: Sequence[CountingRecord], input_side: int,
                 density_cfg: DensitySynthesisConfig | None = None,
                 augment_cfg: AugmentConfig | None = None,
                 use_cached_density: bool = False, seed: int = 0):
        if not records:
            raise DatasetError("dataset is empty")
        self.records = list(records)
        self.input_side = input_side
        self.density_cfg = density_cfg or DensitySynthesisConfig()
        self.augment_cfg = augment_cfg
        if augment_cfg is not None and augment_cfg.crop_size != input_side:
            raise ConfigError("augment.crop_size: must equal backbone.input_side")
        self.use_cached_density = use_cached_density
        self.seed = seed
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self.records)

    def base(self, index: int):
        if index not in self._cache:
            rec = self.records[index]
            image = load_image(rec.image_path)
            if self.use_cached_density and rec.density_path:
                density = read_density(rec.density_path)
            else:
                density = dots_to_density(rec.points, image.shape[0], image.shape[1], self.density_cfg)
            self._cache[index] = resize_shortest_side(image, density, self.input_side)
        return self._cache[index]

    def get(self, index: int, epoch: int = 0):
        image, density = self.base(index)
        side = self.input_side
        if self.augment_cfg is not None:
            seed = np.random.SeedSequence([self.seed, epoch, index])
            image, density = augment(image, density, seed, self.augment_cfg)
        else:
            h, w = density.shape
            top, left = (h - side) // 2, (w - side) // 2
            image = image[top:top + side, left:left + side]
            density = density[top:top + side, left:left + side]
        return image, density, self.records[index].class_name
