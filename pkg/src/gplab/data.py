"""Patch datasets: ingestion, decoding, augmentation, normalization, splits, batching.

Images live on disk as ``root/<CLASS>/*.png`` with the six-class vocabulary
below; everything downstream works on indices into an immutable
:class:`PatchDataset`.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from .tensor import Tensor

log = logging.getLogger(__name__)

CLASS_NAMES = ("CT", "PN", "IC", "NC", "MP", "WM")
CLASS_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}
NUM_CLASSES = len(CLASS_NAMES)

# training-set tallies per class (CT, PN, IC, NC, MP, WM)
TABLE1_COUNTS = (34139, 9664, 14500, 29542, 4812, 3828)
# the same distribution as rounded percentages
TABLE1_PERCENT = (35, 10, 15, 31, 5, 4)


class DataError(ValueError):
    """Malformed dataset, unreadable image, or impossible split request."""


@dataclass(frozen=True)
class PatchRecord:
    image_path: Path
    class_index: int

    def __post_init__(self):
        if not 0 <= self.class_index < NUM_CLASSES:
            raise DataError(f"class index {self.class_index} outside 0..{NUM_CLASSES - 1}")

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_index]


@dataclass(frozen=True)
class PatchDataset:
    records: tuple
    root: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.class_index for r in self.records], dtype=np.int64)

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=NUM_CLASSES)

    def count_by_name(self) -> dict[str, int]:
        return {CLASS_NAMES[i]: int(n) for i, n in enumerate(self.class_counts) if n}

    def relative_path(self, i: int) -> str:
        p = self.records[i].image_path
        if self.root is not None:
            try:
                return p.relative_to(self.root).as_posix()
            except ValueError:
                pass
        return p.as_posix()

    def subset(self, indices: Sequence[int]) -> "PatchDataset":
        return PatchDataset(tuple(self.records[i] for i in indices), self.root)


@dataclass(frozen=True)
class NormalizationSpec:
    epsilon: float = 1e-10

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("normalization epsilon must be positive")


@dataclass(frozen=True)
class AugmentationSpec:
    max_rotation_degrees: float = 20.0
    horizontal_flip_prob: float = 0.5
    vertical_flip_prob: float = 0.5
    brightness_delta: float = 0.1
    contrast_delta: float = 0.1
    # None replicates edge pixels into the corners exposed by rotation
    fill: Optional[float] = None

    def __post_init__(self):
        for name in ("horizontal_flip_prob", "vertical_flip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("max_rotation_degrees", "brightness_delta", "contrast_delta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def disabled(cls) -> "AugmentationSpec":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# Ingestion and decoding
# ---------------------------------------------------------------------------


def ingest(root: Union[str, Path], verify: bool = True) -> PatchDataset:
    """Enumerate ``root/<CLASS>/*.png`` in (class name, file name) order."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    records = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        if sub.name not in CLASS_INDEX:
            raise DataError(f"unknown class directory {sub.name!r} in {root}; expected one of {CLASS_NAMES}")
        for f in sorted(sub.glob("*.png"), key=lambda p: p.name):
            if verify:
                _check_image(f)
            records.append(PatchRecord(f, CLASS_INDEX[sub.name]))
    if not records:
        warnings.warn(f"no images found under {root}", stacklevel=2)
    return PatchDataset(tuple(records), root)


def ingest_unlabeled(root: Union[str, Path]) -> list[Path]:
    """Flat directory of PNGs (no class folders), sorted by file name."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    return sorted(root.glob("*.png"), key=lambda p: p.name)


def _check_image(path: Path) -> None:
    try:
        with Image.open(path) as img:
            img.load()
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def read_rgb(path: Union[str, Path], size: Optional[int] = None) -> np.ndarray:
    """H x W x 3 uint8 array; optionally resized (bilinear) to ``size`` x ``size``."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if size is not None and img.size != (size, size):
                img = img.resize((size, size), Image.BILINEAR)
            return np.asarray(img, dtype=np.uint8).copy()
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def decode(record: Union[PatchRecord, str, Path], size: Optional[int] = None) -> Tensor:
    """Read a PNG into a float32 ``3 x H x W`` tensor holding raw 0..255 values."""
    path = record.image_path if isinstance(record, PatchRecord) else record
    arr = read_rgb(path, size)
    return Tensor(arr.transpose(2, 0, 1).astype(np.float32))


def encode_png(array: np.ndarray, path: Union[str, Path]) -> None:
    """Write an H x W x 3 uint8 array as an 8-bit RGB PNG."""
    Image.fromarray(np.asarray(array, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def load_images(dataset: PatchDataset, size: Optional[int] = None) -> np.ndarray:
    """Decode every record into one ``N x 3 x H x W`` uint8 array."""
    if not len(dataset):
        return np.zeros((0, 3, size or 0, size or 0), dtype=np.uint8)
    arrays = [read_rgb(r.image_path, size) for r in dataset.records]
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise DataError(f"images have differing sizes {sorted(shapes)}; pass a resize target")
    return np.stack(arrays).transpose(0, 3, 1, 2).copy()


# ---------------------------------------------------------------------------
# Augmentation and normalization
# ---------------------------------------------------------------------------


def augment(image, spec: AugmentationSpec, rng: np.random.Generator):
    """Random rotation, flips, brightness and contrast on a ``3 x H x W`` image.

    The generator is always advanced by the same five draws so that the stream
    position does not depend on which transforms fire.
    """
    is_tensor = isinstance(image, Tensor)
    x = np.array(image.data if is_tensor else image, dtype=np.float32)
    angle = rng.uniform(-spec.max_rotation_degrees, spec.max_rotation_degrees)
    hflip = rng.random() < spec.horizontal_flip_prob
    vflip = rng.random() < spec.vertical_flip_prob
    brightness = rng.uniform(1 - spec.brightness_delta, 1 + spec.brightness_delta)
    contrast = rng.uniform(1 - spec.contrast_delta, 1 + spec.contrast_delta)

    if angle != 0.0:
        if spec.fill is None:
            x = ndimage.rotate(x, angle, axes=(2, 1), reshape=False, order=1, mode="nearest")
        else:
            x = ndimage.rotate(x, angle, axes=(2, 1), reshape=False, order=1,
                               mode="constant", cval=spec.fill)
    if hflip:
        x = x[:, :, ::-1]
    if vflip:
        x = x[:, ::-1, :]
    x = apply_brightness_contrast(x, brightness, contrast)
    x = np.ascontiguousarray(x)
    return Tensor(x) if is_tensor else x


def apply_brightness_contrast(x: np.ndarray, brightness: float, contrast: float) -> np.ndarray:
    if brightness != 1.0:
        x = x * np.float32(brightness)
    if contrast != 1.0:
        m = x.mean(dtype=np.float64)
        x = ((x - m) * contrast + m).astype(np.float32)
    return np.clip(x, 0.0, 255.0)


def augment_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Generator for one (epoch, record) pair; independent of batch order and workers."""
    return np.random.default_rng([seed, 0xA06, epoch, index])


def normalize_batch(batch, spec: NormalizationSpec = NormalizationSpec()):
    """Standardize with one scalar mean and population std over the whole batch.

    ``Z = (X - mean) / (std + epsilon)``; statistics pool every image, channel
    and pixel.  Accepts an ndarray or Tensor and returns the same kind.
    """
    is_tensor = isinstance(batch, Tensor)
    x = batch.data if is_tensor else np.asarray(batch)
    if x.shape[0] < 1:
        raise ValueError("cannot normalize an empty batch")
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32
    x64 = x.astype(np.float64)
    mu = x64.mean()
    sigma = x64.std()
    z = ((x64 - mu) / (sigma + spec.epsilon)).astype(dtype)
    return Tensor(z) if is_tensor else z


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    """Record index -> fold id (k-fold) or "train"/"val" tag (holdout)."""

    assignments: tuple
    k: int = 0
    ratio: Optional[float] = None

    @property
    def mode(self) -> str:
        return "holdout" if self.k == 0 else "kfold"

    def fold_indices(self, fold) -> np.ndarray:
        return np.array([i for i, a in enumerate(self.assignments) if a == fold], dtype=np.int64)

    def train_val(self, fold: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
        """Training and internal-validation indices.

        Holdout plans ignore ``fold``; k-fold plans validate on ``fold`` and
        train on every other fold.
        """
        if self.mode == "holdout":
            return self.fold_indices("train"), self.fold_indices("val")
        if fold is None or not 0 <= fold < self.k:
            raise DataError(f"fold must be in 0..{self.k - 1} for a {self.k}-fold plan, got {fold}")
        a = np.array(self.assignments)
        return np.flatnonzero(a != fold), np.flatnonzero(a == fold)

    def to_csv(self, path: Union[str, Path], dataset: PatchDataset) -> None:
        if len(dataset) != len(self.assignments):
            raise DataError("split plan and dataset differ in length")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "path", "class", "fold"])
            for i, a in enumerate(self.assignments):
                w.writerow([i, dataset.relative_path(i), dataset.records[i].class_name, a])

    @classmethod
    def from_csv(cls, path: Union[str, Path], dataset: Optional[PatchDataset] = None) -> "SplitPlan":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"split file {path} not found")
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["index", "path", "class", "fold"]:
                raise DataError(f"{path}: bad split header {header}")
            rows = list(reader)
        for n, row in enumerate(rows):
            if int(row[0]) != n:
                raise DataError(f"{path}: row {n} has index {row[0]}")
            if dataset is not None:
                if n >= len(dataset) or row[1] != dataset.relative_path(n):
                    raise DataError(f"{path}: row {n} does not match the dataset ({row[1]})")
        if dataset is not None and len(rows) != len(dataset):
            raise DataError(f"{path}: {len(rows)} rows but dataset has {len(dataset)} records")
        tags = [r[3] for r in rows]
        if all(t in ("train", "val") for t in tags):
            return cls(tuple(tags), 0)
        try:
            folds = tuple(int(t) for t in tags)
        except ValueError:
            raise DataError(f"{path}: fold column mixes tags and integers") from None
        return cls(folds, max(folds) + 1 if folds else 0)


def _class_members(labels: np.ndarray) -> list[np.ndarray]:
    return [np.flatnonzero(labels == c) for c in range(NUM_CLASSES)]


def split_holdout(dataset: PatchDataset, ratio: float = 0.8, seed: int = 0) -> SplitPlan:
    """Per class, ``floor(ratio * N_c)`` shuffled records train; the rest validate."""
    if not 0 < ratio < 1:
        raise DataError(f"holdout ratio must lie in (0, 1), got {ratio}")
    if not len(dataset):
        raise DataError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    tags = ["val"] * len(dataset)
    for members in _class_members(dataset.labels):
        if not len(members):
            continue
        members = rng.permutation(members)
        for i in members[:math.floor(ratio * len(members))]:
            tags[i] = "train"
    return SplitPlan(tuple(tags), 0, ratio)


def split_kfold(dataset: PatchDataset, k: int = 5, seed: int = 0) -> SplitPlan:
    """Stratified k-fold: shuffle each class, deal its records round-robin.

    The dealing position carries over from one class to the next so fold sizes
    stay balanced overall, not only per class.
    """
    if k < 2:
        raise DataError(f"k-fold needs k >= 2, got {k}")
    if not len(dataset):
        raise DataError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    folds = [-1] * len(dataset)
    pos = 0
    for c, members in enumerate(_class_members(dataset.labels)):
        if not len(members):
            continue
        if len(members) < k:
            raise DataError(f"class {CLASS_NAMES[c]} has {len(members)} records, fewer than k={k}")
        for i in rng.permutation(members):
            folds[i] = pos
            pos = (pos + 1) % k
    return SplitPlan(tuple(folds), k)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def batch_order(n: int, batch_size: int = 16, seed: Optional[int] = 0, epoch: int = 0) -> list[np.ndarray]:
    """Index batches for one epoch; ``seed=None`` keeps the natural order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if n == 0:
        return []
    order = np.arange(n) if seed is None else np.random.default_rng([seed, 0xBA7C, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def batches(images: np.ndarray, labels: np.ndarray, batch_size: int = 16,
            shuffle_seed: Optional[int] = 0, epoch: int = 0) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Yield ``(float32 images, labels)`` mini-batches with raw 0..255 values."""
    for idx in batch_order(len(images), batch_size, shuffle_seed, epoch):
        yield Tensor(images[idx].astype(np.float32)), labels[idx]


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def apportion(total: int, proportions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment; remainder ties go to the lower index."""
    weights = np.asarray(proportions, dtype=np.float64)
    if total < 0 or (weights < 0).any() or weights.sum() <= 0:
        raise ValueError("apportion needs total >= 0 and non-negative, non-zero proportions")
    quotas = total * weights / weights.sum()
    counts = np.floor(quotas).astype(int)
    remainders = quotas - counts
    order = sorted(range(len(weights)), key=lambda i: (-remainders[i], i))
    for i in order[: total - counts.sum()]:
        counts[i] += 1
    return [int(c) for c in counts]


# per class: (background RGB, foreground RGB) in a loose H&E palette
_PALETTE = {
    "CT": ((225, 170, 205), (95, 45, 140)),
    "PN": ((235, 160, 190), (120, 50, 120)),
    "IC": ((230, 190, 215), (110, 70, 150)),
    "NC": ((240, 175, 195), (190, 100, 150)),
    "MP": ((235, 165, 185), (160, 40, 70)),
    "WM": ((240, 205, 225), (150, 110, 170)),
}


def _dots(u, v, rng, count, radius):
    cx, cy = rng.random(count), rng.random(count)
    d2 = (u[..., None] - cx) ** 2 + (v[..., None] - cy) ** 2
    return np.exp(-d2 / (2 * radius ** 2)).max(axis=-1)


def _texture(name: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Foreground coverage in [0, 1] for one class family."""
    u, v = np.meshgrid(np.arange(size) / size, np.arange(size) / size)
    theta = rng.uniform(0, np.pi)
    along = u * np.cos(theta) + v * np.sin(theta)
    across = -u * np.sin(theta) + v * np.cos(theta)
    if name == "CT":  # dense small nuclei
        return _dots(u, v, rng, rng.integers(60, 90), 0.022)
    if name == "PN":  # palisading bands
        phase = rng.uniform(0, 2 * np.pi)
        return 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(3.0, 4.5) * along + phase)
    if name == "IC":  # sparse scattered nuclei
        return _dots(u, v, rng, rng.integers(8, 16), 0.03)
    if name == "NC":  # smooth blotches
        field = rng.normal(size=(6, 6))
        blot = ndimage.zoom(field, size / 6, order=3)[:size, :size]
        return np.clip(0.5 + 0.35 * blot, 0, 1)
    if name == "MP":  # vessel rings
        cx, cy = rng.random(5), rng.random(5)
        r = np.sqrt((u[..., None] - cx) ** 2 + (v[..., None] - cy) ** 2)
        return np.exp(-((r - rng.uniform(0.08, 0.14)) ** 2) / (2 * 0.015 ** 2)).max(axis=-1)
    if name == "WM":  # thin fibres
        phase = rng.uniform(0, 2 * np.pi)
        wobble = 0.03 * np.sin(2 * np.pi * 2 * across)
        return (0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(10, 13) * (along + wobble) + phase)) ** 4
    raise KeyError(name)


def synthetic_image(class_index: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One ``size x size x 3`` uint8 patch of the given class family."""
    name = CLASS_NAMES[class_index]
    bg, fg = (np.array(c, dtype=np.float64) for c in _PALETTE[name])
    # per-image colour jitter blurs the class means into each other
    shift = rng.normal(0, 12, size=3)
    bg, fg = bg + shift, fg + shift + rng.normal(0, 10, size=3)
    p = _texture(name, size, rng)[..., None]
    img = bg * (1 - p) + fg * p + rng.normal(0, 8, size=(size, size, 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_synthetic(output_root: Union[str, Path], total: int = 600,
                       proportions: Sequence[float] = TABLE1_PERCENT,
                       image_size: int = 64, seed: int = 0) -> Path:
    """Write a class-imbalanced synthetic patch tree; deterministic per seed."""
    if total < NUM_CLASSES:
        raise DataError(f"total must be >= {NUM_CLASSES}, got {total}")
    if image_size < 16:
        raise DataError(f"image_size must be >= 16, got {image_size}")
    if len(proportions) != NUM_CLASSES:
        raise DataError(f"need {NUM_CLASSES} proportions, got {len(proportions)}")
    root = Path(output_root)
    counts = apportion(total, proportions)
    try:
        root.mkdir(parents=True, exist_ok=True)
        for c, n in enumerate(counts):
            cdir = root / CLASS_NAMES[c]
            cdir.mkdir(exist_ok=True)
            for j in range(n):
                rng = np.random.default_rng([seed, c, j])
                encode_png(synthetic_image(c, image_size, rng), cdir / f"{CLASS_NAMES[c]}_{j:05d}.png")
    except OSError as exc:
        raise DataError(f"cannot write synthetic dataset to {root}: {exc}") from exc
    log.info("wrote %d synthetic images to %s (%s)", total, root, dict(zip(CLASS_NAMES, counts)))
    return root
