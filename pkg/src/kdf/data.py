"""Facial-expression datasets: FER2013 CSV, image folders, class statistics and weights."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

# FER2013 emotion codes.
EMOTIONS = ("Angry", "Disgust", "Fear", "Happy", "Sad", "Surprise", "Neutral")
NUM_CLASSES = len(EMOTIONS)
FER_SIDE = 48
FER_PIXELS = FER_SIDE * FER_SIDE
FER_SPLITS = ("Training", "PublicTest", "PrivateTest")
# Row order used when printing class distributions.
TABLE_ORDER = ("Happy", "Surprise", "Sad", "Angry", "Disgust", "Fear", "Neutral")

FER2013_DISTRIBUTION = {
    "Training": {"Happy": 7215, "Surprise": 3171, "Sad": 4830, "Angry": 3995, "Disgust": 436, "Fear": 4097, "Neutral": 4965},
    "PublicTest": {"Happy": 653, "Surprise": 56, "Sad": 895, "Angry": 467, "Disgust": 415, "Fear": 607, "Neutral": 496},
    "PrivateTest": {"Happy": 594, "Surprise": 55, "Sad": 879, "Angry": 491, "Disgust": 416, "Fear": 626, "Neutral": 528},
}
RAFDB_DISTRIBUTION = {
    "Training": {"Happy": 4772, "Surprise": 1982, "Sad": 2524, "Angry": 705, "Disgust": 717, "Fear": 281, "Neutral": 1290},
    "Test": {"Happy": 1185, "Surprise": 478, "Sad": 680, "Angry": 162, "Disgust": 160, "Fear": 74, "Neutral": 329},
}

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
FOLDER_SPLITS = {"train": "Training", "test": "Test"}


class DataFormatError(ValueError):
    """Malformed dataset input; the message names the offending row or file."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64 emotion codes
    splits: np.ndarray  # (N,) split names
    sources: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def split(self, name: str) -> "Dataset":
        mask = self.splits == name
        return Dataset(self.images[mask], self.labels[mask], self.splits[mask], list(self.sources))

    def split_names(self) -> list[str]:
        return list(dict.fromkeys(self.splits.tolist()))

    def stats(self) -> "DatasetStats":
        return DatasetStats.from_labels(self.labels, self.splits, self.warnings)

    def train_val_split(self, val_fraction: float = 0.1, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Seeded random holdout (used when a corpus ships no validation split)."""
        perm = np.random.default_rng(seed).permutation(len(self))
        n_val = int(round(val_fraction * len(self)))
        val, train = np.sort(perm[:n_val]), np.sort(perm[n_val:])
        pick = lambda idx: Dataset(self.images[idx], self.labels[idx], self.splits[idx], list(self.sources))
        return pick(train), pick(val)


@dataclass
class DatasetStats:
    counts: dict[str, list[int]]  # split -> per-class counts indexed by emotion code
    warnings: list[str] = field(default_factory=list)

    @classmethod
    def from_labels(cls, labels, splits, warnings=()) -> "DatasetStats":
        counts = {}
        for name in dict.fromkeys(np.asarray(splits).tolist()):
            y = np.asarray(labels)[np.asarray(splits) == name]
            counts[name] = np.bincount(y, minlength=NUM_CLASSES).tolist()
        return cls(counts, list(warnings))

    @classmethod
    def from_table(cls, table: dict[str, dict[str, int]]) -> "DatasetStats":
        return cls({split: [row[e] for e in EMOTIONS] for split, row in table.items()})

    def total(self, split: str) -> int:
        return sum(self.counts[split])

    def count(self, split: str, emotion: str) -> int:
        return self.counts[split][EMOTIONS.index(emotion)]

    def to_json(self) -> dict:
        return {
            "classes": {e: {s: self.count(s, e) for s in self.counts} for e in TABLE_ORDER},
            "totals": {s: self.total(s) for s in self.counts},
            "warnings": self.warnings,
        }

    def to_csv(self) -> str:
        splits = list(self.counts)
        lines = [",".join(["class"] + splits)]
        lines += [",".join([e] + [str(self.count(s, e)) for s in splits]) for e in TABLE_ORDER]
        lines.append(",".join(["Total"] + [str(self.total(s)) for s in splits]))
        return "\n".join(lines) + "\n"


def class_weights(stats: DatasetStats, split: str = "Training") -> np.ndarray:
    """Inverse-frequency weights ``N / (C * n_c)``; rarer classes weigh more."""
    n = np.asarray(stats.counts[split], dtype=np.float64)
    if (n == 0).any():
        missing = [EMOTIONS[i] for i in np.flatnonzero(n == 0)]
        raise ValueError(f"class weight undefined: no {split} samples for {missing}")
    return n.sum() / (len(n) * n)


# -- preprocessing ----------------------------------------------------------------

def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize a (H, W) float image; returns it unchanged when already ``size``."""
    if image.shape == tuple(size):
        return image.astype(np.float32)
    h, w = size
    resized = Image.fromarray(image.astype(np.float32), mode="F").resize((w, h), Image.BILINEAR)
    return np.asarray(resized, dtype=np.float32)


def to_model_input(gray_or_rgb: np.ndarray, channels: int, size: tuple[int, int]) -> np.ndarray:
    """(H, W) or (H, W, 3) array of 0..255 values -> (channels, H', W') in [0, 1]."""
    arr = np.asarray(gray_or_rgb, dtype=np.float32) / np.float32(255)
    if arr.ndim == 2:
        planes = [resize_bilinear(arr, size)] * channels
    else:
        rgb = [resize_bilinear(arr[..., i], size) for i in range(arr.shape[-1])]
        if channels == 1:
            planes = [np.mean(rgb, axis=0, dtype=np.float32)]
        else:
            planes = rgb[:channels]
    return np.clip(np.stack(planes), 0, 1)


def horizontal_flip(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1].copy()


def random_flip(images: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    flip = rng.random(len(images)) < p
    out = images.copy()
    out[flip] = out[flip][..., ::-1]
    return out


# -- FER2013 CSV ----------------------------------------------------------------

def read_fer_csv(path: str | Path, channels: int = 3, size: tuple[int, int] = (64, 64)) -> Dataset:
    """Read ``emotion,pixels,Usage`` rows into a :class:`Dataset`."""
    path = Path(path)
    images, labels, splits = [], [], []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"emotion", "pixels", "Usage"} - set(reader.fieldnames or [])
        if missing:
            raise DataFormatError(f"{path}: missing columns {sorted(missing)}")
        for row_no, row in enumerate(reader, start=2):
            where = f"{path}:{row_no}"
            try:
                emotion = int(row["emotion"])
            except (TypeError, ValueError):
                raise DataFormatError(f"{where}: emotion {row['emotion']!r} is not an integer") from None
            if not 0 <= emotion < NUM_CLASSES:
                raise DataFormatError(f"{where}: unknown emotion code {emotion}")
            usage = (row["Usage"] or "").strip()
            if usage not in FER_SPLITS:
                raise DataFormatError(f"{where}: unknown Usage {usage!r}")
            tokens = (row["pixels"] or "").split()
            if len(tokens) != FER_PIXELS:
                raise DataFormatError(f"{where}: expected {FER_PIXELS} pixels, got {len(tokens)}")
            try:
                pixels = np.array([int(t) for t in tokens], dtype=np.int32)
            except ValueError:
                raise DataFormatError(f"{where}: non-integer pixel value") from None
            if pixels.min() < 0 or pixels.max() > 255:
                raise DataFormatError(f"{where}: pixel values must lie in 0..255")
            images.append(to_model_input(pixels.reshape(FER_SIDE, FER_SIDE), channels, size))
            labels.append(emotion)
            splits.append(usage)
    return _dataset(images, labels, splits, channels, size, [str(path)])


def write_fer_csv(path: str | Path, pixels: np.ndarray, labels: Iterable[int], usages: Iterable[str]) -> Path:
    """Write (N, 48, 48) uint8-valued images in FER2013 CSV layout."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["emotion", "pixels", "Usage"])
        for img, label, usage in zip(pixels, labels, usages):
            writer.writerow([int(label), " ".join(str(int(v)) for v in np.asarray(img).reshape(-1)), usage])
    return path


def _dataset(images, labels, splits, channels, size, sources, warnings=()) -> Dataset:
    if images:
        stacked = np.stack(images).astype(np.float32)
    else:
        stacked = np.zeros((0, channels, *size), dtype=np.float32)
    return Dataset(stacked, np.asarray(labels, dtype=np.int64), np.asarray(splits, dtype=object),
                   sources, list(warnings))


# -- image folders --------------------------------------------------------------

def _class_index(name: str) -> int | None:
    lowered = name.lower()
    for i, emotion in enumerate(EMOTIONS):
        if emotion.lower() == lowered:
            return i
    return None


def read_image_folder(root: str | Path, channels: int = 3, size: tuple[int, int] = (64, 64)) -> Dataset:
    """Read ``root/{train,test}/{emotion}/*.png|jpg`` in sorted order."""
    root = Path(root)
    layout = f"expected layout {root}/{{train,test}}/{{{','.join(EMOTIONS)}}}/*.png|jpg"
    if not root.is_dir():
        raise DataFormatError(f"{root}: not a directory; {layout}")
    for sub in FOLDER_SPLITS:
        if not (root / sub).is_dir():
            raise DataFormatError(f"{root}: missing '{sub}' directory; {layout}")
    images, labels, splits, warnings = [], [], [], []
    for sub, split in FOLDER_SPLITS.items():
        class_dirs = sorted(p for p in (root / sub).iterdir() if not p.name.startswith("."))
        for d in class_dirs:
            if not d.is_dir() or _class_index(d.name) is None:
                raise DataFormatError(f"{d}: unknown class directory; {layout}")
        present = {_class_index(d.name) for d in class_dirs}
        for i in sorted(set(range(NUM_CLASSES)) - present):
            warnings.append(f"{sub}: no directory for class {EMOTIONS[i]}")
        for d in class_dirs:
            label = _class_index(d.name)
            files = sorted(f for f in d.iterdir() if f.is_file() and not f.name.startswith("."))
            if not files:
                warnings.append(f"{sub}/{d.name}: empty class directory")
            for f in files:
                images.append(to_model_input(_decode(f), channels, size))
                labels.append(label)
                splits.append(split)
    for w in warnings:
        log.warning(w)
    return _dataset(images, labels, splits, channels, size, [str(root)], warnings)


def _decode(path: Path) -> np.ndarray:
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise DataFormatError(f"{path}: unsupported image type (PNG and JPEG only)")
    try:
        with Image.open(path) as img:
            if img.format not in ("PNG", "JPEG"):
                raise DataFormatError(f"{path}: unsupported image format {img.format}")
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise DataFormatError(f"{path}: cannot decode image ({exc})") from None


def load(path: str | Path, fmt: str, channels: int = 3, size: tuple[int, int] = (64, 64)) -> Dataset:
    if fmt == "csv":
        return read_fer_csv(path, channels, size)
    if fmt == "folder":
        return read_image_folder(path, channels, size)
    raise ValueError(f"unknown dataset format {fmt!r} (csv or folder)")


# -- synthetic corpora ------------------------------------------------------------

def fer_fixture(per_class: int, seed: int = 0, usages: tuple[str, ...] = ("Training",),
                noise: float = 40.0) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Class-patterned 48x48 uint8 faces-that-aren't: a per-class template plus noise."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:FER_SIDE, 0:FER_SIDE] / (FER_SIDE - 1)
    templates = []
    for c in range(NUM_CLASSES):
        angle = np.pi * c / NUM_CLASSES
        wave = np.sin(2 * np.pi * (2 + c % 3) * (np.cos(angle) * xx + np.sin(angle) * yy))
        templates.append(128 + 80 * wave)
    pixels, labels, splits = [], [], []
    for usage in usages:
        for _ in range(per_class):
            for c in range(NUM_CLASSES):
                img = templates[c] + rng.normal(0, noise, templates[c].shape)
                pixels.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
                labels.append(c)
                splits.append(usage)
    return np.stack(pixels), np.array(labels), splits


def synthetic_blobs(per_class: int, shape: tuple[int, int, int] = (3, 8, 8), num_classes: int = NUM_CLASSES,
                    spread: float = 0.15, seed: int = 0, centers_seed: int = 1234) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian blobs in image space: one random [0,1] center image per class plus isotropic noise.

    Centers depend only on ``centers_seed`` so train and held-out draws share classes.
    """
    centers = np.random.default_rng(centers_seed).random((num_classes, *shape))
    rng = np.random.default_rng(seed)
    labels = np.tile(np.arange(num_classes), per_class)
    images = centers[labels] + rng.normal(0, spread, (len(labels), *shape))
    return np.clip(images, 0, 1).astype(np.float32), labels.astype(np.int64)


def stats_json(stats: DatasetStats) -> str:
    return json.dumps(stats.to_json(), indent=2)
