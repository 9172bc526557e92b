"""
Data: Benchmark loaders (IDX, CIFAR-10 binary), OOD probe bases and augmentation.

Contract: data v1.0.0
"""

from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, FormatError, UnsupportedTransformError
from .store import atomic_write_bytes

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

DATASETS = ("mnist", "fmnist", "cifar10")
DATASET_DIRS = {
    "mnist": "mnist",
    "fmnist": "fashion-mnist",
    "cifar10": "cifar-10-batches-bin",
}
SHAPES = {
    "mnist": (28, 28, 1),
    "fmnist": (28, 28, 1),
    "cifar10": (32, 32, 3),
}
LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)
DATA_DIR_ENV = "MEMAUDIT_DATA_DIR"

# (row, col, size) of the region the canary patch occupies
PATCH_REGION = (1, 1, 5)


@dataclass
class Dataset:
    """Images [N, H, W, C] in [0, 1] with optional integer labels."""
    images: np.ndarray
    labels: Optional[np.ndarray] = None
    name: str = "unnamed"
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4:
            raise DataError(f"{self.name}: images must be [N,H,W,C], got shape {self.images.shape}")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError(f"{self.name}: pixel values outside [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise DataError(
                    f"{self.name}: {len(self.labels)} labels for {len(self.images)} images"
                )
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise DataError(f"{self.name}: labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def labelled(self) -> bool:
        return self.labels is not None

    def subset(self, indices: Iterable[int]) -> "Dataset":
        idx = np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices, dtype=np.int64)
        labels = self.labels[idx] if self.labels is not None else None
        return Dataset(self.images[idx], labels, self.name, self.split, self.num_classes)

    def of_class(self, label: int) -> "Dataset":
        if self.labels is None:
            raise DataError(f"{self.name}: unlabelled dataset has no classes")
        return self.subset(np.flatnonzero(self.labels == label))

    def with_images(self, images: np.ndarray) -> "Dataset":
        return Dataset(images, self.labels, self.name, self.split, self.num_classes)

    def class_counts(self) -> np.ndarray:
        if self.labels is None:
            return np.zeros(self.num_classes, dtype=np.int64)
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class OODSpec:
    """Which dataset feeds the probe set and how it is mapped to the model's input."""
    source: str
    transform: str
    target_shape: tuple[int, int, int]

    def __post_init__(self):
        if self.transform not in ("greyscale-resize", "rgb-resize", "identity"):
            raise ConfigError(f"unknown OOD transform: {self.transform}")

    @classmethod
    def for_target(cls, dataset: str, source: Optional[str] = None) -> "OODSpec":
        """Default probe source: greyscale CIFAR-10 for 28x28 sets, RGB MNIST for CIFAR-10."""
        if dataset not in SHAPES:
            raise ConfigError(f"unknown dataset: {dataset}")
        target = SHAPES[dataset]
        if source is None:
            source = "cifar10" if target[-1] == 1 else "mnist"
        if source not in SHAPES:
            raise ConfigError(f"unknown OOD source: {source}")
        src = SHAPES[source]
        if src == target:
            transform = "identity"
        elif src[-1] == 3 and target[-1] == 1:
            transform = "greyscale-resize"
        elif src[-1] == 1 and target[-1] == 3:
            transform = "rgb-resize"
        else:
            raise UnsupportedTransformError(f"cannot map {source} {src} to {dataset} {target}")
        return cls(source, transform, target)


# ------------------------------
# IDX
# ------------------------------

def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"dataset file not found: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw: bytes, expected_magic: int, path: PathLike) -> np.ndarray:
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} (expected 0x{expected_magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    payload = raw[header:]
    expected = int(np.prod(dims))
    if len(payload) != expected:
        raise FormatError(f"{path}: expected {expected} data bytes, found {len(payload)} (truncated file?)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(
    images_path: PathLike,
    labels_path: PathLike,
    name: str = "mnist",
    split: str = "train",
) -> Dataset:
    """Load an IDX image/label pair (optionally gzipped) as N x H x W x 1 in [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"dim mismatch: {images.shape[0]} images in {images_path} vs {labels.shape[0]} labels in {labels_path}"
        )
    pixels = (images.astype(np.float32) / 255.0)[..., None]
    return Dataset(pixels, labels.astype(np.int64), name, split)


def _to_bytes(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_idx(images_path: PathLike, labels_path: PathLike, dataset: Dataset) -> None:
    """Write a single-channel labelled dataset as an IDX pair (gzipped if the name ends in .gz)."""
    if dataset.shape[-1] != 1:
        raise DataError("IDX images must be single-channel")
    if dataset.labels is None:
        raise DataError("IDX output requires labels")
    pixels = _to_bytes(dataset.images[..., 0])
    n, h, w = pixels.shape
    image_bytes = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pixels.tobytes()
    label_bytes = struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    for path, data in ((Path(images_path), image_bytes), (Path(labels_path), label_bytes)):
        if path.suffix == ".gz":
            data = gzip.compress(data, mtime=0)
        atomic_write_bytes(path, data)


# ------------------------------
# CIFAR-10
# ------------------------------

def load_cifar10(batch_paths: Sequence[PathLike], split: str = "train") -> Dataset:
    """Load CIFAR-10 binary batches: 1 label byte + 3072 plane-ordered pixel bytes per record."""
    images, labels = [], []
    for path in batch_paths:
        raw = _read_bytes(path)
        if len(raw) % CIFAR_RECORD:
            raise FormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(records[:, 0].astype(np.int64))
        planes = records[:, 1:].reshape(-1, 3, 32, 32)
        images.append(planes.transpose(0, 2, 3, 1))
    if not images:
        raise ConfigError("no CIFAR-10 batch files given")
    pixels = np.concatenate(images).astype(np.float32) / 255.0
    return Dataset(pixels, np.concatenate(labels), "cifar10", split)


def write_cifar10(path: PathLike, dataset: Dataset) -> None:
    if dataset.shape != (32, 32, 3):
        raise DataError(f"CIFAR-10 records need 32x32x3 images, got {dataset.shape}")
    if dataset.labels is None:
        raise DataError("CIFAR-10 output requires labels")
    planes = _to_bytes(dataset.images).transpose(0, 3, 1, 2).reshape(len(dataset), -1)
    records = np.concatenate([dataset.labels.astype(np.uint8)[:, None], planes], axis=1)
    atomic_write_bytes(path, records.tobytes())


# ------------------------------
# Canonical locations
# ------------------------------

def resolve_root(root: Optional[PathLike]) -> Path:
    """Data root from config, falling back to $MEMAUDIT_DATA_DIR."""
    if root:
        return Path(root).expanduser()
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env).expanduser()
    raise ConfigError(f"no data root configured and {DATA_DIR_ENV} is not set")


def _pick(directory: Path, name: str) -> Path:
    for candidate in (directory / name, directory / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise ConfigError(f"dataset file not found: {directory / name}")


def canonical_paths(name: str, root: PathLike, split: str = "train") -> list[Path]:
    if name not in DATASETS:
        raise ConfigError(f"unknown dataset: {name} (expected one of {', '.join(DATASETS)})")
    if split not in ("train", "test"):
        raise ConfigError(f"unknown split: {split}")
    directory = Path(root) / DATASET_DIRS[name]
    if name == "cifar10":
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
        return [_pick(directory, n) for n in names]
    prefix = "train" if split == "train" else "t10k"
    return [
        _pick(directory, f"{prefix}-images-idx3-ubyte"),
        _pick(directory, f"{prefix}-labels-idx1-ubyte"),
    ]


def load_dataset(
    name: str,
    root: Optional[PathLike] = None,
    split: str = "train",
    subset: Optional[int] = None,
) -> Dataset:
    """Load mnist / fmnist / cifar10 from the data root; `subset` keeps the first N images."""
    paths = canonical_paths(name, resolve_root(root), split)
    if name == "cifar10":
        dataset = load_cifar10(paths, split)
    else:
        dataset = load_idx(paths[0], paths[1], name, split)
    if subset is not None and subset < len(dataset):
        dataset = dataset.subset(np.arange(subset))
    logger.info("loaded %s/%s: %d images %s", name, split, len(dataset), dataset.shape)
    return dataset


# ------------------------------
# OOD probe base
# ------------------------------

def _resize(images: np.ndarray, height: int, width: int) -> np.ndarray:
    out = np.empty((len(images), height, width, images.shape[-1]), dtype=np.float32)
    for i, img in enumerate(images):
        for c in range(img.shape[-1]):
            plane = Image.fromarray(np.ascontiguousarray(img[..., c], dtype=np.float32))
            out[i, ..., c] = np.asarray(plane.resize((width, height), Image.Resampling.BILINEAR))
    return np.clip(out, 0.0, 1.0)


def make_ood_set(spec: OODSpec, source: Dataset, n: int, seed: int) -> Dataset:
    """
    Seeded, unlabelled probe base set of n images shaped like the audited model's input.

    RGB -> greyscale uses BT.601 luma weights; resizing is bilinear.
    """
    if n > len(source):
        raise DataError(f"requested {n} OOD images but {source.name} has only {len(source)}")
    src_shape = source.shape
    target = tuple(spec.target_shape)
    h, w, c = target

    if src_shape == target:
        transform = "identity"
    elif src_shape[-1] == 3 and c == 1:
        transform = "greyscale-resize"
    elif src_shape[-1] == 1 and c == 3:
        transform = "rgb-resize"
    else:
        raise UnsupportedTransformError(f"cannot map {source.name} {src_shape} to {target}")
    if spec.transform != transform:
        raise UnsupportedTransformError(
            f"transform {spec.transform} does not map {src_shape} to {target} (needs {transform})"
        )

    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(len(source), size=n, replace=False))
    images = source.images[picked]

    if transform == "greyscale-resize":
        grey = np.tensordot(images, LUMA, axes=([3], [0]))[..., None]
        images = _resize(grey, h, w)
    elif transform == "rgb-resize":
        images = np.repeat(_resize(images, h, w), 3, axis=-1)

    logger.debug("OOD set from %s: %d images via %s", source.name, n, transform)
    return Dataset(images, None, f"{source.name}-ood", "ood", source.num_classes)


# ------------------------------
# Augmentation
# ------------------------------

def augment_batch(
    batch: np.ndarray,
    dataset_name: str,
    seed_or_rng,
    contrast: float = 0.2,
    crop: bool = True,
    flip: Optional[bool] = None,
    patch_region: tuple[int, int, int] = PATCH_REGION,
    return_params: bool = False,
):
    """
    Random contrast, crop and (CIFAR-10 only) horizontal flip for one mini-batch.

    The crop keeps an (H-1) x (W-1) window whose origin is 0 or 1 on each axis
    and zeroes the excised row and column in place, so the patch region never
    moves and is never removed. Flipped images keep the patch region and its
    mirror location unflipped.
    """
    rng = np.random.default_rng(seed_or_rng)
    out = np.array(batch, dtype=np.float32, copy=True)
    b, h, w, _ = out.shape
    if flip is None:
        flip = dataset_name == "cifar10"
    r0, c0, size = patch_region

    factors = rng.uniform(1.0 - contrast, 1.0 + contrast, size=b) if contrast > 0 else np.ones(b)
    flips = rng.random(b) < 0.5 if flip else np.zeros(b, dtype=bool)
    origins = rng.integers(0, 2, size=(b, 2)) if crop else np.zeros((b, 2), dtype=np.int64)

    if contrast > 0:
        mean = out.mean(axis=(1, 2), keepdims=True)
        out = np.clip((out - mean) * factors[:, None, None, None].astype(np.float32) + mean, 0.0, 1.0)

    if flips.any():
        rows = slice(r0, r0 + size)
        cols = slice(c0, c0 + size)
        mirror = slice(w - c0 - size, w - c0)
        keep = out[flips].copy()
        flipped = out[flips][:, :, ::-1, :].copy()
        flipped[:, rows, cols] = keep[:, rows, cols]
        flipped[:, rows, mirror] = keep[:, rows, mirror]
        out[flips] = flipped

    if crop:
        for i, (orow, ocol) in enumerate(origins):
            if orow == 0:
                out[i, h - 1, :, :] = 0.0
            else:
                out[i, 0, :, :] = 0.0
            if ocol == 0:
                out[i, :, w - 1, :] = 0.0
            else:
                out[i, :, 0, :] = 0.0

    if return_params:
        return out, {"contrast": factors, "flip": flips, "crop_origin": origins}
    return out


# ------------------------------
# Validation split
# ------------------------------

def split_train_validation(
    dataset: Dataset,
    fraction: float,
    seed: int,
    keep_in_train: Iterable[int] = (),
) -> tuple[np.ndarray, np.ndarray]:
    """
    Seeded, class-stratified hold-out. Returns sorted (train_indices, val_indices).

    Indices listed in keep_in_train are never moved to validation.
    """
    if not 0.0 <= fraction < 1.0:
        raise ConfigError(f"validation fraction must be in [0, 1), got {fraction}")
    if dataset.labels is None:
        raise DataError("stratified split needs labels")
    keep = set(int(i) for i in keep_in_train)
    rng = np.random.default_rng(seed)
    val: list[np.ndarray] = []
    for label in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == label)
        if not len(members):
            continue
        n_val = int(round(fraction * len(members)))
        eligible = np.array([i for i in members if i not in keep], dtype=np.int64)
        eligible = rng.permutation(eligible)
        val.append(eligible[:n_val])
    val_idx = np.sort(np.concatenate(val)) if val else np.zeros(0, dtype=np.int64)
    train_mask = np.ones(len(dataset), dtype=bool)
    train_mask[val_idx] = False
    return np.flatnonzero(train_mask), val_idx
