"""
Canary: Unique/random feature patches, injection, canary datasets and probe triples.

A unique feature is a 5x5 letter glyph burnt into the top-left corner of an
image (offset (1, 1)). The random control sits at the same place and is
either a shuffle of z_u's own pixels (matched, the default) or i.i.d.
uniform pixels. The font below is the unique-feature definition.

Contract: canary v1.0.0
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset
from .errors import ConfigError, DataError, ShapeError

PATCH_SIZE = 5
PATCH_OFFSET = (1, 1)
REFERENCE_STREAM = 0x52454631

FONT_5X5: dict[str, tuple[str, ...]] = {
    "A": ("01110", "10001", "11111", "10001", "10001"),
    "B": ("11110", "10001", "11110", "10001", "11110"),
    "C": ("01111", "10000", "10000", "10000", "01111"),
    "D": ("11110", "10001", "10001", "10001", "11110"),
    "E": ("11111", "10000", "11110", "10000", "11111"),
    "F": ("11111", "10000", "11110", "10000", "10000"),
    "G": ("01111", "10000", "10011", "10001", "01111"),
    "H": ("10001", "10001", "11111", "10001", "10001"),
    "I": ("11111", "00100", "00100", "00100", "11111"),
    "J": ("00111", "00010", "00010", "10010", "01100"),
    "K": ("10010", "10100", "11000", "10100", "10010"),
    "L": ("10000", "10000", "10000", "10000", "11111"),
    "M": ("10001", "11011", "10101", "10001", "10001"),
    "N": ("10001", "11001", "10101", "10011", "10001"),
    "O": ("01110", "10001", "10001", "10001", "01110"),
    "P": ("11110", "10001", "11110", "10000", "10000"),
    "Q": ("01110", "10001", "10101", "10010", "01101"),
    "R": ("11110", "10001", "11110", "10100", "10010"),
    "S": ("01111", "10000", "01110", "00001", "11110"),
    "T": ("11111", "00100", "00100", "00100", "00100"),
    "U": ("10001", "10001", "10001", "10001", "01110"),
    "V": ("10001", "10001", "10001", "01010", "00100"),
    "W": ("10001", "10001", "10101", "11011", "10001"),
    "X": ("10001", "01010", "00100", "01010", "10001"),
    "Y": ("10001", "01010", "00100", "00100", "00100"),
    "Z": ("11111", "00010", "00100", "01000", "11111"),
}


@dataclass
class Patch:
    pixels: np.ndarray
    offset: tuple[int, int] = PATCH_OFFSET
    kind: str = "unique"
    glyph: Optional[str] = None
    rng_seed: Optional[int] = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2 or self.pixels.shape[0] != self.pixels.shape[1]:
            raise ShapeError(f"patch must be square m x m, got {self.pixels.shape}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise DataError("patch pixels outside [0, 1]")
        if self.kind not in ("unique", "random"):
            raise ConfigError(f"unknown patch kind: {self.kind}")
        self.offset = (int(self.offset[0]), int(self.offset[1]))

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    def fits(self, shape: Sequence[int]) -> bool:
        r, c = self.offset
        return r >= 0 and c >= 0 and r + self.size <= shape[0] and c + self.size <= shape[1]

    def region(self) -> tuple[slice, slice]:
        r, c = self.offset
        return slice(r, r + self.size), slice(c, c + self.size)


def render_glyph(letter: str, offset: tuple[int, int] = PATCH_OFFSET) -> Patch:
    """Binary 5x5 glyph: foreground 1.0, background 0.0."""
    key = letter.upper() if isinstance(letter, str) else letter
    if key not in FONT_5X5:
        raise ConfigError(f"unsupported glyph character: {letter!r} (expected A-Z)")
    rows = FONT_5X5[key]
    pixels = np.array([[float(ch) for ch in row] for row in rows], dtype=np.float32)
    return Patch(pixels, offset=offset, kind="unique", glyph=key)


def sample_random_patch(
    seed,
    size: int = PATCH_SIZE,
    offset: tuple[int, int] = PATCH_OFFSET,
    like: Optional[Patch] = None,
) -> Patch:
    """
    Random control patch, deterministic in seed.

    Without `like`: size x size i.i.d. U[0, 1] pixels. With `like`: a random
    permutation of like's pixels at like's offset, so the control has the same
    pixel values (ink count, energy) as the unique feature and differs only in
    arrangement.
    """
    rng = np.random.default_rng(seed)
    if like is not None:
        pixels = rng.permutation(like.pixels.ravel()).reshape(like.pixels.shape)
        offset = like.offset
    else:
        pixels = rng.random((size, size))
    rng_seed = int(seed) if isinstance(seed, (int, np.integer)) else None
    return Patch(pixels, offset=offset, kind="random", rng_seed=rng_seed)


def inject(image: np.ndarray, patch: Patch) -> np.ndarray:
    """Copy of image [H, W, C] with the patch region overwritten on every channel."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"inject expects a single [H,W,C] image, got {image.shape}")
    if not patch.fits(image.shape):
        raise ShapeError(f"patch at {patch.offset} (size {patch.size}) does not fit image {image.shape}")
    out = image.copy()
    rows, cols = patch.region()
    out[rows, cols, :] = patch.pixels[:, :, None]
    return out


def inject_batch(images: np.ndarray, patch: Patch) -> np.ndarray:
    """Same patch into every image of [N, H, W, C]."""
    if not patch.fits(images.shape[1:]):
        raise ShapeError(f"patch at {patch.offset} (size {patch.size}) does not fit image {images.shape[1:]}")
    out = np.array(images, copy=True)
    rows, cols = patch.region()
    out[:, rows, cols, :] = patch.pixels[None, :, :, None]
    return out


def inject_each(images: np.ndarray, patches: Sequence[Patch]) -> np.ndarray:
    """Patch i into image i."""
    if len(patches) != len(images):
        raise ShapeError(f"{len(patches)} patches for {len(images)} images")
    out = np.array(images, copy=True)
    for i, patch in enumerate(patches):
        if not patch.fits(images.shape[1:]):
            raise ShapeError(f"patch {i} does not fit image {images.shape[1:]}")
        rows, cols = patch.region()
        out[i, rows, cols, :] = patch.pixels[:, :, None]
    return out


def random_patch_seeds(seed: int, n: int) -> np.ndarray:
    """n independent per-image seeds derived from one seed."""
    return np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)


def random_patches(
    seeds: Iterable[int],
    size: int = PATCH_SIZE,
    offset: tuple[int, int] = PATCH_OFFSET,
    like: Optional[Patch] = None,
) -> list[Patch]:
    return [sample_random_patch(int(s), size, offset, like=like) for s in seeds]


def control_patches(z_u: Patch, seeds: Iterable[int], matched: bool = True) -> list[Patch]:
    """Random controls for z_u: shuffles of its pixels when matched, else uniform noise."""
    return random_patches(seeds, z_u.size, z_u.offset, like=z_u if matched else None)


def reference_seeds(seed: int, k: int) -> np.ndarray:
    """k seeds for whole-set reference patterns, a stream separate from the per-image seeds."""
    return np.random.SeedSequence([REFERENCE_STREAM, int(seed)]).generate_state(k, dtype=np.uint64)


def build_canary_dataset(
    train: Dataset,
    index: Union[int, Sequence[int]],
    patch: Patch,
) -> Dataset:
    """Copy of train with the image(s) at index injected; labels unchanged."""
    indices = np.atleast_1d(np.asarray(index, dtype=np.int64))
    if indices.size == 0:
        raise DataError("no canary index given")
    bad = indices[(indices < 0) | (indices >= len(train))]
    if bad.size:
        raise DataError(f"canary index {int(bad[0])} out of range [0, {len(train)})")
    images = train.images.copy()
    images[indices] = inject_batch(train.images[indices], patch)
    labels = train.labels.copy() if train.labels is not None else None
    return Dataset(images, labels, train.name, train.split, train.num_classes)


def pick_class_indices(train: Dataset, label: int, k: int, seed: int) -> np.ndarray:
    """k distinct, seeded training indices of one class, sorted."""
    members = np.flatnonzero(train.labels == label) if train.labels is not None else np.zeros(0, dtype=np.int64)
    if k > len(members):
        raise DataError(f"class {label} has {len(members)} images, cannot pick {k}")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(members, size=k, replace=False))


@dataclass
class ProbeTriple:
    """Aligned clean / unique-injected / random-injected probe images."""
    d_c: np.ndarray
    d_u: np.ndarray
    d_r: np.ndarray
    z_u: Patch
    r_seeds: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint64))
    seed: int = 0
    matched: bool = True

    def __post_init__(self):
        if not (self.d_c.shape == self.d_u.shape == self.d_r.shape):
            raise ShapeError(
                f"probe sets differ in shape: {self.d_c.shape}, {self.d_u.shape}, {self.d_r.shape}"
            )

    def __len__(self) -> int:
        return len(self.d_c)

    def reference_patches(self, k: int) -> list[Patch]:
        """k control patterns from the same distribution as D_r's, each meant for the whole set."""
        return control_patches(self.z_u, reference_seeds(self.seed, k), self.matched)

    def save(self, path: Union[str, Path]) -> Path:
        return save_checkpoint(path, {
            "d_c": self.d_c,
            "d_u": self.d_u,
            "d_r": self.d_r,
            "z_u/pixels": self.z_u.pixels,
            "z_u/offset": np.array(self.z_u.offset, dtype=np.int64),
            "r_seeds": np.asarray(self.r_seeds, dtype=np.uint64),
            "seed": np.array([self.seed, int(self.matched)], dtype=np.int64),
        })

    @classmethod
    def load(cls, path: Union[str, Path], glyph: Optional[str] = None) -> "ProbeTriple":
        arrays = load_checkpoint(path)
        z_u = Patch(arrays["z_u/pixels"], offset=tuple(arrays["z_u/offset"].tolist()), glyph=glyph)
        seed, matched = (int(v) for v in arrays["seed"]) if "seed" in arrays else (0, 1)
        return cls(arrays["d_c"], arrays["d_u"], arrays["d_r"], z_u, arrays["r_seeds"], seed, bool(matched))


def build_probe_triple(ood: Dataset, z_u: Patch, seed: int, matched: bool = True) -> ProbeTriple:
    """D_c = ood, D_u = ood + z_u, D_r = ood + a fresh control patch per image."""
    seeds = random_patch_seeds(seed, len(ood))
    d_c = ood.images.copy()
    d_u = inject_batch(d_c, z_u)
    d_r = inject_each(d_c, control_patches(z_u, seeds, matched))
    return ProbeTriple(d_c, d_u, d_r, z_u, seeds, int(seed), matched)
