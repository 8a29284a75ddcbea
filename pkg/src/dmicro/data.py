"""Datasets: PatchMNIST, microscopy preprocessing, pseudo ground truth.

A dataset on disk is a directory of DTNS tensor files, one per item, plus a
plain-text ``manifest.txt`` with one record per item::

    <file> <split> <source indices, comma separated> <seed>
"""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import ndimage

from .tensor.io import load_tensor, save_tensor

IDX_IMAGES_MAGIC = 0x00000803
SPLITS = ("train", "val", "test")
MANIFEST = "manifest.txt"
MNIST_FILES = {"train": "train-images-idx3-ubyte", "test": "t10k-images-idx3-ubyte"}


@dataclass(frozen=True)
class PatchMNISTPreset:
    counts: tuple[int, int, int]
    grid: int
    tile: int
    patch: int


PRESETS = {
    "paper": PatchMNISTPreset(counts=(3000, 375, 375), grid=20, tile=32, patch=256),
    "desk": PatchMNISTPreset(counts=(300, 40, 40), grid=5, tile=32, patch=64),
}


@dataclass
class ImageDataset:
    split: str
    items: np.ndarray  # [N,P,P] float32 in [0,1]
    sources: list[tuple[int, ...]] = field(default_factory=list)
    random_crop: bool = False
    flips: bool = False

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        self.items = np.asarray(self.items, dtype=np.float32)
        if self.items.ndim != 3:
            raise ValueError("items must be [N,P,P]")
        if self.items.size and (self.items.min() < 0 or self.items.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if not self.sources:
            self.sources = [()] * len(self.items)

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class SegDataset:
    images: ImageDataset
    masks: np.ndarray  # [N,P,P] float32 in {0,1}

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.float32)
        if self.masks.shape != self.images.items.shape:
            raise ValueError("mask and image shapes differ")
        if not np.all((self.masks == 0) | (self.masks == 1)):
            raise ValueError("pseudo ground truth must be binary")

    def __len__(self) -> int:
        return len(self.masks)


# -- IDX ----------------------------------------------------------------------

def read_idx_images(path) -> np.ndarray:
    """``[N,rows,cols]`` uint8 array from an IDX image file (gzip allowed)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated IDX header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise ValueError(f"{path}: bad IDX magic {magic:#010x}")
    body = np.frombuffer(raw, dtype=np.uint8, offset=16)
    if body.size != n * rows * cols:
        raise ValueError(f"{path}: expected {n * rows * cols} pixels, found {body.size}")
    return body.reshape(n, rows, cols)


def find_mnist(directory, pool: str) -> Path:
    """Locate the train or test image file, gzipped or not."""
    base = Path(directory) / MNIST_FILES[pool]
    for cand in (base, base.with_name(base.name + ".gz")):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"no MNIST {pool} images under {directory}")


def load_mnist_pools(directory) -> tuple[np.ndarray, np.ndarray]:
    """Train and test digit pools as float32 in [0, 1]."""
    return tuple(read_idx_images(find_mnist(directory, p)).astype(np.float32) / 255.0
                 for p in ("train", "test"))


# -- resampling ---------------------------------------------------------------

def resize_bilinear(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment and edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape == tuple(shape):
        return img.copy()
    zoom = (shape[0] / img.shape[0], shape[1] / img.shape[1])
    out = ndimage.zoom(img, zoom, order=1, mode="nearest", grid_mode=True)
    if out.shape != tuple(shape):
        raise AssertionError(f"resize produced {out.shape}, wanted {shape}")
    return out


def downscale_shape(shape, factor) -> tuple[int, int]:
    f = Fraction(factor)
    return tuple(max(1, int(round(s / f))) for s in shape)


def preprocess_stack(image, bias: float = 134.28, clip: float = 500.0, downscale=Fraction(63, 20)) -> np.ndarray:
    """Raw microscope frame (or ``[Z,H,W]`` stack) to a [0, 1] image.

    Stacks are max-projected first. Then: subtract the camera bias (floored
    at 0), clip at ``clip``, min-max normalise (a flat image maps to zeros)
    and bilinearly downscale by ``downscale``.
    """
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 3:
        a = a.max(axis=0)
    if a.ndim != 2:
        raise ValueError("expected a 2-d image or a 3-d stack")
    if np.any(a < 0):
        raise ValueError("raw intensities must be non-negative")
    a = np.clip(a - bias, 0.0, clip)
    lo, hi = a.min(), a.max()
    a = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    if Fraction(downscale) != 1:
        a = np.clip(resize_bilinear(a, downscale_shape(a.shape, downscale)), 0.0, 1.0)
    return a.astype(np.float32)


# -- pseudo ground truth ------------------------------------------------------

def closing(mask: np.ndarray, size=(10, 10)) -> np.ndarray:
    """Binary closing: dilation then erosion, outside treated as foreground for the erosion."""
    st = np.ones(size, dtype=bool)
    dil = ndimage.binary_dilation(mask, structure=st)
    return ndimage.binary_erosion(dil, structure=st, border_value=1)


def make_pseudo_gt(X, threshold: float = 0.3, close_kernel=(10, 10)) -> np.ndarray:
    """Threshold then close; works on one image or a stack of them."""
    X = np.asarray(X)
    fg = X > threshold
    if X.ndim == 2:
        return closing(fg, close_kernel).astype(np.float32)
    return np.stack([closing(m, close_kernel) for m in fg]).astype(np.float32)


# -- augmentation -------------------------------------------------------------

def random_crop(X: np.ndarray, patch: int, rng: np.random.Generator) -> np.ndarray:
    H, W = X.shape[-2:]
    if H < patch or W < patch:
        raise ValueError(f"source {H}x{W} smaller than patch {patch}")
    i = int(rng.integers(0, H - patch + 1))
    j = int(rng.integers(0, W - patch + 1))
    return X[..., i:i + patch, j:j + patch]


def center_crop(X: np.ndarray, patch: int) -> np.ndarray:
    H, W = X.shape[-2:]
    if H < patch or W < patch:
        raise ValueError(f"source {H}x{W} smaller than patch {patch}")
    i, j = (H - patch) // 2, (W - patch) // 2
    return X[..., i:i + patch, j:j + patch]


def augment(X: np.ndarray, rng: np.random.Generator, patch: int | None = None) -> np.ndarray:
    """Seeded random crop and independent 50% vertical/horizontal flips."""
    X = np.asarray(X)
    patch = patch if patch is not None else min(X.shape[-2:])
    out = random_crop(X, patch, rng)
    if rng.random() < 0.5:
        out = out[..., ::-1, :]
    if rng.random() < 0.5:
        out = out[..., :, ::-1]
    return np.ascontiguousarray(out)


def augment_batch(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Per-image flips for a ``[B,P,P]`` batch (crops are identity at patch size)."""
    return np.stack([augment(x, rng) for x in batch])


# -- PatchMNIST ---------------------------------------------------------------

def _tiles(digits: np.ndarray, tile: int) -> np.ndarray:
    side = digits.shape[-1]
    if side == tile:
        return digits.astype(np.float32)
    return np.stack([np.clip(resize_bilinear(d, (tile, tile)), 0, 1) for d in digits]).astype(np.float32)


def _make_grid(pool: np.ndarray, grid: int, tile: int, rng) -> tuple[np.ndarray, np.ndarray]:
    idx = rng.choice(len(pool), size=grid * grid, replace=False)
    tiles = _tiles(pool[idx], tile)
    img = tiles.reshape(grid, grid, tile, tile).transpose(0, 2, 1, 3).reshape(grid * tile, grid * tile)
    return img, idx.reshape(grid, grid)


def _sources(idx_grid: np.ndarray, tile: int, i: int, j: int, patch: int) -> tuple[int, ...]:
    r0, r1 = i // tile, (i + patch - 1) // tile
    c0, c1 = j // tile, (j + patch - 1) // tile
    return tuple(int(v) for v in np.unique(idx_grid[r0:r1 + 1, c0:c1 + 1]))


def build_patchmnist(train_pool: np.ndarray, test_pool: np.ndarray, counts=(3000, 375, 375), grid: int = 20,
                     tile: int = 32, patch: int = 256, seed: int = 0) -> dict[str, ImageDataset]:
    """Tile resized digits into grids and cut patches from them.

    Train patches come from grids of train-pool digits at seeded random
    offsets, one patch per grid. Validation and test patches come from the
    first and second halves of the test pool respectively, by
    non-overlapping tiling of each grid. Source indices refer to the pool
    each split draws from (test-pool indices for validation and test).
    """
    side = grid * tile
    if patch > side:
        raise ValueError(f"patch {patch} larger than grid image {side}")
    half = len(test_pool) // 2
    need = grid * grid
    for name, size in (("train", len(train_pool)), ("val", half), ("test", len(test_pool) - half)):
        if size < need:
            raise ValueError(f"{name} pool has {size} digits, each grid needs {need}")
    rng = np.random.default_rng(seed)
    out: dict[str, ImageDataset] = {}

    items, sources = [], []
    for _ in range(counts[0]):
        img, idx = _make_grid(train_pool, grid, tile, rng)
        i, j = (int(v) for v in rng.integers(0, side - patch + 1, size=2))
        items.append(img[i:i + patch, j:j + patch])
        sources.append(_sources(idx, tile, i, j, patch))
    out["train"] = ImageDataset("train", np.stack(items), sources, random_crop=True, flips=True)

    per = side // patch
    pools = {"val": (test_pool[:half], 0), "test": (test_pool[half:], half)}
    for split, count in zip(("val", "test"), counts[1:]):
        pool, offset = pools[split]
        items, sources = [], []
        while len(items) < count:
            img, idx = _make_grid(pool, grid, tile, rng)
            for a in range(per):
                for b in range(per):
                    if len(items) == count:
                        break
                    i, j = a * patch, b * patch
                    items.append(img[i:i + patch, j:j + patch])
                    sources.append(tuple(s + offset for s in _sources(idx, tile, i, j, patch)))
        out[split] = ImageDataset(split, np.stack(items), sources)
    return out


def build_patchmnist_preset(mnist_dir, preset: str = "desk", seed: int = 0) -> dict[str, ImageDataset]:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[preset]
    train_pool, test_pool = load_mnist_pools(mnist_dir)
    return build_patchmnist(train_pool, test_pool, p.counts, p.grid, p.tile, p.patch, seed)


# -- shards -------------------------------------------------------------------

def save_dataset(directory, datasets: dict[str, ImageDataset], seed: int) -> Path:
    """Write one tensor file per item plus the manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for split in SPLITS:
        if split not in datasets:
            continue
        ds = datasets[split]
        for i, (img, src) in enumerate(zip(ds.items, ds.sources)):
            name = f"{split}_{i:05d}.dtns"
            save_tensor(directory / name, img)
            lines.append(f"{name} {split} {','.join(map(str, src)) or '-'} {seed}")
    path = directory / MANIFEST
    path.write_text("\n".join(lines) + "\n")
    return path


def load_dataset(directory) -> dict[str, ImageDataset]:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    items: dict[str, list] = {s: [] for s in SPLITS}
    sources: dict[str, list] = {s: [] for s in SPLITS}
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4 or parts[1] not in SPLITS:
            raise ValueError(f"{manifest}:{lineno}: malformed record")
        name, split, src, _ = parts
        items[split].append(load_tensor(directory / name))
        sources[split].append(() if src == "-" else tuple(int(s) for s in src.split(",")))
    out = {}
    for split in SPLITS:
        if items[split]:
            out[split] = ImageDataset(split, np.stack(items[split]), sources[split],
                                      random_crop=split == "train", flips=split == "train")
    return out


def manifest_digest(directory) -> str:
    return hashlib.sha256((Path(directory) / MANIFEST).read_bytes()).hexdigest()


def segmentation_split(ds: ImageDataset, threshold: float = 0.3, close: int = 10) -> SegDataset:
    return SegDataset(ds, make_pseudo_gt(ds.items, threshold, (close, close)))
