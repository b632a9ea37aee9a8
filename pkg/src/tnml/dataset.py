"""MNIST ingestion and preprocessing.

IDX reading, 2x2 average pooling, boustrophedon ("zig-zag") flattening and
the per-pixel embeddings fed to the MPS legs.
"""

import csv
import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from tnml.errors import FormatError

log = logging.getLogger(__name__)

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


def _open(path):
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path, magic: int) -> np.ndarray:
    """Decode one big-endian IDX file of unsigned bytes."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    found, = struct.unpack(">i", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: magic {found}, expected {magic}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(">" + "i" * ndim, raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    expected = int(np.prod(dims))
    if len(body) < expected:
        raise FormatError(f"{path}: {len(body)} data bytes, header promises {expected}")
    return np.frombuffer(body, dtype=np.uint8, count=expected).reshape(dims)


@dataclass(frozen=True)
class ImageDataset:
    images: np.ndarray  # (n, H, W) in [0, 1]
    labels: np.ndarray  # (n,) int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 9):
            raise ValueError("labels must lie in 0..9")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, split=None) -> "ImageDataset":
        return ImageDataset(self.images[idx], self.labels[idx], split or self.split)

    def head(self, n) -> "ImageDataset":
        return self.subset(slice(0, n))


def load_idx(images_path, labels_path, split="train") -> ImageDataset:
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if len(images) != len(labels):
        raise FormatError(
            f"image file has {len(images)} items, label file has {len(labels)}")
    return ImageDataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), split)


def load_mnist_dir(root, split="train") -> ImageDataset:
    """Standard file names: ``train-*`` for ``split="train"``, ``t10k-*`` for ``"test"``."""
    root = Path(root)
    prefix = "train" if split == "train" else "t10k"

    def find(kind):
        for name in (f"{prefix}-{kind}-ubyte.gz", f"{prefix}-{kind}-ubyte",
                     f"{prefix}-{kind.replace('-idx', '.idx')}-ubyte"):
            if (root / name).exists():
                return root / name
        raise FileNotFoundError(f"no {prefix} {kind} file under {root}")

    return load_idx(find("images-idx3"), find("labels-idx1"), split)


def train_val_split(ds: ImageDataset, val_fraction=0.2, seed=0):
    """Seeded shuffle, then the last ``val_fraction`` goes to validation."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_val = int(round(len(ds) * val_fraction))
    return ds.subset(perm[n_val:], "train"), ds.subset(perm[:n_val], "validation")


def avg_pool_2x2(image: np.ndarray) -> np.ndarray:
    """Mean over non-overlapping 2x2 blocks; works on (H, W) or (n, H, W)."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"cannot 2x2-pool an image of size {h}x{w}")
    blocks = image.reshape(image.shape[:-2] + (h // 2, 2, w // 2, 2))
    return blocks.mean(axis=(-3, -1))


def zigzag_flatten(image: np.ndarray) -> np.ndarray:
    """Even rows left to right, odd rows right to left; (H, W) or (n, H, W)."""
    image = np.array(image, copy=True)
    image[..., 1::2, :] = image[..., 1::2, ::-1]
    return image.reshape(image.shape[:-2] + (-1,))


def _clamped(x):
    x = np.asarray(x, dtype=np.float64)
    if np.any((x < 0) | (x > 1)):
        log.warning("feature map input outside [0, 1]; clamping")
        x = np.clip(x, 0.0, 1.0)
    return x


def feature_map(x) -> np.ndarray:
    """(cos(pi x / 2), sin(pi x / 2)); adds a trailing axis of size 2."""
    x = _clamped(x)
    return np.stack([np.cos(0.5 * np.pi * x), np.sin(0.5 * np.pi * x)], axis=-1)


def linear_feature_map(x) -> np.ndarray:
    """(1, x): keeps a constant channel so pinned sites see exactly 1."""
    x = _clamped(x)
    return np.stack([np.ones_like(x), x], axis=-1)


FEATURE_MAPS = {"trig": feature_map, "linear": linear_feature_map}


def preprocess(images: np.ndarray, feature: str = "trig", pool: bool = True) -> np.ndarray:
    """(n, 28, 28) pixels -> (n, sites, 2) embedded features."""
    x = avg_pool_2x2(images) if pool else np.asarray(images, dtype=np.float64)
    return FEATURE_MAPS[feature](zigzag_flatten(x))


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    """Index arrays covering ``range(n)``; shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def export_features_csv(path, features: np.ndarray, labels: np.ndarray):
    """One row per image: label, then the flattened feature vector."""
    flat = features.reshape(len(features), -1)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label"] + [f"f{i}" for i in range(flat.shape[1])])
        for y, row in zip(labels, flat):
            w.writerow([int(y)] + [repr(float(v)) for v in row])
