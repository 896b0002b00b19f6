"""Dataset ingestion, synthetic corpora, deterministic splits, pool bookkeeping.

Labels for the whole dataset are kept on hand; "querying the oracle" during
active learning reveals the stored label. Images are float arrays in [0, 1]
and are frozen after construction (datasets are immutable).
"""

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagic,
    CountMismatch,
    CountTooLarge,
    InvalidParams,
    TooSmall,
    TruncatedFile,
)
from .util import seeded

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray   # (n, ...) floats in [0, 1]
    labels: np.ndarray   # (n,) int64 class indices
    name: str = "dataset"
    classes: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] == 0:
            raise InvalidParams("dataset must be non-empty")
        if self.images.shape[0] != self.labels.shape[0]:
            raise CountMismatch(
                f"{self.images.shape[0]} images vs {self.labels.shape[0]} labels"
            )
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise InvalidParams("image values must lie in [0, 1]")
        if self.labels.min() < 0:
            raise InvalidParams("labels must be non-negative")
        if self.classes == 0:
            self.classes = int(self.labels.max()) + 1
        elif self.labels.max() >= self.classes:
            raise InvalidParams("label outside declared class count")
        self.images.flags.writeable = False
        self.labels.flags.writeable = False

    def __len__(self):
        return self.images.shape[0]

    @property
    def item_shape(self):
        return self.images.shape[1:]

    def subset(self, indices, name=None):
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.images[idx].copy(),
            self.labels[idx].copy(),
            name=name or f"{self.name}[{len(idx)}]",
            classes=self.classes,
        )


# ---------------------------------------------------------------------------
# IDX files (MNIST distribution format)
# ---------------------------------------------------------------------------

def _read_exact(fh, n, path):
    raw = fh.read(n)
    if len(raw) != n:
        raise TruncatedFile(f"{path}: expected {n} more bytes, got {len(raw)}")
    return raw


def load_idx(images_path, labels_path, name=None):
    """Load an IDX image/label file pair; pixels scaled by 1/255 into [0, 1]."""
    with open(images_path, "rb") as fh:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, images_path))
        if magic != IDX_IMAGES_MAGIC:
            raise BadMagic(f"{images_path}: magic {magic:#010x}")
        raw = _read_exact(fh, n * rows * cols, images_path)
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols)
    with open(labels_path, "rb") as fh:
        magic, nl = struct.unpack(">II", _read_exact(fh, 8, labels_path))
        if magic != IDX_LABELS_MAGIC:
            raise BadMagic(f"{labels_path}: magic {magic:#010x}")
        labels = np.frombuffer(_read_exact(fh, nl, labels_path), dtype=np.uint8)
    if n != nl:
        raise CountMismatch(f"{n} images vs {nl} labels")
    return Dataset(
        images.astype(np.float32) / 255.0,
        labels.astype(np.int64),
        name=name or os.path.basename(images_path),
    )


def save_idx(dataset, images_path, labels_path):
    """Write a dataset as an IDX pair; exact inverse of load_idx quantization."""
    imgs = dataset.images
    if imgs.ndim == 2:  # flat vectors: store as 1-row images
        imgs = imgs[:, None, :]
    if imgs.ndim != 3:
        raise InvalidParams("idx export needs (n,h,w) or (n,d) images")
    n, rows, cols = imgs.shape
    quant = np.rint(imgs * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(quant.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

def synth_blobs(classes, n_per_class, dim, spread, seed):
    """Gaussian clusters on well-separated centers, clipped to [0, 1]."""
    if classes < 2 or n_per_class < 1 or dim < 1 or spread < 0:
        raise InvalidParams("blobs need classes >= 2, n >= 1, dim >= 1, spread >= 0")
    rng = seeded(seed, "blobs")
    centers = np.empty((classes, dim))
    placed = 0
    while placed < classes:
        cand = rng.uniform(0.15, 0.85, size=dim)
        if placed == 0 or np.linalg.norm(centers[:placed] - cand, axis=1).min() >= 0.3:
            centers[placed] = cand
            placed += 1
    images = np.repeat(centers, n_per_class, axis=0)
    if spread > 0:
        images = images + rng.normal(0.0, spread, size=images.shape)
    labels = np.repeat(np.arange(classes), n_per_class)
    perm = rng.permutation(len(labels))
    return Dataset(
        np.clip(images[perm], 0.0, 1.0).astype(np.float32),
        labels[perm],
        name="blobs",
        classes=classes,
    )


_FONT_FILES = (
    "DejaVuSans.ttf",
    "DejaVuSans-Bold.ttf",
    "DejaVuSerif.ttf",
    "DejaVuSansMono.ttf",
)

_digits_cache = {}


def _font_dir():
    import matplotlib

    return os.path.join(os.path.dirname(matplotlib.__file__), "mpl-data", "fonts", "ttf")


def synth_digits(count, seed, size=28):
    """Rendered-digit corpus: 10 classes of jittered glyphs, size x size, in [0, 1].

    Deterministic per (count, seed, size); a desk-scale stand-in for
    handwritten-digit data when the real IDX files are not on disk.
    """
    if count < 1:
        raise InvalidParams("count must be positive")
    key = (count, seed, size)
    if key in _digits_cache:
        return _digits_cache[key]
    from PIL import Image, ImageDraw, ImageFont

    fdir = _font_dir()
    fonts = {}
    rng = seeded(seed, "digits")
    labels = np.arange(count) % 10
    labels = labels[rng.permutation(count)]
    images = np.empty((count, size, size), dtype=np.float32)
    for i, digit in enumerate(labels):
        fname = _FONT_FILES[rng.integers(len(_FONT_FILES))]
        pt = int(rng.integers(int(size * 0.65), int(size * 0.9)))
        font = fonts.get((fname, pt))
        if font is None:
            font = fonts[(fname, pt)] = ImageFont.truetype(os.path.join(fdir, fname), pt)
        img = Image.new("L", (size, size), 0)
        draw = ImageDraw.Draw(img)
        bbox = draw.textbbox((0, 0), str(digit), font=font)
        w, h = bbox[2] - bbox[0], bbox[3] - bbox[1]
        dx = (size - w) // 2 - bbox[0] + int(rng.integers(-3, 4))
        dy = (size - h) // 2 - bbox[1] + int(rng.integers(-3, 4))
        draw.text((dx, dy), str(digit), fill=255, font=font)
        img = img.rotate(float(rng.uniform(-10.0, 10.0)), resample=Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
        arr = arr * float(rng.uniform(0.8, 1.0))
        arr = arr + rng.normal(0.0, 0.03, arr.shape)
        images[i] = np.clip(arr, 0.0, 1.0)
    ds = Dataset(images, labels, name="synth-digits", classes=10)
    _digits_cache[key] = ds
    return ds


# ---------------------------------------------------------------------------
# splits and pools
# ---------------------------------------------------------------------------

def split_val_test(test_data, seed):
    """Deterministic shuffled halves; validation gets the extra item when odd."""
    n = len(test_data)
    if n < 2:
        raise TooSmall("need at least two items to split")
    perm = seeded(seed, "val-test-split").permutation(n)
    n_val = (n + 1) // 2
    val = test_data.subset(perm[:n_val], name=f"{test_data.name}-val")
    test = test_data.subset(perm[n_val:], name=f"{test_data.name}-test")
    return val, test


@dataclass
class PoolState:
    unlabeled: np.ndarray     # sorted int64 indices
    labeled: np.ndarray       # int64, in acquisition order
    acquired_at: np.ndarray   # stage index per labeled item

    def acquire(self, indices, stage):
        """Move indices from the unlabeled to the labeled pool."""
        idx = np.asarray(indices, dtype=np.int64)
        if len(np.unique(idx)) != len(idx):
            raise InvalidParams("duplicate indices in acquisition")
        if not np.isin(idx, self.unlabeled).all():
            raise InvalidParams("acquired index not in the unlabeled pool")
        self.unlabeled = np.setdiff1d(self.unlabeled, idx, assume_unique=True)
        self.labeled = np.concatenate([self.labeled, idx])
        self.acquired_at = np.concatenate(
            [self.acquired_at, np.full(len(idx), stage, dtype=np.int64)]
        )
        return self

    @property
    def labeled_count(self):
        return int(self.labeled.shape[0])


def init_pools(dataset, initial_count, seed):
    """Uniform initial labeled pool, identical across acquisition functions."""
    n = len(dataset)
    if initial_count > n:
        raise CountTooLarge(f"initial count {initial_count} > dataset size {n}")
    rng = seeded(seed, "init-pools")
    chosen = rng.choice(n, size=initial_count, replace=False).astype(np.int64)
    rest = np.setdiff1d(np.arange(n, dtype=np.int64), chosen, assume_unique=False)
    return PoolState(
        unlabeled=rest,
        labeled=chosen,
        acquired_at=np.zeros(initial_count, dtype=np.int64),
    )
