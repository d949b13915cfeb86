"""Dataset readers (IDX, CIFAR binary), a synthetic generator, and batching."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_PIXELS = 3 * 32 * 32


class DataError(ValueError):
    """Malformed or missing dataset input."""


@dataclass
class Dataset:
    images: np.ndarray          # N x C x H x W float64
    labels: np.ndarray          # N int64
    num_classes: int
    split: str = "train"
    mean: np.ndarray | None = None   # C x H x W per-pixel mean already subtracted

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataError(f"images {self.images.shape} and labels {self.labels.shape} do not line up")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])


def subtract_mean(ds: Dataset, mean: np.ndarray | None = None) -> Dataset:
    """Subtract a per-pixel mean (computed from ``ds`` itself when not given)."""
    if mean is None:
        mean = ds.images.mean(axis=0)
    if mean.shape != ds.images.shape[1:]:
        raise DataError(f"mean shape {mean.shape} does not match images {ds.images.shape[1:]}")
    return replace(ds, images=ds.images - mean, mean=np.array(mean))


# ------------------------------------------------------------------- IDX

def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    if len(raw) < 4:
        raise DataError("IDX header truncated at offset 0")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise DataError(f"bad IDX magic 0x{magic:08x} at offset 0 (expected 0x{expected_magic:08x})")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise DataError(f"IDX dimension header truncated at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:hdr])
    n = int(np.prod(dims))
    if len(raw) != hdr + n:
        raise DataError(f"IDX payload size mismatch at offset {hdr}: expected {n} bytes, found {len(raw) - hdr}")
    return np.frombuffer(raw, dtype=np.uint8, offset=hdr).reshape(dims)


def load_idx(images_path, labels_path=None, num_classes: int = 10, split: str = "train") -> Dataset:
    """Read an IDX image file (and its label file); pixels scaled to [0, 1]."""
    images_path = Path(images_path)
    if labels_path is None:
        labels_path = images_path.with_name(images_path.name.replace("images-idx3", "labels-idx1"))
        if labels_path == images_path:
            raise DataError(f"cannot infer label file for {images_path}")
    imgs = parse_idx(_read(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read(labels_path), IDX_LABELS_MAGIC)
    if len(imgs) != len(labels):
        raise DataError(f"{len(imgs)} images but {len(labels)} labels")
    return Dataset(imgs[:, None].astype(np.float64) / 255.0, labels.astype(np.int64), num_classes, split)


def write_idx(images_path, labels_path, images_u8: np.ndarray, labels_u8: np.ndarray):
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(">3I", *images_u8.shape))
        f.write(images_u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels_u8)))
        f.write(np.asarray(labels_u8, dtype=np.uint8).tobytes())


# ----------------------------------------------------------------- CIFAR

def load_cifar_binary(path, num_classes: int = 10, split: str = "train") -> Dataset:
    """Read CIFAR binary records: 1 label byte + 3072 pixel bytes (3 x 32 x 32)."""
    raw = _read(path)
    rec = 1 + CIFAR_PIXELS
    if len(raw) == 0 or len(raw) % rec:
        off = (len(raw) // rec) * rec
        raise DataError(f"CIFAR record truncated at offset {off} ({len(raw)} bytes is not a multiple of {rec})")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise DataError(f"label {labels[bad[0]]} out of range at offset {bad[0] * rec}")
    images = arr[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, num_classes, split)


def cifar_records(images_u8: np.ndarray, labels) -> bytes:
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(len(labels), CIFAR_PIXELS)
    lab = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    return np.concatenate([lab, images_u8], axis=1).tobytes()


# ------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SyntheticSpec:
    """Each class is a mixture of ``blobs_per_class`` Gaussian blobs in pixel space.

    Blob centres are smooth random images (``coarse`` x ``coarse`` noise
    upsampled to ``size``) scaled to ``separation``; samples add i.i.d.
    pixel noise of standard deviation ``noise``.
    """

    num_classes: int = 10
    blobs_per_class: int = 2
    channels: int = 3
    size: int = 16
    n_train: int = 1000
    n_val: int = 500
    coarse: int = 4
    separation: float = 1.0
    noise: float = 1.0

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _centres(spec: SyntheticSpec, seed) -> np.ndarray:
    rng = np.random.default_rng([seed, 0])
    reps = -(-spec.size // spec.coarse)
    low = rng.normal(size=(spec.num_classes, spec.blobs_per_class, spec.channels, spec.coarse, spec.coarse))
    up = np.kron(low, np.ones((reps, reps)))[..., : spec.size, : spec.size]
    return spec.separation * up


def make_synthetic(spec: SyntheticSpec, seed: int, split: str = "train") -> Dataset:
    """Deterministic class-separable images; train and val share blob centres."""
    if split not in ("train", "val"):
        raise DataError(f"split must be 'train' or 'val', got {split!r}")
    centres = _centres(spec, seed)
    n = spec.n_train if split == "train" else spec.n_val
    rng = np.random.default_rng([seed, 1 if split == "train" else 2])
    labels = np.arange(n) % spec.num_classes
    rng.shuffle(labels)
    blob = rng.integers(0, spec.blobs_per_class, size=n)
    images = centres[labels, blob] + spec.noise * rng.normal(size=(n, spec.channels, spec.size, spec.size))
    return Dataset(images, labels, spec.num_classes, split)


def linear_probe_accuracy(train: Dataset, val: Dataset, ridge: float = 1e-3) -> float:
    """Closed-form ridge regression onto one-hot targets; accuracy on ``val``."""
    X = train.images.reshape(len(train), -1)
    X = np.hstack([X, np.ones((len(X), 1))])
    Y = np.eye(train.num_classes)[train.labels]
    A = X.T @ X + ridge * np.eye(X.shape[1])
    Wt = np.linalg.solve(A, X.T @ Y)
    Xv = np.hstack([val.images.reshape(len(val), -1), np.ones((len(val), 1))])
    return float(((Xv @ Wt).argmax(axis=1) == val.labels).mean())


# --------------------------------------------------------------- batches

def batches(ds: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True, epoch: int = 0,
            flip: bool = False):
    """Yield ``(images, labels)``; the epoch's order is a permutation seeded by ``(seed, epoch)``.

    The last partial batch is kept. ``flip`` mirrors a seeded half of each batch horizontally.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(ds)
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x = ds.images[idx]
        if flip:
            m = rng.random(len(idx)) < 0.5
            x = x.copy()
            x[m] = x[m][..., ::-1]
        yield x, ds.labels[idx]
