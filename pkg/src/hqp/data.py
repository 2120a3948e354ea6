"""Datasets: synthetic Gaussian-blob images and IDX (MNIST-style) files."""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetError

SPLITS = ("train", "calib", "val", "holdout")
IDX_DTYPES = {
    0x08: np.uint8,
    0x09: np.int8,
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DatasetError(f"{len(self.x)} inputs but {len(self.y)} labels")

    def __len__(self):
        return len(self.x)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])

    def batches(self, batch_size):
        for s in range(0, len(self), batch_size):
            yield self.x[s : s + batch_size], self.y[s : s + batch_size]


@dataclass
class DatasetBundle:
    train: Dataset
    calib: Dataset
    val: Dataset
    holdout: Dataset
    sizes: dict = field(default_factory=dict)
    seed: int = 0
    source: str = "synthetic"


def synthetic_blobs(n, num_classes=10, image_shape=(1, 16, 16), seed=0, noise=0.35,
                    jitter=0.6, blob_sigma=2.0):
    """K-class images, each class a Gaussian bump at its own location.

    Class centres sit on a ring; each sample jitters the centre, scales the
    amplitude and adds white noise.  Deterministic for a given seed.
    """
    rng = np.random.default_rng(seed)
    c, h, w = image_shape
    angles = 2 * math.pi * np.arange(num_classes) / num_classes
    radius = 0.3 * min(h, w)
    cy = (h - 1) / 2 + radius * np.sin(angles)
    cx = (w - 1) / 2 + radius * np.cos(angles)
    labels = rng.integers(0, num_classes, size=n)
    yy, xx = np.mgrid[0:h, 0:w]
    dy = cy[labels] + rng.normal(0, jitter, n)
    dx = cx[labels] + rng.normal(0, jitter, n)
    amp = rng.uniform(0.7, 1.3, n)
    d2 = (yy[None] - dy[:, None, None]) ** 2 + (xx[None] - dx[:, None, None]) ** 2
    img = amp[:, None, None] * np.exp(-d2 / (2 * blob_sigma**2))
    x = np.repeat(img[:, None], c, axis=1) + rng.normal(0, noise, (n, c, h, w))
    return Dataset(x.astype(np.float32), labels.astype(np.int64))


def _open(path):
    with open(path, "rb") as f:
        head = f.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into an array."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in IDX_DTYPES:
        raise DatasetError(f"{path}: bad IDX magic {raw[:4].hex()}")
    dtype = np.dtype(IDX_DTYPES[raw[2]])
    ndim = raw[3]
    if len(raw) < 4 + 4 * ndim:
        raise DatasetError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    count = int(np.prod(dims)) if dims else 1
    body = raw[4 + 4 * ndim :]
    if len(body) < count * dtype.itemsize:
        raise DatasetError(f"{path}: truncated IDX payload")
    return np.frombuffer(body, dtype=dtype, count=count).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array)
    codes = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09, np.dtype(">i4"): 0x0C,
             np.dtype(">f4"): 0x0D, np.dtype(">f8"): 0x0E}
    if array.dtype == np.int64 or array.dtype == np.int32:
        array = array.astype(">i4")
    elif array.dtype == np.float32:
        array = array.astype(">f4")
    elif array.dtype == np.float64:
        array = array.astype(">f8")
    if array.dtype not in codes:
        raise DatasetError(f"cannot write dtype {array.dtype} as IDX")
    code = codes[array.dtype]
    with open(path, "wb") as f:
        f.write(bytes([0, 0, code, array.ndim]))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def load_idx_dataset(images_path, labels_path) -> Dataset:
    """IDX image/label pair: images become ``[N, 1, H, W]`` floats in [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4:
        raise DatasetError(f"expected 3-d or 4-d image array, got shape {images.shape}")
    scale = 255.0 if images.dtype == np.uint8 else 1.0
    return Dataset((images.astype(np.float32) / scale), labels.astype(np.int64).ravel())


def split_dataset(data: Dataset, sizes: dict, seed=0, shuffle=True) -> DatasetBundle:
    """Cut disjoint train/calib/val/holdout splits from one pool."""
    unknown = set(sizes) - set(SPLITS)
    if unknown:
        raise DatasetError(f"unknown split names {sorted(unknown)}")
    need = sum(sizes.get(s, 0) for s in SPLITS)
    if need > len(data):
        raise DatasetError(f"requested {need} samples but only {len(data)} available")
    order = np.random.default_rng(seed).permutation(len(data)) if shuffle else np.arange(len(data))
    parts = {}
    start = 0
    for name in SPLITS:
        k = sizes.get(name, 0)
        parts[name] = data.subset(order[start : start + k])
        start += k
    return DatasetBundle(**parts, sizes={s: sizes.get(s, 0) for s in SPLITS}, seed=seed)


def bundle_from_indices(data: Dataset, indices: dict, seed=0) -> DatasetBundle:
    """Build splits from explicit index arrays; overlapping splits are an error."""
    seen = set()
    for name in SPLITS:
        idx = set(np.asarray(indices.get(name, []), dtype=np.int64).tolist())
        if seen & idx:
            raise DatasetError(f"split {name!r} overlaps an earlier split")
        seen |= idx
    parts = {n: data.subset(np.asarray(indices.get(n, []), dtype=np.int64)) for n in SPLITS}
    return DatasetBundle(**parts, sizes={n: len(parts[n]) for n in SPLITS}, seed=seed)


def load_dataset(source="synthetic", sizes=None, seed=0, num_classes=10, image_shape=(1, 16, 16),
                 idx_images=None, idx_labels=None, **synthetic_kw) -> DatasetBundle:
    """Produce the four disjoint splits from synthetic settings or an IDX pair."""
    sizes = dict(sizes or {"train": 8000, "calib": 1000, "val": 1000, "holdout": 1000})
    if source == "synthetic":
        total = sum(sizes.values())
        pool = synthetic_blobs(total, num_classes, image_shape, seed, **synthetic_kw)
        bundle = split_dataset(pool, sizes, seed, shuffle=False)
    elif source == "idx":
        if not idx_images or not idx_labels:
            raise DatasetError("idx source needs idx_images and idx_labels paths")
        pool = load_idx_dataset(idx_images, idx_labels)
        bundle = split_dataset(pool, sizes, seed)
    else:
        raise DatasetError(f"unknown dataset source {source!r}")
    bundle.source = source
    return bundle
