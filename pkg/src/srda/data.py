"""Datasets: synthetic shifted domains, IDX ingestion, CSV export, normalization
and seeded batching."""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    BadMagic,
    InvalidCount,
    InvalidInput,
    InvalidLabel,
    NonPlanarData,
    ShapeError,
    TruncatedPayload,
    UnsupportedType,
)
from .numeric import make_rng

SD_FLOOR = 1e-8


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray | None = None
    name: str = "dataset"
    num_classes: int | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ShapeError(f"features must be a non-empty n x d matrix, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise InvalidInput("features contain NaN or Inf")
        object.__setattr__(self, "features", x)
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64)
            if y.shape != (x.shape[0],):
                raise ShapeError("label count must match row count")
            k = self.num_classes if self.num_classes is not None else int(y.max()) + 1
            if y.min() < 0 or y.max() >= k:
                raise InvalidLabel(f"labels must lie in [0, {k})")
            object.__setattr__(self, "labels", y)
            object.__setattr__(self, "num_classes", int(k))

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def labeled(self):
        return self.labels is not None

    def take(self, idx) -> "Dataset":
        y = None if self.labels is None else self.labels[idx]
        return replace(self, features=self.features[idx], labels=y)

    def unlabeled(self) -> "Dataset":
        return Dataset(self.features, None, self.name)


# --------------------------------------------------------------------------- #
# synthetic domains


def gen_two_moons(n, noise_sd, rng, name="two-moons") -> Dataset:
    """Two interleaving half circles; class 0 gets the extra point when n is odd."""
    if n < 2:
        raise InvalidCount("two-moons needs n >= 2")
    n0 = n - n // 2
    n1 = n // 2
    t0 = rng.uniform(0.0, math.pi, n0)
    t1 = rng.uniform(0.0, math.pi, n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), -np.sin(t1) + 0.5])
    x = np.vstack([upper, lower])
    if noise_sd > 0:
        x = x + noise_sd * rng.standard_normal(x.shape)
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    return Dataset(x, y, name, 2)


def gen_blobs(n, noise_sd, rng, num_classes=3, radius=2.0, name="blobs") -> Dataset:
    """Isotropic Gaussian blobs centred evenly on a circle of ``radius``."""
    if n < num_classes:
        raise InvalidCount("blobs needs at least one point per class")
    y = np.arange(n, dtype=np.int64) % num_classes
    angles = 2 * math.pi * np.arange(num_classes) / num_classes
    centers = radius * np.column_stack([np.cos(angles), np.sin(angles)])
    x = centers[y] + noise_sd * rng.standard_normal((n, 2))
    return Dataset(x, y, name, num_classes)


def rotate_domain(ds: Dataset, theta, name=None) -> Dataset:
    """Rotate 2-d points by ``theta`` degrees about the dataset centroid."""
    if ds.dim != 2:
        raise NonPlanarData(f"rotation needs 2-d data, got d={ds.dim}")
    a = math.radians(theta)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    c = ds.features.mean(axis=0)
    x = (ds.features - c) @ rot.T + c
    return replace(ds, features=x, name=name or ds.name)


def translate_domain(ds: Dataset, offset, name=None) -> Dataset:
    offset = np.asarray(offset, dtype=np.float64)
    if offset.shape != (ds.dim,):
        raise ShapeError(f"offset must have length {ds.dim}")
    return replace(ds, features=ds.features + offset, name=name or ds.name)


SYNTHETIC_KINDS = ("two-moons", "blobs")


def make_shifted_pair(kind, n, noise_sd=0.1, rotate=0.0, translate=None, num_classes=3, seed=0):
    """Source and shifted target domains drawn from one seeded stream.

    Both domains come from the same generator; the target is then rotated
    about its centroid and translated.
    """
    rng = make_rng(seed)
    if kind == "two-moons":
        source = gen_two_moons(n, noise_sd, rng, name="source")
        target = gen_two_moons(n, noise_sd, rng, name="target")
    elif kind == "blobs":
        source = gen_blobs(n, noise_sd, rng, num_classes, name="source")
        target = gen_blobs(n, noise_sd, rng, num_classes, name="target")
    else:
        raise InvalidInput(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    if rotate:
        target = rotate_domain(target, rotate)
    if translate is not None and np.any(np.asarray(translate) != 0):
        target = translate_domain(target, translate)
    return source, target


# --------------------------------------------------------------------------- #
# IDX files
#
# magic = 0x00 0x00 <type code> <ndim>, big endian; one u32 size per dimension;
# then the payload.  Only unsigned bytes (0x08) are supported.

IDX_UBYTE = 0x08
IDX_LABELS = 0x00000801
IDX_IMAGES = 0x00000803


def parse_idx(data: bytes) -> np.ndarray:
    """Parse IDX bytes.

    Label files (1-D) come back as an int64 vector; image files (3-D) as an
    n x (rows*cols) float64 matrix scaled to [0, 1].
    """
    if len(data) < 4:
        raise TruncatedPayload("missing IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic >> 16 != 0:
        raise BadMagic(f"bad IDX magic 0x{magic:08x}")
    type_code = (magic >> 8) & 0xFF
    ndim = magic & 0xFF
    if type_code != IDX_UBYTE:
        if ndim in (1, 3):
            raise UnsupportedType(f"unsupported IDX element type 0x{type_code:02x}")
        raise BadMagic(f"bad IDX magic 0x{magic:08x}")
    if ndim not in (1, 3):
        raise BadMagic(f"bad IDX magic 0x{magic:08x}: expected 1-D labels or 3-D images")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedPayload("IDX header ends before all dimension sizes")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = math.prod(dims)
    payload = data[header:]
    if len(payload) < count:
        raise TruncatedPayload(f"IDX declares {count} bytes of payload, found {len(payload)}")
    if len(payload) > count:
        raise TruncatedPayload(f"IDX has {len(payload) - count} trailing bytes")
    raw = np.frombuffer(payload, dtype=np.uint8, count=count)
    if ndim == 1:
        return raw.astype(np.int64)
    return raw.reshape(dims[0], dims[1] * dims[2]).astype(np.float64) / 255.0


def encode_idx(array) -> bytes:
    """Serialize a uint8 label vector (1-D) or image stack (3-D) to IDX bytes."""
    a = np.asarray(array)
    if a.ndim not in (1, 3):
        raise ShapeError("IDX encoding supports 1-D labels and 3-D images")
    if a.size and (a.min() < 0 or a.max() > 255):
        raise InvalidInput("IDX ubyte values must lie in [0, 255]")
    magic = IDX_LABELS if a.ndim == 1 else IDX_IMAGES
    head = struct.pack(f">I{a.ndim}I", magic, *a.shape)
    return head + a.astype(np.uint8).tobytes()


def read_idx(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_idx(fh.read())


def load_idx_dataset(images_path, labels_path=None, name=None, num_classes=10) -> Dataset:
    x = read_idx(images_path)
    if x.ndim != 2:
        raise ShapeError(f"{images_path} is not an IDX image file")
    y = None
    if labels_path is not None:
        y = read_idx(labels_path)
        if y.ndim != 1 or len(y) != len(x):
            raise ShapeError("IDX label count does not match image count")
    return Dataset(x, y, name or str(images_path), num_classes if y is not None else None)


# --------------------------------------------------------------------------- #
# reduction and normalization


def subsample(ds: Dataset, n_keep, rng) -> Dataset:
    """Seeded subset of ``n_keep`` rows; class-stratified for labeled data."""
    n = len(ds)
    if not 1 <= n_keep <= n:
        raise InvalidCount(f"n_keep must be in [1, {n}], got {n_keep}")
    if not ds.labeled:
        return ds.take(np.sort(rng.permutation(n)[:n_keep]))
    classes = np.unique(ds.labels)
    pools = [rng.permutation(np.flatnonzero(ds.labels == c)) for c in classes]
    quota = np.zeros(len(classes), dtype=np.int64)
    # round-robin over classes in a seeded order, skipping exhausted ones
    order = rng.permutation(len(classes))
    remaining = n_keep
    while remaining:
        progressed = False
        for j in order:
            if remaining and quota[j] < len(pools[j]):
                quota[j] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            raise InvalidCount("not enough rows to fill the requested subset")
    idx = np.concatenate([pool[:q] for pool, q in zip(pools, quota)])
    return ds.take(rng.permutation(idx))


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, ds: Dataset) -> "Standardizer":
        x = ds.features
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), SD_FLOOR))

    def apply(self, ds: Dataset) -> Dataset:
        if ds.dim != self.mean.shape[0]:
            raise ShapeError(f"standardizer fitted on d={self.mean.shape[0]}, data has d={ds.dim}")
        return replace(ds, features=(ds.features - self.mean) / self.scale)

    def as_dict(self):
        return {"mean": self.mean, "scale": self.scale}


def standardize(fit_ds: Dataset, apply_ds: Dataset) -> Dataset:
    return Standardizer.fit(fit_ds).apply(apply_ds)


# --------------------------------------------------------------------------- #
# batching


@dataclass
class BatchStream:
    """Endless minibatch source that reshuffles with its own rng after each pass.

    The last batch of a pass may be short; a pass visits every index once.
    """

    dataset: Dataset
    batch_size: int
    rng: np.random.Generator
    _perm: np.ndarray = field(default=None, repr=False)
    _pos: int = 0
    passes: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidCount("batch_size must be >= 1")

    def next_indices(self) -> np.ndarray:
        if self._perm is None or self._pos >= len(self._perm):
            self._perm = self.rng.permutation(len(self.dataset))
            self._pos = 0
            self.passes += 1
        idx = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += len(idx)
        return idx

    def next_batch(self) -> Dataset:
        return self.dataset.take(self.next_indices())

    def epoch(self):
        """Yield the batches of one full pass (starting a fresh permutation)."""
        self._perm = None
        while True:
            yield self.next_batch()
            if self._pos >= len(self._perm):
                return


# --------------------------------------------------------------------------- #
# CSV


def dataset_to_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label"] + [f"f{i}" for i in range(ds.dim)])
    labels = ds.labels if ds.labeled else np.full(len(ds), -1)
    for y, row in zip(labels, ds.features):
        w.writerow([int(y)] + [repr(float(v)) for v in row])
    return buf.getvalue()


def write_dataset_csv(ds: Dataset, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(dataset_to_csv(ds))


def read_dataset_csv(path, name=None, num_classes=None) -> Dataset:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0] != "label":
        raise InvalidInput(f"{path}: header must start with 'label'")
    body = rows[1:]
    if not body:
        raise InvalidCount(f"{path}: no data rows")
    try:
        arr = np.array([[float(v) for v in r] for r in body], dtype=np.float64)
    except ValueError as e:
        raise InvalidInput(f"{path}: {e}") from e
    if arr.shape[1] != len(rows[0]):
        raise ShapeError(f"{path}: ragged rows")
    labels = arr[:, 0].astype(np.int64)
    x = arr[:, 1:]
    if np.all(labels == -1):
        return Dataset(x, None, name or str(path))
    if np.any(labels < 0):
        raise InvalidLabel(f"{path}: mix of labeled and unlabeled rows")
    return Dataset(x, labels, name or str(path), num_classes)
