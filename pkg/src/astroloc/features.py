"""Embedding extraction, normalization and the EMB1 feature-store format.

The baseline extractor is deliberately simple: per-block colour means and
variances plus magnitude-weighted gradient-orientation histograms, pushed
through a seeded Gaussian projection and L2-normalized. It is not rotation
invariant, which is why the index stores four rotations per image.

EMB1 layout (little endian)::

    b"EMB1" | dim: u32 | count: u64 | count x {id: u64, rotation_deg: u16,
                                               year: u16, values: dim x f32}
"""
from __future__ import annotations

import hashlib
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .io_utils import atomic_write_bytes

MAGIC = b"EMB1"
_HEADER = struct.Struct("<IQ")
EXTRACTOR_VERSION = 1


class DegenerateInputError(ValueError):
    pass


class CorruptStoreError(ValueError):
    pass


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` (or each row of a 2-D array) to unit L2 norm."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise DegenerateInputError("cannot normalize a zero or non-finite vector")
    return v / norm


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


def as_float_image(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] != img.shape[1] or img.shape[0] == 0:
        raise ValueError(f"expected a non-empty square RGB buffer, got shape {img.shape}")
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return np.ascontiguousarray(img, dtype=np.float64)


@dataclass(frozen=True)
class ExtractorConfig:
    dim: int = 256
    grid: int = 8
    bins: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.grid < 1 or self.bins < 1:
            raise ValueError("dim, grid and bins must be positive")
        if self.dim > self.source_dim:
            raise ValueError(f"dim {self.dim} exceeds the {self.source_dim} block statistics")

    @property
    def source_dim(self) -> int:
        return self.grid * self.grid * (6 + self.bins)


class Extractor:
    """Deterministic statistics-plus-projection embedder."""

    def __init__(self, cfg: ExtractorConfig = ExtractorConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.projection = rng.standard_normal((cfg.source_dim, cfg.dim)) / np.sqrt(cfg.dim)

    @property
    def dim(self) -> int:
        return self.cfg.dim

    @property
    def fingerprint(self) -> str:
        payload = json.dumps({"version": EXTRACTOR_VERSION, **asdict(self.cfg)}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def statistics(self, img) -> np.ndarray:
        img = as_float_image(img)
        if img.shape[0] < self.cfg.grid:
            raise ValueError(f"image side {img.shape[0]} smaller than grid {self.cfg.grid}")
        return kernels.block_stats(img, self.cfg.grid, self.cfg.bins)

    def raw(self, img) -> np.ndarray:
        """Projected statistics before normalization."""
        return self.statistics(img) @ self.projection

    def extract(self, img) -> np.ndarray:
        return l2_normalize(self.raw(img))

    def extract_batch(self, images, jobs: int = 1) -> np.ndarray:
        if len(images) == 0:
            return np.zeros((0, self.dim))
        if jobs <= 1:
            return np.stack([self.extract(im) for im in images])
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return np.stack(list(pool.map(self.extract, images)))


def extract(img, cfg: ExtractorConfig = ExtractorConfig()) -> np.ndarray:
    return Extractor(cfg).extract(img)


class HeadExtractor:
    """Baseline extractor followed by a trained linear map and renormalization."""

    def __init__(self, base: Extractor, weights: np.ndarray):
        weights = np.asarray(weights, dtype=np.float64)
        if weights.ndim != 2 or weights.shape[0] != base.dim:
            raise ValueError(f"head of shape {weights.shape} does not fit extractor dim {base.dim}")
        self.base = base
        self.weights = weights

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256(self.base.fingerprint.encode())
        h.update(np.ascontiguousarray(self.weights).tobytes())
        return h.hexdigest()[:16]

    def extract(self, img) -> np.ndarray:
        return l2_normalize(self.base.extract(img) @ self.weights)

    def extract_batch(self, images, jobs: int = 1) -> np.ndarray:
        base = self.base.extract_batch(images, jobs)
        if base.shape[0] == 0:
            return np.zeros((0, self.dim))
        return l2_normalize(base @ self.weights)


# --------------------------------------------------------------------------
# EMB1 feature store
# --------------------------------------------------------------------------

def record_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("rotation", "<u2"), ("year", "<u2"), ("values", "<f4", (dim,))])


@dataclass
class FeatureStore:
    ids: np.ndarray
    rotations: np.ndarray
    years: np.ndarray
    values: np.ndarray

    def __len__(self):
        return int(self.ids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])


def encode_feature_store(store: FeatureStore) -> bytes:
    dim = store.values.shape[1] if store.values.ndim == 2 else 0
    rec = np.zeros(len(store), dtype=record_dtype(dim))
    rec["id"] = store.ids
    rec["rotation"] = store.rotations
    rec["year"] = store.years
    rec["values"] = store.values
    return MAGIC + _HEADER.pack(dim, len(store)) + rec.tobytes()


def write_feature_store(path, store: FeatureStore) -> None:
    atomic_write_bytes(path, encode_feature_store(store))


def read_feature_store(path, mmap: bool = False) -> FeatureStore:
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        head = fh.read(4 + _HEADER.size)
    if len(head) < 4 + _HEADER.size or head[:4] != MAGIC:
        raise CorruptStoreError(f"{path}: not an EMB1 feature store")
    dim, count = _HEADER.unpack(head[4:])
    dt = record_dtype(dim)
    expected = 4 + _HEADER.size + count * dt.itemsize
    if size != expected:
        raise CorruptStoreError(f"{path}: expected {expected} bytes for {count} records, found {size}")
    offset = 4 + _HEADER.size
    if mmap and count:
        rec = np.memmap(path, dtype=dt, mode="r", offset=offset, shape=(count,))
    else:
        rec = np.fromfile(path, dtype=dt, offset=offset, count=count)
    return FeatureStore(rec["id"], rec["rotation"], rec["year"], rec["values"])
