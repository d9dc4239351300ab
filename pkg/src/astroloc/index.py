"""Rotation-augmented retrieval index over region embeddings.

Every database image is stored at 0, 90, 180 and 270 degrees (counter-clockwise,
as ``np.rot90``). A query is scored against all entries by inner product; the
rotation of the best entry estimates how the query is turned relative to
north-up imagery.

On disk an index is a directory holding ``manifest.json`` and an EMB1
``features.emb`` whose record ids are packed region keys.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .features import CorruptStoreError, FeatureStore, read_feature_store, write_feature_store
from .geodesy import RegionId
from .io_utils import atomic_write_text

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
FEATURES = "features.emb"


class RotationTag(IntEnum):
    R0 = 0
    R90 = 90
    R180 = 180
    R270 = 270


ALL_ROTATIONS = tuple(RotationTag)


class IndexError_(Exception):
    """Base class for index problems (name avoids the builtin)."""


class IncompatibleIndexError(IndexError_):
    pass


class CorruptIndexError(IndexError_):
    pass


def rotate(img: np.ndarray, rotation) -> np.ndarray:
    deg = int(rotation)
    if deg % 90:
        raise ValueError(f"rotation must be a multiple of 90, got {deg}")
    return np.rot90(img, k=(deg // 90) % 4)


@dataclass(frozen=True)
class IndexEntry:
    region: RegionId
    year: int
    rotation: RotationTag


@dataclass(frozen=True)
class Prediction:
    rank: int
    region: RegionId
    year: int
    rotation: RotationTag
    score: float


@dataclass
class TtaIndex:
    matrix: np.ndarray  # (n, dim) float32, unit rows
    keys: np.ndarray  # u64 packed region keys
    years: np.ndarray  # u16
    rotations: np.ndarray  # u16 degrees
    span: int
    fingerprint: str
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.keys.shape[0])

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def entry(self, i: int) -> IndexEntry:
        return IndexEntry(RegionId.from_key(int(self.keys[i]), self.span), int(self.years[i]),
                          RotationTag(int(self.rotations[i])))

    def manifest(self) -> dict:
        return {
            "format": FORMAT_VERSION,
            "fingerprint": self.fingerprint,
            "dim": self.dim,
            "count": len(self),
            "span": self.span,
            "rotations": sorted({int(r) for r in self.rotations}),
            "years": sorted({int(y) for y in self.years}),
            **self.extra,
        }


def build_index(items: Iterable, extractor, rotations: Sequence = ALL_ROTATIONS, jobs: int = 1,
                years_filter=None) -> TtaIndex:
    """Index ``(region, year, image)`` triples at each rotation.

    ``extractor`` needs ``extract_batch``, ``dim`` and ``fingerprint``.
    """
    rotations = [RotationTag(int(r)) for r in rotations]
    keys, years, rots, images = [], [], [], []
    spans = set()
    for region, year, img in items:
        if years_filter is not None and year not in years_filter:
            continue
        spans.add(region.span)
        for r in rotations:
            keys.append(region.key())
            years.append(year)
            rots.append(int(r))
            images.append(rotate(img, r))
    if len(spans) > 1:
        raise ValueError(f"mixed region spans {sorted(spans)} in one index")
    if images:
        matrix = extractor.extract_batch(np.stack(images), jobs).astype(np.float32)
    else:
        matrix = np.zeros((0, extractor.dim), np.float32)
    return TtaIndex(np.ascontiguousarray(matrix), np.array(keys, np.uint64), np.array(years, np.uint16),
                    np.array(rots, np.uint16), spans.pop() if spans else 4, extractor.fingerprint)


def scores(index: TtaIndex, q) -> np.ndarray:
    q = np.ascontiguousarray(q, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ValueError(f"query dimension {q.shape} does not match index dim {index.dim}")
    return kernels.dot_scores(index.matrix, q)


def top_order(s: np.ndarray, n: int) -> np.ndarray:
    """Indices of the ``n`` best scores, descending; ties go to the lower index."""
    total = s.shape[0]
    n = min(n, total)
    if n <= 0:
        return np.zeros(0, np.int64)
    if n < total:
        cut = np.partition(s, total - n)[total - n]
        cand = np.flatnonzero(s >= cut)
    else:
        cand = np.arange(total)
    order = cand[np.lexsort((cand, -s[cand]))]
    return order[:n]


def knn(index: TtaIndex, q, n: int = 10, dedup: bool = False) -> list[Prediction]:
    """Top ``n`` entries for embedding ``q``.

    With ``dedup`` each (region, year) appears once, at its best-scoring
    rotation. Ties go to the earlier entry.
    """
    if n < 1:
        raise ValueError("n must be positive")
    s = scores(index, q)
    if dedup:
        order = top_order(s, len(index))
        seen, picked = set(), []
        for i in order:
            k = (int(index.keys[i]), int(index.years[i]))
            if k in seen:
                continue
            seen.add(k)
            picked.append(i)
            if len(picked) == n:
                break
        order = np.array(picked, np.int64)
    else:
        order = top_order(s, n)
    out = []
    for rank, i in enumerate(order, start=1):
        e = index.entry(int(i))
        out.append(Prediction(rank, e.region, e.year, e.rotation, float(s[i])))
    return out


def predict_orientation(predictions: Sequence[Prediction]) -> RotationTag:
    """Rotation that turns north-up imagery into the query, from the top match."""
    if not predictions:
        raise ValueError("no predictions")
    return predictions[0].rotation


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def save_index(index: TtaIndex, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    store = FeatureStore(index.keys, index.rotations, index.years, index.matrix)
    write_feature_store(directory / FEATURES, store)
    atomic_write_text(directory / MANIFEST, json.dumps(index.manifest(), indent=2, sort_keys=True))
    return directory


def load_index(directory, expected_fingerprint: str | None = None, mmap: bool = False) -> TtaIndex:
    directory = Path(directory)
    mpath = directory / MANIFEST
    fpath = directory / FEATURES
    if not mpath.exists() or not fpath.exists():
        raise FileNotFoundError(f"{directory} is not an index (run `astroloc index` to build one)")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptIndexError(f"{mpath}: {exc}") from exc
    if manifest.get("format") != FORMAT_VERSION:
        raise IncompatibleIndexError(f"{directory}: index format {manifest.get('format')}, "
                                     f"expected {FORMAT_VERSION}")
    if expected_fingerprint is not None and manifest.get("fingerprint") != expected_fingerprint:
        raise IncompatibleIndexError(
            f"{directory}: built with extractor {manifest.get('fingerprint')}, "
            f"current extractor is {expected_fingerprint}")
    try:
        store = read_feature_store(fpath, mmap=mmap)
    except CorruptStoreError as exc:
        raise CorruptIndexError(str(exc)) from exc
    if len(store) != manifest.get("count") or (len(store) and store.dim != manifest.get("dim")):
        raise CorruptIndexError(f"{directory}: manifest says {manifest.get('count')} x {manifest.get('dim')}, "
                                f"features hold {len(store)} x {store.dim}")
    extra = {k: v for k, v in manifest.items()
             if k not in ("format", "fingerprint", "dim", "count", "span", "rotations", "years")}
    matrix = store.values if mmap else np.ascontiguousarray(store.values)
    return TtaIndex(matrix, np.asarray(store.ids), np.asarray(store.years), np.asarray(store.rotations),
                    int(manifest["span"]), manifest["fingerprint"], extra)
