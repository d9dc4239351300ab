"""Recall@N scoring, naive baselines and binned diagnostics.

A prediction counts as correct when its region square overlaps the query
footprint with non-zero area; year and rotation of the entry are ignored.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from .geodesy import (
    OutOfRangeError,
    RegionId,
    footprints_overlap,
    haversine_km,
    mercator_forward,
    region_polygon,
    regions_containing,
)
from .index import Prediction, RotationTag

DEFAULT_NS = (1, 10, 100)


class MissingGroundTruthError(KeyError):
    pass


@lru_cache(maxsize=65536)
def _polygon(region: RegionId):
    return region_polygon(region)


def is_correct(region: RegionId, query) -> bool:
    return footprints_overlap(_polygon(region), query.footprint)


@dataclass
class RecallReport:
    name: str
    ns: tuple
    recalls: dict  # N -> percentage
    first_hit: dict  # query id -> 1-based rank of first correct prediction, or None
    fingerprint: str = ""
    notes: dict = field(default_factory=dict)

    def __getitem__(self, n: int) -> float:
        return self.recalls[n]

    @property
    def num_queries(self) -> int:
        return len(self.first_hit)

    def success_at(self, n: int) -> dict:
        return {q: r is not None and r <= n for q, r in self.first_hit.items()}

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "fingerprint": self.fingerprint,
            "num_queries": self.num_queries,
            "recall": {f"R@{n}": self.recalls[n] for n in self.ns},
            "first_hit": self.first_hit,
            **({"notes": self.notes} if self.notes else {}),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _recalls(first_hit: Mapping, ns) -> dict:
    total = len(first_hit)
    out = {}
    for n in ns:
        hits = sum(1 for r in first_hit.values() if r is not None and r <= n)
        out[n] = 100.0 * hits / total if total else 0.0
    return out


def score(predictions: Mapping[str, Sequence], queries, ns=DEFAULT_NS, name: str = "",
          fingerprint: str = "") -> RecallReport:
    """Recall@N for ``predictions`` (query id -> ranked predictions or regions)."""
    ns = tuple(sorted(set(int(n) for n in ns)))
    if not ns or ns[0] < 1:
        raise ValueError("N values must be positive")
    by_id = {q.id: q for q in queries}
    first_hit = {}
    for qid, preds in predictions.items():
        if qid not in by_id:
            raise MissingGroundTruthError(f"no ground truth for query {qid!r}")
        query = by_id[qid]
        hit = None
        for rank, p in enumerate(list(preds)[:ns[-1]], start=1):
            region = p.region if isinstance(p, Prediction) else p
            if is_correct(region, query):
                hit = rank
                break
        first_hit[qid] = hit
    return RecallReport(name, ns, _recalls(first_hit, ns), first_hit, fingerprint)


def format_table(reports: Sequence[RecallReport]) -> str:
    ns = sorted({n for r in reports for n in r.ns})
    width = max([len("method")] + [len(r.name) for r in reports])
    lines = [f"{'method':<{width}}  " + "  ".join(f"{'R@' + str(n):>7}" for n in ns)]
    for r in reports:
        cells = [f"{r.recalls[n]:7.1f}" if n in r.recalls else f"{'-':>7}" for n in ns]
        lines.append(f"{r.name:<{width}}  " + "  ".join(cells))
    return "\n".join(lines)


# --------------------------------------------------------------------------
# ground-truth sets
# --------------------------------------------------------------------------

def correct_matrix(queries, regions: Sequence[RegionId]) -> np.ndarray:
    """Boolean (queries x regions) overlap matrix with a bounding-box prefilter."""
    bounds = np.array([r.bounds() for r in regions], dtype=np.float64).reshape(-1, 4)
    out = np.zeros((len(queries), len(regions)), dtype=bool)
    for qi, q in enumerate(queries):
        pts = q.footprint.plane
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        near = np.zeros(len(regions), dtype=bool)
        for shift in (0.0, -1.0, 1.0):
            near |= ((bounds[:, 0] < hi[0] + shift) & (bounds[:, 2] > lo[0] + shift)
                     & (bounds[:, 1] < hi[1]) & (bounds[:, 3] > lo[1]))
        for ri in np.flatnonzero(near):
            out[qi, ri] = is_correct(regions[ri], q)
    return out


# --------------------------------------------------------------------------
# baselines
# --------------------------------------------------------------------------

def nadir_baseline(query, regions: Sequence[RegionId]) -> list[Prediction]:
    """Predict the coarsest database region containing the query's nadir point."""
    available = set(regions)
    zooms = sorted({r.zoom for r in regions})
    spans = sorted({r.span for r in regions})
    p = query.nadir
    for z in zooms:
        hits = []
        for span in spans:
            try:
                hits += [r for r in regions_containing(p, z, span) if r in available]
            except OutOfRangeError:
                return []
        if hits:
            cx, cy = mercator_forward(p)
            best = min(hits, key=lambda r: ((r.center_xy()[0] - cx) ** 2 + (r.center_xy()[1] - cy) ** 2, r))
            return [Prediction(1, best, 0, RotationTag.R0, 1.0)]
    return []


def expected_random_recall(num_regions: int, num_correct: int, n: int) -> float:
    """Chance that ``n`` distinct uniform picks include one of ``num_correct``."""
    if n >= num_regions:
        return 1.0 if num_correct else 0.0
    if num_correct == 0:
        return 0.0
    # 1 - C(M-k, n) / C(M, n), as a running product
    miss = 1.0
    for i in range(n):
        miss *= (num_regions - num_correct - i) / (num_regions - i)
        if miss <= 0:
            return 1.0
    return 1.0 - miss


def random_baseline(db_regions: Sequence[RegionId], queries, rng, trials: int = 100, ns=DEFAULT_NS,
                    correct=None, name: str = "random") -> RecallReport:
    """Monte-Carlo recall of uniform picks without replacement from ``db_regions``.

    ``recalls`` holds the trial average; ``notes['expected']`` the analytic value.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    ns = tuple(sorted(set(int(n) for n in ns)))
    m = len(db_regions)
    if correct is None:
        correct = correct_matrix(queries, db_regions)
    correct = np.asarray(correct, dtype=bool)
    sums = {n: 0.0 for n in ns}
    for _ in range(trials):
        # rank of every region in an independent random order per query
        ranks = np.argsort(rng.random(correct.shape), axis=1).argsort(axis=1) + 1
        first = np.where(correct, ranks, m + 1).min(axis=1)
        for n in ns:
            sums[n] += float(np.mean(first <= n)) if len(queries) else 0.0
    recalls = {n: 100.0 * sums[n] / trials for n in ns}
    k = correct.sum(axis=1)
    expected = {n: 100.0 * float(np.mean([expected_random_recall(m, int(kk), n) for kk in k])) if k.size else 0.0
                for n in ns}
    return RecallReport(name, ns, recalls, {q.id: None for q in queries},
                        notes={"expected": expected, "trials": trials})


# --------------------------------------------------------------------------
# binned diagnostics
# --------------------------------------------------------------------------

@dataclass
class BinnedReport:
    key: str
    edges: list
    counts: list
    recall: list  # percentage per bin, None for empty bins
    n: int = 1

    def to_dict(self) -> dict:
        return {"key": self.key, "n": self.n, "edges": self.edges, "counts": self.counts, "recall": self.recall}


def distance_from_nadir_km(query) -> float:
    return haversine_km(query.nadir, query.footprint.center_point())


def default_edges(key: str) -> np.ndarray:
    if key == "area":
        return np.geomspace(5000.0, 900000.0, 9)
    if key == "distance":
        return np.arange(0.0, 2750.0, 250.0)
    raise ValueError(f"unknown bin key {key!r}")


def binned_recall(report: RecallReport, queries, key: str = "distance", edges=None, n: int = 1) -> BinnedReport:
    """Recall@n per bin of distance-from-nadir (km) or footprint area (km^2).

    Outer edges are widened to cover every observed value, so counts always
    sum to the number of scored queries.
    """
    by_id = {q.id: q for q in queries}
    ids = list(report.first_hit)
    if key == "distance":
        values = np.array([distance_from_nadir_km(by_id[i]) for i in ids])
    elif key == "area":
        values = np.array([by_id[i].area_sqkm for i in ids])
    else:
        raise ValueError(f"unknown bin key {key!r}")
    edges = np.array(default_edges(key) if edges is None else edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("edges must be strictly increasing with at least two values")
    if values.size:
        edges[0] = min(edges[0], values.min())
        edges[-1] = max(edges[-1], values.max())
    which = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, edges.size - 2)
    hits = np.array([report.first_hit[i] is not None and report.first_hit[i] <= n for i in ids], dtype=bool)
    counts, recall = [], []
    for b in range(edges.size - 1):
        sel = which == b
        c = int(sel.sum())
        counts.append(c)
        recall.append(100.0 * float(hits[sel].mean()) if c else None)
    return BinnedReport(key, edges.tolist(), counts, recall, n)


def plot_binned(binned: BinnedReport, path) -> None:
    """Bar chart of per-bin recall, written as SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    edges = np.asarray(binned.edges)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    heights = [r if r is not None else 0.0 for r in binned.recall]
    ax.bar(edges[:-1], heights, width=np.diff(edges), align="edge", edgecolor="black")
    if binned.key == "area":
        ax.set_xscale("log")
        ax.set_xlabel("footprint area (km$^2$)")
    else:
        ax.set_xlabel("distance from nadir (km)")
    ax.set_ylabel(f"R@{binned.n} (%)")
    ax.set_ylim(0, 100)
    for x0, x1, c in zip(edges[:-1], edges[1:], binned.counts):
        ax.annotate(str(c), (math.sqrt(x0 * x1) if binned.key == "area" and x0 > 0 else (x0 + x1) / 2, 2),
                    ha="center", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
