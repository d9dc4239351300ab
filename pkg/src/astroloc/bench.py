"""Timing of the compiled kernels against their numpy twins.

Both forms run on the same inputs and their outputs are compared before any
timing is reported, so a fast but wrong kernel shows up as a mismatch.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import kernels
from ._accel import HAVE_NUMBA


@dataclass
class BenchResult:
    kernel: str
    size: str
    numpy_ms: float
    numba_ms: float | None
    max_abs_diff: float | None

    @property
    def speedup(self) -> float | None:
        if self.numba_ms is None or self.numba_ms <= 0:
            return None
        return self.numpy_ms / self.numba_ms


def _best_ms(fn, args, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return 1000.0 * best


def _diff(a, b) -> float:
    if isinstance(a, tuple):
        return max(_diff(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        return float("inf")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64))))


def cases(rng, scale: float = 1.0):
    """(name, size label, numba fn, numpy fn, args) for every kernel."""
    n_index = max(100, int(20000 * scale))
    n_img = max(2, int(32 * scale))
    out = []
    img = rng.random((64, 64, 3))
    out.append(("block_stats", "64x64 grid 8", kernels.block_stats_nb, kernels.block_stats_np, (img, 8, 8)))
    emb = rng.normal(size=(128, 64))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    S = emb @ emb.T
    labels = rng.integers(0, 32, 128)
    rel = np.where(labels[:, None] == labels[None, :], 1, -1).astype(np.int8)
    rel[rng.random(rel.shape) < 0.05] = 0
    rel = np.triu(rel, 1) + np.triu(rel, 1).T
    np.fill_diagonal(rel, 1)
    out.append(("ms_loss_grad", "batch 128", kernels.ms_loss_grad_nb, kernels.ms_loss_grad_np,
                (S, rel, 2.0, 50.0, 1.0)))
    matrix = rng.normal(size=(n_index, 256)).astype(np.float32)
    q = rng.normal(size=256)
    out.append(("dot_scores", f"{n_index} x 256", kernels.dot_scores_nb, kernels.dot_scores_np, (matrix, q)))
    X = rng.normal(size=(2000, 64))
    C = rng.normal(size=(50, 64))
    out.append(("assign_nearest", "2000 x 50 x 64", kernels.assign_nearest_nb, kernels.assign_nearest_np, (X, C)))
    images = rng.random((n_img, 64, 64, 3)).astype(np.float32)
    yy, xx = np.meshgrid(np.arange(64.0), np.arange(64.0), indexing="ij")
    t = 0.3
    ys = 32 + (yy - 32) * np.cos(t) - (xx - 32) * np.sin(t)
    xs = 32 + (yy - 32) * np.sin(t) + (xx - 32) * np.cos(t)
    out.append(("remap_bilinear", f"{n_img} x 64x64", kernels.remap_bilinear_nb, kernels.remap_bilinear_np,
                (images, ys, xs)))
    return out


def run_benchmarks(repeat: int = 5, scale: float = 1.0, seed: int = 0) -> list[BenchResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, size, fn_nb, fn_np, args in cases(rng, scale):
        np_ms = _best_ms(fn_np, args, repeat)
        nb_ms = diff = None
        if HAVE_NUMBA:
            fn_nb(*args)  # compile outside the timing
            nb_ms = _best_ms(fn_nb, args, repeat)
            diff = _diff(fn_nb(*args), fn_np(*args))
        results.append(BenchResult(name, size, np_ms, nb_ms, diff))
    return results


def format_results(results) -> str:
    lines = [f"{'kernel':<16} {'size':<16} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max diff':>10}"]
    for r in results:
        nb = f"{r.numba_ms:10.3f}" if r.numba_ms is not None else f"{'n/a':>10}"
        sp = f"{r.speedup:8.2f}" if r.speedup is not None else f"{'n/a':>8}"
        df = f"{r.max_abs_diff:10.2e}" if r.max_abs_diff is not None else f"{'n/a':>10}"
        lines.append(f"{r.kernel:<16} {r.size:<16} {r.numpy_ms:10.3f} {nb} {sp} {df}")
    if not HAVE_NUMBA:
        lines.append("numba is not installed; only the numpy kernels were timed")
    return "\n".join(lines)
