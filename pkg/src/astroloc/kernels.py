"""Hot numeric kernels, each with a compiled loop form and a numpy twin.

The public names at the bottom of the module dispatch to one or the other
according to :data:`astroloc._accel.USE_NUMBA`. Both forms are importable
directly (``*_nb`` / ``*_np``) so tests and the benchmark can compare them.

Relation codes used by the loss kernels: ``1`` positive, ``0`` neutral,
``-1`` negative.
"""
import math

import numpy as np

from ._accel import USE_NUMBA, njit

POSITIVE = 1
NEUTRAL = 0
NEGATIVE = -1


# --------------------------------------------------------------------------
# block statistics (baseline extractor)
# --------------------------------------------------------------------------

@njit
def block_stats_nb(img, grid, bins):
    h, w, _ = img.shape
    per_block = 6 + bins
    out = np.zeros(grid * grid * per_block)
    gray = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            gray[y, x] = (img[y, x, 0] + img[y, x, 1] + img[y, x, 2]) / 3.0
    two_pi = 2.0 * math.pi
    for by in range(grid):
        y0 = by * h // grid
        y1 = (by + 1) * h // grid
        for bx in range(grid):
            x0 = bx * w // grid
            x1 = (bx + 1) * w // grid
            base = (by * grid + bx) * per_block
            npx = (y1 - y0) * (x1 - x0)
            for c in range(3):
                s = 0.0
                for y in range(y0, y1):
                    for x in range(x0, x1):
                        s += img[y, x, c]
                m = s / npx
                v = 0.0
                for y in range(y0, y1):
                    for x in range(x0, x1):
                        d = img[y, x, c] - m
                        v += d * d
                out[base + c] = m
                out[base + 3 + c] = v / npx
            for y in range(y0, y1):
                ym = y - 1 if y > 0 else 0
                yp = y + 1 if y < h - 1 else h - 1
                for x in range(x0, x1):
                    xm = x - 1 if x > 0 else 0
                    xp = x + 1 if x < w - 1 else w - 1
                    gx = (gray[y, xp] - gray[y, xm]) * 0.5
                    gy = (gray[yp, x] - gray[ym, x]) * 0.5
                    mag = math.sqrt(gx * gx + gy * gy)
                    if mag == 0.0:
                        continue
                    theta = math.atan2(gy, gx) + math.pi
                    b = int(theta / two_pi * bins)
                    if b >= bins:
                        b = bins - 1
                    out[base + 6 + b] += mag
            for b in range(bins):
                out[base + 6 + b] /= npx
    return out


def block_stats_np(img, grid, bins):
    h, w, _ = img.shape
    per_block = 6 + bins
    gray = (img[..., 0] + img[..., 1] + img[..., 2]) / 3.0
    padded = np.pad(gray, 1, mode="edge")
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) * 0.5
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) * 0.5
    mag = np.sqrt(gx * gx + gy * gy)
    theta = np.arctan2(gy, gx) + np.pi
    bin_idx = np.minimum((theta / (2.0 * np.pi) * bins).astype(np.int64), bins - 1)
    out = np.zeros(grid * grid * per_block)
    for by in range(grid):
        y0, y1 = by * h // grid, (by + 1) * h // grid
        for bx in range(grid):
            x0, x1 = bx * w // grid, (bx + 1) * w // grid
            base = (by * grid + bx) * per_block
            block = img[y0:y1, x0:x1].reshape(-1, 3)
            npx = block.shape[0]
            m = block.sum(axis=0) / npx
            out[base:base + 3] = m
            out[base + 3:base + 6] = ((block - m) ** 2).sum(axis=0) / npx
            bm = mag[y0:y1, x0:x1].ravel()
            bi = bin_idx[y0:y1, x0:x1].ravel()
            out[base + 6:base + per_block] = np.bincount(bi, weights=bm, minlength=bins) / npx
    return out


# --------------------------------------------------------------------------
# multi-similarity loss with neutral pairs
# --------------------------------------------------------------------------

@njit
def ms_loss_grad_nb(S, rel, alpha, beta, lam):
    n = S.shape[0]
    grad = np.zeros((n, n))
    total = 0.0
    for i in range(n):
        # positive term: logsumexp over {0} U {-alpha (S_ik - lam)}
        mx = 0.0
        for k in range(n):
            if k != i and rel[i, k] == 1:
                z = -alpha * (S[i, k] - lam)
                if z > mx:
                    mx = z
        acc = math.exp(-mx)
        for k in range(n):
            if k != i and rel[i, k] == 1:
                acc += math.exp(-alpha * (S[i, k] - lam) - mx)
        total += (mx + math.log(acc)) / alpha
        for k in range(n):
            if k != i and rel[i, k] == 1:
                grad[i, k] = -math.exp(-alpha * (S[i, k] - lam) - mx) / acc

        mx = 0.0
        for k in range(n):
            if k != i and rel[i, k] == -1:
                z = beta * (S[i, k] - lam)
                if z > mx:
                    mx = z
        acc = math.exp(-mx)
        for k in range(n):
            if k != i and rel[i, k] == -1:
                acc += math.exp(beta * (S[i, k] - lam) - mx)
        total += (mx + math.log(acc)) / beta
        for k in range(n):
            if k != i and rel[i, k] == -1:
                grad[i, k] = math.exp(beta * (S[i, k] - lam) - mx) / acc
    for i in range(n):
        for k in range(n):
            grad[i, k] /= n
    return total / n, grad


def _masked_lse_with_one(z, mask):
    """Row-wise ``log(1 + sum_k exp(z_ik))`` over ``mask`` plus softmax weights."""
    zm = np.where(mask, z, -np.inf)
    mx = np.maximum(zm.max(axis=1), 0.0)
    e = np.where(mask, np.exp(zm - mx[:, None]), 0.0)
    acc = np.exp(-mx) + e.sum(axis=1)
    return mx + np.log(acc), e / acc[:, None]


def ms_loss_grad_np(S, rel, alpha, beta, lam):
    n = S.shape[0]
    off = ~np.eye(n, dtype=bool)
    pos = (rel == POSITIVE) & off
    neg = (rel == NEGATIVE) & off
    lse_p, w_p = _masked_lse_with_one(-alpha * (S - lam), pos)
    lse_n, w_n = _masked_lse_with_one(beta * (S - lam), neg)
    loss = (lse_p / alpha + lse_n / beta).sum() / n
    grad = (w_n - w_p) / n
    return loss, grad


# --------------------------------------------------------------------------
# exact inner-product scan
# --------------------------------------------------------------------------

@njit
def dot_scores_nb(matrix, q):
    n, d = matrix.shape
    out = np.empty(n)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += matrix[i, j] * q[j]
        out[i] = s
    return out


def dot_scores_np(matrix, q, chunk=65536):
    out = np.empty(matrix.shape[0])
    for start in range(0, matrix.shape[0], chunk):
        block = matrix[start:start + chunk].astype(np.float64)
        out[start:start + chunk] = block @ q
    return out


# --------------------------------------------------------------------------
# k-means assignment step
# --------------------------------------------------------------------------

@njit
def assign_nearest_nb(X, centroids):
    n, d = X.shape
    k = centroids.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n)
    for i in range(n):
        best = np.inf
        arg = 0
        for c in range(k):
            s = 0.0
            for j in range(d):
                t = X[i, j] - centroids[c, j]
                s += t * t
            if s < best:
                best = s
                arg = c
        labels[i] = arg
        dists[i] = best
    return labels, dists


def assign_nearest_np(X, centroids, chunk=1024):
    n = X.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n)
    for start in range(0, n, chunk):
        diff = X[start:start + chunk, None, :] - centroids[None, :, :]
        d2 = (diff * diff).sum(axis=2)
        lab = np.argmin(d2, axis=1)
        labels[start:start + chunk] = lab
        dists[start:start + chunk] = d2[np.arange(lab.shape[0]), lab]
    return labels, dists


# --------------------------------------------------------------------------
# bilinear resampling with reflect boundary
# --------------------------------------------------------------------------

@njit
def _reflect(c, n):
    if n == 1:
        return 0.0
    period = 2.0 * (n - 1)
    c = abs(c) % period
    if c > n - 1:
        c = period - c
    return c


@njit
def remap_bilinear_nb(images, ys, xs):
    b, h, w, ch = images.shape
    oh, ow = ys.shape
    out = np.empty((b, oh, ow, ch), dtype=images.dtype)
    for y in range(oh):
        for x in range(ow):
            cy = _reflect(ys[y, x], h)
            cx = _reflect(xs[y, x], w)
            y0 = int(math.floor(cy))
            x0 = int(math.floor(cx))
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            x1 = x0 + 1 if x0 + 1 < w else w - 1
            wy = cy - y0
            wx = cx - x0
            for i in range(b):
                for c in range(ch):
                    top = images[i, y0, x0, c] * (1.0 - wx) + images[i, y0, x1, c] * wx
                    bot = images[i, y1, x0, c] * (1.0 - wx) + images[i, y1, x1, c] * wx
                    out[i, y, x, c] = top * (1.0 - wy) + bot * wy
    return out


def _reflect_np(c, n):
    if n == 1:
        return np.zeros_like(c)
    period = 2.0 * (n - 1)
    c = np.abs(c) % period
    return np.where(c > n - 1, period - c, c)


def remap_bilinear_np(images, ys, xs):
    _, h, w, _ = images.shape
    cy = _reflect_np(ys, h)
    cx = _reflect_np(xs, w)
    y0 = np.floor(cy).astype(np.int64)
    x0 = np.floor(cx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (cy - y0)[None, :, :, None]
    wx = (cx - x0)[None, :, :, None]
    top = images[:, y0, x0] * (1.0 - wx) + images[:, y0, x1] * wx
    bot = images[:, y1, x0] * (1.0 - wx) + images[:, y1, x1] * wx
    return (top * (1.0 - wy) + bot * wy).astype(images.dtype)


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

if USE_NUMBA:
    block_stats = block_stats_nb
    ms_loss_grad = ms_loss_grad_nb
    dot_scores = dot_scores_nb
    assign_nearest = assign_nearest_nb
    remap_bilinear = remap_bilinear_nb
else:
    block_stats = block_stats_np
    ms_loss_grad = ms_loss_grad_np
    dot_scores = dot_scores_np
    assign_nearest = assign_nearest_np
    remap_bilinear = remap_bilinear_np
