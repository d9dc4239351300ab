"""Year-wise augmentation on raw RGB buffers.

Each training iteration samples one parameter set per year and applies it
to every image of that year, whatever its region. Images are float arrays
in ``[0, 1]`` with shape ``(batch, H, W, 3)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import kernels

# ITU-R 601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114])
_RGB2YIQ = np.array([[0.299, 0.587, 0.114],
                     [0.596, -0.274, -0.322],
                     [0.211, -0.523, 0.312]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


@dataclass(frozen=True)
class AugmentationRanges:
    brightness: float = 0.3
    contrast: float = 0.3
    saturation: float = 0.3
    hue: float = 0.05
    rotation_deg: float = 180.0
    perspective: float = 0.1
    zoom: float = 0.0  # view side drawn from [1 - zoom, 1] of the image side

    def __post_init__(self):
        if not 0.0 <= self.zoom < 1.0:
            raise ValueError("zoom must lie in [0, 1)")
        if not 0.0 <= self.perspective < 0.5:
            raise ValueError("perspective must lie in [0, 0.5)")

    @classmethod
    def none(cls) -> "AugmentationRanges":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class AugmentationParams:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0
    angle_deg: float = 0.0
    # inward displacement of (tl, tr, br, bl) corners as fractions of the side
    corner_shift: tuple = field(default=((0.0, 0.0),) * 4)
    # sub-square view: side fraction and its top-left offset, both in image sides
    scale: float = 1.0
    offset: tuple = (0.0, 0.0)

    @property
    def is_identity(self) -> bool:
        return (self.brightness == 1.0 and self.contrast == 1.0 and self.saturation == 1.0
                and self.hue == 0.0 and self.angle_deg == 0.0
                and all(v == 0.0 for c in self.corner_shift for v in c) and self.scale == 1.0)

    @property
    def moves_pixels(self) -> bool:
        return (self.angle_deg != 0.0 or self.scale != 1.0
                or any(v != 0.0 for c in self.corner_shift for v in c))


@dataclass(frozen=True)
class AugmentationPlan:
    params: dict  # year -> AugmentationParams

    def __getitem__(self, year):
        return self.params[year]


def sample_params(ranges: AugmentationRanges, rng) -> AugmentationParams:
    def factor(r):
        return 1.0 + rng.uniform(-r, r) if r > 0 else 1.0

    b, c, s = factor(ranges.brightness), factor(ranges.contrast), factor(ranges.saturation)
    hue = rng.uniform(-ranges.hue, ranges.hue) if ranges.hue > 0 else 0.0
    if ranges.rotation_deg > 0:
        angle = rng.uniform(-ranges.rotation_deg, ranges.rotation_deg)
    else:
        angle = 0.0
    if ranges.perspective > 0:
        shift = tuple((float(a), float(b_)) for a, b_ in rng.uniform(0.0, ranges.perspective, size=(4, 2)))
    else:
        shift = ((0.0, 0.0),) * 4
    scale, offset = 1.0, (0.0, 0.0)
    if ranges.zoom > 0:
        scale = float(rng.uniform(1.0 - ranges.zoom, 1.0))
        offset = tuple(float(v) for v in rng.uniform(0.0, 1.0 - scale, size=2))
    return AugmentationParams(b, c, s, hue, angle, shift, scale, offset)


# --------------------------------------------------------------------------
# colour
# --------------------------------------------------------------------------

def color_jitter(images: np.ndarray, p: AugmentationParams) -> np.ndarray:
    out = images
    if p.brightness != 1.0:
        out = out * p.brightness
    if p.contrast != 1.0:
        mean = (out @ _LUMA).mean(axis=(1, 2))[:, None, None, None]
        out = (out - mean) * p.contrast + mean
    if p.saturation != 1.0:
        gray = (out @ _LUMA)[..., None]
        out = gray + (out - gray) * p.saturation
    if p.hue != 0.0:
        t = 2.0 * math.pi * p.hue
        rot = np.array([[1.0, 0.0, 0.0],
                        [0.0, math.cos(t), -math.sin(t)],
                        [0.0, math.sin(t), math.cos(t)]])
        m = _YIQ2RGB @ rot @ _RGB2YIQ
        out = out @ m.T
    if out is images:
        return images
    return np.clip(out, 0.0, 1.0).astype(images.dtype)


# --------------------------------------------------------------------------
# geometry
# --------------------------------------------------------------------------

def homography(src, dst) -> np.ndarray:
    """3x3 projective map sending the four ``src`` points onto ``dst``."""
    A, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        A.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        A.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b += [u, v]
    h = np.linalg.solve(np.asarray(A, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def source_coords(size: int, p: AugmentationParams):
    """Per output pixel, the input ``(y, x)`` it samples from.

    The output is the perspective-warped view of a sub-square (``scale``,
    ``offset``) of the image rotated about its center; positive angles turn
    content counter-clockwise on screen.
    """
    n = size - 1
    ys, xs = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    if any(v != 0.0 for c in p.corner_shift for v in c):
        corners = np.array([[0, 0], [n, 0], [n, n], [0, n]], dtype=np.float64)
        inward = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=np.float64)
        moved = corners + inward * np.asarray(p.corner_shift) * n
        H = homography(moved, corners)  # output -> pre-perspective
        w = H[2, 0] * xs + H[2, 1] * ys + H[2, 2]
        xs, ys = (H[0, 0] * xs + H[0, 1] * ys + H[0, 2]) / w, (H[1, 0] * xs + H[1, 1] * ys + H[1, 2]) / w
    if p.scale != 1.0:
        xs = p.offset[0] * n + p.scale * xs
        ys = p.offset[1] * n + p.scale * ys
    if p.angle_deg != 0.0:
        t = math.radians(p.angle_deg)
        c, s = math.cos(t), math.sin(t)
        cx = cy = n / 2.0
        dx, dy = xs - cx, ys - cy
        xs, ys = cx + c * dx - s * dy, cy + s * dx + c * dy
    return ys, xs


def apply_params(images: np.ndarray, p: AugmentationParams) -> np.ndarray:
    """Apply one parameter set identically to a stack of images."""
    if p.is_identity:
        return images
    out = color_jitter(images, p)
    if p.moves_pixels:
        ys, xs = source_coords(images.shape[1], p)
        out = kernels.remap_bilinear(np.ascontiguousarray(out), ys, xs)
    return out


def yearwise_augment(images, years, ranges: AugmentationRanges, rng, known_years=None):
    """Sample one augmentation per year and apply it to all of that year's images.

    Returns the augmented stack and the :class:`AugmentationPlan` used.
    """
    images = np.asarray(images)
    years = np.asarray(years)
    if images.shape[0] != years.shape[0]:
        raise ValueError("one year tag per image expected")
    plan_years = sorted(set(int(y) for y in (known_years if known_years is not None else years)))
    unknown = set(int(y) for y in years) - set(plan_years)
    if unknown:
        raise ValueError(f"unknown year tags: {sorted(unknown)}")
    plan = AugmentationPlan({y: sample_params(ranges, rng) for y in plan_years})
    out = np.empty_like(images)
    for y in plan_years:
        sel = np.flatnonzero(years == y)
        if sel.size:
            out[sel] = apply_params(images[sel], plan[y])
    return out, plan


def per_image_augment(images, ranges: AugmentationRanges, rng):
    """Independent parameters for every image (the non-year-wise baseline)."""
    images = np.asarray(images)
    out = np.empty_like(images)
    params = []
    for i in range(images.shape[0]):
        p = sample_params(ranges, rng)
        params.append(p)
        out[i] = apply_params(images[i:i + 1], p)[0]
    return out, params
