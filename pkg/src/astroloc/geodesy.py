"""Spherical geometry, Web Mercator tiling and region relations.

All polygon work happens in the normalized Web Mercator plane, where
``(0, 0)`` is the top-left corner of the world map and ``(1, 1)`` the
bottom-right one. Regions are squares on a half-stride grid: a region at
zoom ``z`` spans ``span`` standard 256 px tiles per side and neighbouring
grid positions are offset by half a side, so axis neighbours share 50% of
their area and diagonal neighbours 25%.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

EARTH_RADIUS_KM = 6371.0
ISS_ALTITUDE_KM = 450.0
SEARCH_RADIUS_KM = 2500.0
MERCATOR_MAX_LAT = math.degrees(math.atan(math.sinh(math.pi)))

# overlap depth below this (normalized Mercator units, ~4 cm on the ground)
# counts as touching, not intersecting
_PLANE_TOL = 1e-12


class OutOfRangeError(ValueError):
    pass


class DegenerateFootprintError(ValueError):
    pass


def _check_finite(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value!r}")
    return value


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        lat = _check_finite("lat", self.lat)
        lon = _check_finite("lon", self.lon)
        if not -90.0 <= lat <= 90.0:
            raise OutOfRangeError(f"latitude {lat} outside [-90, 90]")
        lon = (lon + 180.0) % 360.0 - 180.0
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)


@dataclass(frozen=True)
class VisibilityParams:
    earth_radius_km: float = EARTH_RADIUS_KM
    orbit_altitude_km: float = ISS_ALTITUDE_KM
    search_radius_km: float = SEARCH_RADIUS_KM

    def __post_init__(self):
        if self.earth_radius_km <= 0 or self.orbit_altitude_km < 0 or self.search_radius_km <= 0:
            raise ValueError("visibility parameters out of range")
        if self.search_radius_km < self.visible_km - 100.0:
            raise ValueError(
                f"search radius {self.search_radius_km} km is far below the "
                f"horizon distance {self.visible_km:.1f} km"
            )

    @property
    def visible_km(self) -> float:
        return visible_distance(self.earth_radius_km, self.orbit_altitude_km)


def visible_distance(radius_km: float, altitude_km: float) -> float:
    """Distance to the horizon, ``sqrt(2 R h + h^2)``, from altitude ``h``."""
    r = _check_finite("radius_km", radius_km)
    h = _check_finite("altitude_km", altitude_km)
    if r <= 0 or h < 0:
        raise ValueError(f"need radius > 0 and altitude >= 0, got {r}, {h}")
    return math.sqrt(2.0 * r * h + h * h)


def haversine_km(a: GeoPoint, b: GeoPoint, radius_km: float = EARTH_RADIUS_KM) -> float:
    return float(haversine_km_arrays(a.lat, a.lon, b.lat, b.lon, radius_km))


def haversine_km_arrays(lat1, lon1, lat2, lon2, radius_km: float = EARTH_RADIUS_KM):
    """Vectorised great-circle distance; inputs broadcast like numpy arrays."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(np.asarray(lon2) - np.asarray(lon1))
    h = np.sin(dp / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2.0) ** 2
    return 2.0 * radius_km * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


# --------------------------------------------------------------------------
# Web Mercator
# --------------------------------------------------------------------------

def lonlat_to_xy(lat, lon):
    """Array form of :func:`mercator_forward` (no range checks)."""
    lat = np.asarray(lat, dtype=np.float64)
    x = (np.asarray(lon, dtype=np.float64) + 180.0) / 360.0
    y = (1.0 - np.arcsinh(np.tan(np.radians(lat))) / np.pi) / 2.0
    return x, y


def xy_to_lonlat(x, y):
    """Array form of :func:`mercator_inverse`; returns ``(lat, lon)``."""
    lon = np.asarray(x, dtype=np.float64) * 360.0 - 180.0
    lat = np.degrees(np.arctan(np.sinh(np.pi * (1.0 - 2.0 * np.asarray(y, dtype=np.float64)))))
    return lat, lon


def mercator_forward(p: GeoPoint) -> tuple[float, float]:
    if abs(p.lat) > MERCATOR_MAX_LAT + 1e-9:
        raise OutOfRangeError(f"latitude {p.lat} beyond the Mercator cap {MERCATOR_MAX_LAT:.4f}")
    x, y = lonlat_to_xy(p.lat, p.lon)
    return float(x), float(min(max(y, 0.0), 1.0))


def mercator_inverse(x: float, y: float) -> GeoPoint:
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise OutOfRangeError(f"normalized coordinates ({x}, {y}) outside the unit square")
    lat, lon = xy_to_lonlat(x, y)
    return GeoPoint(float(lat), float(lon))


# --------------------------------------------------------------------------
# footprints
# --------------------------------------------------------------------------

def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _segments_cross(p1, p2, p3, p4) -> bool:
    d1 = _cross(p3, p4, p1)
    d2 = _cross(p3, p4, p2)
    d3 = _cross(p1, p2, p3)
    d4 = _cross(p1, p2, p4)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and 0 not in (d1, d2, d3, d4)


def polygon_area(pts: np.ndarray) -> float:
    """Signed shoelace area of a closed ring given as an ``(n, 2)`` array."""
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


@dataclass(frozen=True)
class Footprint:
    corners: tuple[GeoPoint, GeoPoint, GeoPoint, GeoPoint]
    center: GeoPoint | None = field(default=None, compare=False)

    def __post_init__(self):
        corners = tuple(self.corners)
        if len(corners) != 4:
            raise ValueError(f"a footprint needs 4 corners, got {len(corners)}")
        object.__setattr__(self, "corners", corners)
        p = self.plane
        if _segments_cross(p[0], p[1], p[2], p[3]) or _segments_cross(p[1], p[2], p[3], p[0]):
            raise ValueError("footprint corners form a self-intersecting quadrilateral")

    @classmethod
    def from_latlon(cls, pairs: Sequence[tuple[float, float]], center=None) -> "Footprint":
        corners = tuple(GeoPoint(lat, lon) for lat, lon in pairs)
        if center is not None and not isinstance(center, GeoPoint):
            center = GeoPoint(*center)
        return cls(corners, center)

    @cached_property
    def plane(self) -> np.ndarray:
        """Corners in the Mercator plane with antimeridian unwrapping.

        Footprints that straddle +-180 deg get their western-hemisphere
        corners shifted by one world width, so x may exceed 1.
        """
        lat = np.array([c.lat for c in self.corners])
        lon = np.array([c.lon for c in self.corners])
        if np.abs(lat).max() > MERCATOR_MAX_LAT:
            raise OutOfRangeError("footprint corner beyond the Mercator cap")
        x, y = lonlat_to_xy(lat, lon)
        if x.max() - x.min() > 0.5:
            x = np.where(x < 0.5, x + 1.0, x)
        return np.column_stack([x, y])

    @cached_property
    def convex_parts(self) -> tuple[np.ndarray, ...]:
        pts = self.plane
        area = polygon_area(pts)
        if abs(area) <= 1e-20:
            raise DegenerateFootprintError("footprint has zero area")
        if area < 0:
            pts = pts[::-1]
        turns = [_cross(pts[i - 1], pts[i], pts[(i + 1) % 4]) for i in range(4)]
        reflex = [i for i, t in enumerate(turns) if t < 0]
        if not reflex:
            return (pts,)
        r = reflex[0]
        idx = [(r + k) % 4 for k in range(4)]
        return (pts[[idx[0], idx[1], idx[2]]], pts[[idx[0], idx[2], idx[3]]])

    @property
    def area_plane(self) -> float:
        return abs(polygon_area(self.plane))

    def center_point(self) -> GeoPoint:
        """The stored center, or the Mercator centroid of the corners."""
        if self.center is not None:
            return self.center
        p = self.plane
        lat, lon = xy_to_lonlat(p[:, 0].mean() % 1.0, p[:, 1].mean())
        return GeoPoint(float(lat), float(lon))


def _convex_overlap(a: np.ndarray, b: np.ndarray, tol: float = _PLANE_TOL) -> bool:
    """Separating-axis test; ``True`` only for positive-area intersection."""
    for poly in (a, b):
        n = len(poly)
        for i in range(n):
            ex, ey = poly[(i + 1) % n] - poly[i]
            norm = math.hypot(ex, ey)
            if norm == 0.0:
                continue
            axis = np.array([-ey / norm, ex / norm])
            pa = a @ axis
            pb = b @ axis
            if pa.max() <= pb.min() + tol or pb.max() <= pa.min() + tol:
                return False
    return True


def footprints_overlap(a: Footprint, b: Footprint) -> bool:
    """True iff the two quadrilaterals share a positive-area region."""
    parts_a = a.convex_parts
    parts_b = b.convex_parts
    for shift in (0.0, -1.0, 1.0):
        offset = np.array([shift, 0.0])
        for pa in parts_a:
            for pb in parts_b:
                qb = pb + offset
                if pa[:, 0].max() <= qb[:, 0].min() or qb[:, 0].max() <= pa[:, 0].min():
                    continue
                if _convex_overlap(pa, qb):
                    return True
    return False


# --------------------------------------------------------------------------
# regions
# --------------------------------------------------------------------------

class Relation(enum.IntEnum):
    POSITIVE = 1
    NEUTRAL = 0
    NEGATIVE = -1


@dataclass(frozen=True, order=True)
class RegionId:
    """Square region on the half-stride grid at one zoom level.

    ``span`` is the region side in standard 256 px tiles (``image_px / 256``),
    so a 1024 px region image at zoom 9 covers 4x4 zoom-9 tiles.
    """

    zoom: int
    ix: int
    iy: int
    span: int = 4

    def __post_init__(self):
        if self.zoom < 0 or self.zoom > 24:
            raise ValueError(f"zoom {self.zoom} out of range")
        if self.span < 1 or self.span & (self.span - 1) or self.span > 2 ** self.zoom:
            raise ValueError(f"span {self.span} must be a power of two <= 2**zoom")
        n = self.positions(self.zoom, self.span)
        if not (0 <= self.ix < n and 0 <= self.iy < n):
            raise ValueError(f"grid index ({self.ix}, {self.iy}) outside [0, {n}) at zoom {self.zoom}")

    @staticmethod
    def positions(zoom: int, span: int = 4) -> int:
        """Number of half-stride positions along one axis."""
        return 2 * (2 ** zoom // span) - 1

    @property
    def side(self) -> float:
        return self.span / 2 ** self.zoom

    @property
    def stride(self) -> float:
        return self.side / 2.0

    def bounds(self) -> tuple[float, float, float, float]:
        """``(x0, y0, x1, y1)`` in the normalized Mercator plane."""
        x0 = self.ix * self.stride
        y0 = self.iy * self.stride
        return x0, y0, x0 + self.side, y0 + self.side

    def center_xy(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.bounds()
        return (x0 + x1) / 2.0, (y0 + y1) / 2.0

    def center(self) -> GeoPoint:
        return mercator_inverse(*self.center_xy())

    def key(self) -> int:
        """Pack into a 64-bit integer (span is not encoded)."""
        return (self.zoom << 56) | (self.ix << 28) | self.iy

    @classmethod
    def from_key(cls, key: int, span: int = 4) -> "RegionId":
        key = int(key)
        return cls(key >> 56, (key >> 28) & 0x0FFFFFFF, key & 0x0FFFFFFF, span)

    def __str__(self):
        return f"{self.zoom}/{self.ix}/{self.iy}"


def region_polygon(r: RegionId) -> Footprint:
    x0, y0, x1, y1 = r.bounds()
    corners = tuple(mercator_inverse(x, y) for x, y in ((x0, y0), (x1, y0), (x1, y1), (x0, y1)))
    return Footprint(corners, r.center())


def region_area_sqkm(r: RegionId, radius_km: float = EARTH_RADIUS_KM) -> float:
    """Exact spherical area of the region's Mercator square."""
    x0, y0, x1, y1 = r.bounds()
    lat_n, _ = xy_to_lonlat(0.0, y0)
    lat_s, _ = xy_to_lonlat(0.0, y1)
    dlon = (x1 - x0) * 2.0 * math.pi
    return radius_km ** 2 * dlon * (math.sin(math.radians(lat_n)) - math.sin(math.radians(lat_s)))


def _integer_bounds(zoom, ix, iy, span, level):
    # corners as integer multiples of 2**-level; exact for level > max zoom
    scale = np.left_shift(np.int64(1), (level - np.asarray(zoom, dtype=np.int64) - 1))
    unit = np.asarray(span, dtype=np.int64) * scale
    x0 = np.asarray(ix, dtype=np.int64) * unit
    y0 = np.asarray(iy, dtype=np.int64) * unit
    return x0, y0, x0 + 2 * unit, y0 + 2 * unit


def region_relation(a: RegionId, b: RegionId) -> Relation:
    """Positive for identical squares, Neutral for partial overlap, else Negative.

    Touching edges do not count as overlap.
    """
    level = max(a.zoom, b.zoom) + 1
    ax0, ay0, ax1, ay1 = (int(v) for v in _integer_bounds(a.zoom, a.ix, a.iy, a.span, level))
    bx0, by0, bx1, by1 = (int(v) for v in _integer_bounds(b.zoom, b.ix, b.iy, b.span, level))
    if (ax0, ay0, ax1, ay1) == (bx0, by0, bx1, by1):
        return Relation.POSITIVE
    if ax0 < bx1 and bx0 < ax1 and ay0 < by1 and by0 < ay1:
        return Relation.NEUTRAL
    return Relation.NEGATIVE


def neutral_indicator(a: RegionId, b: RegionId) -> int:
    """0 for partially overlapping distinct regions, 1 otherwise."""
    return 0 if region_relation(a, b) is Relation.NEUTRAL else 1


def relation_matrix(regions: Sequence[RegionId]) -> np.ndarray:
    """Pairwise relation codes (int8) for a batch of region labels."""
    if len(regions) == 0:
        return np.zeros((0, 0), dtype=np.int8)
    zoom = np.array([r.zoom for r in regions])
    ix = np.array([r.ix for r in regions])
    iy = np.array([r.iy for r in regions])
    span = np.array([r.span for r in regions])
    x0, y0, x1, y1 = _integer_bounds(zoom, ix, iy, span, int(zoom.max()) + 1)
    same = (x0[:, None] == x0) & (y0[:, None] == y0) & (x1[:, None] == x1) & (y1[:, None] == y1)
    inter = (x0[:, None] < x1) & (x0 < x1[:, None]) & (y0[:, None] < y1) & (y0 < y1[:, None])
    out = np.full(same.shape, Relation.NEGATIVE, dtype=np.int8)
    out[inter] = Relation.NEUTRAL
    out[same] = Relation.POSITIVE
    return out


def overlap_fraction(a: RegionId, b: RegionId) -> float:
    """Shared Mercator-plane area as a fraction of ``a``'s area (exact)."""
    level = max(a.zoom, b.zoom) + 1
    ua = a.span << (level - a.zoom - 1)  # half-stride in units of 2**-level
    ub = b.span << (level - b.zoom - 1)
    ax0, ay0, bx0, by0 = a.ix * ua, a.iy * ua, b.ix * ub, b.iy * ub
    w = max(0, min(ax0 + 2 * ua, bx0 + 2 * ub) - max(ax0, bx0))
    h = max(0, min(ay0 + 2 * ua, by0 + 2 * ub) - max(ay0, by0))
    return w * h / (4 * ua * ua)


def lat_band_rows(zoom: int, span: int, lat_limit_deg: float) -> range:
    """Grid rows ``iy`` whose squares lie fully inside ``|lat| <= lat_limit``."""
    _, y_top = lonlat_to_xy(lat_limit_deg, 0.0)
    _, y_bot = lonlat_to_xy(-lat_limit_deg, 0.0)
    side = span / 2 ** zoom
    stride = side / 2.0
    first = math.ceil(float(y_top) / stride - 1e-9)
    last = math.floor((float(y_bot) - side) / stride + 1e-9)
    last = min(last, RegionId.positions(zoom, span) - 1)
    return range(max(first, 0), last + 1)


def regions_containing(p: GeoPoint, zoom: int, span: int = 4) -> list[RegionId]:
    """All grid regions at ``zoom`` whose closed square contains ``p``."""
    x, y = mercator_forward(p)
    side = span / 2 ** zoom
    stride = side / 2.0
    n = RegionId.positions(zoom, span)

    def axis(v):
        lo = max(math.ceil((v - side) / stride - 1e-12), 0)
        hi = min(math.floor(v / stride + 1e-12), n - 1)
        return range(lo, hi + 1)

    return [RegionId(zoom, i, j, span) for j in axis(y) for i in axis(x)]
