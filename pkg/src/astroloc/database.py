"""Region grid enumeration, year quadruplets, query catalogs and eval sets."""
from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .geodesy import (
    Footprint,
    GeoPoint,
    RegionId,
    VisibilityParams,
    haversine_km_arrays,
    lat_band_rows,
    xy_to_lonlat,
)

DEFAULT_YEARS = (2018, 2019, 2020, 2021)
MIN_QUERY_AREA_SQKM = 5000.0
MAX_QUERY_AREA_SQKM = 900_000.0


class CatalogError(ValueError):
    """Malformed query catalog; message names the line and field."""


@dataclass(frozen=True)
class TilingConfig:
    zooms: tuple[int, ...] = (9, 10, 11)
    lat_limit_deg: float = 60.0
    years: tuple[int, ...] = DEFAULT_YEARS
    image_px: int = 1024

    def __post_init__(self):
        object.__setattr__(self, "zooms", tuple(sorted(set(int(z) for z in self.zooms))))
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))
        if not self.zooms:
            raise ValueError("at least one zoom level is required")
        if not self.years or len(set(self.years)) != len(self.years):
            raise ValueError("years must be non-empty and distinct")
        px = int(self.image_px)
        if px <= 0 or px & (px - 1):
            raise ValueError(f"image_px must be a positive power of two, got {px}")
        if not 0 < self.lat_limit_deg < 85.0:
            raise ValueError("lat_limit_deg must be in (0, 85)")

    @property
    def span(self) -> int:
        """Region side in 256 px tiles."""
        return max(1, self.image_px // 256)


class LandMask:
    """Predicate over points deciding which regions enter the database.

    Subclasses override :meth:`contains_arrays` for speed; the default
    accepts everything.
    """

    def __call__(self, p: GeoPoint) -> bool:
        return bool(self.contains_arrays(np.array([p.lat]), np.array([p.lon]))[0])

    def contains_arrays(self, lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
        return np.ones(np.shape(lat), dtype=bool)


class PredicateMask(LandMask):
    def __init__(self, predicate: Callable[[GeoPoint], bool]):
        self.predicate = predicate

    def contains_arrays(self, lat, lon):
        return np.array([bool(self.predicate(GeoPoint(a, o))) for a, o in zip(lat, lon)], dtype=bool)


class BoxMask(LandMask):
    """Accept points inside a lat/lon box (no antimeridian wrap)."""

    def __init__(self, lat_min, lat_max, lon_min, lon_max):
        self.bounds = (lat_min, lat_max, lon_min, lon_max)

    def contains_arrays(self, lat, lon):
        a, b, c, d = self.bounds
        lat, lon = np.asarray(lat), np.asarray(lon)
        return (lat >= a) & (lat <= b) & (lon >= c) & (lon <= d)


ACCEPT_ALL = LandMask()


def band_region_count(zoom: int, span: int, lat_limit_deg: float) -> int:
    """Closed-form size of the unmasked grid at one zoom."""
    return RegionId.positions(zoom, span) * len(lat_band_rows(zoom, span, lat_limit_deg))


def enumerate_regions(cfg: TilingConfig, mask: LandMask = ACCEPT_ALL) -> list[RegionId]:
    """All grid regions inside the latitude band whose center passes ``mask``.

    Ordered by (zoom, iy, ix).
    """
    span = cfg.span
    out: list[RegionId] = []
    for z in cfg.zooms:
        if span > 2 ** z:
            raise ValueError(f"image_px {cfg.image_px} too large for zoom {z}")
        rows = lat_band_rows(z, span, cfg.lat_limit_deg)
        if len(rows) == 0:
            continue
        n = RegionId.positions(z, span)
        stride = span / 2 ** z / 2.0
        iy, ix = np.meshgrid(np.arange(rows.start, rows.stop), np.arange(n), indexing="ij")
        cy = (iy + 1) * stride
        cx = (ix + 1) * stride
        lat, lon = xy_to_lonlat(cx, cy)
        lon = (lon + 180.0) % 360.0 - 180.0
        keep = mask.contains_arrays(lat.ravel(), lon.ravel())
        for j, i in zip(iy.ravel()[keep], ix.ravel()[keep]):
            out.append(RegionId(z, int(i), int(j), span))
    return out


@dataclass(frozen=True)
class ImageRef:
    region: RegionId
    year: int

    @property
    def key(self) -> str:
        return f"{self.year}/{self.region.zoom}/{self.region.ix}/{self.region.iy}"


@dataclass(frozen=True)
class Quadruplet:
    region: RegionId
    images: tuple[ImageRef, ...]

    def __post_init__(self):
        years = [im.year for im in self.images]
        if len(set(years)) != len(years):
            raise ValueError("one image per year expected")
        if any(im.region != self.region for im in self.images):
            raise ValueError("all images of a quadruplet share its region")


def build_quadruplets(regions: Sequence[RegionId], cfg: TilingConfig) -> list[Quadruplet]:
    if len(regions) == 0:
        raise ValueError("no regions to build quadruplets from")
    return [Quadruplet(r, tuple(ImageRef(r, y) for y in cfg.years)) for r in regions]


# --------------------------------------------------------------------------
# query catalog
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class QueryRecord:
    id: str
    nadir: GeoPoint
    timestamp: dt.datetime
    footprint: Footprint
    area_sqkm: float
    focal_length_mm: float | None = None

    def __post_init__(self):
        if not self.area_sqkm > 0:
            raise ValueError(f"query {self.id}: area must be positive")
        if self.timestamp.tzinfo is None:
            raise ValueError(f"query {self.id}: timestamp must carry a timezone")


_REQUIRED = ("id", "nadir_lat", "nadir_lon", "timestamp", "corners", "center_lat", "center_lon", "area_sqkm")


def parse_timestamp(text: str) -> dt.datetime:
    t = text.strip()
    if t.endswith(("Z", "z")):
        t = t[:-1] + "+00:00"
    stamp = dt.datetime.fromisoformat(t)
    if stamp.tzinfo is None:
        raise ValueError("timestamp without UTC offset")
    return stamp.astimezone(dt.timezone.utc)


def format_timestamp(stamp: dt.datetime) -> str:
    stamp = stamp.astimezone(dt.timezone.utc).replace(tzinfo=None)
    return stamp.isoformat() + "Z"


def record_from_dict(d: dict) -> QueryRecord:
    for key in _REQUIRED:
        if key not in d:
            raise KeyError(key)
    corners = d["corners"]
    if not isinstance(corners, list) or len(corners) != 8:
        raise ValueError("corners must hold 8 numbers (lat, lon x 4)")
    pairs = [(float(corners[2 * k]), float(corners[2 * k + 1])) for k in range(4)]
    fp = Footprint.from_latlon(pairs, center=(float(d["center_lat"]), float(d["center_lon"])))
    focal = d.get("focal_length_mm")
    return QueryRecord(
        id=str(d["id"]),
        nadir=GeoPoint(float(d["nadir_lat"]), float(d["nadir_lon"])),
        timestamp=parse_timestamp(d["timestamp"]),
        footprint=fp,
        area_sqkm=float(d["area_sqkm"]),
        focal_length_mm=None if focal is None else float(focal),
    )


def record_to_dict(rec: QueryRecord) -> dict:
    corners = []
    for c in rec.footprint.corners:
        corners += [c.lat, c.lon]
    center = rec.footprint.center_point()
    d = {
        "id": rec.id,
        "nadir_lat": rec.nadir.lat,
        "nadir_lon": rec.nadir.lon,
        "timestamp": format_timestamp(rec.timestamp),
        "corners": corners,
        "center_lat": center.lat,
        "center_lon": center.lon,
        "area_sqkm": rec.area_sqkm,
    }
    if rec.focal_length_mm is not None:
        d["focal_length_mm"] = rec.focal_length_mm
    return d


def ingest_query_catalog(path) -> list[QueryRecord]:
    """Parse a JSONL query catalog, validating every line."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CatalogError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(d, dict):
                raise CatalogError(f"{path}:{lineno}: expected a JSON object")
            try:
                records.append(record_from_dict(d))
            except KeyError as exc:
                raise CatalogError(f"{path}:{lineno}: missing required field {exc.args[0]!r}") from None
            except (TypeError, ValueError) as exc:
                raise CatalogError(f"{path}:{lineno}: invalid record: {exc}") from None
    return records


def write_query_catalog(records: Iterable[QueryRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_dict(rec)) + "\n")


def filter_queries_by_area(records, min_sqkm=MIN_QUERY_AREA_SQKM, max_sqkm=MAX_QUERY_AREA_SQKM):
    return [r for r in records if min_sqkm <= r.area_sqkm <= max_sqkm]


# --------------------------------------------------------------------------
# evaluation sets
# --------------------------------------------------------------------------

@dataclass
class EvalSet:
    name: str
    poi: GeoPoint
    queries: list[QueryRecord]
    db_regions: list[RegionId]
    search_radius_km: float = 2500.0
    db_radius_km: float = field(default=2 * 2436.47)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "poi": [self.poi.lat, self.poi.lon],
            "search_radius_km": self.search_radius_km,
            "db_radius_km": self.db_radius_km,
            "span": self.db_regions[0].span if self.db_regions else None,
            "db_regions": [[r.zoom, r.ix, r.iy] for r in self.db_regions],
            "queries": [record_to_dict(q) for q in self.queries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalSet":
        span = d.get("span") or 4
        return cls(
            name=d["name"],
            poi=GeoPoint(*d["poi"]),
            queries=[record_from_dict(q) for q in d["queries"]],
            db_regions=[RegionId(z, i, j, span) for z, i, j in d["db_regions"]],
            search_radius_km=d["search_radius_km"],
            db_radius_km=d["db_radius_km"],
        )

    def save(self, path) -> None:
        from .io_utils import atomic_write_text

        atomic_write_text(path, json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "EvalSet":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def region_centers(regions: Sequence[RegionId]) -> tuple[np.ndarray, np.ndarray]:
    if not regions:
        return np.zeros(0), np.zeros(0)
    cx = np.array([r.center_xy()[0] for r in regions])
    cy = np.array([r.center_xy()[1] for r in regions])
    lat, lon = xy_to_lonlat(cx, cy)
    return lat, (lon + 180.0) % 360.0 - 180.0


def build_eval_set(
    poi: GeoPoint,
    records: Sequence[QueryRecord],
    regions: Sequence[RegionId],
    vis: VisibilityParams = VisibilityParams(),
    name: str = "evalset",
) -> EvalSet:
    """Queries with nadir near ``poi`` plus every region visible from them."""
    db_radius = 2.0 * vis.visible_km
    if records:
        nlat = np.array([r.nadir.lat for r in records])
        nlon = np.array([r.nadir.lon for r in records])
        d = haversine_km_arrays(nlat, nlon, poi.lat, poi.lon, vis.earth_radius_km)
        queries = [r for r, keep in zip(records, d <= vis.search_radius_km) if keep]
    else:
        queries = []
    lat, lon = region_centers(regions)
    d = haversine_km_arrays(lat, lon, poi.lat, poi.lon, vis.earth_radius_km)
    db = [r for r, keep in zip(regions, d <= db_radius) if keep]
    return EvalSet(name, poi, queries, db, vis.search_radius_km, db_radius)


def spherical_cap_area(radius_km: float, earth_radius_km: float = 6371.0) -> float:
    """Surface area within great-circle distance ``radius_km`` of a point."""
    return 2.0 * math.pi * earth_radius_km ** 2 * (1.0 - math.cos(radius_km / earth_radius_km))
