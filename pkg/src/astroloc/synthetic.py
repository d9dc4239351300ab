"""Procedural desk-scale world: region tiles for several years and oblique queries.

The world is a smooth colour-and-texture field over a rectangular patch of
the half-stride grid at one zoom. Region images sample that field over the
region square; each year applies its own tint and a faint change layer.
Queries are small rotated, perspective-distorted crops of the field seen
through an extra colour jitter, with ground-truth footprints and nadir
points a few hundred kilometres away.
"""
from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass

import numpy as np

from .database import DEFAULT_YEARS, BoxMask, QueryRecord, TilingConfig
from .geodesy import (
    EARTH_RADIUS_KM,
    Footprint,
    GeoPoint,
    RegionId,
    lonlat_to_xy,
    xy_to_lonlat,
)
from .training.augment import AugmentationParams, color_jitter, homography


@dataclass(frozen=True)
class WorldConfig:
    zoom: int = 11
    cols: int = 20
    rows: int = 25
    origin_lat: float = 10.0
    origin_lon: float = 20.0
    image_px: int = 64
    years: tuple = DEFAULT_YEARS
    seed: int = 0
    query_px: int = 16  # about the database ground resolution for quarter-side crops
    query_scale: tuple = (0.2, 0.3)  # footprint side relative to a region side
    query_jitter: float = 0.15
    query_hue: float = 0.03
    max_nadir_offset_km: float = 1200.0
    color_scale: float = 3.0  # feature size of the colour field, in region sides
    color_octaves: int = 2
    biomes: int = 6  # number of recurring terrain types; 0 disables
    biome_scale: float = 2.5  # mean biome cell size, in region sides
    biome_weight: float = 0.6


class _ValueNoise:
    def __init__(self, rng, size=96):
        self.size = size
        self.grid = rng.random((size, size))

    def __call__(self, u, v):
        i = np.floor(u).astype(np.int64)
        j = np.floor(v).astype(np.int64)
        fu = u - i
        fv = v - j
        fu = fu * fu * (3.0 - 2.0 * fu)
        fv = fv * fv * (3.0 - 2.0 * fv)
        n = self.size
        i0, i1 = i % n, (i + 1) % n
        j0, j1 = j % n, (j + 1) % n
        g = self.grid
        top = g[j0, i0] * (1 - fu) + g[j0, i1] * fu
        bot = g[j1, i0] * (1 - fu) + g[j1, i1] * fu
        return top * (1 - fv) + bot * fv


def _octaves(noises, u, v, spacing):
    total = np.zeros_like(u)
    amp, norm = 1.0, 0.0
    for k, nz in enumerate(noises):
        s = spacing / 2 ** k
        total += amp * nz(u / s, v / s)
        norm += amp
        amp *= 0.5
    return total / norm


class SyntheticWorld:
    def __init__(self, cfg: WorldConfig = WorldConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.span = max(1, cfg.image_px // 256)
        self.side = self.span / 2 ** cfg.zoom
        self.stride = self.side / 2.0
        x, y = lonlat_to_xy(cfg.origin_lat, cfg.origin_lon)
        self.ix0 = int(float(x) // self.stride)
        self.iy0 = int(float(y) // self.stride)
        self.x_origin = self.ix0 * self.stride
        self.y_origin = self.iy0 * self.stride
        self._color = [[_ValueNoise(rng) for _ in range(cfg.color_octaves)] for _ in range(3)]
        self._orient = _ValueNoise(rng)
        self._stripe_amp = _ValueNoise(rng)
        self._detail = _ValueNoise(rng)
        self._biome_sites = None
        if cfg.biomes:
            self._init_biomes(rng)
        self._year_tint = {y: 1.0 + rng.normal(0.0, 0.08, size=3) for y in cfg.years}
        self._year_change = {y: _ValueNoise(rng) for y in cfg.years}

    # -- layout --------------------------------------------------------------

    @property
    def width_sides(self) -> float:
        return (self.cfg.cols + 1) / 2.0

    @property
    def height_sides(self) -> float:
        return (self.cfg.rows + 1) / 2.0

    def regions(self) -> list[RegionId]:
        c = self.cfg
        return [RegionId(c.zoom, self.ix0 + i, self.iy0 + j, self.span)
                for j in range(c.rows) for i in range(c.cols)]

    def tiling(self) -> TilingConfig:
        return TilingConfig(zooms=(self.cfg.zoom,), lat_limit_deg=60.0, years=self.cfg.years,
                            image_px=self.cfg.image_px)

    def mask(self) -> BoxMask:
        """Lat/lon box selecting exactly this world's region centers."""
        xs = self.x_origin + (np.array([0, self.cfg.cols - 1]) + 1) * self.stride
        ys = self.y_origin + (np.array([0, self.cfg.rows - 1]) + 1) * self.stride
        pad = self.stride / 2.0
        lat_hi, lon_lo = xy_to_lonlat(xs[0] - pad, ys[0] - pad)
        lat_lo, lon_hi = xy_to_lonlat(xs[1] + pad, ys[1] + pad)
        return BoxMask(float(lat_lo), float(lat_hi), float(lon_lo), float(lon_hi))

    # -- appearance ------------------------------------------------------------

    def _init_biomes(self, rng) -> None:
        c = self.cfg
        step = c.biome_scale
        gu = np.arange(-1.0, self.width_sides + 1.0, step)
        gv = np.arange(-1.0, self.height_sides + 1.0, step)
        su, sv = np.meshgrid(gu, gv)
        jitter = rng.uniform(0.0, step, size=su.shape + (2,))
        self._biome_sites = np.column_stack([(su + jitter[..., 0]).ravel(), (sv + jitter[..., 1]).ravel()])
        self._biome_of_site = rng.integers(c.biomes, size=len(self._biome_sites))
        self._palette = rng.uniform(0.1, 0.9, size=(c.biomes, 3))
        self._biome_angle = rng.uniform(0.0, math.pi, size=c.biomes)
        self._biome_freq = rng.uniform(3.0, 8.0, size=c.biomes)

    def biome_at(self, u, v) -> np.ndarray:
        pts = np.stack([np.ravel(u), np.ravel(v)], axis=1)
        best = np.full(pts.shape[0], np.inf)
        which = np.zeros(pts.shape[0], dtype=np.int64)
        for i, site in enumerate(self._biome_sites):
            d = ((pts - site) ** 2).sum(axis=1)
            closer = d < best
            best[closer] = d[closer]
            which[closer] = i
        return self._biome_of_site[which].reshape(np.shape(u))

    def render_xy(self, xs, ys, year) -> np.ndarray:
        """RGB in [0, 1] at Mercator coordinates (arrays of equal shape)."""
        u = (np.asarray(xs) - self.x_origin) / self.side
        v = (np.asarray(ys) - self.y_origin) / self.side
        base = np.stack([_octaves(self._color[k], u, v, self.cfg.color_scale) for k in range(3)], axis=-1)
        base = np.clip((base - 0.5) * 2.2 + 0.5, 0.0, 1.0)
        theta = 2.0 * math.pi * _octaves([self._orient], u, v, 2.0)
        freq = 5.0
        if self._biome_sites is not None:
            b = self.biome_at(u, v)
            w = self.cfg.biome_weight
            base = (1.0 - w) * base + w * self._palette[b]
            theta = (1.0 - w) * theta + w * self._biome_angle[b]
            freq = self._biome_freq[b]
        phase = 2.0 * math.pi * freq * (u * np.cos(theta) + v * np.sin(theta))
        stripes = 0.18 * _octaves([self._stripe_amp], u, v, 1.0)[..., None] * np.sin(phase)[..., None]
        detail = 0.06 * (_octaves([self._detail], u, v, 0.08)[..., None] - 0.5)
        rgb = 0.1 + 0.8 * base + stripes + detail
        if year is not None:
            change = 0.08 * (_octaves([self._year_change[year]], u, v, 0.5)[..., None] - 0.5)
            rgb = rgb * self._year_tint[year] + change
        return np.clip(rgb, 0.0, 1.0).astype(np.float32)

    def region_image(self, region: RegionId, year, px=None) -> np.ndarray:
        px = px or self.cfg.image_px
        x0, y0, x1, y1 = region.bounds()
        t = (np.arange(px) + 0.5) / px
        ys, xs = np.meshgrid(y0 + t * (y1 - y0), x0 + t * (x1 - x0), indexing="ij")
        return self.render_xy(xs, ys, year)

    def database_images(self, regions=None) -> np.ndarray:
        """``(n_regions, n_years, px, px, 3)`` float32 stack."""
        regions = self.regions() if regions is None else regions
        return np.stack([np.stack([self.region_image(r, y) for y in self.cfg.years]) for r in regions])

    # -- queries -------------------------------------------------------------

    def query_corners_xy(self, rng) -> np.ndarray:
        c = self.cfg
        cu = rng.uniform(1.0, self.width_sides - 1.0)
        cv = rng.uniform(1.0, self.height_sides - 1.0)
        f = rng.uniform(*c.query_scale)
        t = rng.uniform(0.0, 2.0 * math.pi)
        rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        local = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=np.float64) * f / 2.0
        local = local + rng.uniform(-0.1, 0.1, size=(4, 2)) * f
        uv = np.array([cu, cv]) + local @ rot.T
        return np.column_stack([self.x_origin + uv[:, 0] * self.side, self.y_origin + uv[:, 1] * self.side])

    def render_quad(self, corners_xy, year, px) -> np.ndarray:
        unit = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=np.float64)
        H = homography(unit, corners_xy)
        t = (np.arange(px) + 0.5) / px
        v, u = np.meshgrid(t, t, indexing="ij")
        w = H[2, 0] * u + H[2, 1] * v + H[2, 2]
        xs = (H[0, 0] * u + H[0, 1] * v + H[0, 2]) / w
        ys = (H[1, 0] * u + H[1, 1] * v + H[1, 2]) / w
        return self.render_xy(xs, ys, year)

    def make_queries(self, n: int, seed: int = 1):
        """``n`` query records with their images, deterministic in ``seed``."""
        c = self.cfg
        rng = np.random.default_rng(seed)
        base_time = dt.datetime(2022, 6, 1, tzinfo=dt.timezone.utc)
        records, images = [], []
        for q in range(n):
            corners = self.query_corners_xy(rng)
            year = c.years[int(rng.integers(len(c.years)))]
            img = self.render_quad(corners, year, c.query_px)
            j, h = c.query_jitter, c.query_hue
            params = AugmentationParams(1 + rng.uniform(-j, j), 1 + rng.uniform(-j, j),
                                        1 + rng.uniform(-j, j), rng.uniform(-h, h))
            img = color_jitter(img[None], params)[0]
            lat, lon = xy_to_lonlat(corners[:, 0], corners[:, 1])
            cx, cy = corners.mean(axis=0)
            clat, clon = xy_to_lonlat(cx, cy)
            fp = Footprint.from_latlon(list(zip(lat.tolist(), lon.tolist())), center=(float(clat), float(clon)))
            area = _mercator_area_sqkm(corners, float(clat))
            nadir = destination_point(fp.center, rng.uniform(0.0, 360.0),
                                      rng.uniform(0.0, c.max_nadir_offset_km))
            records.append(QueryRecord(
                id=f"Q{q:05d}", nadir=nadir, timestamp=base_time + dt.timedelta(minutes=q),
                footprint=fp, area_sqkm=area, focal_length_mm=float(rng.choice([50.0, 400.0, 800.0])),
            ))
            images.append(img)
        return records, np.stack(images) if images else np.zeros((0, c.query_px, c.query_px, 3), np.float32)


def _mercator_area_sqkm(corners_xy, lat_deg) -> float:
    x, y = corners_xy[:, 0], corners_xy[:, 1]
    plane = 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))
    scale = 2.0 * math.pi * EARTH_RADIUS_KM * math.cos(math.radians(lat_deg))
    return plane * scale * scale


def destination_point(p: GeoPoint, bearing_deg: float, distance_km: float,
                      radius_km: float = EARTH_RADIUS_KM) -> GeoPoint:
    """Point reached from ``p`` along a great circle."""
    d = distance_km / radius_km
    b = math.radians(bearing_deg)
    lat1, lon1 = math.radians(p.lat), math.radians(p.lon)
    lat2 = math.asin(math.sin(lat1) * math.cos(d) + math.cos(lat1) * math.sin(d) * math.cos(b))
    lon2 = lon1 + math.atan2(math.sin(b) * math.sin(d) * math.cos(lat1),
                             math.cos(d) - math.sin(lat1) * math.sin(lat2))
    return GeoPoint(math.degrees(lat2), math.degrees(lon2))
