"""XYZ tile fetching with an on-disk cache.

A region image is a mosaic of the standard 256 px tiles its square covers
at the region's zoom; odd grid indices start half a tile in, so the mosaic
is cropped before it is returned. Raw tile payloads are cached under
``<cache_dir>/<year>/<z>/<x>/<y>.img`` and shared between overlapping
regions.
"""
from __future__ import annotations

import io
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import requests
from PIL import Image, UnidentifiedImageError

from .geodesy import RegionId
from .io_utils import atomic_write_bytes

log = logging.getLogger(__name__)

TILE_PX = 256


class TileError(Exception):
    def __init__(self, message, region=None, year=None):
        super().__init__(message)
        self.region = region
        self.year = year


class TileNotFoundError(TileError):
    """The endpoint answered with a client error (e.g. 404)."""


class TransientFetchError(TileError):
    """Network failure that persisted through all retries."""


class TileFormatError(TileError):
    """Payload could not be decoded as an image."""


def _check_template(template: str) -> None:
    for key in ("{z}", "{x}", "{y}", "{year}"):
        if key not in template:
            raise ValueError(f"endpoint template lacks {key}: {template!r}")


class TileFetcher:
    def __init__(self, endpoint_template, cache_dir, image_px=1024, jobs=8,
                 retries=3, backoff_s=0.5, timeout_s=30.0, session=None):
        _check_template(endpoint_template)
        self.template = endpoint_template
        self.cache_dir = Path(cache_dir)
        self.image_px = image_px
        self.jobs = max(1, int(jobs))
        self.retries = retries
        self.backoff_s = backoff_s
        self.timeout_s = timeout_s
        self.session = session or requests.Session()
        self.network_calls = 0
        self._count_lock = threading.Lock()
        self._key_locks: dict[tuple, threading.Lock] = {}
        self._locks_lock = threading.Lock()

    def cache_path(self, year, z, x, y) -> Path:
        return self.cache_dir / str(year) / str(z) / str(x) / f"{y}.img"

    def _lock_for(self, key) -> threading.Lock:
        with self._locks_lock:
            return self._key_locks.setdefault(key, threading.Lock())

    def _download(self, url, region, year) -> bytes:
        last = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff_s * 2 ** (attempt - 1))
            with self._count_lock:
                self.network_calls += 1
            try:
                resp = self.session.get(url, timeout=self.timeout_s)
            except requests.RequestException as exc:
                last = exc
                log.warning("fetch %s failed (%s), attempt %d", url, exc, attempt + 1)
                continue
            if resp.status_code == 200:
                return resp.content
            if 400 <= resp.status_code < 500 and resp.status_code != 429:
                raise TileNotFoundError(
                    f"HTTP {resp.status_code} for region {region} year {year}: {url}", region, year)
            last = f"HTTP {resp.status_code}"
        raise TransientFetchError(f"giving up on region {region} year {year} after "
                                  f"{self.retries + 1} attempts: {last}", region, year)

    def tile_bytes(self, year, z, x, y, region=None) -> bytes:
        path = self.cache_path(year, z, x, y)
        with self._lock_for((year, z, x, y)):
            if path.exists():
                return path.read_bytes()
            url = self.template.format(year=year, z=z, x=x, y=y)
            data = self._download(url, region, year)
            _decode(data, region, year)  # never cache undecodable payloads
            atomic_write_bytes(path, data)
            return data

    def fetch(self, region: RegionId, year: int) -> np.ndarray:
        """Decoded ``(image_px, image_px, 3)`` uint8 RGB mosaic for one region."""
        z = region.zoom
        x0 = region.ix * region.span / 2.0
        y0 = region.iy * region.span / 2.0
        tx = range(int(math.floor(x0)), int(math.ceil(x0 + region.span)))
        ty = range(int(math.floor(y0)), int(math.ceil(y0 + region.span)))
        keys = [(x, y) for y in ty for x in tx]
        with ThreadPoolExecutor(max_workers=min(self.jobs, len(keys))) as pool:
            payloads = list(pool.map(lambda k: self.tile_bytes(year, z, k[0], k[1], region), keys))
        mosaic = np.zeros((len(ty) * TILE_PX, len(tx) * TILE_PX, 3), dtype=np.uint8)
        for (x, y), data in zip(keys, payloads):
            tile = _decode(data, region, year)
            oy, ox = (y - ty.start) * TILE_PX, (x - tx.start) * TILE_PX
            mosaic[oy:oy + TILE_PX, ox:ox + TILE_PX] = tile
        cx = int(round((x0 - tx.start) * TILE_PX))
        cy = int(round((y0 - ty.start) * TILE_PX))
        size = region.span * TILE_PX
        out = mosaic[cy:cy + size, cx:cx + size]
        if size != self.image_px:
            out = np.asarray(Image.fromarray(out).resize((self.image_px, self.image_px), Image.BILINEAR))
        return np.ascontiguousarray(out)


def _decode(data: bytes, region, year) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as im:
            im = im.convert("RGB")
            if im.size != (TILE_PX, TILE_PX):
                im = im.resize((TILE_PX, TILE_PX), Image.BILINEAR)
            return np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise TileFormatError(f"undecodable tile payload for region {region} year {year}: {exc}",
                              region, year) from None


def fetch_tile(endpoint_template, region, year, cache_dir, image_px=1024, **kwargs) -> np.ndarray:
    """One-shot convenience wrapper around :class:`TileFetcher`."""
    return TileFetcher(endpoint_template, cache_dir, image_px=image_px, **kwargs).fetch(region, year)
