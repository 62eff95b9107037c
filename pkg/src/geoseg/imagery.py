"""Aerial imagery retrieval: XYZ, WMTS (KVP), and WMS 1.3.0 endpoints.

For tiled protocols (XYZ, WMTS) the client computes which provider tiles
cover a dataset tile's provider-CRS bounds, fetches them with bounded
concurrency and retries, mosaics them in provider pixel space, and
resamples the mosaic onto the dataset tile's own pixel grid. WMS is the
degenerate case: one GetMap request becomes a one-image mosaic.

Resampling maps every output pixel center into mosaic pixel coordinates;
when the output resolution matches the provider resolution (within 1e-9)
sampling is nearest-neighbour, so grid-aligned requests are lossless,
otherwise bilinear with edge clamping.

Any sub-request that still fails after retries poisons the whole dataset
tile (NetworkError). A tile whose pixels are all one value is kept but
flagged blank with a warning.

Finished tiles go through a read-through disk cache keyed by endpoint,
geometry and acquisition tag. The GEOSEG_HTTP_TIMEOUT_S environment
variable overrides the per-request timeout.
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .cache import DiskCache, content_key
from .crs import WEB_MERCATOR_EXTENT
from .errors import ConfigError, NetworkError
from .grid import GridSpec, Tile
from .worldfile import Geotransform

log = logging.getLogger(__name__)

ENV_TIMEOUT = "GEOSEG_HTTP_TIMEOUT_S"
KINDS = ("xyz", "wmts-kvp", "wms-1.3.0")
RETRY_BASE_DELAY_S = 0.5


@dataclass(frozen=True)
class ImageryEndpoint:
    """Where and how to fetch imagery.

    url_template: for xyz, a template with {z}/{x}/{y} placeholders; for
    wmts-kvp and wms-1.3.0 the service base URL (query string appended).
    provider_resolution: ground size of one provider pixel (m/px, or
    degrees/px for geographic CRS). For xyz it may be omitted and is then
    derived from the zoom level. matrix_origin: top-left corner of the
    tile matrix; xyz defaults to the web mercator extent corner.
    """

    kind: str
    url_template: str
    crs: str
    layer: str = ""
    provider_resolution: float | None = None
    tile_px: int = 256
    zoom: int | None = None
    matrix: str = ""
    matrix_set: str = ""
    matrix_origin: tuple[float, float] | None = None
    style: str = "default"
    image_format: str = "image/png"
    headers: dict = field(default_factory=dict)
    timeout_s: float = 30.0
    max_retries: int = 3
    max_concurrent: int = 4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown imagery endpoint kind {self.kind!r}")
        if self.kind == "xyz":
            if self.zoom is None:
                raise ConfigError("xyz endpoint needs a zoom level")
            if self.crs != "EPSG:3857":
                raise ConfigError("xyz tiling is defined on EPSG:3857")
        if self.kind == "wmts-kvp":
            if self.matrix_origin is None:
                raise ConfigError("wmts endpoint needs matrix_origin")
            if self.provider_resolution is None:
                raise ConfigError("wmts endpoint needs provider_resolution")
            if not self.matrix or not self.matrix_set:
                raise ConfigError(
                    "wmts endpoint needs matrix and matrix_set ids")
        if self.kind == "wms-1.3.0" and self.provider_resolution is None:
            raise ConfigError("wms endpoint needs provider_resolution")
        if self.tile_px <= 0:
            raise ConfigError("tile_px must be positive")

    @property
    def resolution(self) -> float:
        if self.provider_resolution is not None:
            return self.provider_resolution
        # xyz: world width over the pixel count of the zoom level
        return 2.0 * WEB_MERCATOR_EXTENT / (self.tile_px * (1 << self.zoom))

    @property
    def origin(self) -> tuple[float, float]:
        if self.matrix_origin is not None:
            return self.matrix_origin
        return (-WEB_MERCATOR_EXTENT, WEB_MERCATOR_EXTENT)

    def effective_timeout(self) -> float:
        env = os.environ.get(ENV_TIMEOUT)
        if env:
            try:
                return float(env)
            except ValueError:
                log.warning("ignoring bad %s=%r", ENV_TIMEOUT, env)
        return self.timeout_s


@dataclass
class RasterTile:
    """Fetched imagery resampled onto one dataset tile's pixel grid."""

    tile_id: int
    pixels: np.ndarray  # (H, W, 3) uint8
    geotransform: Geotransform
    acquisition_tag: str = ""
    blank: bool = False


def _descriptor(endpoint: ImageryEndpoint) -> str:
    return "|".join([
        endpoint.kind, endpoint.url_template, endpoint.layer,
        endpoint.matrix or (str(endpoint.zoom) if endpoint.zoom is not None
                            else ""),
        endpoint.matrix_set, f"{endpoint.resolution!r}",
    ])


def cache_key_for(endpoint: ImageryEndpoint, tile: Tile, spec: GridSpec,
                  acquisition_tag: str) -> str:
    bounds = ",".join(f"{v:.6f}" for v in tile.bounds_provider)
    return content_key(_descriptor(endpoint), bounds,
                       str(spec.tile_size_px), acquisition_tag)


def _pack_tile(tile: RasterTile) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(tile.pixels, mode="RGB").save(buf, format="PNG")
    header = json.dumps({
        "tile_id": tile.tile_id,
        "geotransform": list(tile.geotransform),
        "acquisition_tag": tile.acquisition_tag,
        "blank": tile.blank,
    }).encode("utf-8")
    return header + b"\n" + buf.getvalue()


def _unpack_tile(blob: bytes) -> RasterTile:
    head, _, png = blob.partition(b"\n")
    meta = json.loads(head.decode("utf-8"))
    with Image.open(io.BytesIO(png)) as im:
        pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return RasterTile(tile_id=meta["tile_id"], pixels=pixels,
                      geotransform=tuple(meta["geotransform"]),
                      acquisition_tag=meta["acquisition_tag"],
                      blank=meta["blank"])


class _RequestPlan:
    """Everything needed to fetch and mosaic one dataset tile."""

    def __init__(self, urls: list[str], placements: list[tuple[int, int]],
                 mosaic_origin: tuple[float, float], mosaic_px: tuple[int, int],
                 resolution: float, chunk_px: int):
        self.urls = urls
        self.placements = placements      # (row0, col0) per url
        self.mosaic_origin = mosaic_origin
        self.mosaic_px = mosaic_px        # (height, width)
        self.resolution = resolution
        self.chunk_px = chunk_px


def _plan_tiled(endpoint: ImageryEndpoint, tile: Tile) -> _RequestPlan:
    res = endpoint.resolution
    span = endpoint.tile_px * res
    ox, oy = endpoint.origin
    minx, miny, maxx, maxy = tile.bounds_provider
    ix0 = math.floor((minx - ox) / span)
    ix1 = max(ix0, math.ceil((maxx - ox) / span - 1e-12) - 1)
    iy0 = math.floor((oy - maxy) / span)
    iy1 = max(iy0, math.ceil((oy - miny) / span - 1e-12) - 1)
    urls = []
    placements = []
    for iy in range(iy0, iy1 + 1):
        for ix in range(ix0, ix1 + 1):
            if endpoint.kind == "xyz":
                urls.append(endpoint.url_template
                            .replace("{z}", str(endpoint.zoom))
                            .replace("{x}", str(ix))
                            .replace("{y}", str(iy)))
            else:
                urls.append(
                    f"{endpoint.url_template}?SERVICE=WMTS&VERSION=1.0.0"
                    f"&REQUEST=GetTile&LAYER={endpoint.layer}"
                    f"&STYLE={endpoint.style}"
                    f"&FORMAT={endpoint.image_format}"
                    f"&TILEMATRIXSET={endpoint.matrix_set}"
                    f"&TILEMATRIX={endpoint.matrix}"
                    f"&TILEROW={iy}&TILECOL={ix}")
            placements.append(((iy - iy0) * endpoint.tile_px,
                               (ix - ix0) * endpoint.tile_px))
    return _RequestPlan(
        urls, placements,
        mosaic_origin=(ox + ix0 * span, oy - iy0 * span),
        mosaic_px=((iy1 - iy0 + 1) * endpoint.tile_px,
                   (ix1 - ix0 + 1) * endpoint.tile_px),
        resolution=res, chunk_px=endpoint.tile_px)


def _plan_wms(endpoint: ImageryEndpoint, tile: Tile) -> _RequestPlan:
    res = endpoint.resolution
    minx, miny, maxx, maxy = tile.bounds_provider
    w_px = max(1, math.ceil((maxx - minx) / res - 1e-9))
    h_px = max(1, math.ceil((maxy - miny) / res - 1e-9))
    bminx, bmaxy = minx, maxy
    bmaxx = minx + w_px * res
    bminy = maxy - h_px * res
    if endpoint.crs == "EPSG:4326":
        # WMS 1.3.0 respects CRS axis order: lat before lon for 4326
        bbox = f"{bminy!r},{bminx!r},{bmaxy!r},{bmaxx!r}"
    else:
        bbox = f"{bminx!r},{bminy!r},{bmaxx!r},{bmaxy!r}"
    url = (f"{endpoint.url_template}?SERVICE=WMS&VERSION=1.3.0"
           f"&REQUEST=GetMap&LAYERS={endpoint.layer}&STYLES="
           f"&CRS={endpoint.crs}&BBOX={bbox}"
           f"&WIDTH={w_px}&HEIGHT={h_px}&FORMAT={endpoint.image_format}")
    return _RequestPlan([url], [(0, 0)], mosaic_origin=(bminx, bmaxy),
                        mosaic_px=(h_px, w_px), resolution=res,
                        chunk_px=0)


def plan_requests(endpoint: ImageryEndpoint, tile: Tile) -> list[str]:
    """URLs that fetching this tile would hit (dry-run support)."""
    if endpoint.kind == "wms-1.3.0":
        return _plan_wms(endpoint, tile).urls
    return _plan_tiled(endpoint, tile).urls


def _resample(mosaic: np.ndarray, plan: _RequestPlan, tile: Tile,
              n_px: int) -> tuple[np.ndarray, Geotransform]:
    minx, miny, maxx, maxy = tile.bounds_provider
    out_psx = (maxx - minx) / n_px
    out_psy = (maxy - miny) / n_px
    gt = (minx, maxy, out_psx, -out_psy)
    m_ox, m_oy = plan.mosaic_origin
    res = plan.resolution
    xs = minx + (np.arange(n_px) + 0.5) * out_psx
    ys = maxy - (np.arange(n_px) + 0.5) * out_psy
    u = (xs - m_ox) / res - 0.5          # mosaic pixel-center coords
    v = (m_oy - ys) / res - 0.5
    h, w = mosaic.shape[:2]
    same_res = (abs(res - out_psx) <= 1e-9 and abs(res - out_psy) <= 1e-9)
    if same_res:
        ju = np.clip(np.rint(u).astype(np.int64), 0, w - 1)
        iv = np.clip(np.rint(v).astype(np.int64), 0, h - 1)
        out = mosaic[iv[:, None], ju[None, :]]
        return out.copy(), gt
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu = (u - u0)[None, :, None]
    fv = (v - v0)[:, None, None]
    u0c = np.clip(u0, 0, w - 1)
    u1c = np.clip(u0 + 1, 0, w - 1)
    v0c = np.clip(v0, 0, h - 1)
    v1c = np.clip(v0 + 1, 0, h - 1)
    m = mosaic.astype(np.float64)
    top = m[v0c[:, None], u0c[None, :]] * (1 - fu) \
        + m[v0c[:, None], u1c[None, :]] * fu
    bot = m[v1c[:, None], u0c[None, :]] * (1 - fu) \
        + m[v1c[:, None], u1c[None, :]] * fu
    out = top * (1 - fv) + bot * fv
    return np.clip(np.rint(out), 0, 255).astype(np.uint8), gt


class ImageryClient:
    """Fetches dataset tiles from one endpoint, with caching."""

    def __init__(self, endpoint: ImageryEndpoint,
                 cache: DiskCache | None = None, session=None,
                 sleep=time.sleep):
        self.endpoint = endpoint
        self.cache = cache if cache is not None \
            else DiskCache(namespace="imagery")
        if session is None:
            import requests

            session = requests.Session()
        self.session = session
        self.sleep = sleep
        self.stats = {"http_requests": 0, "cache_hits": 0,
                      "tiles_fetched": 0}
        self._lock = threading.Lock()

    def plan_requests(self, tile: Tile) -> list[str]:
        return plan_requests(self.endpoint, tile)

    def _get_with_retries(self, url: str) -> bytes:
        timeout = self.endpoint.effective_timeout()
        last_error: Exception | None = None
        for attempt in range(self.endpoint.max_retries + 1):
            if attempt:
                self.sleep(RETRY_BASE_DELAY_S * (2 ** (attempt - 1)))
            with self._lock:
                self.stats["http_requests"] += 1
            try:
                resp = self.session.get(url, headers=self.endpoint.headers,
                                        timeout=timeout)
            except Exception as exc:   # requests raises many subclasses
                last_error = exc
                continue
            if resp.status_code == 200:
                return resp.content
            last_error = NetworkError(
                f"HTTP {resp.status_code} from {url}")
        raise NetworkError(
            f"request failed after {self.endpoint.max_retries + 1} "
            f"attempts: {url} ({last_error})")

    def _decode(self, blob: bytes, url: str) -> np.ndarray:
        try:
            with Image.open(io.BytesIO(blob)) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except Exception as exc:
            raise NetworkError(f"undecodable image from {url}: {exc}") \
                from exc
        return arr

    def fetch_tile(self, tile: Tile, spec: GridSpec,
                   acquisition_tag: str = "") -> RasterTile:
        if self.endpoint.crs != spec.provider_crs:
            raise ConfigError(
                f"endpoint CRS {self.endpoint.crs} does not match grid "
                f"provider CRS {spec.provider_crs}")
        key = cache_key_for(self.endpoint, tile, spec, acquisition_tag)
        blob = self.cache.get(key)
        if blob is not None:
            with self._lock:
                self.stats["cache_hits"] += 1
            return _unpack_tile(blob)
        if self.endpoint.kind == "wms-1.3.0":
            plan = _plan_wms(self.endpoint, tile)
        else:
            plan = _plan_tiled(self.endpoint, tile)
        mosaic = np.zeros((*plan.mosaic_px, 3), dtype=np.uint8)
        workers = min(self.endpoint.max_concurrent, len(plan.urls))

        def fetch_one(idx: int):
            url = plan.urls[idx]
            arr = self._decode(self._get_with_retries(url), url)
            r0, c0 = plan.placements[idx]
            if plan.chunk_px:
                want = (plan.chunk_px, plan.chunk_px, 3)
                if arr.shape != want:
                    raise NetworkError(
                        f"tile from {url} has shape {arr.shape}, "
                        f"expected {want}")
            mosaic[r0:r0 + arr.shape[0], c0:c0 + arr.shape[1]] = arr

        if workers <= 1:
            for i in range(len(plan.urls)):
                fetch_one(i)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                # materialize to propagate the first failure
                list(pool.map(fetch_one, range(len(plan.urls))))
        pixels, gt = _resample(mosaic, plan, tile, spec.tile_size_px)
        blank = bool((pixels == pixels.flat[0]).all())
        if blank:
            log.warning("tile %d (%s) is uniform; provider likely has no "
                        "data here", tile.tile_id, acquisition_tag)
        raster = RasterTile(tile.tile_id, pixels, gt,
                            acquisition_tag=acquisition_tag, blank=blank)
        self.cache.put(key, _pack_tile(raster))
        with self._lock:
            self.stats["tiles_fetched"] += 1
        return raster


def fetch_tile(endpoint: ImageryEndpoint, tile: Tile, spec: GridSpec,
               acquisition_tag: str = "",
               cache: DiskCache | None = None, session=None) -> RasterTile:
    """One-shot convenience wrapper around ImageryClient."""
    client = ImageryClient(endpoint, cache=cache, session=session)
    return client.fetch_tile(tile, spec, acquisition_tag)
