"""Coordinate reference systems and transforms.

Self-contained implementations of the projections the pipeline needs:

* geographic WGS84 lon/lat (``EPSG:4326``)
* UTM on the WGS84 ellipsoid (``EPSG:326xx`` north, ``EPSG:327xx`` south)
* spherical web mercator (``EPSG:3857``)

UTM uses the Krueger flattening series carried to n^6, which is accurate to
well under a millimetre anywhere inside a zone (and degrades gracefully a few
degrees outside it). All transforms are vectorized over numpy arrays and
accept plain Python scalars too.

Coordinates are always (x, y) pairs: lon/lat for geographic systems, easting/
northing for projected ones.

Custom transform pairs can be plugged in with :func:`register_transform`;
otherwise unknown CRS pairs are composed through geographic WGS84 as a hub.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError

# WGS84 ellipsoid
_A = 6378137.0
_F = 1.0 / 298.257223563
_E = math.sqrt(_F * (2.0 - _F))

# UTM conventions
_UTM_K0 = 0.9996
_UTM_FALSE_EASTING = 500000.0
_UTM_FALSE_NORTHING_SOUTH = 10000000.0

# Web mercator sphere radius and extent
WEB_MERCATOR_RADIUS = 6378137.0
WEB_MERCATOR_EXTENT = math.pi * WEB_MERCATOR_RADIUS  # 20037508.342789244


def _krueger_coefficients() -> tuple[float, list[float], list[float], list[float]]:
    """Rectifying radius and the alpha/beta/delta series in the third
    flattening n, truncated after n^6."""
    n = _F / (2.0 - _F)
    n2, n3, n4, n5, n6 = n * n, n**3, n**4, n**5, n**6
    big_a = _A / (1.0 + n) * (1.0 + n2 / 4.0 + n4 / 64.0 + n6 / 256.0)
    alpha = [
        n / 2 - 2 * n2 / 3 + 5 * n3 / 16 + 41 * n4 / 180 - 127 * n5 / 288
        + 7891 * n6 / 37800,
        13 * n2 / 48 - 3 * n3 / 5 + 557 * n4 / 1440 + 281 * n5 / 630
        - 1983433 * n6 / 1935360,
        61 * n3 / 240 - 103 * n4 / 140 + 15061 * n5 / 26880
        + 167603 * n6 / 181440,
        49561 * n4 / 161280 - 179 * n5 / 168 + 6601661 * n6 / 7257600,
        34729 * n5 / 80640 - 3418889 * n6 / 1995840,
        212378941 * n6 / 319334400,
    ]
    beta = [
        n / 2 - 2 * n2 / 3 + 37 * n3 / 96 - n4 / 360 - 81 * n5 / 512
        + 96199 * n6 / 604800,
        n2 / 48 + n3 / 15 - 437 * n4 / 1440 + 46 * n5 / 105
        - 1118711 * n6 / 3870720,
        17 * n3 / 480 - 37 * n4 / 840 - 209 * n5 / 4480 + 5569 * n6 / 90720,
        4397 * n4 / 161280 - 11 * n5 / 504 - 830251 * n6 / 7257600,
        4583 * n5 / 161280 - 108847 * n6 / 3991680,
        20648693 * n6 / 638668800,
    ]
    delta = [
        2 * n - 2 * n2 / 3 - 2 * n3 + 116 * n4 / 45 + 26 * n5 / 45
        - 2854 * n6 / 675,
        7 * n2 / 3 - 8 * n3 / 5 - 227 * n4 / 45 + 2704 * n5 / 315
        + 2323 * n6 / 945,
        56 * n3 / 15 - 136 * n4 / 35 - 1262 * n5 / 105 + 73814 * n6 / 2835,
        4279 * n4 / 630 - 332 * n5 / 35 - 399572 * n6 / 14175,
        4174 * n5 / 315 - 144838 * n6 / 6237,
        601676 * n6 / 22275,
    ]
    return big_a, alpha, beta, delta


_BIG_A, _ALPHA, _BETA, _DELTA = _krueger_coefficients()


def _tm_forward(lon_deg, lat_deg, lon0_deg: float):
    """Transverse mercator forward on the WGS84 ellipsoid, unscaled.

    Returns (eta, xi) in units of the rectifying radius; callers apply k0,
    the radius and false offsets.
    """
    lat = np.radians(np.asarray(lat_deg, dtype=np.float64))
    dlon = np.radians(np.asarray(lon_deg, dtype=np.float64) - lon0_deg)
    sin_lat = np.sin(lat)
    # conformal latitude via t = sinh(asinh(tan) - e*atanh(e*sin))
    t = np.sinh(np.arcsinh(np.tan(lat)) - _E * np.arctanh(_E * sin_lat))
    cos_dlon = np.cos(dlon)
    xi_p = np.arctan2(t, cos_dlon)
    eta_p = np.arcsinh(np.sin(dlon) / np.sqrt(t * t + cos_dlon * cos_dlon))
    xi = xi_p.copy()
    eta = eta_p.copy()
    for j, a in enumerate(_ALPHA, start=1):
        xi += a * np.sin(2 * j * xi_p) * np.cosh(2 * j * eta_p)
        eta += a * np.cos(2 * j * xi_p) * np.sinh(2 * j * eta_p)
    return eta, xi


def _tm_inverse(eta, xi, lon0_deg: float):
    """Inverse of :func:`_tm_forward`; returns (lon_deg, lat_deg)."""
    xi = np.asarray(xi, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    xi_p = xi.copy()
    eta_p = eta.copy()
    for j, b in enumerate(_BETA, start=1):
        xi_p -= b * np.sin(2 * j * xi) * np.cosh(2 * j * eta)
        eta_p -= b * np.cos(2 * j * xi) * np.sinh(2 * j * eta)
    chi = np.arcsin(np.sin(xi_p) / np.cosh(eta_p))
    lat = chi.copy()
    for j, d in enumerate(_DELTA, start=1):
        lat += d * np.sin(2 * j * chi)
    lon = lon0_deg + np.degrees(np.arctan2(np.sinh(eta_p), np.cos(xi_p)))
    return lon, np.degrees(lat)


class CrsTransform:
    """A bidirectional transform between two CRS.

    ``forward`` maps source (x, y) to target; ``inverse`` maps back. Both
    accept scalars or numpy arrays of matching shape and return numpy
    float64 arrays (0-d for scalar input).
    """

    def __init__(self, source_crs: str, target_crs: str,
                 forward: Callable, inverse: Callable):
        self.source_crs = source_crs
        self.target_crs = target_crs
        self._forward = forward
        self._inverse = inverse

    def forward(self, x, y):
        return self._forward(np.asarray(x, dtype=np.float64),
                             np.asarray(y, dtype=np.float64))

    def inverse(self, x, y):
        return self._inverse(np.asarray(x, dtype=np.float64),
                             np.asarray(y, dtype=np.float64))

    def reversed(self) -> "CrsTransform":
        return CrsTransform(self.target_crs, self.source_crs,
                            self._inverse, self._forward)

    def transform_bounds(self, bounds: tuple[float, float, float, float],
                         densify: int = 0) -> tuple[float, float, float, float]:
        """Axis-aligned bounding box of the transformed rectangle.

        With ``densify=0`` only the four corners are mapped. A positive value
        adds that many extra points along each edge, which tightens the box
        for projections that curve rectangle edges.
        """
        minx, miny, maxx, maxy = bounds
        if densify > 0:
            ts = np.linspace(0.0, 1.0, densify + 2)
            xs = minx + ts * (maxx - minx)
            ys = miny + ts * (maxy - miny)
            px = np.concatenate([xs, np.full_like(ys, maxx), xs[::-1],
                                 np.full_like(ys, minx)])
            py = np.concatenate([np.full_like(xs, miny), ys,
                                 np.full_like(xs, maxy), ys[::-1]])
        else:
            px = np.array([minx, maxx, maxx, minx])
            py = np.array([miny, miny, maxy, maxy])
        tx, ty = self.forward(px, py)
        return (float(np.min(tx)), float(np.min(ty)),
                float(np.max(tx)), float(np.max(ty)))


def _identity(crs: str) -> CrsTransform:
    return CrsTransform(crs, crs, lambda x, y: (x, y), lambda x, y: (x, y))


@dataclass(frozen=True)
class _CrsInfo:
    kind: str            # "geographic" | "utm" | "webmercator"
    zone: int = 0
    south: bool = False

    @property
    def central_meridian(self) -> float:
        return -183.0 + 6.0 * self.zone

    @property
    def false_northing(self) -> float:
        return _UTM_FALSE_NORTHING_SOUTH if self.south else 0.0


_UTM_RE = re.compile(r"^EPSG:32([67])(\d{2})$")


def parse_crs(crs_id: str) -> _CrsInfo:
    """Classify a CRS identifier; raises ConfigError for unsupported ids."""
    crs_id = crs_id.strip().upper()
    if crs_id == "EPSG:4326":
        return _CrsInfo("geographic")
    if crs_id == "EPSG:3857":
        return _CrsInfo("webmercator")
    m = _UTM_RE.match(crs_id)
    if m:
        zone = int(m.group(2))
        if not 1 <= zone <= 60:
            raise ConfigError(f"UTM zone out of range in {crs_id!r}")
        return _CrsInfo("utm", zone=zone, south=(m.group(1) == "7"))
    raise ConfigError(
        f"unsupported CRS {crs_id!r}; supported: EPSG:4326, EPSG:3857, "
        f"EPSG:326xx/327xx, or a pair added via register_transform()")


def utm_zone_for(lon: float, lat: float) -> str:
    """EPSG id of the standard UTM zone containing a lon/lat point."""
    zone = min(60, max(1, int((lon + 180.0) // 6.0) + 1))
    return f"EPSG:{32600 + zone if lat >= 0 else 32700 + zone}"


def _from_geographic(crs_id: str) -> CrsTransform:
    """Transform with source EPSG:4326 and the given target."""
    info = parse_crs(crs_id)
    if info.kind == "geographic":
        return _identity("EPSG:4326")
    if info.kind == "webmercator":
        def fwd(lon, lat):
            x = WEB_MERCATOR_RADIUS * np.radians(lon)
            y = WEB_MERCATOR_RADIUS * np.log(
                np.tan(np.pi / 4.0 + np.radians(lat) / 2.0))
            return x, y

        def inv(x, y):
            lon = np.degrees(x / WEB_MERCATOR_RADIUS)
            lat = np.degrees(
                2.0 * np.arctan(np.exp(y / WEB_MERCATOR_RADIUS)) - np.pi / 2.0)
            return lon, lat

        return CrsTransform("EPSG:4326", crs_id, fwd, inv)
    lon0 = info.central_meridian
    fn = info.false_northing

    def fwd(lon, lat):
        eta, xi = _tm_forward(lon, lat, lon0)
        return (_UTM_FALSE_EASTING + _UTM_K0 * _BIG_A * eta,
                fn + _UTM_K0 * _BIG_A * xi)

    def inv(e, nn):
        xi = (nn - fn) / (_UTM_K0 * _BIG_A)
        eta = (e - _UTM_FALSE_EASTING) / (_UTM_K0 * _BIG_A)
        return _tm_inverse(eta, xi, lon0)

    return CrsTransform("EPSG:4326", crs_id, fwd, inv)


_registry: dict[tuple[str, str], CrsTransform] = {}


def register_transform(transform: CrsTransform) -> None:
    """Register a custom transform; get_transform will prefer it (and its
    reverse) over the built-in composition."""
    _registry[(transform.source_crs, transform.target_crs)] = transform
    _registry[(transform.target_crs, transform.source_crs)] = transform.reversed()


def get_transform(source_crs: str, target_crs: str) -> CrsTransform:
    """Build a transform between two CRS ids.

    Registered pairs win; identical ids give the identity; anything else is
    composed through geographic WGS84.
    """
    source_crs = source_crs.strip().upper()
    target_crs = target_crs.strip().upper()
    key = (source_crs, target_crs)
    if key in _registry:
        return _registry[key]
    if source_crs == target_crs:
        parse_crs(source_crs)
        return _identity(source_crs)
    to_geo = _from_geographic(source_crs).reversed()
    from_geo = _from_geographic(target_crs)

    def fwd(x, y):
        lon, lat = to_geo.forward(x, y)
        return from_geo.forward(lon, lat)

    def inv(x, y):
        lon, lat = from_geo.inverse(x, y)
        return to_geo.inverse(lon, lat)

    return CrsTransform(source_crs, target_crs, fwd, inv)
