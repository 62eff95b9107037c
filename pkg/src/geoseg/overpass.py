"""OSM ground truth via the Overpass API.

Builds Overpass QL of the fixed shape

  [out:json][timeout:T]; (way[k=v](S,W,N,E); relation[k=v](S,W,N,E););
  out body; >; out skel qt;

parses the JSON response into polygons (closed ways directly,
multipolygon relations by stitching member ways into rings), and caches
raw responses on disk keyed by the hash of the QL text. Open ways that
cannot be closed are discarded with a warning. Rate limiting (HTTP 429)
surfaces as NetworkError with the server's retry-after delay attached.

The HTTP transport is injectable for tests: any callable
(url, data, timeout_s) -> (status_code, headers_dict, body_bytes).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

from shapely.geometry import Polygon

from .cache import DiskCache, content_key
from .errors import ConfigError, DataError, NetworkError
from .groundtruth import GroundTruthLayer

log = logging.getLogger(__name__)

DEFAULT_ENDPOINT = "https://overpass-api.de/api/interpreter"

Transport = Callable[[str, str, float], tuple[int, dict, bytes]]


@dataclass(frozen=True)
class OverpassQuery:
    """Tag filters + WGS84 bbox (south, west, north, east)."""

    tag_filters: tuple[tuple[str, str | None], ...]
    bbox: tuple[float, float, float, float]
    kinds: tuple[str, ...] = ("way", "relation")
    timeout_s: int = 25

    def __post_init__(self):
        south, west, north, east = self.bbox
        if not (south < north and west < east):
            raise ConfigError(
                f"bbox must be (south, west, north, east) with south < "
                f"north and west < east, got {self.bbox}")
        if not self.tag_filters:
            raise ConfigError("at least one tag filter is required")
        for kind in self.kinds:
            if kind not in ("way", "relation"):
                raise ConfigError(f"unsupported element kind {kind!r}")


def build_ql(query: OverpassQuery) -> str:
    south, west, north, east = query.bbox
    bbox = f"{south!r},{west!r},{north!r},{east!r}"
    clauses = []
    for key, value in query.tag_filters:
        selector = f"[{key}={value}]" if value is not None else f"[{key}]"
        for kind in query.kinds:
            clauses.append(f"{kind}{selector}({bbox});")
    body = " ".join(clauses)
    return (f"[out:json][timeout:{query.timeout_s}]; ({body}); "
            f"out body; >; out skel qt;")


def _default_transport(url: str, data: str,
                       timeout_s: float) -> tuple[int, dict, bytes]:
    import requests

    try:
        resp = requests.post(url, data={"data": data}, timeout=timeout_s)
    except requests.RequestException as exc:
        raise NetworkError(f"overpass request failed: {exc}") from exc
    return resp.status_code, dict(resp.headers), resp.content


def _stitch_rings(way_coords: list[list[tuple[float, float]]],
                  ) -> tuple[list[list[tuple[float, float]]], int]:
    """Join open ways end-to-end into closed rings.

    Returns (rings, n_discarded_ways). Matching is exact on coordinates,
    which node-id-shared ways guarantee.
    """
    pending = [list(c) for c in way_coords if len(c) >= 2]
    rings = []
    discarded = 0
    while pending:
        chain = pending.pop()
        progressed = True
        while chain[0] != chain[-1] and progressed:
            progressed = False
            for i, cand in enumerate(pending):
                if cand[0] == chain[-1]:
                    chain.extend(cand[1:])
                elif cand[-1] == chain[-1]:
                    chain.extend(reversed(cand[:-1]))
                elif cand[-1] == chain[0]:
                    chain[0:0] = cand[:-1]
                elif cand[0] == chain[0]:
                    chain[0:0] = list(reversed(cand[1:]))
                else:
                    continue
                pending.pop(i)
                progressed = True
                break
        if chain[0] == chain[-1] and len(chain) >= 4:
            rings.append(chain)
        else:
            discarded += 1
    return rings, discarded


def parse_overpass_json(doc: dict, class_id: int) -> tuple[list, int]:
    """Extract (polygon, class_id) features from an Overpass response.

    Returns (features, n_dropped_open_ways). Multipolygon relations take
    priority over their member ways; remaining tagged closed ways become
    simple polygons.
    """
    elements = doc.get("elements", [])
    nodes: dict[int, tuple[float, float]] = {}
    ways: dict[int, dict] = {}
    relations: list[dict] = []
    for el in elements:
        t = el.get("type")
        if t == "node":
            nodes[el["id"]] = (el["lon"], el["lat"])
        elif t == "way":
            ways[el["id"]] = el
        elif t == "relation":
            relations.append(el)

    def way_coords(way_id: int) -> list[tuple[float, float]] | None:
        way = ways.get(way_id)
        if way is None:
            return None
        try:
            return [nodes[n] for n in way.get("nodes", [])]
        except KeyError:
            return None

    features = []
    dropped = 0
    consumed: set[int] = set()

    for rel in relations:
        outers = []
        inners = []
        for member in rel.get("members", []):
            if member.get("type") != "way":
                continue
            coords = way_coords(member["ref"])
            if coords is None:
                continue
            consumed.add(member["ref"])
            role = member.get("role") or "outer"
            (inners if role == "inner" else outers).append(coords)
        outer_rings, d1 = _stitch_rings(outers)
        inner_rings, d2 = _stitch_rings(inners)
        dropped += d1 + d2
        shells = []
        for ring in outer_rings:
            shell = Polygon(ring[:-1])
            if not shell.is_valid:
                shell = shell.buffer(0)
            if not shell.is_empty:
                shells.append(shell)
        holes_for: dict[int, list] = {i: [] for i in range(len(shells))}
        for ring in inner_rings:
            hole = Polygon(ring[:-1])
            for i, shell in enumerate(shells):
                if shell.contains(hole.representative_point()):
                    holes_for[i].append(ring[:-1])
                    break
        for i, shell in enumerate(shells):
            if holes_for[i]:
                geom = Polygon(list(shell.exterior.coords)[:-1],
                               holes_for[i])
                if not geom.is_valid:
                    geom = geom.buffer(0)
            else:
                geom = shell
            if geom.is_empty:
                continue
            if geom.geom_type == "MultiPolygon":
                features.extend((g, class_id) for g in geom.geoms)
            else:
                features.append((geom, class_id))

    for way_id, way in ways.items():
        if way_id in consumed:
            continue
        if "tags" not in way:
            continue  # bare geometry recursed in for some relation
        coords = way_coords(way_id)
        if coords is None or len(coords) < 3:
            dropped += 1
            continue
        if coords[0] != coords[-1]:
            dropped += 1
            continue
        poly = Polygon(coords[:-1])
        if not poly.is_valid:
            poly = poly.buffer(0)
        if poly.is_empty:
            continue
        if poly.geom_type == "MultiPolygon":
            features.extend((g, class_id) for g in poly.geoms)
        else:
            features.append((poly, class_id))
    return features, dropped


def run_overpass(query: OverpassQuery, class_id: int,
                 endpoint: str = DEFAULT_ENDPOINT,
                 cache: DiskCache | None = None,
                 transport: Transport | None = None,
                 acquisition_tag: str = "") -> GroundTruthLayer:
    """Execute a query and build a WGS84 ground truth layer."""
    ql = build_ql(query)
    cache = cache if cache is not None else DiskCache(namespace="overpass")
    transport = transport or _default_transport
    key = content_key(ql)
    blob = cache.get(key)
    if blob is None:
        status, headers, blob = transport(endpoint, ql,
                                          float(query.timeout_s) + 10.0)
        if status == 429:
            retry_after = None
            raw = headers.get("Retry-After") or headers.get("retry-after")
            if raw is not None:
                try:
                    retry_after = float(raw)
                except ValueError:
                    retry_after = None
            raise NetworkError(
                "overpass rate limit hit (HTTP 429); retry later",
                retry_after=retry_after)
        if status != 200:
            raise NetworkError(f"overpass returned HTTP {status}")
        cache.put(key, blob)
    try:
        doc = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"overpass response is not valid JSON: {exc}") \
            from exc
    features, dropped = parse_overpass_json(doc, class_id)
    if dropped:
        log.warning("overpass: discarded %d unclosed ways", dropped)
    return GroundTruthLayer(features, "EPSG:4326", source_tag="overpass",
                            acquisition_tag=acquisition_tag,
                            dropped_unmapped=dropped)
