"""Ground truth vector layers: class definitions, file loading, and
derivation of polygons from line networks.

Sources: GeoJSON files, GeoPackage files (read-only, via sqlite3), the
Overpass module, or line networks polygonized here. Invalid polygons are
repaired with the zero-width buffer trick; features whose class attribute
is not in the class mapping are dropped with a counted warning.
"""

from __future__ import annotations

import logging
import sqlite3
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import shapely
from shapely.geometry import LineString, MultiPolygon, Polygon
from shapely.geometry.base import BaseGeometry
from shapely.ops import polygonize, unary_union

from . import geojson
from .crs import CrsTransform
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

GROUPS = ("street", "pedestrian", "neither")


@dataclass(frozen=True)
class ClassSpec:
    """One semantic class. class_id 0 is reserved for background."""

    class_id: int
    name: str
    min_width_m: float
    min_area_m2: float
    group: str = "neither"
    priority: int = 0

    def __post_init__(self):
        if self.class_id <= 0:
            raise ConfigError("class_id must be a positive integer")
        if self.min_width_m <= 0 or self.min_area_m2 <= 0:
            raise ConfigError(
                f"class {self.name!r}: min_width_m and min_area_m2 "
                f"must be positive")
        if self.group not in GROUPS:
            raise ConfigError(
                f"class {self.name!r}: group must be one of {GROUPS}")


class ClassTable:
    """Ordered class registry with id lookup and group queries."""

    def __init__(self, classes: list[ClassSpec]):
        if not classes:
            raise ConfigError("class table is empty")
        self._by_id: dict[int, ClassSpec] = {}
        for spec in classes:
            if spec.class_id in self._by_id:
                raise ConfigError(f"duplicate class_id {spec.class_id}")
            self._by_id[spec.class_id] = spec
        self.classes = sorted(classes, key=lambda s: s.class_id)

    def __iter__(self):
        return iter(self.classes)

    def __len__(self):
        return len(self.classes)

    def __contains__(self, class_id: int) -> bool:
        return class_id in self._by_id

    def __eq__(self, other) -> bool:
        return isinstance(other, ClassTable) and self.classes == other.classes

    def get(self, class_id: int) -> ClassSpec:
        try:
            return self._by_id[class_id]
        except KeyError:
            raise DataError(f"unknown class_id {class_id}") from None

    def ids(self) -> list[int]:
        return [s.class_id for s in self.classes]

    def group_ids(self, group: str) -> list[int]:
        return [s.class_id for s in self.classes if s.group == group]

    @property
    def max_id(self) -> int:
        return self.classes[-1].class_id

    def to_json_obj(self) -> list[dict]:
        return [
            {"class_id": s.class_id, "name": s.name,
             "min_width_m": s.min_width_m, "min_area_m2": s.min_area_m2,
             "group": s.group, "priority": s.priority}
            for s in self.classes
        ]

    @classmethod
    def from_json_obj(cls, obj: list[dict]) -> "ClassTable":
        return cls([ClassSpec(**row) for row in obj])


@dataclass
class GroundTruthLayer:
    """Classified polygons in one CRS.

    ``features`` holds (polygon, class_id) pairs. ``source_tag`` records
    how the layer was produced ("file", "overpass", "line-derived",
    "vectorized"); ``acquisition_tag`` names the epoch, e.g. "2020".
    """

    features: list[tuple[BaseGeometry, int]]
    crs: str
    source_tag: str = "file"
    acquisition_tag: str = ""
    dropped_unmapped: int = 0

    def class_ids(self) -> set[int]:
        return {cid for _g, cid in self.features}

    def reproject(self, transform: CrsTransform) -> "GroundTruthLayer":
        if transform.source_crs != self.crs:
            raise DataError(
                f"transform source {transform.source_crs} does not match "
                f"layer CRS {self.crs}")

        def apply(geom):
            return shapely.transform(
                geom, lambda pts: np.column_stack(
                    transform.forward(pts[:, 0], pts[:, 1])))

        return GroundTruthLayer(
            features=[(apply(g), cid) for g, cid in self.features],
            crs=transform.target_crs, source_tag=self.source_tag,
            acquisition_tag=self.acquisition_tag,
            dropped_unmapped=self.dropped_unmapped)

    def to_geojson(self, path: str | Path) -> None:
        geojson.write_feature_collection(
            path, [(g, {"class_id": cid}) for g, cid in self.features])

    @classmethod
    def from_geojson(cls, path: str | Path, crs: str = "EPSG:4326",
                     acquisition_tag: str = "") -> "GroundTruthLayer":
        feats = []
        for geom, props in geojson.read_feature_collection(path):
            cid = props.get("class_id")
            if cid is None:
                raise DataError(f"{path}: feature lacks class_id")
            feats.append((geom, int(cid)))
        return cls(feats, crs, source_tag="file",
                   acquisition_tag=acquisition_tag)


def _repair(geom: BaseGeometry) -> list[BaseGeometry]:
    """Repair invalid polygons, preserving area; explode multi-parts.

    make_valid keeps every lobe of a self-crossing ring (a zero-width
    buffer would silently drop negatively wound lobes).
    """
    if not geom.is_valid:
        geom = shapely.make_valid(geom)
    if geom.is_empty:
        return []
    if isinstance(geom, MultiPolygon):
        return list(geom.geoms)
    if isinstance(geom, Polygon):
        return [geom]
    # GeometryCollection from an aggressive repair: keep polygonal parts
    parts = []
    for part in getattr(geom, "geoms", []):
        if isinstance(part, Polygon):
            parts.append(part)
        elif isinstance(part, MultiPolygon):
            parts.extend(part.geoms)
    return parts


def _map_features(raw: list[tuple[BaseGeometry, dict]],
                  class_mapping: dict[str, int],
                  class_attribute: str) -> tuple[list, int]:
    features = []
    dropped = 0
    for geom, props in raw:
        value = props.get(class_attribute)
        key = None if value is None else str(value)
        if key not in class_mapping:
            dropped += 1
            continue
        cid = class_mapping[key]
        for part in _repair(geom):
            features.append((part, cid))
    return features, dropped


def load_vector_file(path: str | Path, class_mapping: dict[str, int],
                     class_attribute: str, crs: str | None = None,
                     acquisition_tag: str = "") -> GroundTruthLayer:
    """Load polygons from GeoJSON or GeoPackage and map them to class ids.

    ``class_mapping`` maps attribute values (as strings) to class ids.
    Features with unmapped values are dropped; the count is logged and
    recorded on the returned layer.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".geojson", ".json"):
        raw = geojson.read_feature_collection(path)
        layer_crs = crs or "EPSG:4326"
    elif suffix == ".gpkg":
        raw, gpkg_crs = _read_geopackage(path)
        layer_crs = crs or gpkg_crs
    else:
        raise ConfigError(f"unsupported ground truth format: {path.name}")
    features, dropped = _map_features(raw, class_mapping, class_attribute)
    if dropped:
        log.warning("%s: dropped %d features with unmapped %r values",
                    path.name, dropped, class_attribute)
    return GroundTruthLayer(features, layer_crs, source_tag="file",
                            acquisition_tag=acquisition_tag,
                            dropped_unmapped=dropped)


_GPKG_ENVELOPE_BYTES = {0: 0, 1: 32, 2: 48, 3: 48, 4: 64}


def _parse_gpkg_geometry(blob: bytes) -> BaseGeometry | None:
    """Strip the GeoPackage binary header and parse the WKB payload."""
    if blob is None or len(blob) < 8 or blob[0:2] != b"GP":
        raise DataError("not a GeoPackage geometry blob")
    flags = blob[3]
    if flags & 0b100000:  # empty-geometry flag
        return None
    env_code = (flags >> 1) & 0b111
    if env_code not in _GPKG_ENVELOPE_BYTES:
        raise DataError(f"invalid GeoPackage envelope code {env_code}")
    offset = 8 + _GPKG_ENVELOPE_BYTES[env_code]
    return shapely.from_wkb(bytes(blob[offset:]))


def _read_geopackage(path: Path) -> tuple[list[tuple[BaseGeometry, dict]], str]:
    """Read the first feature table of a GeoPackage."""
    try:
        con = sqlite3.connect(f"file:{path}?mode=ro", uri=True)
    except sqlite3.Error as exc:
        raise DataError(f"cannot open GeoPackage {path}: {exc}") from exc
    try:
        row = con.execute(
            "SELECT table_name FROM gpkg_contents WHERE data_type='features' "
            "ORDER BY table_name LIMIT 1").fetchone()
        if row is None:
            raise DataError(f"{path}: no feature table in gpkg_contents")
        table = row[0]
        gc = con.execute(
            "SELECT column_name, srs_id FROM gpkg_geometry_columns "
            "WHERE table_name=?", (table,)).fetchone()
        if gc is None:
            raise DataError(f"{path}: {table} missing geometry column entry")
        geom_col, srs_id = gc
        # table/column names come from gpkg metadata tables, quote them
        cur = con.execute(f'SELECT * FROM "{table}"')
        names = [d[0] for d in cur.description]
        gi = names.index(geom_col)
        out = []
        for rec in cur:
            geom = _parse_gpkg_geometry(rec[gi])
            if geom is None:
                continue
            props = {n: v for j, (n, v) in enumerate(zip(names, rec))
                     if j != gi}
            out.append((geom, props))
        return out, f"EPSG:{srs_id}"
    finally:
        con.close()


# ---------------------------------------------------------------------------
# line networks


def _cluster_endpoints(points: list[tuple[float, float]],
                       tol: float) -> dict[tuple[float, float],
                                           tuple[float, float]]:
    """Union-find clustering of endpoints within tol; maps each point to
    its cluster centroid."""
    n = len(points)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    tol2 = tol * tol
    arr = np.asarray(points)
    for i in range(n):
        # bounded search; endpoint counts are small in practice
        dx = arr[i + 1:, 0] - arr[i, 0]
        dy = arr[i + 1:, 1] - arr[i, 1]
        close = np.nonzero(dx * dx + dy * dy <= tol2)[0]
        for j in close:
            ri, rj = find(i), find(int(j) + i + 1)
            if ri != rj:
                parent[rj] = ri
    clusters: dict[int, list[int]] = {}
    for i in range(n):
        clusters.setdefault(find(i), []).append(i)
    mapping = {}
    for members in clusters.values():
        cx = float(np.mean(arr[members, 0]))
        cy = float(np.mean(arr[members, 1]))
        for i in members:
            mapping[points[i]] = (cx, cy)
    return mapping


def lines_to_polygons(lines: list[tuple[LineString, str]],
                      class_line_tag: str, class_id: int, crs: str,
                      snap_tol_m: float = 0.25,
                      acquisition_tag: str = "") -> GroundTruthLayer:
    """Polygonize a line network and keep the faces owned by one line tag.

    Endpoints closer than ``snap_tol_m`` are snapped to their cluster
    centroid, the network is noded and polygonized, and a face is claimed
    for the class when at least half of its boundary length lies within
    ``snap_tol_m`` of lines carrying ``class_line_tag``.
    """
    if snap_tol_m <= 0:
        raise ConfigError("snap_tol_m must be positive")
    if not lines:
        return GroundTruthLayer([], crs, source_tag="line-derived",
                                acquisition_tag=acquisition_tag)
    endpoints = []
    for geom, _tag in lines:
        coords = list(geom.coords)
        endpoints.append(tuple(coords[0]))
        endpoints.append(tuple(coords[-1]))
    snap = _cluster_endpoints(endpoints, snap_tol_m)

    def snapped(geom: LineString) -> LineString:
        coords = list(geom.coords)
        first = snap.get(tuple(coords[0]), coords[0])
        last = snap.get(tuple(coords[-1]), coords[-1])
        return LineString([first, *coords[1:-1], last])

    adjusted = [(snapped(g), tag) for g, tag in lines]
    noded = unary_union([g for g, _tag in adjusted])
    faces = list(polygonize(noded))
    tagged = [g for g, tag in adjusted if tag == class_line_tag]
    features: list[tuple[BaseGeometry, int]] = []
    if tagged:
        corridor = unary_union(tagged).buffer(snap_tol_m)
        for face in faces:
            boundary = face.boundary
            if boundary.length <= 0:
                continue
            covered = boundary.intersection(corridor).length
            if covered / boundary.length >= 0.5:
                features.append((face, class_id))
    n_dropped = len(faces) - len(features)
    if n_dropped:
        log.info("lines_to_polygons: %d of %d faces not claimed by %r",
                 n_dropped, len(faces), class_line_tag)
    return GroundTruthLayer(features, crs, source_tag="line-derived",
                            acquisition_tag=acquisition_tag)


def line_coverage_ratio(lines: list[LineString],
                        polygons: list[BaseGeometry],
                        tol_m: float = 0.25) -> float:
    """Fraction of total line length lying within tol of polygon
    boundaries. Raises DataError when the network has zero length."""
    total = sum(g.length for g in lines)
    if total <= 0:
        raise DataError("line network has zero total length")
    if not polygons:
        return 0.0
    boundary = unary_union([p.boundary for p in polygons]).buffer(tol_m)
    covered = sum(g.intersection(boundary).length for g in lines)
    return covered / total
