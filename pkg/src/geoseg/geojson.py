"""Minimal GeoJSON reading and writing (RFC 7946 subset).

Features are (shapely geometry, properties dict) pairs. Only the geometry
types the pipeline consumes are accepted when reading: Polygon,
MultiPolygon, LineString, MultiLineString. Coordinates are taken as-is;
RFC 7946 files are WGS84 lon/lat unless the caller knows otherwise.
"""

from __future__ import annotations

import json
from pathlib import Path

from shapely.geometry import mapping, shape
from shapely.geometry.base import BaseGeometry

from .errors import DataError

_READABLE = {"Polygon", "MultiPolygon", "LineString", "MultiLineString"}

Feature = tuple[BaseGeometry, dict]


def read_feature_collection(path: str | Path) -> list[Feature]:
    """Parse a GeoJSON file into (geometry, properties) pairs.

    Accepts a FeatureCollection, a single Feature, or a bare geometry.
    Unsupported geometry types raise DataError.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read GeoJSON {path}: {exc}") from exc
    kind = doc.get("type")
    if kind == "FeatureCollection":
        raw = doc.get("features", [])
    elif kind == "Feature":
        raw = [doc]
    elif kind in _READABLE:
        raw = [{"type": "Feature", "geometry": doc, "properties": {}}]
    else:
        raise DataError(f"{path}: unsupported GeoJSON root type {kind!r}")
    features: list[Feature] = []
    for i, feat in enumerate(raw):
        geom_doc = feat.get("geometry")
        if geom_doc is None:
            continue
        gtype = geom_doc.get("type")
        if gtype not in _READABLE:
            raise DataError(
                f"{path}: feature {i} has unsupported geometry {gtype!r}")
        features.append((shape(geom_doc), feat.get("properties") or {}))
    return features


def write_feature_collection(path: str | Path,
                             features: list[Feature]) -> None:
    """Write (geometry, properties) pairs as a FeatureCollection."""
    doc = {
        "type": "FeatureCollection",
        "features": [
            {"type": "Feature", "geometry": mapping(geom),
             "properties": props}
            for geom, props in features
        ],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))
