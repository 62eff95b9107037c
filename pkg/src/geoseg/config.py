"""Pipeline configuration: one TOML file describing a whole dataset run.

Sections: [region] (area-of-interest file and its CRS), [grid] (tiling),
[imagery] (endpoint and acquisition tag), [groundtruth] (vector file,
line network, or Overpass queries plus the class mapping), [[classes]]
(the class table), [splits] (named split region files), [cleaning]
(structuring element policy), [metrics] (street/pedestrian groups, trend
regions), [dataset] (name, repetition cap).

Relative paths are resolved against the TOML file's directory. The
config hash is the sha256 of the parsed document in canonical JSON form,
so it changes exactly when some field changes, not when formatting does.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:             # Python 3.10
    import tomli as tomllib

from .cleaning import ClassCleaningParams, CleaningPolicy, ELEMENT_SHAPES
from .errors import ConfigError
from .groundtruth import ClassSpec, ClassTable
from .grid import GridSpec
from .imagery import ImageryEndpoint
from .overpass import DEFAULT_ENDPOINT, OverpassQuery

GT_MODES = ("file", "lines", "overpass")


@dataclass(frozen=True)
class OverpassSource:
    query: OverpassQuery
    class_id: int
    endpoint: str = DEFAULT_ENDPOINT


@dataclass
class GroundTruthConfig:
    mode: str
    path: Path | None = None
    crs: str | None = None              # None: format default (WGS84/gpkg)
    class_attribute: str = "class"
    class_mapping: dict[str, int] = field(default_factory=dict)
    snap_tol_m: float = 0.25
    min_line_coverage: float = 0.85
    overpass: list[OverpassSource] = field(default_factory=list)


@dataclass
class PipelineConfig:
    path: Path
    raw: dict
    region_path: Path
    region_crs: str
    grid: GridSpec
    endpoint: ImageryEndpoint
    acquisition_tag: str
    groundtruth: GroundTruthConfig
    class_table: ClassTable
    split_files: dict[str, Path]
    splits_crs: str
    cleaning: CleaningPolicy
    street_ids: list[int] | None
    pedestrian_ids: list[int] | None
    trend_regions_path: Path | None
    dataset_name: str
    dataset_root: Path
    max_repetitions: int

    @property
    def config_hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _require(table: dict, key: str, section: str):
    if key not in table:
        raise ConfigError(f"[{section}] is missing required key {key!r}")
    return table[key]


def _known_class(table: ClassTable, class_id: int, section: str) -> None:
    if class_id not in table:
        raise ConfigError(
            f"[{section}] references class_id {class_id}, which is not in "
            f"[[classes]]")


def _check_keys(table: dict, allowed: set[str], section: str) -> None:
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(
            f"[{section}] has unknown keys: {', '.join(sorted(unknown))}")


def _parse_grid(doc: dict, imagery_crs: str) -> GridSpec:
    t = _require(doc, "grid", "grid")
    _check_keys(t, {"tile_size_px", "resolution_m", "overlap_m", "work_crs",
                    "provider_crs"}, "grid")
    return GridSpec(
        tile_size_px=int(_require(t, "tile_size_px", "grid")),
        resolution_m=float(_require(t, "resolution_m", "grid")),
        overlap_m=float(t.get("overlap_m", 0.0)),
        work_crs=str(_require(t, "work_crs", "grid")),
        provider_crs=str(t.get("provider_crs", imagery_crs)),
    )


def _parse_imagery(doc: dict) -> tuple[ImageryEndpoint, str]:
    t = _require(doc, "imagery", "imagery")
    _check_keys(t, {"kind", "url", "layer", "tag", "crs", "zoom",
                    "provider_resolution", "tile_px", "matrix", "matrix_set",
                    "matrix_origin", "style", "image_format", "headers",
                    "timeout_s", "max_retries", "max_concurrent"}, "imagery")
    origin = t.get("matrix_origin")
    if origin is not None:
        if not (isinstance(origin, list) and len(origin) == 2):
            raise ConfigError("[imagery] matrix_origin must be [x, y]")
        origin = (float(origin[0]), float(origin[1]))
    resolution = t.get("provider_resolution")
    endpoint = ImageryEndpoint(
        kind=str(_require(t, "kind", "imagery")),
        url_template=str(_require(t, "url", "imagery")),
        crs=str(_require(t, "crs", "imagery")),
        layer=str(t.get("layer", "")),
        provider_resolution=None if resolution is None else float(resolution),
        tile_px=int(t.get("tile_px", 256)),
        zoom=None if t.get("zoom") is None else int(t["zoom"]),
        matrix=str(t.get("matrix", "")),
        matrix_set=str(t.get("matrix_set", "")),
        matrix_origin=origin,
        style=str(t.get("style", "default")),
        image_format=str(t.get("image_format", "image/png")),
        headers=dict(t.get("headers", {})),
        timeout_s=float(t.get("timeout_s", 30.0)),
        max_retries=int(t.get("max_retries", 3)),
        max_concurrent=int(t.get("max_concurrent", 4)),
    )
    return endpoint, str(t.get("tag", ""))


def _parse_classes(doc: dict) -> ClassTable:
    rows = _require(doc, "classes", "classes")
    if not isinstance(rows, list) or not rows:
        raise ConfigError("[[classes]] must list at least one class")
    specs = []
    for row in rows:
        _check_keys(row, {"id", "name", "min_width_m", "min_area_m2",
                          "group", "priority"}, "classes")
        specs.append(ClassSpec(
            class_id=int(_require(row, "id", "classes")),
            name=str(_require(row, "name", "classes")),
            min_width_m=float(_require(row, "min_width_m", "classes")),
            min_area_m2=float(_require(row, "min_area_m2", "classes")),
            group=str(row.get("group", "neither")),
            priority=int(row.get("priority", 0)),
        ))
    return ClassTable(specs)


def _parse_groundtruth(doc: dict, base: Path,
                       table: ClassTable) -> GroundTruthConfig:
    t = _require(doc, "groundtruth", "groundtruth")
    _check_keys(t, {"mode", "path", "crs", "class_attribute",
                    "class_mapping", "snap_tol_m", "min_line_coverage",
                    "overpass"}, "groundtruth")
    mode = t.get("mode")
    if mode is None:
        mode = "overpass" if "overpass" in t else "file"
    if mode not in GT_MODES:
        raise ConfigError(f"[groundtruth] mode must be one of {GT_MODES}")
    mapping = {str(k): int(v) for k, v in t.get("class_mapping", {}).items()}
    for cid in mapping.values():
        _known_class(table, cid, "groundtruth")
    cfg = GroundTruthConfig(
        mode=mode,
        path=None if t.get("path") is None else base / str(t["path"]),
        crs=None if t.get("crs") is None else str(t["crs"]),
        class_attribute=str(t.get("class_attribute", "class")),
        class_mapping=mapping,
        snap_tol_m=float(t.get("snap_tol_m", 0.25)),
        min_line_coverage=float(t.get("min_line_coverage", 0.85)),
    )
    if mode in ("file", "lines"):
        if cfg.path is None:
            raise ConfigError(f"[groundtruth] mode {mode!r} needs a path")
        if not mapping:
            raise ConfigError("[groundtruth] class_mapping is required for "
                              "file and lines modes")
    if mode == "overpass":
        rows = t.get("overpass")
        if not rows:
            raise ConfigError(
                "[groundtruth] overpass mode needs [[groundtruth.overpass]] "
                "query blocks")
        for row in rows:
            _check_keys(row, {"class_id", "key", "value", "kinds", "bbox",
                              "endpoint", "timeout_s"},
                        "groundtruth.overpass")
            class_id = int(_require(row, "class_id", "groundtruth.overpass"))
            _known_class(table, class_id, "groundtruth.overpass")
            bbox = _require(row, "bbox", "groundtruth.overpass")
            if not (isinstance(bbox, list) and len(bbox) == 4):
                raise ConfigError("[groundtruth.overpass] bbox must be "
                                  "[south, west, north, east]")
            value = row.get("value")
            query = OverpassQuery(
                tag_filters=((str(_require(row, "key",
                                           "groundtruth.overpass")),
                              None if value is None else str(value)),),
                bbox=tuple(float(v) for v in bbox),
                kinds=tuple(row.get("kinds", ["way", "relation"])),
                timeout_s=int(row.get("timeout_s", 25)),
            )
            cfg.overpass.append(OverpassSource(
                query=query, class_id=class_id,
                endpoint=str(row.get("endpoint", DEFAULT_ENDPOINT))))
    return cfg


def _parse_cleaning(doc: dict, table: ClassTable) -> CleaningPolicy:
    t = doc.get("cleaning", {})
    _check_keys(t, {"default_shape", "overrides"}, "cleaning")
    default_shape = str(t.get("default_shape", "octagon"))
    if default_shape not in ELEMENT_SHAPES:
        raise ConfigError(
            f"[cleaning] default_shape must be one of {ELEMENT_SHAPES}")
    per_class = {}
    for row in t.get("overrides", []):
        _check_keys(row, {"class_id", "shape", "min_width_m", "min_area_m2",
                          "enabled"}, "cleaning.overrides")
        cid = int(_require(row, "class_id", "cleaning.overrides"))
        _known_class(table, cid, "cleaning.overrides")
        per_class[cid] = ClassCleaningParams(
            enabled=bool(row.get("enabled", True)),
            element_shape=str(row.get("shape", default_shape)),
            min_width_m=(None if row.get("min_width_m") is None
                         else float(row["min_width_m"])),
            min_area_m2=(None if row.get("min_area_m2") is None
                         else float(row["min_area_m2"])),
        )
    return CleaningPolicy(per_class, default_shape=default_shape)


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    base = path.parent
    _check_keys(doc, {"region", "grid", "imagery", "groundtruth", "classes",
                      "splits", "cleaning", "metrics", "dataset"}, "config")

    region = _require(doc, "region", "region")
    _check_keys(region, {"path", "crs"}, "region")
    region_path = base / str(_require(region, "path", "region"))
    region_crs = str(region.get("crs", "EPSG:4326"))

    endpoint, tag = _parse_imagery(doc)
    grid = _parse_grid(doc, endpoint.crs)
    if grid.provider_crs != endpoint.crs:
        raise ConfigError(
            f"[grid] provider_crs {grid.provider_crs} does not match "
            f"[imagery] crs {endpoint.crs}")
    table = _parse_classes(doc)
    gt = _parse_groundtruth(doc, base, table)
    cleaning = _parse_cleaning(doc, table)

    splits = doc.get("splits", {})
    _check_keys(splits, {"train", "test", "crs"}, "splits")
    split_files = {name: base / str(splits[name])
                   for name in ("train", "test") if name in splits}
    splits_crs = str(splits.get("crs", region_crs))

    metrics = doc.get("metrics", {})
    _check_keys(metrics, {"street", "pedestrian", "trend_regions"},
                "metrics")

    def id_list(key):
        if key not in metrics:
            return None
        ids = [int(v) for v in metrics[key]]
        for cid in ids:
            _known_class(table, cid, "metrics")
        return ids

    trend_path = metrics.get("trend_regions")

    dataset = doc.get("dataset", {})
    _check_keys(dataset, {"name", "root", "max_repetitions"}, "dataset")
    max_reps = int(dataset.get("max_repetitions", 4))
    if max_reps < 1:
        raise ConfigError("[dataset] max_repetitions must be >= 1")

    return PipelineConfig(
        path=path,
        raw=doc,
        region_path=region_path,
        region_crs=region_crs,
        grid=grid,
        endpoint=endpoint,
        acquisition_tag=tag,
        groundtruth=gt,
        class_table=table,
        split_files=split_files,
        splits_crs=splits_crs,
        cleaning=cleaning,
        street_ids=id_list("street"),
        pedestrian_ids=id_list("pedestrian"),
        trend_regions_path=(None if trend_path is None
                            else base / str(trend_path)),
        dataset_name=str(dataset.get("name", path.stem)),
        dataset_root=base / str(dataset.get("root", "dataset")),
        max_repetitions=max_reps,
    )
