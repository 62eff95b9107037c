"""Dataset assembly: grid, imagery, ground truth, masks, manifest.

The build runs in fixed stages: lay the grid, fetch imagery for every
selected tile, load ground truth, rasterize masks, assign train/test
splits, compute diversity-based repetition counts for train tiles, and
write ``manifest.json``. Images live under ``images/``, masks under
``masks/``, named ``img_{tile_id}_{tag}.png`` / ``mask_{tile_id}_{tag}.png``
with ESRI world files alongside.

Reruns are resumable: a tile whose image or mask file already exists on
disk is skipped, so deleting one artifact regenerates exactly that
artifact. Stage failures surface as PipelineError naming the stage and
tile. Two clean-room builds from the same config produce identical
manifests except for the creation timestamp.

Split rule: a tile joins a split iff its rectangle is fully contained in
the split's region union; a tile inside both train and test regions is a
configuration error; a tile in neither is excluded from the manifest.

Repetition weighting: per train tile, the per-class pixel proportion
vector (background included) is dotted with the elementwise median
vector of the whole train set; tiles with low dot product (rare class
content) get weight median(d)/d and are repeated up to max_repetitions
times. The raw dot product is persisted so other mappings can be applied
downstream without recomputing masks.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import NamedTuple

import numpy as np
from shapely.geometry import box
from shapely.geometry.base import BaseGeometry

from .config import PipelineConfig
from .crs import get_transform
from .errors import ConfigError, DataError, GeosegError, PipelineError
from .geojson import read_feature_collection
from .grid import (DatasetRegion, GridSpec, TileGrid, build_grid,
                   load_named_regions, region_geometry_in)
from .groundtruth import (ClassTable, GroundTruthLayer, lines_to_polygons,
                          line_coverage_ratio, load_vector_file)
from .imagery import ImageryClient, RasterTile
from .overpass import run_overpass
from .rasterize import ClassMask, rasterize, round_half_up
from .worldfile import (load_image, load_mask, save_image, save_mask,
                        world_file_path)

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
IMAGES_DIR = "images"
MASKS_DIR = "masks"
SPLITS = ("train", "test")
DIVERSITY_EPS = 1e-9


def image_filename(tile_id: int, tag: str) -> str:
    return f"img_{tile_id}_{tag}.png"


def mask_filename(tile_id: int, tag: str) -> str:
    return f"mask_{tile_id}_{tag}.png"


@dataclass(frozen=True)
class TileRecord:
    tile_id: int
    split: str
    image_path: str             # relative to the dataset root
    mask_path: str
    acquisition_tag: str
    diversity_weight: float = 1.0
    diversity_raw: float | None = None
    repetitions: int = 1

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"tile {self.tile_id}: bad split {self.split!r}")
        if self.repetitions < 1:
            raise DataError(f"tile {self.tile_id}: repetitions must be >= 1")

    def to_json_obj(self) -> dict:
        return {
            "tile_id": self.tile_id, "split": self.split,
            "image_path": self.image_path, "mask_path": self.mask_path,
            "acquisition_tag": self.acquisition_tag,
            "diversity_weight": self.diversity_weight,
            "diversity_raw": self.diversity_raw,
            "repetitions": self.repetitions,
        }


@dataclass
class DatasetManifest:
    name: str
    spec: GridSpec
    provider: dict
    class_table: ClassTable
    records: list[TileRecord] = field(default_factory=list)
    created_at: str = ""
    config_hash: str = ""

    def to_json_obj(self) -> dict:
        return {
            "name": self.name,
            "created_at": self.created_at,
            "config_hash": self.config_hash,
            "grid": {
                "tile_size_px": self.spec.tile_size_px,
                "resolution_m": self.spec.resolution_m,
                "overlap_m": self.spec.overlap_m,
                "work_crs": self.spec.work_crs,
                "provider_crs": self.spec.provider_crs,
            },
            "provider": self.provider,
            "classes": self.class_table.to_json_obj(),
            "records": [r.to_json_obj()
                        for r in sorted(self.records,
                                        key=lambda r: r.tile_id)],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json_obj(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json_obj(cls, obj: dict) -> "DatasetManifest":
        return cls(
            name=obj["name"],
            spec=GridSpec(**obj["grid"]),
            provider=dict(obj["provider"]),
            class_table=ClassTable.from_json_obj(obj["classes"]),
            records=[TileRecord(**row) for row in obj["records"]],
            created_at=obj["created_at"],
            config_hash=obj["config_hash"],
        )

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        return cls.from_json_obj(json.loads(path.read_text()))

    def record(self, tile_id: int) -> TileRecord:
        for r in self.records:
            if r.tile_id == tile_id:
                return r
        raise DataError(f"no record for tile {tile_id}")


def provider_descriptor(endpoint) -> dict:
    return {
        "kind": endpoint.kind,
        "url_template": endpoint.url_template,
        "layer": endpoint.layer,
        "crs": endpoint.crs,
        "resolution": endpoint.resolution,
        "tile_px": endpoint.tile_px,
        "zoom": endpoint.zoom,
        "matrix": endpoint.matrix,
        "matrix_set": endpoint.matrix_set,
    }


def assign_splits(grid: TileGrid,
                  split_regions: dict[str, BaseGeometry]) -> dict[int, str]:
    """Map tile_id -> split name by full containment in the split region.

    Regions must be in the provider CRS. Tiles contained in no region are
    left out; containment in more than one region is an error since the
    splits would leak into each other.
    """
    for name in split_regions:
        if name not in SPLITS:
            raise ConfigError(f"unknown split name {name!r}")
    assignment: dict[int, str] = {}
    for tile in grid.selected_tiles:
        rect = box(*tile.bounds_provider)
        hits = [name for name, geom in split_regions.items()
                if geom.covers(rect)]
        if len(hits) > 1:
            raise DataError(
                f"tile {tile.tile_id} is inside both train and test regions;"
                f" split regions must not overlap")
        if hits:
            assignment[tile.tile_id] = hits[0]
    return assignment


class DiversityInfo(NamedTuple):
    weight: float
    raw: float          # dot product with the median class-proportion vector
    repetitions: int


def diversity_weights(masks: dict[int, ClassMask], class_table: ClassTable,
                      max_repetitions: int = 4) -> dict[int, DiversityInfo]:
    """Repetition counts from class-content diversity of train masks."""
    if not masks:
        raise DataError("diversity weighting needs at least one train mask")
    if max_repetitions < 1:
        raise ConfigError("max_repetitions must be >= 1")
    labels = [0] + class_table.ids()
    tile_ids = sorted(masks)
    rows = []
    for tid in tile_ids:
        data = masks[tid].data
        counts = np.bincount(data.ravel(),
                             minlength=class_table.max_id + 1)[labels]
        rows.append(counts.astype(np.float64) / data.size)
    c = np.vstack(rows)                       # (tiles, classes incl bg)
    m = np.median(c, axis=0)
    d = c @ m
    med_d = float(np.median(d))
    w = med_d / np.maximum(d, DIVERSITY_EPS)
    out = {}
    for i, tid in enumerate(tile_ids):
        reps = int(np.clip(round_half_up(float(w[i])), 1, max_repetitions))
        out[tid] = DiversityInfo(weight=float(w[i]), raw=float(d[i]),
                                 repetitions=reps)
    return out


# ---------------------------------------------------------------------------
# stage helpers (shared by build_dataset and the CLI's single-stage commands)


def load_groundtruth(cfg: PipelineConfig, transport=None,
                     cache=None) -> GroundTruthLayer:
    """Load the configured ground truth source, in the provider CRS."""
    gt = cfg.groundtruth
    tag = cfg.acquisition_tag
    if gt.mode == "file":
        layer = load_vector_file(gt.path, gt.class_mapping,
                                 gt.class_attribute, crs=gt.crs,
                                 acquisition_tag=tag)
    elif gt.mode == "lines":
        layer = _lines_groundtruth(cfg)
    else:
        layers = [run_overpass(src.query, src.class_id,
                               endpoint=src.endpoint, cache=cache,
                               transport=transport, acquisition_tag=tag)
                  for src in gt.overpass]
        layer = GroundTruthLayer(
            features=[f for lyr in layers for f in lyr.features],
            crs="EPSG:4326", source_tag="overpass", acquisition_tag=tag,
            dropped_unmapped=sum(lyr.dropped_unmapped for lyr in layers))
    provider = cfg.grid.provider_crs
    if layer.crs != provider:
        layer = layer.reproject(get_transform(layer.crs, provider))
    return layer


def _lines_groundtruth(cfg: PipelineConfig) -> GroundTruthLayer:
    gt = cfg.groundtruth
    crs = gt.crs or "EPSG:4326"
    lines = []
    for geom, props in read_feature_collection(gt.path):
        value = props.get(gt.class_attribute)
        tag = "" if value is None else str(value)
        if geom.geom_type == "LineString":
            lines.append((geom, tag))
        elif geom.geom_type == "MultiLineString":
            lines.extend((part, tag) for part in geom.geoms)
    if not lines:
        raise DataError(f"{gt.path}: no line features found")
    features = []
    dropped = 0
    for tag_value, class_id in sorted(gt.class_mapping.items()):
        layer = lines_to_polygons(lines, tag_value, class_id, crs,
                                  snap_tol_m=gt.snap_tol_m,
                                  acquisition_tag=cfg.acquisition_tag)
        tagged = [g for g, t in lines if t == tag_value]
        if not tagged:
            continue
        ratio = line_coverage_ratio(tagged,
                                    [g for g, _cid in layer.features],
                                    tol_m=gt.snap_tol_m)
        if ratio < gt.min_line_coverage:
            raise DataError(
                f"line network for {tag_value!r} covers only "
                f"{ratio:.1%} of its length with polygon boundaries "
                f"(threshold {gt.min_line_coverage:.0%}); the network "
                f"likely has gaps or misaligned segments")
        features.extend(layer.features)
        dropped += layer.dropped_unmapped
    return GroundTruthLayer(features, crs, source_tag="line-derived",
                            acquisition_tag=cfg.acquisition_tag,
                            dropped_unmapped=dropped)


def load_split_regions(cfg: PipelineConfig) -> dict[str, BaseGeometry]:
    """Split regions from config, merged per split, in the provider CRS."""
    out: dict[str, BaseGeometry] = {}
    for name, path in cfg.split_files.items():
        if not Path(path).exists():
            raise ConfigError(f"split region file not found: {path}")
        region = DatasetRegion.from_geojson(path, cfg.splits_crs)
        out[name] = region_geometry_in(region, cfg.splits_crs,
                                       cfg.grid.provider_crs)
    return out


def build_region_grid(cfg: PipelineConfig) -> TileGrid:
    if not cfg.region_path.exists():
        raise ConfigError(f"region file not found: {cfg.region_path}")
    region = DatasetRegion.from_geojson(cfg.region_path, cfg.region_crs)
    return build_grid(region, cfg.grid)


def fetch_imagery(cfg: PipelineConfig, grid: TileGrid, out_dir: str | Path,
                  jobs: int = 1, session=None, cache=None,
                  client: ImageryClient | None = None) -> int:
    """Fetch and save images for all selected tiles. Returns #fetched."""
    out = Path(out_dir) / IMAGES_DIR
    out.mkdir(parents=True, exist_ok=True)
    if client is None:
        client = ImageryClient(cfg.endpoint, cache=cache, session=session)
    tag = cfg.acquisition_tag
    fetched = [0]

    def fetch_one(tile):
        path = out / image_filename(tile.tile_id, tag)
        if path.exists() and world_file_path(path).exists():
            return
        try:
            raster: RasterTile = client.fetch_tile(tile, cfg.grid, tag)
        except GeosegError as exc:
            raise PipelineError("fetch", tile.tile_id, exc) from exc
        save_image(path, raster.pixels, raster.geotransform)
        fetched[0] += 1

    tiles = grid.selected_tiles
    if jobs <= 1 or len(tiles) <= 1:
        for tile in tiles:
            fetch_one(tile)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(fetch_one, tiles))
    return fetched[0]


def rasterize_masks(cfg: PipelineConfig, grid: TileGrid,
                    layer: GroundTruthLayer, out_dir: str | Path) -> int:
    """Rasterize ground truth for all selected tiles. Returns #written."""
    out = Path(out_dir) / MASKS_DIR
    out.mkdir(parents=True, exist_ok=True)
    tag = cfg.acquisition_tag
    written = 0
    for tile in grid.selected_tiles:
        path = out / mask_filename(tile.tile_id, tag)
        if path.exists() and world_file_path(path).exists():
            continue
        try:
            mask = rasterize(layer, tile, cfg.grid, cfg.class_table, tag)
        except GeosegError as exc:
            raise PipelineError("rasterize", tile.tile_id, exc) from exc
        save_mask(path, mask.data, mask.geotransform)
        written += 1
    return written


def assemble_manifest(cfg: PipelineConfig, grid: TileGrid,
                      out_dir: str | Path) -> DatasetManifest:
    """Split assignment + diversity weighting + manifest write.

    Expects images and masks already on disk (fetch_imagery and
    rasterize_masks, or a previous run).
    """
    out = Path(out_dir)
    tag = cfg.acquisition_tag
    split_regions = load_split_regions(cfg)
    if split_regions:
        assignment = assign_splits(grid, split_regions)
    else:
        log.warning("no [splits] configured; every selected tile goes to "
                    "the train split")
        assignment = {t.tile_id: "train" for t in grid.selected_tiles}
    train_ids = sorted(t for t, s in assignment.items() if s == "train")
    if not train_ids:
        log.warning("train split is empty")
    train_masks: dict[int, ClassMask] = {}
    for tid in train_ids:
        path = out / MASKS_DIR / mask_filename(tid, tag)
        try:
            data, gt = load_mask(path)
        except (OSError, DataError) as exc:
            raise PipelineError("manifest", tid, exc) from exc
        train_masks[tid] = ClassMask(tid, data, gt, acquisition_tag=tag)
    diversity = (diversity_weights(train_masks, cfg.class_table,
                                   cfg.max_repetitions)
                 if train_masks else {})
    records = []
    for tid in sorted(assignment):
        split = assignment[tid]
        info = diversity.get(tid)
        records.append(TileRecord(
            tile_id=tid, split=split,
            image_path=f"{IMAGES_DIR}/{image_filename(tid, tag)}",
            mask_path=f"{MASKS_DIR}/{mask_filename(tid, tag)}",
            acquisition_tag=tag,
            diversity_weight=info.weight if info else 1.0,
            diversity_raw=info.raw if info else None,
            repetitions=info.repetitions if info else 1,
        ))
    manifest = DatasetManifest(
        name=cfg.dataset_name, spec=cfg.grid,
        provider=provider_descriptor(cfg.endpoint),
        class_table=cfg.class_table, records=records,
        created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        config_hash=cfg.config_hash)
    manifest.save(out / MANIFEST_NAME)
    return manifest


def build_dataset(cfg: PipelineConfig, out_dir: str | Path, jobs: int = 1,
                  session=None, transport=None,
                  cache=None) -> DatasetManifest:
    """End-to-end dataset build; see the module docstring for the stages."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = build_region_grid(cfg)
    n = fetch_imagery(cfg, grid, out, jobs=jobs, session=session,
                      cache=cache)
    log.info("imagery: %d fetched, %d already present", n,
             len(grid.selected_tiles) - n)
    try:
        layer = load_groundtruth(cfg, transport=transport, cache=cache)
    except GeosegError as exc:
        if isinstance(exc, PipelineError):
            raise
        raise PipelineError("groundtruth", None, exc) from exc
    n = rasterize_masks(cfg, grid, layer, out)
    log.info("masks: %d rasterized, %d already present", n,
             len(grid.selected_tiles) - n)
    return assemble_manifest(cfg, grid, out)


def validate_manifest(manifest: DatasetManifest,
                      root: str | Path) -> None:
    """Referential integrity: every artifact exists and is consistent.

    Checks each record's image and mask: files and world files present,
    pixel dimensions match the grid spec, and the image and mask carry
    the same geotransform. Raises DataError listing every violation.
    """
    root = Path(root)
    n = manifest.spec.tile_size_px
    problems: list[str] = []
    seen: set[int] = set()
    for rec in manifest.records:
        if rec.tile_id in seen:
            problems.append(f"tile {rec.tile_id}: duplicate record")
            continue
        seen.add(rec.tile_id)
        img = root / rec.image_path
        msk = root / rec.mask_path
        gt_img = gt_msk = None
        try:
            pixels, gt_img = load_image(img)
            if pixels.shape != (n, n, 3):
                problems.append(
                    f"tile {rec.tile_id}: image is {pixels.shape}, "
                    f"expected {(n, n, 3)}")
        except (OSError, DataError) as exc:
            problems.append(f"tile {rec.tile_id}: image unreadable: {exc}")
        try:
            data, gt_msk = load_mask(msk)
            if data.shape != (n, n):
                problems.append(
                    f"tile {rec.tile_id}: mask is {data.shape}, "
                    f"expected {(n, n)}")
        except (OSError, DataError) as exc:
            problems.append(f"tile {rec.tile_id}: mask unreadable: {exc}")
        if gt_img is not None and gt_msk is not None and gt_img != gt_msk:
            problems.append(
                f"tile {rec.tile_id}: image and mask geotransforms differ")
    if problems:
        raise DataError("manifest integrity check failed: "
                        + "; ".join(problems))
