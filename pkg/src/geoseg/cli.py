"""geoseg command line: one subcommand per pipeline stage plus `build`.

Subcommands: grid, fetch, groundtruth, rasterize, clean, evaluate,
trend, build. Every one takes --config; logs go to stderr and machine
outputs go to files, so stdout stays silent. Exit codes: 0 success,
1 configuration error (bad flags included), 2 network error, 3 data
error. --report writes a small JSON {exit_code, summary, outputs} for
callers that do not want to parse logs. --dry-run prints the work plan
(tile counts, HTTP request counts) and performs no network calls and no
file writes.

Stage composition is equivalent to `build`: running grid, fetch,
groundtruth, rasterize in order against the same --out directory yields
the same artifacts and manifest as one `build` (the manifest is written
by the rasterize stage, timestamps aside).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path

from .config import PipelineConfig, load_config
from .cleaning import clean_mask
from .dataset import (DatasetManifest, MANIFEST_NAME, assemble_manifest,
                      build_dataset, build_region_grid, fetch_imagery,
                      image_filename, load_groundtruth, mask_filename,
                      rasterize_masks, validate_manifest)
from .errors import (ConfigError, DataError, GeosegError, NetworkError,
                     PipelineError)
from .grid import load_named_regions, region_geometry_in, save_grid_vector
from .groundtruth import GroundTruthLayer
from .imagery import plan_requests
from .metrics import evaluate_masks, trend
from .rasterize import ClassMask
from .worldfile import load_mask, save_mask, world_file_path

log = logging.getLogger("geoseg")

MASK_FILE_RE = re.compile(r"^mask_(\d+)_(.*)\.png$")


class _Parser(argparse.ArgumentParser):
    # usage problems map to the config-error exit code instead of
    # argparse's hardcoded SystemExit(2), which would collide with the
    # network-error code
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _exit_code(exc: GeosegError) -> int:
    if isinstance(exc, PipelineError):
        return _exit_code(exc.cause) if isinstance(exc.cause, GeosegError) \
            else 3
    if isinstance(exc, ConfigError):
        return 1
    if isinstance(exc, NetworkError):
        return 2
    return 3


def _load(args, apply_tag: bool = False) -> PipelineConfig:
    cfg = load_config(args.config)
    tags = getattr(args, "tag", None)
    if apply_tag and tags:
        cfg.acquisition_tag = tags[0]
    return cfg


def _out_dir(args, cfg: PipelineConfig) -> Path:
    return Path(args.out) if args.out else cfg.dataset_root


def _dataset_dir(args, cfg: PipelineConfig) -> Path:
    explicit = getattr(args, "dataset_dir", None)
    return Path(explicit) if explicit else cfg.dataset_root


def _scan_masks(pred_dir: Path, tag: str | None = None) -> dict[int, Path]:
    """Map tile_id -> mask path for files named mask_{id}_{tag}.png."""
    if not pred_dir.is_dir():
        raise ConfigError(f"prediction directory not found: {pred_dir}")
    out: dict[int, Path] = {}
    for path in sorted(pred_dir.glob("mask_*.png")):
        m = MASK_FILE_RE.match(path.name)
        if not m:
            continue
        if tag is not None and m.group(2) != tag:
            continue
        out[int(m.group(1))] = path
    return out


def _load_class_mask(path: Path, tile_id: int, tag: str) -> ClassMask:
    data, gt = load_mask(path)
    return ClassMask(tile_id, data, gt, acquisition_tag=tag)


# ---------------------------------------------------------------------------
# subcommands: each returns (summary, outputs)


def cmd_grid(args) -> tuple[str, list[Path]]:
    cfg = _load(args)
    grid = build_region_grid(cfg)
    n_sel = len(grid.selected_tiles)
    if args.dry_run:
        return (f"grid plan: {n_sel} selected of {len(grid)} tiles "
                f"({grid.n_cols}x{grid.n_rows})", [])
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "grid.geojson"
    save_grid_vector(grid, path)
    return f"grid: {n_sel} tiles -> {path}", [path]


def cmd_fetch(args) -> tuple[str, list[Path]]:
    cfg = _load(args, apply_tag=True)
    grid = build_region_grid(cfg)
    out = _out_dir(args, cfg)
    tag = cfg.acquisition_tag
    pending = [t for t in grid.selected_tiles
               if not (out / "images" / image_filename(t.tile_id, tag))
               .exists()]
    if args.dry_run:
        n_req = sum(len(plan_requests(cfg.endpoint, t)) for t in pending)
        return (f"fetch plan: {len(pending)} tiles, {n_req} HTTP requests "
                f"({len(grid.selected_tiles) - len(pending)} already "
                f"present)", [])
    n = fetch_imagery(cfg, grid, out, jobs=args.jobs)
    return (f"fetch: {n} tiles downloaded, "
            f"{len(grid.selected_tiles) - n} already present",
            [out / "images"])


def cmd_groundtruth(args) -> tuple[str, list[Path]]:
    cfg = _load(args)
    gt = cfg.groundtruth
    if args.dry_run:
        if gt.mode == "overpass":
            return (f"groundtruth plan: {len(gt.overpass)} overpass "
                    f"queries", [])
        return f"groundtruth plan: read {gt.path} ({gt.mode} mode)", []
    layer = load_groundtruth(cfg)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"groundtruth_{cfg.acquisition_tag}.geojson"
    layer.to_geojson(path)
    summary = (f"groundtruth: {len(layer.features)} features "
               f"({layer.dropped_unmapped} dropped) -> {path}")
    return summary, [path]


def cmd_rasterize(args) -> tuple[str, list[Path]]:
    cfg = _load(args)
    grid = build_region_grid(cfg)
    out = _out_dir(args, cfg)
    tag = cfg.acquisition_tag
    if args.dry_run:
        pending = [t for t in grid.selected_tiles
                   if not (out / "masks" / mask_filename(t.tile_id, tag))
                   .exists()]
        return f"rasterize plan: {len(pending)} masks to write", []
    staged = out / f"groundtruth_{tag}.geojson"
    if staged.exists():
        layer = GroundTruthLayer.from_geojson(
            staged, crs=cfg.grid.provider_crs, acquisition_tag=tag)
    else:
        layer = load_groundtruth(cfg)
    n = rasterize_masks(cfg, grid, layer, out)
    manifest = assemble_manifest(cfg, grid, out)
    return (f"rasterize: {n} masks written; manifest with "
            f"{len(manifest.records)} records -> {out / MANIFEST_NAME}",
            [out / "masks", out / MANIFEST_NAME])


def cmd_clean(args) -> tuple[str, list[Path]]:
    cfg = _load(args)
    pred_dir = Path(args.pred_dir[0])
    masks = _scan_masks(pred_dir)
    if not masks:
        raise DataError(f"no mask_*.png files in {pred_dir}")
    if args.dry_run:
        return f"clean plan: {len(masks)} masks from {pred_dir}", []
    out = Path(args.out) if args.out else pred_dir.parent / (
        pred_dir.name + "_clean")
    out.mkdir(parents=True, exist_ok=True)
    for tile_id, path in sorted(masks.items()):
        tag = MASK_FILE_RE.match(path.name).group(2)
        mask = _load_class_mask(path, tile_id, tag)
        cleaned = clean_mask(mask, cfg.class_table, cfg.cleaning)
        save_mask(out / path.name, cleaned.data, cleaned.geotransform)
    return f"clean: {len(masks)} masks -> {out}", [out]


def cmd_evaluate(args) -> tuple[str, list[Path]]:
    cfg = _load(args)
    tag = args.tag[0] if args.tag else cfg.acquisition_tag
    pred_dir = Path(args.pred_dir[0])
    preds = _scan_masks(pred_dir, tag)
    root = _dataset_dir(args, cfg)
    manifest = DatasetManifest.load(root / MANIFEST_NAME)
    pairs = []
    missing = 0
    for rec in sorted(manifest.records, key=lambda r: r.tile_id):
        pred_path = preds.get(rec.tile_id)
        if pred_path is None:
            missing += 1
            continue
        pairs.append((rec, pred_path))
    if not pairs:
        raise DataError(
            f"no predictions in {pred_dir} match manifest tiles with tag "
            f"{tag!r}")
    if args.dry_run:
        return (f"evaluate plan: {len(pairs)} tile pairs "
                f"({missing} manifest tiles without predictions)", [])
    if missing:
        log.warning("%d manifest tiles have no prediction with tag %r",
                    missing, tag)
    loaded = [(_load_class_mask(pred_path, rec.tile_id, tag),
               _load_class_mask(root / rec.mask_path, rec.tile_id,
                                rec.acquisition_tag))
              for rec, pred_path in pairs]
    report = evaluate_masks(loaded, cfg.class_table,
                            street_ids=cfg.street_ids,
                            pedestrian_ids=cfg.pedestrian_ids)
    out = Path(args.out) if args.out else pred_dir
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"metrics_{tag}.csv"
    json_path = out / f"metrics_{tag}.json"
    report.to_csv(csv_path)
    report.to_json(json_path)
    return (f"evaluate: {len(pairs)} tiles, {len(cfg.class_table)} classes "
            f"-> {csv_path}", [csv_path, json_path])


def cmd_trend(args) -> tuple[str, list[Path]]:
    cfg = _load(args)
    if len(args.pred_dir) != 2 or len(args.tag) != 2:
        raise ConfigError(
            "trend needs --pred-dir and --tag twice (earlier epoch first)")
    tag1, tag2 = args.tag
    dir1, dir2 = Path(args.pred_dir[0]), Path(args.pred_dir[1])
    masks1 = _scan_masks(dir1, tag1)
    masks2 = _scan_masks(dir2, tag2)
    common = sorted(set(masks1) & set(masks2))
    if not common:
        raise DataError(
            f"no tile ids with both mask_*_{tag1}.png in {dir1} and "
            f"mask_*_{tag2}.png in {dir2}")
    if args.dry_run:
        return f"trend plan: {len(common)} tile pairs ({tag1} vs {tag2})", []
    regions = {}
    if cfg.trend_regions_path is not None:
        named = load_named_regions(cfg.trend_regions_path)
        regions = {name: region_geometry_in(geom, cfg.region_crs,
                                            cfg.grid.provider_crs)
                   for name, geom in named.items()}
    pairs = [(_load_class_mask(masks1[tid], tid, tag1),
              _load_class_mask(masks2[tid], tid, tag2))
             for tid in common]
    report = trend(pairs, cfg.class_table, regions=regions,
                   tag_t1=tag1, tag_t2=tag2)
    out = Path(args.out) if args.out else dir2
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"trend_{tag1}_{tag2}.csv"
    json_path = out / f"trend_{tag1}_{tag2}.json"
    report.to_csv(csv_path)
    report.to_json(json_path)
    return (f"trend: {len(pairs)} tile pairs over "
            f"{1 + len(regions)} regions -> {csv_path}",
            [csv_path, json_path])


def cmd_build(args) -> tuple[str, list[Path]]:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    if args.dry_run:
        grid = build_region_grid(cfg)
        tag = cfg.acquisition_tag
        pending = [t for t in grid.selected_tiles
                   if not (out / "images" / image_filename(t.tile_id, tag))
                   .exists()]
        n_req = sum(len(plan_requests(cfg.endpoint, t)) for t in pending)
        gt = cfg.groundtruth
        gt_desc = (f"{len(gt.overpass)} overpass queries"
                   if gt.mode == "overpass" else f"{gt.path}")
        return (f"build plan: {len(grid.selected_tiles)} tiles, "
                f"{n_req} HTTP requests, ground truth from {gt_desc}", [])
    manifest = build_dataset(cfg, out, jobs=args.jobs)
    validate_manifest(manifest, out)
    n_train = sum(1 for r in manifest.records if r.split == "train")
    n_test = len(manifest.records) - n_train
    return (f"build: {len(manifest.records)} records ({n_train} train, "
            f"{n_test} test) -> {out / MANIFEST_NAME}",
            [out / MANIFEST_NAME])


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="geoseg",
                     description="aerial imagery segmentation dataset "
                                 "pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "grid": (cmd_grid, "lay the tile grid and export its outline"),
        "fetch": (cmd_fetch, "download imagery for all selected tiles"),
        "groundtruth": (cmd_groundtruth,
                        "load ground truth and stage it as GeoJSON"),
        "rasterize": (cmd_rasterize,
                      "rasterize ground truth masks and write the "
                      "manifest"),
        "clean": (cmd_clean, "morphologically clean predicted masks"),
        "evaluate": (cmd_evaluate,
                     "score predicted masks against the dataset masks"),
        "trend": (cmd_trend, "compare two prediction epochs"),
        "build": (cmd_build, "run the whole pipeline end to end"),
    }
    for name, (func, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", required=True,
                       help="pipeline TOML configuration")
        p.add_argument("--out", help="output directory (default: the "
                                     "dataset root from the config)")
        p.add_argument("--dry-run", action="store_true",
                       help="print the work plan; no network, no writes")
        p.add_argument("--report", help="write a JSON exit report here")
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                       help="parallel tile workers (default: CPU count)")
        if name in ("clean", "evaluate", "trend"):
            p.add_argument("--pred-dir", action="append", required=True,
                           help="directory of predicted masks (trend: give "
                                "it twice, earlier epoch first)")
        if name in ("fetch", "evaluate", "trend"):
            p.add_argument("--tag", action="append",
                           help="acquisition tag (trend: give it twice, "
                                "matching --pred-dir order)")
        if name in ("evaluate", "trend"):
            p.add_argument("--dataset-dir",
                           help="dataset root holding manifest.json "
                                "(default: from the config)")
    return parser


def _write_report(path: str, code: int, summary: str,
                  outputs: list[Path]) -> None:
    Path(path).write_text(json.dumps({
        "exit_code": code,
        "summary": summary,
        "outputs": [str(p) for p in outputs],
    }, indent=2, sort_keys=True) + "\n")


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    report_path = None
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        report_path = args.report
        summary, outputs = args.func(args)
        code = 0
    except GeosegError as exc:
        summary, outputs = str(exc), []
        code = _exit_code(exc)
        log.error("%s", summary)
    if code == 0:
        log.info("%s", summary)
    if report_path:
        _write_report(report_path, code, summary, outputs)
    return code


if __name__ == "__main__":
    sys.exit(main())
