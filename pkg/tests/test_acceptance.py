"""Release checklist for the dataset pipeline.

Each test here covers one acceptance criterion end to end and prints a
single [PASS]/[FAIL] line naming it (run with -s to see the checklist).
The checks lean on independent oracles defined in the per-module test
files: a scalar metric tally, shift-based morphology, a scan-line
rasterizer, and a deterministic tile server whose pixels are a known
function of position. Nothing in this file depends on the training
package; the whole checklist runs against this library alone.
"""

from __future__ import annotations

import json
import subprocess
import time
from contextlib import contextmanager

import numpy as np
import pytest
from scipy import ndimage
from shapely.geometry import LineString, box

from geoseg.cache import DiskCache
from geoseg.cleaning import clean_class, clean_mask
from geoseg.config import load_config
from geoseg.dataset import DatasetManifest, load_groundtruth, validate_manifest
from geoseg.errors import DataError
from geoseg.grid import DatasetRegion, GridSpec, build_grid
from geoseg.groundtruth import (ClassSpec, ClassTable, line_coverage_ratio,
                                lines_to_polygons)
from geoseg.imagery import ImageryClient
from geoseg.metrics import evaluate_masks, trend
from geoseg.rasterize import (ClassMask, rasterize, round_half_up,
                              tile_geotransform, vectorize)

from helpers import covers_region, random_region
from synthproj import make_project
from test_cleaning import oracle_clean_class
from test_groundtruth import comb_lines
from test_imagery import (E, RES, TILE_PX, spec_for, window_tile,
                          xyz_endpoint)
from test_metrics import oracle_tally, random_pair
from test_rasterize import random_mask, shoelace_area, unit_tile
from tileserver import FieldTileServer, field_window


@contextmanager
def criterion(name):
    try:
        yield
    except BaseException:
        print(f"[FAIL] {name}")
        raise
    print(f"[PASS] {name}")


@pytest.fixture(scope="module")
def server():
    srv = FieldTileServer(tile_px=TILE_PX, origin=(-E, E),
                          resolution=RES).start()
    yield srv
    srv.stop()


def four_class_table():
    return ClassTable([
        ClassSpec(1, "building", 2.0, 8.0, "neither", 5),
        ClassSpec(2, "road", 2.5, 20.0, "street", 2),
        ClassSpec(3, "sidewalk", 1.0, 2.0, "pedestrian", 3),
        ClassSpec(4, "parking", 1.5, 3.0, "street", 1),
    ])


# ---------------------------------------------------------------------------


def test_grid_correctness():
    rng = np.random.default_rng(20260819)
    with criterion("grid: 50 random regions covered exactly, overlap "
                   "within 1e-9, 10k tiles under 1s"):
        for _ in range(50):
            tile_px = int(rng.choice([128, 256, 512]))
            res = float(rng.uniform(0.8, 2.0))
            side = tile_px * res
            overlap = float(rng.uniform(0.0, side / 4.0))
            spec = GridSpec(tile_size_px=tile_px, resolution_m=res,
                            overlap_m=overlap, work_crs="EPSG:32633",
                            provider_crs="EPSG:32633")
            region = random_region(rng)
            grid = build_grid(region, spec)
            assert covers_region(grid, region)
            for r in range(grid.n_rows):
                for c in range(grid.n_cols):
                    t = grid.tiles[r * grid.n_cols + c]
                    if c + 1 < grid.n_cols:
                        right = grid.tiles[r * grid.n_cols + c + 1]
                        got = t.bounds_work[2] - right.bounds_work[0]
                        assert abs(got - overlap) <= 1e-9
                    if r + 1 < grid.n_rows:
                        up = grid.tiles[(r + 1) * grid.n_cols + c]
                        got = t.bounds_work[3] - up.bounds_work[1]
                        assert abs(got - overlap) <= 1e-9
        big_spec = GridSpec(tile_size_px=64, resolution_m=0.5,
                            overlap_m=0.0, work_crs="EPSG:32633",
                            provider_crs="EPSG:32633")
        big_region = DatasetRegion([box(0, 0, 3200, 3200)], "EPSG:32633")
        t0 = time.perf_counter()
        big = build_grid(big_region, big_spec)
        dt = time.perf_counter() - t0
        assert len(big.tiles) == 10_000
        assert dt < 1.0, f"10k-tile grid took {dt:.2f}s"


def test_metric_oracle_equivalence():
    rng = np.random.default_rng(777)
    table = four_class_table()
    ids = table.ids()
    street, ped = [2, 4], [3]
    r = round_half_up(2.0 / 1.0)
    offsets = [(di, dj) for di in range(-r, r + 1)
               for dj in range(-r, r + 1) if di * di + dj * dj <= r * r]

    def tally(pred, gt):
        """Per-pixel scalar tally with a neighborhood-set buffer rule."""
        k = len(ids) + 1
        conf = np.zeros((k, k), dtype=np.int64)
        gt_sets = {c: set() for c in ids}
        h, w = gt.data.shape
        for i in range(h):
            for j in range(w):
                g, p = int(gt.data[i, j]), int(pred.data[i, j])
                conf[g if g == 0 else ids.index(g) + 1,
                     p if p == 0 else ids.index(p) + 1] += 1
                if g != 0:
                    gt_sets[g].add((i, j))
        inter_buf = {c: 0 for c in ids}
        street_hit = {c: 0 for c in ids}
        ped_hit = {c: 0 for c in ids}
        for i in range(h):
            for j in range(w):
                p = int(pred.data[i, j])
                if p == 0:
                    continue
                g = int(gt.data[i, j])
                if g in street:
                    street_hit[p] += 1
                if g in ped:
                    ped_hit[p] += 1
                if any((i + di, j + dj) in gt_sets[p]
                       for di, dj in offsets):
                    inter_buf[p] += 1
        return conf, inter_buf, street_hit, ped_hit

    with criterion("metrics: 200 random pairs match the per-pixel oracle "
                   "(counts exact, ratios within 1e-12), iou_200 >= iou, "
                   "f1 = 2*iou/(1+iou)"):
        for case in range(200):
            pair = random_pair(rng, n=32, ids=tuple(ids))
            report = evaluate_masks([pair], table)
            conf, inter_buf, street_hit, ped_hit = tally(*pair)
            if case < 5:
                # the two oracle codings must agree with each other too
                o_conf, _p, _g, _i, o_buf = oracle_tally([pair], ids, 2.0)
                assert np.array_equal(conf, np.array(o_conf))
                assert inter_buf == o_buf
            for pos, row in enumerate(report.rows, start=1):
                c = row.class_id
                p = int(conf[:, pos].sum())
                g = int(conf[pos, :].sum())
                inter = int(conf[pos, pos])
                u = p + g - inter
                assert row.model_area == float(p)
                assert row.gt_area == float(g)
                if p == 0 and g == 0:
                    assert row.iou == row.iou_200 == row.f1 == 1.0
                elif p == 0 or g == 0:
                    assert row.iou == row.iou_200 == row.f1 == 0.0
                else:
                    assert abs(row.iou - inter / u) <= 1e-12
                    assert abs(row.iou_200 - inter_buf[c] / u) <= 1e-12
                    assert abs(row.f1 - 2 * inter / (p + g)) <= 1e-12
                if p > 0:
                    assert abs(row.street_ratio - street_hit[c] / p) <= 1e-12
                    assert abs(row.pedestrian_ratio - ped_hit[c] / p) \
                        <= 1e-12
                else:
                    assert row.street_ratio is None
                assert row.iou_200 >= row.iou - 1e-12
                assert abs(row.f1 - 2 * row.iou / (1 + row.iou)) <= 1e-12
            for gi in range(len(ids) + 1):
                row_sum = int(conf[gi].sum())
                for pi in range(len(ids) + 1):
                    want = conf[gi, pi] / row_sum if row_sum else 0.0
                    assert abs(report.confusion[gi][pi] - want) <= 1e-12


def test_strip_overlap_fixture():
    with criterion("metrics: 1-D offset strips give exactly iou=1/3, "
                   "f1=1/2, iou_200=7/15"):
        gt_data = np.zeros((1, 15), dtype=np.uint8)
        gt_data[0, 0:10] = 1
        pr_data = np.zeros((1, 15), dtype=np.uint8)
        pr_data[0, 5:15] = 1
        g = (0.0, 1.0, 1.0, -1.0)
        table = ClassTable([ClassSpec(1, "strip", 1.0, 1.0)])
        report = evaluate_masks(
            [(ClassMask(0, pr_data, g), ClassMask(0, gt_data, g))], table)
        row = report.rows[0]
        assert row.iou == 1 / 3
        assert row.f1 == 1 / 2
        assert row.iou_200 == 7 / 15


def test_cleaning_thresholds_and_oracle():
    parking = ClassSpec(4, "parking", 1.5, 3.0, "street", 1)
    table = ClassTable([parking])
    with criterion("cleaning: at 0.1 m/px no parking component under "
                   "150 px survives, blocks with a wide eroded core "
                   "survive, 100 random fixtures match the morphology "
                   "oracle bit-exactly"):
        # element radius is 4 and the speck cut (150 px) applies to the
        # eroded image, so a survivor needs a 150 px core after losing a
        # 4 px rim, not merely room for one inscribed element
        data = np.zeros((220, 220), dtype=np.uint8)
        specks = [(slice(10, 20), slice(10, 20)),       # 100 px
                  (slice(30, 42), slice(30, 42)),       # 144 px
                  (slice(12, 18), slice(60, 70))]       # 60 px
        survivors = [(slice(100, 120), slice(100, 130)),  # 20x30
                     (slice(150, 175), slice(30, 55)),    # 25x25
                     (slice(40, 80), slice(150, 168))]    # 40x18
        for sl in specks + survivors:
            data[sl] = 4
        mask = ClassMask(0, data, (0.0, 22.0, 0.1, -0.1))
        out = clean_mask(mask, table).data
        for sl in specks:
            assert not (out[sl] == 4).any()
        for si, sj in survivors:
            core = (slice(si.start + 5, si.stop - 5),
                    slice(sj.start + 5, sj.stop - 5))
            assert (out[core] == 4).all()
        labels, n = ndimage.label(out == 4)
        assert n == len(survivors)
        sizes = ndimage.sum_labels(np.ones_like(out), labels,
                                   index=range(1, n + 1))
        assert (sizes >= 150).all()

        rng = np.random.default_rng(42)
        for case in range(100):
            res = 0.5 if case % 2 == 0 else 0.25
            binary = rng.random((48, 48)) < rng.uniform(0.3, 0.6)
            got = clean_class(binary, parking, res)
            want = oracle_clean_class(binary, 1.5, 3.0, res)
            assert np.array_equal(got, want)


def test_raster_round_trip():
    rng = np.random.default_rng(99)
    table = four_class_table()
    with criterion("raster: vectorize-then-rasterize is the identity on "
                   "100 random masks; axis-aligned areas are exact"):
        tile, spec = unit_tile(n_px=24, res=0.5)
        for _ in range(100):
            data = random_mask(rng, n_classes=4)
            mask = ClassMask(0, data, tile_geotransform(tile, spec))
            layer = vectorize(mask, table, crs="EPSG:32633")
            back = rasterize(layer, tile, spec, table)
            assert np.array_equal(back.data, data)
            for cid in np.unique(data):
                if cid == 0:
                    continue
                vec_area = sum(shoelace_area(g) for g, c in layer.features
                               if c == cid)
                assert vec_area == int((data == cid).sum()) * 0.25


def test_line_network_polygonization(tmp_path):
    with criterion("lines: 10-stall comb polygonizes into 10 faces with "
                   "coverage >= 0.99; displacing 20% of separators trips "
                   "the 0.85 gate"):
        lines = comb_lines()
        layer = lines_to_polygons(lines, "stall", class_id=4,
                                  crs="EPSG:32633")
        assert len(layer.features) == 10
        polys = [g for g, _c in layer.features]
        ratio = line_coverage_ratio([g for g, _t in lines], polys,
                                    tol_m=0.25)
        assert ratio >= 0.99

        displaced = []
        for geom, tag in lines:
            (x0, y0), (x1, y1) = geom.coords
            if x0 == x1 and x0 in (2.0, 6.0, 10.0, 14.0):
                geom = LineString([(x0 + 1.0, y0), (x1 + 1.0, y1)])
            displaced.append((geom, tag))
        bad_ratio = line_coverage_ratio(
            [g for g, _t in displaced],
            [box(i * 2.0, 0, (i + 1) * 2.0, 5.0) for i in range(10)],
            tol_m=0.25)
        assert bad_ratio < 0.85

        # the pipeline's own gate compares the lines against the faces
        # they produce, so the displacement must detach the teeth from
        # the rails: moved clear of the comb they bound no face, about a
        # fifth of the network length goes uncovered, and loading fails
        detached = []
        for geom, tag in lines:
            (x0, y0), (x1, y1) = geom.coords
            if x0 == x1 and x0 in (2.0, 6.0, 10.0, 14.0):
                geom = LineString([(x0 + 25.0, y0), (x1 + 25.0, y1)])
            detached.append((geom, tag))

        def dump(pairs, path):
            doc = {"type": "FeatureCollection", "features": [
                {"type": "Feature",
                 "properties": {"kind": tag},
                 "geometry": {"type": "LineString",
                              "coordinates": [list(c) for c in g.coords]}}
                for g, tag in pairs]}
            path.write_text(json.dumps(doc))

        dump(detached, tmp_path / "displaced.geojson")
        dump(lines, tmp_path / "clean.geojson")
        config = """
[region]
path = "aoi.geojson"
crs = "EPSG:32633"

[grid]
tile_size_px = 64
resolution_m = 0.25
work_crs = "EPSG:32633"

[imagery]
kind = "wms-1.3.0"
url = "http://unused.example/wms"
layer = "ortho"
crs = "EPSG:32633"
provider_resolution = 0.25

[groundtruth]
mode = "lines"
path = "%s"
crs = "EPSG:32633"
class_attribute = "kind"

[groundtruth.class_mapping]
stall = 4

[[classes]]
id = 4
name = "parking"
min_width_m = 1.5
min_area_m2 = 3.0
"""
        (tmp_path / "bad.toml").write_text(config % "displaced.geojson")
        (tmp_path / "ok.toml").write_text(config % "clean.geojson")
        with pytest.raises(DataError, match="85%"):
            load_groundtruth(load_config(tmp_path / "bad.toml"))
        good = load_groundtruth(load_config(tmp_path / "ok.toml"))
        assert len(good.features) == 10


def test_imagery_mosaicking(server, tmp_path):
    with criterion("imagery: aligned fetch is bit-identical, 2x2 mosaic "
                   "matches the stitch oracle, warm cache reruns with 0 "
                   "HTTP requests"):
        endpoint = xyz_endpoint(server)
        spec = spec_for(128, 128 * RES)
        cache = DiskCache(tmp_path / "cache", namespace="imagery")

        px0, py0 = 405 * TILE_PX + 64, 300 * TILE_PX + 32
        aligned = window_tile(px0, py0, 128, tile_id=1)
        client = ImageryClient(endpoint, cache=cache)
        got = client.fetch_tile(aligned, spec)
        assert np.array_equal(got.pixels, field_window(px0, py0, 128, 128))

        qx0, qy0 = 406 * TILE_PX - 64, 301 * TILE_PX - 64
        quad = window_tile(qx0, qy0, 128, tile_id=2)
        got2 = client.fetch_tile(quad, spec)
        assert np.array_equal(got2.pixels,
                              field_window(qx0, qy0, 128, 128))

        before = server.total_requests
        warm = ImageryClient(endpoint,
                             cache=DiskCache(tmp_path / "cache",
                                             namespace="imagery"))
        again = warm.fetch_tile(aligned, spec)
        again2 = warm.fetch_tile(quad, spec)
        assert server.total_requests == before
        assert warm.stats["http_requests"] == 0
        assert np.array_equal(again.pixels, got.pixels)
        assert np.array_equal(again2.pixels, got2.pixels)


def test_trend_rehearsal():
    table = four_class_table()
    rng = np.random.default_rng(5)
    with criterion("trend: constructed 0.8x parking shrink reports "
                   "area_ratio 0.80 +/- 0.01 unflagged; an uncorrelated "
                   "noise class lands under iou_200 0.1 and is flagged "
                   "unreliable"):
        t1 = np.zeros((100, 100), dtype=np.uint8)
        t2 = np.zeros((100, 100), dtype=np.uint8)
        t1[10:60, 10:50] = 4               # 2000 px
        t2[10:60, 10:42] = 4               # 1600 px, same footprint
        noise1 = (rng.random((100, 100)) < 0.01) & (t1 == 0)
        noise2 = (rng.random((100, 100)) < 0.01) & (t2 == 0)
        t1[noise1] = 1
        t2[noise2] = 1
        g = (0.0, 100.0, 1.0, -1.0)
        report = trend([(ClassMask(0, t1, g), ClassMask(0, t2, g))],
                       table, tag_t1="2018", tag_t2="2021")
        rows = {r.class_id: r for r in report.rows if r.region == "ALL"}
        parking = rows[4]
        assert parking.area_ratio == pytest.approx(0.80, abs=0.01)
        assert parking.iou_200 >= 0.1
        assert not parking.unreliable
        noise = rows[1]
        assert noise.iou_200 < 0.1
        assert noise.unreliable


def test_end_to_end_build(server, tmp_path):
    with criterion("end-to-end: geoseg build on the synthetic 3x3 "
                   "fixture finishes under 60s, passes referential "
                   "integrity, and two clean runs agree modulo "
                   "timestamp"):
        proj = make_project(tmp_path, server.base_url)
        t0 = time.perf_counter()
        run = subprocess.run(
            ["geoseg", "build", "--config", str(proj.config_path),
             "--out", str(tmp_path / "run1")],
            capture_output=True, text=True, timeout=120)
        dt = time.perf_counter() - t0
        assert run.returncode == 0, run.stderr
        assert dt < 60.0, f"build took {dt:.1f}s"
        manifest = DatasetManifest.load(tmp_path / "run1" / "manifest.json")
        validate_manifest(manifest, tmp_path / "run1")
        assert len(manifest.records) == 6

        run2 = subprocess.run(
            ["geoseg", "build", "--config", str(proj.config_path),
             "--out", str(tmp_path / "run2")],
            capture_output=True, text=True, timeout=120)
        assert run2.returncode == 0, run2.stderr
        doc1 = json.loads((tmp_path / "run1" / "manifest.json").read_text())
        doc2 = json.loads((tmp_path / "run2" / "manifest.json").read_text())
        doc1.pop("created_at")
        doc2.pop("created_at")
        assert doc1 == doc2
