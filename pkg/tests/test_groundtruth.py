"""Vector ground truth: file loading, repair, GeoPackage, line networks."""

import json
import sqlite3
import struct

import numpy as np
import pytest
import shapely
from shapely.geometry import LineString, Polygon, box

from geoseg.crs import get_transform
from geoseg.errors import ConfigError, DataError
from geoseg.groundtruth import (
    ClassSpec,
    ClassTable,
    GroundTruthLayer,
    line_coverage_ratio,
    lines_to_polygons,
    load_vector_file,
)


class TestClassTable:
    def test_lookup_and_groups(self):
        table = ClassTable([
            ClassSpec(2, "road", 1.0, 1.0, group="street"),
            ClassSpec(1, "building", 1.0, 1.0),
            ClassSpec(3, "path", 1.0, 1.0, group="pedestrian"),
        ])
        assert table.ids() == [1, 2, 3]
        assert table.get(2).name == "road"
        assert table.group_ids("street") == [2]
        assert table.group_ids("pedestrian") == [3]
        assert 1 in table and 9 not in table

    def test_duplicate_id_rejected(self):
        with pytest.raises(ConfigError):
            ClassTable([ClassSpec(1, "a", 1.0, 1.0),
                        ClassSpec(1, "b", 1.0, 1.0)])

    def test_background_id_rejected(self):
        with pytest.raises(ConfigError):
            ClassSpec(0, "bg", 1.0, 1.0)

    def test_bad_group_rejected(self):
        with pytest.raises(ConfigError):
            ClassSpec(1, "a", 1.0, 1.0, group="vehicular")

    def test_json_round_trip(self):
        table = ClassTable([ClassSpec(1, "a", 2.0, 4.0, "street", 3)])
        again = ClassTable.from_json_obj(table.to_json_obj())
        assert again.get(1) == table.get(1)


def write_geojson(path, features):
    path.write_text(json.dumps({
        "type": "FeatureCollection",
        "features": [
            {"type": "Feature", "geometry": shapely.geometry.mapping(g),
             "properties": p} for g, p in features
        ],
    }))


class TestFileLoading:
    def test_geojson_with_class_mapping(self, tmp_path):
        path = tmp_path / "gt.geojson"
        write_geojson(path, [
            (box(0, 0, 1, 1), {"kind": "building"}),
            (box(2, 0, 3, 1), {"kind": "road"}),
            (box(4, 0, 5, 1), {"kind": "fountain"}),   # unmapped
            (box(6, 0, 7, 1), {}),                     # missing attribute
        ])
        layer = load_vector_file(path, {"building": 1, "road": 2}, "kind")
        assert len(layer.features) == 2
        assert layer.dropped_unmapped == 2
        assert layer.class_ids() == {1, 2}
        assert layer.crs == "EPSG:4326"
        assert layer.source_tag == "file"

    def test_bowtie_repaired_into_two_polygons(self, tmp_path):
        bowtie = Polygon([(0, 0), (2, 2), (2, 0), (0, 2)])
        assert not bowtie.is_valid
        path = tmp_path / "gt.geojson"
        write_geojson(path, [(bowtie, {"kind": "x"})])
        layer = load_vector_file(path, {"x": 1}, "kind")
        assert len(layer.features) == 2
        for geom, _cid in layer.features:
            assert geom.is_valid
        # the two lobes are the triangles (0,0)(1,1)(0,2) and
        # (2,0)(1,1)(2,2), one square unit each
        total = sum(g.area for g, _c in layer.features)
        assert total == pytest.approx(2.0, abs=1e-9)

    def test_multipolygon_exploded(self, tmp_path):
        mp = shapely.geometry.MultiPolygon([box(0, 0, 1, 1), box(3, 3, 4, 4)])
        path = tmp_path / "gt.geojson"
        write_geojson(path, [(mp, {"kind": "x"})])
        layer = load_vector_file(path, {"x": 1}, "kind")
        assert len(layer.features) == 2

    def test_unsupported_extension(self, tmp_path):
        path = tmp_path / "gt.shp"
        path.write_bytes(b"")
        with pytest.raises(ConfigError):
            load_vector_file(path, {"x": 1}, "kind")

    def test_layer_geojson_round_trip(self, tmp_path):
        layer = GroundTruthLayer([(box(0, 0, 2, 2), 1), (box(5, 5, 6, 6), 2)],
                                 "EPSG:32633", acquisition_tag="2020")
        path = tmp_path / "layer.geojson"
        layer.to_geojson(path)
        again = GroundTruthLayer.from_geojson(path, crs="EPSG:32633",
                                              acquisition_tag="2020")
        assert len(again.features) == 2
        assert {c for _g, c in again.features} == {1, 2}

    def test_reproject(self):
        layer = GroundTruthLayer([(box(16.36, 48.20, 16.37, 48.21), 1)],
                                 "EPSG:4326")
        tr = get_transform("EPSG:4326", "EPSG:32633")
        moved = layer.reproject(tr)
        assert moved.crs == "EPSG:32633"
        minx, miny, maxx, maxy = moved.features[0][0].bounds
        assert 500 < maxx - minx < 1000   # ~0.01 deg of longitude
        wrong = get_transform("EPSG:3857", "EPSG:32633")
        with pytest.raises(DataError):
            layer.reproject(wrong)


def gpkg_blob(geom, srs_id=4326):
    """GeoPackage geometry blob: GP header (little endian, no envelope)
    followed by WKB."""
    header = b"GP" + bytes([0, 0b00000001]) + struct.pack("<i", srs_id)
    return header + shapely.to_wkb(geom)


def make_gpkg(path, geoms_props, srs_id=4326):
    con = sqlite3.connect(path)
    con.executescript("""
        CREATE TABLE gpkg_contents (
            table_name TEXT PRIMARY KEY, data_type TEXT, identifier TEXT,
            srs_id INTEGER);
        CREATE TABLE gpkg_geometry_columns (
            table_name TEXT, column_name TEXT, geometry_type_name TEXT,
            srs_id INTEGER);
        CREATE TABLE lots (
            fid INTEGER PRIMARY KEY, geom BLOB, kind TEXT);
    """)
    con.execute("INSERT INTO gpkg_contents VALUES ('lots','features',"
                "'lots',?)", (srs_id,))
    con.execute("INSERT INTO gpkg_geometry_columns VALUES "
                "('lots','geom','POLYGON',?)", (srs_id,))
    for i, (geom, kind) in enumerate(geoms_props):
        con.execute("INSERT INTO lots VALUES (?,?,?)",
                    (i, gpkg_blob(geom, srs_id), kind))
    con.commit()
    con.close()


class TestGeoPackage:
    def test_read_features_and_crs(self, tmp_path):
        path = tmp_path / "gt.gpkg"
        make_gpkg(path, [(box(0, 0, 2, 2), "parking"),
                         (box(5, 5, 6, 6), "lawn")], srs_id=32633)
        layer = load_vector_file(path, {"parking": 4}, "kind")
        assert layer.crs == "EPSG:32633"
        assert len(layer.features) == 1
        assert layer.dropped_unmapped == 1
        geom, cid = layer.features[0]
        assert cid == 4
        assert geom.equals(box(0, 0, 2, 2))

    def test_envelope_variant_parses(self, tmp_path):
        # flags 0b011: little endian with a 32-byte XY envelope
        geom = box(1, 1, 3, 3)
        header = (b"GP" + bytes([0, 0b00000011])
                  + struct.pack("<i", 4326)
                  + struct.pack("<4d", 1.0, 3.0, 1.0, 3.0))
        blob = header + shapely.to_wkb(geom)
        path = tmp_path / "gt.gpkg"
        con = sqlite3.connect(path)
        con.executescript("""
            CREATE TABLE gpkg_contents (table_name TEXT, data_type TEXT);
            CREATE TABLE gpkg_geometry_columns (
                table_name TEXT, column_name TEXT, srs_id INTEGER);
            CREATE TABLE z (fid INTEGER PRIMARY KEY, geom BLOB, kind TEXT);
        """)
        con.execute("INSERT INTO gpkg_contents VALUES ('z','features')")
        con.execute("INSERT INTO gpkg_geometry_columns VALUES "
                    "('z','geom',4326)")
        con.execute("INSERT INTO z VALUES (0,?,?)", (blob, "a"))
        con.commit()
        con.close()
        layer = load_vector_file(path, {"a": 1}, "kind")
        assert layer.features[0][0].equals(geom)

    def test_missing_feature_table(self, tmp_path):
        path = tmp_path / "empty.gpkg"
        con = sqlite3.connect(path)
        con.execute("CREATE TABLE gpkg_contents "
                    "(table_name TEXT, data_type TEXT)")
        con.commit()
        con.close()
        with pytest.raises(DataError):
            load_vector_file(path, {"a": 1}, "kind")


def comb_lines(n_stalls=10, width=2.0, depth=5.0, jitter=0.0, rng=None,
               tag="stall"):
    """Parking comb drawn segment by segment, corners jittered by up to
    ``jitter`` so endpoint snapping has real work to do."""
    def j(x, y):
        if jitter and rng is not None:
            return (x + rng.uniform(-jitter, jitter),
                    y + rng.uniform(-jitter, jitter))
        return (x, y)

    lines = []
    for i in range(n_stalls):
        x0, x1 = i * width, (i + 1) * width
        lines.append((LineString([j(x0, 0), j(x1, 0)]), tag))
        lines.append((LineString([j(x0, depth), j(x1, depth)]), tag))
    for i in range(n_stalls + 1):
        x = i * width
        lines.append((LineString([j(x, 0), j(x, depth)]), tag))
    return lines


class TestLinesToPolygons:
    def test_perfect_comb_yields_stalls(self):
        lines = comb_lines()
        layer = lines_to_polygons(lines, "stall", class_id=4,
                                  crs="EPSG:32633")
        assert layer.source_tag == "line-derived"
        assert len(layer.features) == 10
        for geom, cid in layer.features:
            assert cid == 4
            assert geom.area == pytest.approx(10.0, abs=1e-9)

    def test_jittered_comb_closes_after_snapping(self):
        rng = np.random.default_rng(17)
        lines = comb_lines(jitter=0.05, rng=rng)
        layer = lines_to_polygons(lines, "stall", class_id=4,
                                  crs="EPSG:32633", snap_tol_m=0.25)
        assert len(layer.features) == 10
        total = sum(g.area for g, _c in layer.features)
        assert total == pytest.approx(100.0, rel=0.05)

    def test_face_claim_needs_half_boundary(self):
        # a square whose sides carry different tags: 3 road, 1 stall
        sides = [
            (LineString([(0, 0), (4, 0)]), "road"),
            (LineString([(4, 0), (4, 4)]), "road"),
            (LineString([(4, 4), (0, 4)]), "road"),
            (LineString([(0, 4), (0, 0)]), "stall"),
        ]
        roads = lines_to_polygons(sides, "road", 2, "EPSG:32633")
        stalls = lines_to_polygons(sides, "stall", 4, "EPSG:32633")
        assert len(roads.features) == 1
        assert len(stalls.features) == 0

    def test_empty_input(self):
        layer = lines_to_polygons([], "stall", 4, "EPSG:32633")
        assert layer.features == []

    def test_bad_tolerance(self):
        with pytest.raises(ConfigError):
            lines_to_polygons(comb_lines(), "stall", 4, "EPSG:32633",
                              snap_tol_m=0.0)


class TestLineCoverageRatio:
    def test_perfect_network_scores_one(self):
        lines = [g for g, _t in comb_lines()]
        stalls = [box(i * 2.0, 0, (i + 1) * 2.0, 5.0) for i in range(10)]
        ratio = line_coverage_ratio(lines, stalls, tol_m=0.25)
        assert ratio >= 0.99

    def test_displaced_lines_fail_the_gate(self):
        # Displace 4 of the 11 separators sideways by 1 m (>> tol): about
        # a fifth of the network length leaves the stall boundaries, so
        # the ratio must drop below the 0.85 acceptance gate.
        displaced = []
        for geom in (g for g, _t in comb_lines()):
            (x0, y0), (x1, y1) = geom.coords
            if x0 == x1 and x0 in (2.0, 6.0, 10.0, 14.0):
                displaced.append(LineString([(x0 + 1.0, y0),
                                             (x1 + 1.0, y1)]))
            else:
                displaced.append(geom)
        stalls = [box(i * 2.0, 0, (i + 1) * 2.0, 5.0) for i in range(10)]
        ratio = line_coverage_ratio(displaced, stalls, tol_m=0.25)
        assert ratio < 0.85

    def test_zero_length_network_rejected(self):
        with pytest.raises(DataError):
            line_coverage_ratio([], [box(0, 0, 1, 1)])
