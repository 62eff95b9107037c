"""Shared fixtures-in-code for the test suite: random regions, a class
table, and small deterministic rasters."""

from __future__ import annotations

import numpy as np
from shapely.geometry import Polygon
from shapely.ops import unary_union

from geoseg.grid import DatasetRegion, GridSpec
from geoseg.groundtruth import ClassSpec, ClassTable


def random_region(rng: np.random.Generator, crs: str = "EPSG:32633",
                  origin: tuple[float, float] = (500000.0, 5300000.0),
                  scale: float = 2000.0) -> DatasetRegion:
    """A random blobby region: union of 1-3 convex-ish polygons."""
    polys = []
    for _ in range(rng.integers(1, 4)):
        cx = origin[0] + rng.uniform(0, scale)
        cy = origin[1] + rng.uniform(0, scale)
        n = int(rng.integers(4, 10))
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
        radii = rng.uniform(0.15, 0.6, size=n) * scale
        pts = [(cx + r * np.cos(a), cy + r * np.sin(a))
               for a, r in zip(angles, radii)]
        poly = Polygon(pts)
        if not poly.is_valid:
            poly = poly.buffer(0)
        if poly.is_empty:
            continue
        if poly.geom_type == "MultiPolygon":
            polys.extend(list(poly.geoms))
        else:
            polys.append(poly)
    if not polys:
        polys = [Polygon([(origin[0], origin[1]),
                          (origin[0] + scale, origin[1]),
                          (origin[0] + scale, origin[1] + scale)])]
    return DatasetRegion(polygons=polys, crs=crs)


def covers_region(grid, region: DatasetRegion) -> bool:
    """Every point of the region lies in at least one selected tile."""
    from shapely.geometry import box

    tiles = unary_union([box(*t.bounds_work) for t in grid.selected_tiles])
    leftover = region.union().difference(tiles)
    return leftover.area < 1e-9


def simple_spec(tile_size_px: int = 64, resolution_m: float = 0.5,
                overlap_m: float = 4.0, crs: str = "EPSG:32633") -> GridSpec:
    return GridSpec(tile_size_px=tile_size_px, resolution_m=resolution_m,
                    overlap_m=overlap_m, work_crs=crs, provider_crs=crs)


def demo_class_table() -> ClassTable:
    """Five urban classes plus implicit background 0."""
    return ClassTable([
        ClassSpec(1, "building", min_width_m=2.0, min_area_m2=8.0,
                  group="neither", priority=5),
        ClassSpec(2, "road", min_width_m=2.5, min_area_m2=20.0,
                  group="street", priority=2),
        ClassSpec(3, "sidewalk", min_width_m=1.0, min_area_m2=2.0,
                  group="pedestrian", priority=3),
        ClassSpec(4, "parking", min_width_m=1.5, min_area_m2=3.0,
                  group="street", priority=1),
        ClassSpec(5, "crossing", min_width_m=1.0, min_area_m2=1.5,
                  group="pedestrian", priority=4),
    ])
