"""Polygon layers to class-id rasters and back.

Rasterization paints a pixel if and only if its CENTER lies strictly
inside a polygon (boundary contact does not count). Overlaps resolve by
class priority, highest wins; among equal priorities the larger class_id
wins, a fixed deterministic tie-break.

Vectorization walks directed pixel boundary edges, interior on the left,
and at shared corners prefers the turn that keeps the interior hugged, so
rings never self-intersect. Holes come out as interior rings of their
component's polygon. The pair of operations round-trips exactly:
rasterize(vectorize(mask)) == mask, pixel for pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import shapely
from scipy import ndimage
from shapely.geometry import Polygon

from .errors import DataError
from .grid import GridSpec, Tile
from .groundtruth import ClassTable, GroundTruthLayer
from .worldfile import Geotransform

FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def round_half_up(value: float) -> int:
    """round() with ties away from zero instead of banker's rounding."""
    return int(math.floor(value + 0.5))


@dataclass
class ClassMask:
    """A class-id grid for one tile."""

    tile_id: int
    data: np.ndarray  # (H, W) uint8 of class ids, 0 = background
    geotransform: Geotransform
    acquisition_tag: str = ""

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.dtype != np.uint8:
            raise DataError("mask data must be an (H, W) uint8 array")

    @property
    def resolution(self) -> float:
        return self.geotransform[2]

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """World coordinates of all pixel centers as (X, Y) 2-d arrays."""
        ox, oy, psx, psy = self.geotransform
        h, w = self.data.shape
        xs = ox + (np.arange(w) + 0.5) * psx
        ys = oy + (np.arange(h) + 0.5) * psy
        return np.meshgrid(xs, ys)


def tile_geotransform(tile: Tile, spec: GridSpec) -> Geotransform:
    """North-up geotransform over the tile's provider bounds."""
    minx, miny, maxx, maxy = tile.bounds_provider
    n = spec.tile_size_px
    return (minx, maxy, (maxx - minx) / n, -(maxy - miny) / n)


def _paint_order(class_ids, class_table: ClassTable):
    """Ascending (priority, class_id): later paint wins, so the highest
    priority lands last and larger id breaks priority ties."""
    return sorted(class_ids,
                  key=lambda c: (class_table.get(c).priority, c))


def rasterize(layer: GroundTruthLayer, tile: Tile, spec: GridSpec,
              class_table: ClassTable,
              acquisition_tag: str | None = None) -> ClassMask:
    """Burn a polygon layer into a class-id grid over one tile.

    The layer must already be in the provider CRS (the CRS the tile's
    pixel grid lives in).
    """
    if layer.crs != spec.provider_crs:
        raise DataError(
            f"layer CRS {layer.crs} != provider CRS {spec.provider_crs}; "
            f"reproject the layer first")
    n = spec.tile_size_px
    gt = tile_geotransform(tile, spec)
    ox, oy, psx, psy = gt
    data = np.zeros((n, n), dtype=np.uint8)

    by_class: dict[int, list] = {}
    for geom, cid in layer.features:
        class_table.get(cid)  # raises on unknown ids
        by_class.setdefault(cid, []).append(geom)

    xs = ox + (np.arange(n) + 0.5) * psx
    ys = oy + (np.arange(n) + 0.5) * psy
    tminx, tminy, tmaxx, tmaxy = tile.bounds_provider

    for cid in _paint_order(by_class, class_table):
        for geom in by_class[cid]:
            gminx, gminy, gmaxx, gmaxy = geom.bounds
            if gminx > tmaxx or gmaxx < tminx or gminy > tmaxy or gmaxy < tminy:
                continue
            # column range of pixel centers possibly inside the geometry
            j0 = max(0, int(np.searchsorted(xs, gminx, side="left")))
            j1 = min(n, int(np.searchsorted(xs, gmaxx, side="right")))
            # ys is descending; flip for searchsorted
            i0 = max(0, int(np.searchsorted(-ys, -gmaxy, side="left")))
            i1 = min(n, int(np.searchsorted(-ys, -gminy, side="right")))
            if j0 >= j1 or i0 >= i1:
                continue
            gx, gy = np.meshgrid(xs[j0:j1], ys[i0:i1])
            inside = shapely.contains_xy(geom, gx.ravel(), gy.ravel())
            window = data[i0:i1, j0:j1]
            window[inside.reshape(window.shape)] = cid
    tag = layer.acquisition_tag if acquisition_tag is None else acquisition_tag
    return ClassMask(tile.tile_id, data, gt, acquisition_tag=tag)


# ---------------------------------------------------------------------------
# vectorize


def _boundary_edges(mask: np.ndarray):
    """Directed edges (interior on the left) of a binary mask, in pixel
    corner coordinates (x=col, y=row)."""
    h, w = mask.shape
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[1:-1, 1:-1] = mask
    edges = []  # (start, end) vertex tuples
    rr, cc = np.nonzero(mask)
    for r, c in zip(rr.tolist(), cc.tolist()):
        if not padded[r, c + 1]:        # neighbour above
            edges.append(((c, r), (c + 1, r)))
        if not padded[r + 2, c + 1]:    # below
            edges.append(((c + 1, r + 1), (c, r + 1)))
        if not padded[r + 1, c]:        # left
            edges.append(((c, r + 1), (c, r)))
        if not padded[r + 1, c + 2]:    # right
            edges.append(((c + 1, r), (c + 1, r + 1)))
    return edges


def _walk_rings(edges) -> list[list[tuple[int, int]]]:
    """Assemble directed edges into closed rings.

    At a corner shared by two boundary strands there are two outgoing
    edges; taking the one that turns clockwise (cross product -1 in these
    y-down coordinates) keeps each ring simple.
    """
    outgoing: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for start, end in edges:
        outgoing.setdefault(start, []).append(end)
    for ends in outgoing.values():
        ends.sort()
    rings = []
    while outgoing:
        start = next(iter(outgoing))
        ring = [start]
        prev = None
        current = start
        while True:
            ends = outgoing[current]
            if len(ends) == 1 or prev is None:
                nxt = ends[0]
            else:
                din = (current[0] - prev[0], current[1] - prev[1])
                nxt = None
                for cand in ends:
                    dout = (cand[0] - current[0], cand[1] - current[1])
                    if din[0] * dout[1] - din[1] * dout[0] < 0:
                        nxt = cand
                        break
                if nxt is None:
                    nxt = ends[0]
            ends.remove(nxt)
            if not ends:
                del outgoing[current]
            prev = current
            current = nxt
            if current == start:
                break
            ring.append(current)
        rings.append(_drop_collinear(ring))
    return rings


def _drop_collinear(ring: list[tuple[int, int]]) -> list[tuple[int, int]]:
    out = []
    n = len(ring)
    for i, pt in enumerate(ring):
        a = ring[i - 1]
        b = ring[(i + 1) % n]
        if (pt[0] - a[0]) * (b[1] - pt[1]) != (pt[1] - a[1]) * (b[0] - pt[0]):
            out.append(pt)
    return out


def _ring_signed_area2(ring) -> int:
    s = 0
    n = len(ring)
    for i in range(n):
        x0, y0 = ring[i]
        x1, y1 = ring[(i + 1) % n]
        s += x0 * y1 - x1 * y0
    return s


def vectorize(mask: ClassMask, class_table: ClassTable | None = None,
              crs: str = "") -> GroundTruthLayer:
    """Trace each class of a mask back into polygons with holes.

    Output coordinates are world coordinates of pixel corners, so
    re-rasterizing over the same grid reproduces the mask exactly. Masks
    do not store a CRS; pass ``crs`` to stamp one on the layer.
    """
    ox, oy, psx, psy = mask.geotransform
    features = []
    for cid in sorted(np.unique(mask.data)):
        cid = int(cid)
        if cid == 0:
            continue
        if class_table is not None:
            class_table.get(cid)
        binary = mask.data == cid
        labels, n_comp = ndimage.label(binary, structure=FOUR_CONN)
        for comp in range(1, n_comp + 1):
            rings = _walk_rings(_boundary_edges(labels == comp))
            shell = None
            holes = []
            for ring in rings:
                # positive signed area marks the outer ring in y-down
                # pixel coordinates; each component has exactly one
                if _ring_signed_area2(ring) > 0:
                    shell = ring
                else:
                    holes.append(ring)
            if shell is None:
                raise DataError("component with no outer ring")

            def to_world(ring):
                return [(ox + x * psx, oy + y * psy) for x, y in ring]

            features.append(
                (Polygon(to_world(shell), [to_world(h) for h in holes]),
                 cid))
    return GroundTruthLayer(features, crs=crs, source_tag="vectorized",
                            acquisition_tag=mask.acquisition_tag)


def buffer_mask(binary: np.ndarray, radius_m: float,
                resolution_m: float) -> np.ndarray:
    """Dilate a binary mask by a metric radius using a disk element."""
    if binary.dtype != bool:
        binary = binary.astype(bool)
    r = round_half_up(radius_m / resolution_m)
    if r <= 0:
        return binary.copy()
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    disk = xx * xx + yy * yy <= r * r
    return ndimage.binary_dilation(binary, structure=disk)
