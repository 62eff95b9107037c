"""Evaluation of predicted masks against ground truth masks.

All metrics are micro-pooled: integer pixel counts accumulate over tiles
first, ratios are taken once at the end. Per class c:

  iou      |P and G| / |P or G|
  iou_200  |P and buffer(G, 2 m)| / |P or G|   (only the numerator buffers)
  f1       2 |P and G| / (|P| + |G|)
  street_ratio      fraction of predicted-c pixels whose ground truth is
                    any street-group class
  pedestrian_ratio  same for the pedestrian group
  area_ratio        |P| / |G|

Empty-set conventions: class absent from both sides gives iou = iou_200 =
f1 = 1.0 and null ratios; absent from exactly one side gives 0.0 (ratios
that would divide by zero stay null).

The confusion matrix covers background plus every class in table order,
rows are ground truth and are normalized to sum to 1 (all-zero rows stay
zero).

Cross-year trends compare two prediction epochs inside named regions:
per region and class, the pixel-area ratio t2/t1 and the buffered IoU
between the epochs (the earlier epoch plays the ground-truth role and is
the buffered side). Buffered IoU below 0.1 flags the ratio as unreliable.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import shapely
from shapely.geometry.base import BaseGeometry

from .errors import DataError
from .groundtruth import ClassTable
from .rasterize import ClassMask, buffer_mask, round_half_up

BUFFER_M = 2.0
UNRELIABLE_BELOW = 0.1

CSV_COLUMNS = ["class_id", "class_name", "model_area", "gt_area", "iou",
               "iou_200", "f1", "street_ratio", "pedestrian_ratio",
               "area_ratio"]


@dataclass(frozen=True)
class ClassMetrics:
    class_id: int
    class_name: str
    model_area: float
    gt_area: float
    iou: float
    iou_200: float
    f1: float
    street_ratio: float | None
    pedestrian_ratio: float | None
    area_ratio: float | None


@dataclass
class MetricsReport:
    rows: list[ClassMetrics]
    confusion: list[list[float]]      # row-normalized, rows = ground truth
    labels: list[int]                 # 0 (background) + class ids
    resolution_m: float
    buffer_m: float
    n_tiles: int

    def to_json_obj(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "confusion": self.confusion,
            "labels": self.labels,
            "resolution_m": self.resolution_m,
            "buffer_m": self.buffer_m,
            "n_tiles": self.n_tiles,
        }

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_obj(), sort_keys=True,
                                         indent=2))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for r in self.rows:
                writer.writerow([
                    r.class_id, r.class_name, repr(r.model_area),
                    repr(r.gt_area), repr(r.iou), repr(r.iou_200),
                    repr(r.f1),
                    "" if r.street_ratio is None else repr(r.street_ratio),
                    "" if r.pedestrian_ratio is None
                    else repr(r.pedestrian_ratio),
                    "" if r.area_ratio is None else repr(r.area_ratio),
                ])


def _check_pair(pred: ClassMask, gt: ClassMask) -> None:
    if pred.tile_id != gt.tile_id:
        raise DataError(
            f"tile mismatch: pred {pred.tile_id} vs gt {gt.tile_id}")
    if pred.data.shape != gt.data.shape:
        raise DataError(f"shape mismatch on tile {pred.tile_id}")
    if not np.allclose(pred.geotransform, gt.geotransform):
        raise DataError(f"geotransform mismatch on tile {pred.tile_id}")


class MetricsAccumulator:
    """Pools pixel counts over (pred, gt) mask pairs."""

    def __init__(self, class_table: ClassTable, resolution_m: float,
                 buffer_m: float = BUFFER_M):
        self.table = class_table
        self.resolution_m = resolution_m
        self.buffer_m = buffer_m
        ids = class_table.ids()
        self.labels = [0] + ids
        self._index = np.full(256, -1, dtype=np.int64)
        for pos, cid in enumerate(self.labels):
            self._index[cid] = pos
        k = len(self.labels)
        self.confusion_counts = np.zeros((k, k), dtype=np.int64)
        self.inter_buffered = np.zeros(k, dtype=np.int64)
        self.n_tiles = 0

    def _compact(self, data: np.ndarray, what: str) -> np.ndarray:
        idx = self._index[data]
        if (idx < 0).any():
            bad = sorted(int(v) for v in np.unique(data[idx < 0]))
            raise DataError(f"{what} mask contains unknown class ids {bad}")
        return idx

    def add(self, pred: ClassMask, gt: ClassMask) -> None:
        _check_pair(pred, gt)
        if abs(pred.resolution - self.resolution_m) > 1e-9:
            raise DataError(
                f"tile {pred.tile_id}: resolution {pred.resolution} does "
                f"not match accumulator {self.resolution_m}")
        k = len(self.labels)
        pi = self._compact(pred.data, "pred")
        gi = self._compact(gt.data, "gt")
        flat = gi.ravel() * k + pi.ravel()
        self.confusion_counts += np.bincount(
            flat, minlength=k * k).reshape(k, k)
        for pos, cid in enumerate(self.labels):
            if pos == 0:
                continue
            gmask = gt.data == cid
            if gmask.any():
                gbuf = buffer_mask(gmask, self.buffer_m, self.resolution_m)
                self.inter_buffered[pos] += int(
                    ((pred.data == cid) & gbuf).sum())
        self.n_tiles += 1

    def report(self, street_ids: list[int] | None = None,
               pedestrian_ids: list[int] | None = None) -> MetricsReport:
        if street_ids is None:
            street_ids = self.table.group_ids("street")
        if pedestrian_ids is None:
            pedestrian_ids = self.table.group_ids("pedestrian")
        conf = self.confusion_counts
        px_area = self.resolution_m ** 2
        street_pos = [self.labels.index(c) for c in street_ids]
        ped_pos = [self.labels.index(c) for c in pedestrian_ids]
        rows = []
        for pos, cid in enumerate(self.labels):
            if pos == 0:
                continue
            spec = self.table.get(cid)
            p = int(conf[:, pos].sum())
            g = int(conf[pos, :].sum())
            inter = int(conf[pos, pos])
            union = p + g - inter
            if p == 0 and g == 0:
                iou = iou200 = f1 = 1.0
            elif p == 0 or g == 0:
                iou = iou200 = f1 = 0.0
            else:
                iou = inter / union
                iou200 = int(self.inter_buffered[pos]) / union
                f1 = 2.0 * inter / (p + g)
            street = (sum(int(conf[s, pos]) for s in street_pos) / p
                      if p > 0 else None)
            ped = (sum(int(conf[s, pos]) for s in ped_pos) / p
                   if p > 0 else None)
            area_ratio = (p / g) if g > 0 else None
            rows.append(ClassMetrics(
                class_id=cid, class_name=spec.name,
                model_area=p * px_area, gt_area=g * px_area,
                iou=iou, iou_200=iou200, f1=f1,
                street_ratio=street, pedestrian_ratio=ped,
                area_ratio=area_ratio))
        return MetricsReport(
            rows=rows, confusion=_normalize_rows(conf),
            labels=list(self.labels), resolution_m=self.resolution_m,
            buffer_m=self.buffer_m, n_tiles=self.n_tiles)


def _normalize_rows(counts: np.ndarray) -> list[list[float]]:
    out = counts.astype(np.float64)
    sums = out.sum(axis=1, keepdims=True)
    nz = sums[:, 0] > 0
    out[nz] = out[nz] / sums[nz]
    return [[float(v) for v in row] for row in out]


def evaluate_masks(pairs: list[tuple[ClassMask, ClassMask]],
                   class_table: ClassTable,
                   street_ids: list[int] | None = None,
                   pedestrian_ids: list[int] | None = None,
                   buffer_m: float = BUFFER_M) -> MetricsReport:
    """One-shot evaluation of (pred, gt) pairs."""
    if not pairs:
        raise DataError("no mask pairs to evaluate")
    acc = MetricsAccumulator(class_table, pairs[0][0].resolution, buffer_m)
    for pred, gt in pairs:
        acc.add(pred, gt)
    return acc.report(street_ids, pedestrian_ids)


def confusion_matrix(pairs: list[tuple[ClassMask, ClassMask]],
                     class_table: ClassTable) -> tuple[list[list[float]],
                                                       list[int]]:
    report = evaluate_masks(pairs, class_table)
    return report.confusion, report.labels


# ---------------------------------------------------------------------------
# cross-year trends


def format_trend_cell(area_ratio: float | None, iou_200: float) -> str:
    ratio = "n/a" if area_ratio is None else f"{area_ratio:.2f}"
    return f"{ratio} ({iou_200:.2f})"


@dataclass(frozen=True)
class TrendRow:
    region: str
    class_id: int
    class_name: str
    area_t1: float
    area_t2: float
    area_ratio: float | None
    iou_200: float
    unreliable: bool

    @property
    def display(self) -> str:
        return format_trend_cell(self.area_ratio, self.iou_200)


@dataclass
class TrendReport:
    tag_t1: str
    tag_t2: str
    rows: list[TrendRow] = field(default_factory=list)

    def to_json_obj(self) -> dict:
        return {
            "tag_t1": self.tag_t1,
            "tag_t2": self.tag_t2,
            "rows": [dict(asdict(r), display=r.display) for r in self.rows],
        }

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_obj(), sort_keys=True,
                                         indent=2))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["region", "class_id", "class_name", "area_t1",
                             "area_t2", "area_ratio", "iou_200",
                             "unreliable", "display"])
            for r in self.rows:
                writer.writerow([
                    r.region, r.class_id, r.class_name, repr(r.area_t1),
                    repr(r.area_t2),
                    "" if r.area_ratio is None else repr(r.area_ratio),
                    repr(r.iou_200), str(r.unreliable).lower(), r.display])


ALL_REGION = "ALL"


def trend(pairs: list[tuple[ClassMask, ClassMask]],
          class_table: ClassTable,
          regions: dict[str, BaseGeometry] | None = None,
          tag_t1: str = "t1", tag_t2: str = "t2",
          buffer_m: float = BUFFER_M) -> TrendReport:
    """Compare two prediction epochs: pairs are (mask_t1, mask_t2).

    Regions are named polygons in the masks' CRS; pixels belong to a
    region when their center lies strictly inside it. A pooled "ALL" row
    set over every pixel is always included.
    """
    if not pairs:
        raise DataError("no mask pairs for trend analysis")
    if regions is None:
        regions = {}
    if ALL_REGION in regions:
        raise DataError(f"region name {ALL_REGION!r} is reserved")
    res = pairs[0][0].resolution
    names = [ALL_REGION] + sorted(regions)
    ids = class_table.ids()
    a1 = {(n, c): 0 for n in names for c in ids}
    a2 = {(n, c): 0 for n in names for c in ids}
    inter_buf = {(n, c): 0 for n in names for c in ids}
    union = {(n, c): 0 for n in names for c in ids}
    prepared = {}
    for name, geom in regions.items():
        shapely.prepare(geom)
        prepared[name] = geom
    for m1, m2 in pairs:
        _check_pair(m1, m2)
        if abs(m1.resolution - res) > 1e-9:
            raise DataError("mixed resolutions in trend input")
        sel_by_region = {ALL_REGION: None}
        gx, gy = m1.pixel_centers()
        for name, geom in prepared.items():
            gminx, gminy, gmaxx, gmaxy = geom.bounds
            ox, oy, psx, psy = m1.geotransform
            h, w = m1.data.shape
            tminx, tmaxy = ox, oy
            tmaxx, tminy = ox + w * psx, oy + h * psy
            if gminx > tmaxx or gmaxx < tminx or gminy > tmaxy \
                    or gmaxy < tminy:
                sel_by_region[name] = np.zeros(m1.data.shape, dtype=bool)
                continue
            sel_by_region[name] = shapely.contains_xy(
                geom, gx.ravel(), gy.ravel()).reshape(m1.data.shape)
        for cid in ids:
            b1 = m1.data == cid
            b2 = m2.data == cid
            if not (b1.any() or b2.any()):
                continue
            buf1 = buffer_mask(b1, buffer_m, res) if b1.any() else b1
            for name, sel in sel_by_region.items():
                if sel is None:
                    s1, s2, sbuf = b1, b2, buf1
                else:
                    s1, s2, sbuf = b1 & sel, b2 & sel, buf1 & sel
                a1[(name, cid)] += int(s1.sum())
                a2[(name, cid)] += int(s2.sum())
                inter_buf[(name, cid)] += int((s2 & sbuf).sum())
                union[(name, cid)] += int((s1 | s2).sum())
    px_area = res * res
    rows = []
    for name in names:
        for cid in ids:
            spec = class_table.get(cid)
            n1, n2 = a1[(name, cid)], a2[(name, cid)]
            u = union[(name, cid)]
            if n1 == 0 and n2 == 0:
                iou200 = 1.0
            elif n1 == 0 or n2 == 0:
                iou200 = 0.0
            else:
                iou200 = inter_buf[(name, cid)] / u
            ratio = (n2 / n1) if n1 > 0 else None
            rows.append(TrendRow(
                region=name, class_id=cid, class_name=spec.name,
                area_t1=n1 * px_area, area_t2=n2 * px_area,
                area_ratio=ratio, iou_200=iou200,
                unreliable=iou200 < UNRELIABLE_BELOW))
    return TrendReport(tag_t1=tag_t1, tag_t2=tag_t2, rows=rows)
