"""Class-aware morphological cleanup of predicted masks.

Each class is cleaned as a binary layer with a structuring element sized
from the class's minimum mapped width, then the layers are merged back by
priority. The per-class pipeline, with r = max(1, round(min_width / (4 *
resolution))) and the class's minimum area A (in map units):

pass 1 (speck removal)
  erode by r, drop foreground components smaller than (A/2) / res^2
  pixels, dilate by r
pass 2 (hole sealing)
  dilate by r, fill enclosed background components smaller than
  (A/4) / res^2 pixels, erode by r

Components use 4-connectivity; "enclosed" means not touching the image
border. The image edge is padded replicate so border objects erode the
same as interior ones. Area thresholds compare with strict less-than.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .groundtruth import ClassSpec, ClassTable
from .rasterize import FOUR_CONN, ClassMask, round_half_up

log = logging.getLogger(__name__)

ELEMENT_SHAPES = ("disk", "rectangle", "octagon")


def structuring_element(shape: str, radius: int) -> np.ndarray:
    """Boolean (2r+1)^2 structuring element.

    disk: dx^2 + dy^2 <= r^2. rectangle: full square. octagon: square with
    corners cut so |dx| + |dy| <= 2r - ceil(r/2).
    """
    if shape not in ELEMENT_SHAPES:
        raise ConfigError(f"unknown element shape {shape!r}")
    if radius < 1:
        raise ConfigError("element radius must be >= 1")
    dy, dx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    if shape == "disk":
        return dx * dx + dy * dy <= radius * radius
    if shape == "rectangle":
        return np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    cut = 2 * radius - math.ceil(radius / 2)
    return np.abs(dx) + np.abs(dy) <= cut


def kernel_radius(min_width_m: float, resolution_m: float) -> int:
    """Element radius: a quarter of the minimum width, at least 1 pixel."""
    return max(1, round_half_up(min_width_m / (4.0 * resolution_m)))


@dataclass(frozen=True)
class ClassCleaningParams:
    enabled: bool = True
    element_shape: str = "octagon"
    # None means take the value from the ClassSpec
    min_width_m: float | None = None
    min_area_m2: float | None = None


class CleaningPolicy:
    """Per-class cleaning switches and overrides."""

    def __init__(self, per_class: dict[int, ClassCleaningParams] | None = None,
                 default_shape: str = "octagon"):
        if default_shape not in ELEMENT_SHAPES:
            raise ConfigError(f"unknown element shape {default_shape!r}")
        self.per_class = dict(per_class or {})
        self.default_shape = default_shape

    def params_for(self, class_id: int) -> ClassCleaningParams:
        return self.per_class.get(
            class_id, ClassCleaningParams(element_shape=self.default_shape))


def _pad_replicate(mask: np.ndarray, r: int) -> np.ndarray:
    return np.pad(mask, r, mode="edge")


def _erode(mask: np.ndarray, elem: np.ndarray) -> np.ndarray:
    r = elem.shape[0] // 2
    padded = _pad_replicate(mask, r)
    out = ndimage.binary_erosion(padded, structure=elem)
    return out[r:-r, r:-r]


def _dilate(mask: np.ndarray, elem: np.ndarray) -> np.ndarray:
    r = elem.shape[0] // 2
    padded = _pad_replicate(mask, r)
    out = ndimage.binary_dilation(padded, structure=elem)
    return out[r:-r, r:-r]


def _drop_small_components(mask: np.ndarray, min_px: float) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=FOUR_CONN)
    if n == 0:
        return mask
    counts = np.bincount(labels.ravel())
    keep = counts >= min_px
    keep[0] = False
    return keep[labels]


def _fill_small_holes(mask: np.ndarray, min_px: float) -> np.ndarray:
    labels, n = ndimage.label(~mask, structure=FOUR_CONN)
    if n == 0:
        return mask
    border = np.unique(np.concatenate([
        labels[0, :], labels[-1, :], labels[:, 0], labels[:, -1]]))
    counts = np.bincount(labels.ravel())
    fill = counts < min_px
    fill[border] = False
    fill[0] = False
    return mask | fill[labels]


def clean_class(binary: np.ndarray, spec: ClassSpec, resolution_m: float,
                params: ClassCleaningParams | None = None) -> np.ndarray:
    """Run the two-pass cleanup on one binary class layer."""
    params = params or ClassCleaningParams()
    width = params.min_width_m if params.min_width_m is not None \
        else spec.min_width_m
    area = params.min_area_m2 if params.min_area_m2 is not None \
        else spec.min_area_m2
    r = kernel_radius(width, resolution_m)
    elem = structuring_element(params.element_shape, r)
    px_area = resolution_m * resolution_m
    speck_px = (area / 2.0) / px_area
    hole_px = (area / 4.0) / px_area

    out = _erode(binary.astype(bool), elem)
    out = _drop_small_components(out, speck_px)
    out = _dilate(out, elem)

    out = _dilate(out, elem)
    out = _fill_small_holes(out, hole_px)
    out = _erode(out, elem)
    return out


def clean_mask(mask: ClassMask, class_table: ClassTable,
               policy: CleaningPolicy | None = None) -> ClassMask:
    """Clean every class layer of a mask and merge by priority.

    Merge rule per pixel, among classes claiming it after cleanup:
    highest priority wins; at equal priority, the pixel's original owner
    wins if it is among the claimants; remaining ties go to the smallest
    class_id. Pixels gained by dilation never overwrite a pixel still
    held by a higher priority class. Unclaimed pixels become background.
    """
    policy = policy or CleaningPolicy()
    present = [int(c) for c in np.unique(mask.data) if c != 0]
    for cid in present:
        if cid not in class_table:
            raise DataError(f"mask contains unknown class_id {cid}")
    res = mask.resolution
    out = np.zeros_like(mask.data)
    owner_prio = np.full(mask.data.shape, -np.inf)
    owner_orig = np.zeros(mask.data.shape, dtype=bool)
    for cid in present:  # ascending id: strict wins keep the smallest id
        spec = class_table.get(cid)
        params = policy.params_for(cid)
        if params.enabled:
            cleaned = clean_class(mask.data == cid, spec, res, params)
        else:
            cleaned = mask.data == cid
        if not cleaned.any():
            continue
        orig = mask.data == cid
        takes = cleaned & ((spec.priority > owner_prio)
                           | ((spec.priority == owner_prio)
                              & orig & ~owner_orig))
        out[takes] = cid
        owner_prio[takes] = spec.priority
        owner_orig[takes] = orig[takes]
    return ClassMask(mask.tile_id, out, mask.geotransform,
                     acquisition_tag=mask.acquisition_tag)
