"""PNG plus ESRI world file IO.

A geotransform here is the 4-tuple (origin_x, origin_y, pixel_size_x,
pixel_size_y) where the origin is the OUTER corner of the top-left pixel
and pixel_size_y is negative (north-up). The world file on disk stores the
CENTER of the top-left pixel, per the ESRI convention, as six lines:
pixel_size_x, 0, 0, pixel_size_y, center_x, center_y.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

Geotransform = tuple[float, float, float, float]


def world_file_path(image_path: str | Path) -> Path:
    """Sidecar path: .png -> .pgw, generally first+last extension char + w."""
    p = Path(image_path)
    ext = p.suffix
    if len(ext) >= 3:
        wext = f".{ext[1]}{ext[-1]}w"
    else:
        wext = ext + "w"
    return p.with_suffix(wext)


def write_world_file(image_path: str | Path, gt: Geotransform) -> None:
    ox, oy, psx, psy = gt
    if psx <= 0 or psy >= 0:
        raise DataError(
            f"geotransform must be north-up (psx > 0, psy < 0), got {gt}")
    cx = ox + psx / 2.0
    cy = oy + psy / 2.0
    lines = [repr(float(v)) for v in (psx, 0.0, 0.0, psy, cx, cy)]
    world_file_path(image_path).write_text("\n".join(lines) + "\n")


def read_world_file(image_path: str | Path) -> Geotransform:
    wf = world_file_path(image_path)
    try:
        values = [float(line) for line in wf.read_text().split()]
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read world file {wf}: {exc}") from exc
    if len(values) != 6:
        raise DataError(f"world file {wf} must have 6 numbers")
    psx, rot1, rot2, psy, cx, cy = values
    if rot1 != 0.0 or rot2 != 0.0:
        raise DataError(f"world file {wf}: rotation terms not supported")
    return (cx - psx / 2.0, cy - psy / 2.0, psx, psy)


def save_image(path: str | Path, pixels: np.ndarray, gt: Geotransform) -> None:
    """Write an RGB uint8 array as PNG plus its world file."""
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise DataError("image must be an (H, W, 3) uint8 array")
    Image.fromarray(pixels, mode="RGB").save(path, format="PNG")
    write_world_file(path, gt)


def load_image(path: str | Path) -> tuple[np.ndarray, Geotransform]:
    with Image.open(path) as im:
        pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return pixels, read_world_file(path)


def save_mask(path: str | Path, data: np.ndarray, gt: Geotransform) -> None:
    """Write a class-id grid as single-channel 8-bit PNG plus world file."""
    if data.ndim != 2 or data.dtype != np.uint8:
        raise DataError("mask must be an (H, W) uint8 array")
    Image.fromarray(data, mode="L").save(path, format="PNG")
    write_world_file(path, gt)


def load_mask(path: str | Path) -> tuple[np.ndarray, Geotransform]:
    with Image.open(path) as im:
        if im.mode != "L":
            im = im.convert("L")
        data = np.asarray(im, dtype=np.uint8)
    return data, read_world_file(path)
