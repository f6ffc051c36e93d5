"""Satellite raster preprocessing, buffer cropping, resizing and augmentation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .errors import ValidationError


@dataclass(frozen=True)
class Raster:
    """An RGB raster georeferenced by its top-left corner.

    Pixel ``(row, col)`` covers ``x`` in ``[origin_x + col*ps, origin_x + (col+1)*ps)``
    and ``y`` in ``(origin_y - (row+1)*ps, origin_y - row*ps]``: columns run east,
    rows run south.
    """

    pixels: np.ndarray
    origin_x: float
    origin_y: float
    pixel_size: float

    def __post_init__(self):
        if self.pixel_size <= 0:
            raise ValidationError("pixel_size must be positive")
        if self.pixels.ndim != 3 or self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ValidationError(f"raster pixels must be H x W x C, got {self.pixels.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]

    def pixel_of(self, x: float, y: float) -> tuple[int, int]:
        col = math.floor((x - self.origin_x) / self.pixel_size)
        row = math.floor((self.origin_y - y) / self.pixel_size)
        return row, col

    def pixel_center(self, row: int, col: int) -> tuple[float, float]:
        return (self.origin_x + (col + 0.5) * self.pixel_size,
                self.origin_y - (row + 0.5) * self.pixel_size)


@dataclass(frozen=True)
class AugmentPolicy:
    flip_prob: float = 0.5
    max_rotation: float = 10.0
    max_translation: float = 0.05
    rot90: bool = False

    @classmethod
    def none(cls) -> "AugmentPolicy":
        return cls(0.0, 0.0, 0.0, False)


def percentile_clip(raster: Raster, p_low: float = 1.0, p_high: float = 99.0, rescale: bool = True) -> Raster:
    """Clip each channel to its [p_low, p_high] percentiles and stretch to 0..255.

    Percentiles use the nearest order statistic, so clipping twice at the same
    percentiles changes nothing. Channels whose clipped range is empty are
    left unscaled.
    """
    if not 0 <= p_low < p_high <= 100:
        raise ValidationError(f"need 0 <= p_low < p_high <= 100, got ({p_low}, {p_high})")
    src = raster.pixels
    out = np.empty(src.shape, dtype=np.float64)
    for ch in range(src.shape[2]):
        band = src[..., ch].astype(np.float64)
        lo, hi = np.percentile(band, [p_low, p_high], method="nearest")
        clipped = np.clip(band, lo, hi)
        if rescale and hi > lo:
            clipped = (clipped - lo) * (255.0 / (hi - lo))
        out[..., ch] = clipped
    if src.dtype == np.uint8:
        out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return Raster(out, raster.origin_x, raster.origin_y, raster.pixel_size)


def buffer_window_size(buffer_m: float, pixel_size: float) -> int:
    # guard against 50/2.0 style quotients landing a hair above an integer
    return max(1, math.ceil(2.0 * buffer_m / pixel_size - 1e-9))


def crop_buffer(raster: Raster, point: tuple[float, float], buffer_m: float) -> np.ndarray:
    """Square window of side 2*buffer_m centred on the pixel containing ``point``."""
    if buffer_m <= 0:
        raise ValidationError("buffer_m must be positive")
    size = buffer_window_size(buffer_m, raster.pixel_size)
    row, col = raster.pixel_of(*point)
    r0, c0 = row - size // 2, col - size // 2
    r1, c1 = r0 + size, c0 + size
    H, W = raster.shape
    if r0 < 0 or c0 < 0 or r1 > H or c1 > W:
        inter = max(0, min(r1, H) - max(r0, 0)) * max(0, min(c1, W) - max(c0, 0))
        raise ValidationError(
            f"{2 * buffer_m:g} m window around {point} leaves the raster "
            f"(overlap fraction {inter / (size * size):.3f})"
        )
    return raster.pixels[r0:r1, c0:c1].copy()


def _axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n_out == 1:
        src = np.array([(n_in - 1) / 2.0])
    else:
        src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(src).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling; uint8 input gives uint8 output."""
    if out_h < 1 or out_w < 1:
        raise ValidationError("target size must be positive")
    img = np.asarray(image)
    H, W = img.shape[:2]
    if (H, W) == (out_h, out_w):
        return img.copy()
    x = img.astype(np.float64)
    r0, r1, fr = _axis_coords(H, out_h)
    c0, c1, fc = _axis_coords(W, out_w)
    fr = fr.reshape(-1, 1, *([1] * (img.ndim - 2)))
    fc = fc.reshape(1, -1, *([1] * (img.ndim - 2)))
    top = x[r0][:, c0] + fc * (x[r0][:, c1] - x[r0][:, c0])
    bottom = x[r1][:, c0] + fc * (x[r1][:, c1] - x[r1][:, c0])
    out = top + fr * (bottom - top)
    if img.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out.astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64)


def augment(image: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy) -> np.ndarray:
    """Random flip, then rotation, then translation, with edge replication.

    Always draws the same number of variates from ``rng`` so batches stay
    aligned with the stream regardless of which transforms fire.
    """
    u_flip, u_rot, u_dy, u_dx, u_k = rng.random(5)
    out = np.asarray(image)
    if u_flip < policy.flip_prob:
        out = out[:, ::-1]
    if policy.rot90 and out.shape[0] == out.shape[1]:
        out = np.rot90(out, int(u_k * 4) % 4)
    angle = (2.0 * u_rot - 1.0) * policy.max_rotation
    H, W = out.shape[:2]
    dy = (2.0 * u_dy - 1.0) * policy.max_translation * H
    dx = (2.0 * u_dx - 1.0) * policy.max_translation * W
    if angle == 0.0 and dy == 0.0 and dx == 0.0:
        return np.ascontiguousarray(out)
    theta = math.radians(angle)
    cos, sin = math.cos(theta), math.sin(theta)
    # inverse map: input = R^-1 (o - t - c) + c
    inv = np.array([[cos, sin], [-sin, cos]])
    center = np.array([(H - 1) / 2.0, (W - 1) / 2.0])
    offset = center - inv @ (center + np.array([dy, dx]))
    matrix = np.eye(out.ndim)
    matrix[:2, :2] = inv
    full_offset = np.zeros(out.ndim)
    full_offset[:2] = offset
    src = out.astype(np.float64)
    res = ndimage.affine_transform(src, matrix, offset=full_offset, order=1, mode="nearest")
    if np.asarray(image).dtype == np.uint8:
        return np.clip(np.rint(res), 0, 255).astype(np.uint8)
    return res.astype(np.asarray(image).dtype)


def to_unit(image: np.ndarray, dtype=np.float32) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype == np.uint8:
        return img.astype(dtype) / 255.0
    return img.astype(dtype)


def to_uint8(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype == np.uint8:
        return img
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def write_png(path, image: np.ndarray) -> None:
    PILImage.fromarray(to_uint8(image)).save(path, format="PNG", compress_level=1)


def read_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_raster(path, raster: Raster) -> None:
    path = Path(path)
    write_png(path, raster.pixels)
    sidecar = {"origin_x": raster.origin_x, "origin_y": raster.origin_y, "pixel_size": raster.pixel_size}
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True))


def read_raster(path) -> Raster:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    return Raster(read_png(path), float(meta["origin_x"]), float(meta["origin_y"]), float(meta["pixel_size"]))
