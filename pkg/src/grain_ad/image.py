"""Image container, PNG I/O and bilinear resampling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from grain_ad.errors import DataError, InvalidArgumentError

WORKING_SIZE = 256


@dataclass(eq=False)
class Image:
    """Float image in ``[0, 1]`` with shape ``(height, width, channels)``.

    ``foreground`` is an optional boolean ``(height, width)`` mask marking
    the grain kernel.
    """

    pixels: np.ndarray
    foreground: np.ndarray | None = None

    def __post_init__(self):
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        if self.pixels.ndim != 3 or self.pixels.shape[2] not in (1, 3):
            raise InvalidArgumentError(f"expected HxWx1 or HxWx3 pixels, got {self.pixels.shape}")
        if self.foreground is not None:
            self.foreground = np.asarray(self.foreground, dtype=bool)
            if self.foreground.shape != self.pixels.shape[:2]:
                raise InvalidArgumentError(
                    f"foreground {self.foreground.shape} does not match image {self.pixels.shape[:2]}"
                )

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def foreground_or_full(self) -> np.ndarray:
        if self.foreground is None:
            return np.ones(self.pixels.shape[:2], dtype=bool)
        return self.foreground

    def rgb(self) -> Image:
        if self.channels == 3:
            return self
        return Image(np.repeat(self.pixels, 3, axis=2), self.foreground)


def _axis_weights(n_in: int, n_out: int, align_corners: bool):
    if align_corners:
        pos = np.linspace(0.0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
    else:
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.intp)
    lo = np.minimum(lo, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def interpolation_matrix(n_in: int, n_out: int, align_corners: bool = True) -> np.ndarray:
    """Dense ``(n_out, n_in)`` matrix of 1-D linear interpolation weights."""
    lo, hi, frac = _axis_weights(n_in, n_out, align_corners)
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def resize_bilinear(array: np.ndarray, height: int, width: int, align_corners: bool = False) -> np.ndarray:
    """Bilinear resize over the first two axes of ``array``."""
    h_in, w_in = array.shape[:2]
    if (h_in, w_in) == (height, width):
        return array.copy()
    ry0, ry1, fy = _axis_weights(h_in, height, align_corners)
    rx0, rx1, fx = _axis_weights(w_in, width, align_corners)
    extra = (None,) * (array.ndim - 2)
    fy = fy[(slice(None), None) + extra]
    fx = fx[(None, slice(None)) + extra]
    top = array[ry0][:, rx0] * (1 - fx) + array[ry0][:, rx1] * fx
    bottom = array[ry1][:, rx0] * (1 - fx) + array[ry1][:, rx1] * fx
    return top * (1 - fy) + bottom * fy


def resize_image(image: Image, size: int = WORKING_SIZE) -> Image:
    if image.height == size and image.width == size:
        return image
    pixels = np.clip(resize_bilinear(image.pixels, size, size), 0.0, 1.0)
    fg = None
    if image.foreground is not None:
        fg = resize_bilinear(image.foreground.astype(float), size, size) >= 0.5
    return Image(pixels, fg)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255.0)


def read_png(path: str | Path) -> np.ndarray:
    """Read an 8-bit image as float32 ``HxWx3`` (RGB) in ``[0, 1]``."""
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return from_uint8(arr)


def read_mask_png(path: str | Path) -> np.ndarray:
    """Single-channel mask; any nonzero value counts as foreground."""
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    return arr > 0


def write_png(path: str | Path, pixels: np.ndarray) -> None:
    arr = pixels if pixels.dtype == np.uint8 else to_uint8(pixels)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    PILImage.fromarray(arr).save(path, format="PNG", optimize=False)


def write_mask_png(path: str | Path, mask: np.ndarray) -> None:
    write_png(path, np.asarray(mask, dtype=np.uint8) * 255)
