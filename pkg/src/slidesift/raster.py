"""Image decoding, grayscale conversion and intermediate rescaling.

Whole-slide exports are far too large to feed a CNN, so every slide is first
shrunk until its longer side fits under a fixed limit (6000 px by default).
The result is still big enough to keep anatomic detail and is the image that
all tiling, sifting and map rendering work against.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError

PathLike = Union[str, "os.PathLike[str]"]

# BT.601 luma weights scaled to integers so the conversion is exact.
_LUMA_WEIGHTS = np.array([299, 587, 114], dtype=np.int64)


@dataclass(frozen=True, eq=False)
class RasterImage:
    """Immutable 8-bit image stored as a (height, width, channels) array."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"expected (H, W, 1|3) samples, got shape {px.shape}")
        if px.dtype != np.uint8:
            if px.size and (px.min() < 0 or px.max() > 255):
                raise ValueError("samples must lie in [0, 255]")
            px = px.astype(np.uint8)
        px = np.ascontiguousarray(px)
        if px is self.pixels:
            px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def channels(self) -> int:
        return int(self.pixels.shape[2])

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.height, self.width, self.channels

    def crop(self, x: int, y: int, size: int) -> np.ndarray:
        return self.pixels[y : y + size, x : x + size, :]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(
            np.array_equal(self.pixels, other.pixels)
        )

    def __repr__(self) -> str:
        return f"RasterImage({self.width}x{self.height}x{self.channels})"


@dataclass(frozen=True)
class RescalePolicy:
    max_longer_dim: int = 6000

    def __post_init__(self) -> None:
        if self.max_longer_dim < 1:
            raise ValueError("max_longer_dim must be >= 1")


def load_image(path: PathLike) -> RasterImage:
    """Decode a PNG/JPEG/TIFF file into a 3-channel RasterImage.

    Gray sources are expanded to RGB by replicating the single channel.
    Missing or unreadable files raise ``OSError``; anything Pillow cannot
    decode raises :class:`DecodeError`.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    # Rescaling exists precisely because inputs are huge.
    Image.MAX_IMAGE_PIXELS = None
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            if im.mode in ("L", "P", "1", "I", "I;16", "F"):
                gray = np.asarray(im.convert("L"))
                px = np.repeat(gray[:, :, None], 3, axis=2)
            else:
                px = np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"cannot decode {os.fspath(path)}: {exc}") from exc
    return RasterImage(px)


def save_png(img: RasterImage, path: PathLike) -> None:
    """Write an 8-bit, non-interlaced PNG."""
    px = img.pixels
    if img.channels == 1:
        pil = Image.fromarray(px[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(px, mode="RGB")
    pil.save(path, format="PNG", optimize=False)


def rescaled_size(width: int, height: int, max_longer_dim: int) -> tuple[int, int]:
    longer = max(width, height)
    if longer <= max_longer_dim:
        return width, height
    # floor(dim * max / longer) in exact integer arithmetic
    new_w = max(1, width * max_longer_dim // longer)
    new_h = max(1, height * max_longer_dim // longer)
    return new_w, new_h


def rescale(img: RasterImage, policy: RescalePolicy = RescalePolicy()) -> RasterImage:
    """Shrink ``img`` so its longer side is at most ``policy.max_longer_dim``.

    Images already within the limit are returned unchanged; images are never
    enlarged.
    """
    new_w, new_h = rescaled_size(img.width, img.height, policy.max_longer_dim)
    if (new_w, new_h) == (img.width, img.height):
        return img
    if img.channels == 1:
        pil = Image.fromarray(img.pixels[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(img.pixels, mode="RGB")
    out = pil.resize((new_w, new_h), resample=Image.Resampling.BILINEAR)
    return RasterImage(np.asarray(out))


def gray_array(img: RasterImage) -> np.ndarray:
    """BT.601 luma of an RGB image as a (H, W) uint8 array.

    Rounds half away from zero; computed in integers so .5 cases are exact.
    """
    if img.channels == 1:
        return img.pixels[:, :, 0]
    if img.channels != 3:
        raise ValueError("grayscale conversion needs a 3-channel image")
    acc = img.pixels.astype(np.int64) @ _LUMA_WEIGHTS
    return np.clip((acc + 500) // 1000, 0, 255).astype(np.uint8)


def to_grayscale(img: RasterImage) -> RasterImage:
    if img.channels != 3:
        raise ValueError("to_grayscale expects a 3-channel image")
    return RasterImage(gray_array(img)[:, :, None])
