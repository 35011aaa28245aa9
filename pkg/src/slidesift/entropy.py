"""Histogram and Shannon entropy of 8-bit images.

Entropy is measured in bits over the 256 possible sample values.  RGB inputs
are reduced to BT.601 luma first so that tile entropies and whole-image
entropies are always computed on the same grayscale data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ChannelMismatch, EmptyHistogram, EmptyImage
from .raster import RasterImage, gray_array


@dataclass(frozen=True, eq=False)
class Histogram256:
    counts: np.ndarray

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape != (256,):
            raise ValueError("histogram needs exactly 256 bins")
        if (counts < 0).any():
            raise ValueError("histogram counts must be non-negative")
        counts = counts.copy()
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "Histogram256") -> "Histogram256":
        return Histogram256(self.counts + other.counts)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Histogram256):
            return NotImplemented
        return bool(np.array_equal(self.counts, other.counts))


def histogram_of(samples: np.ndarray) -> Histogram256:
    """Histogram of an arbitrary uint8 array (any shape)."""
    flat = np.asarray(samples, dtype=np.uint8).ravel()
    if flat.size == 0:
        raise EmptyImage("cannot histogram an empty image")
    return Histogram256(np.bincount(flat, minlength=256))


def histogram(img: RasterImage) -> Histogram256:
    if img.channels != 1:
        raise ChannelMismatch(f"histogram expects 1 channel, got {img.channels}")
    if img.width * img.height == 0:
        raise EmptyImage("cannot histogram an empty image")
    return histogram_of(img.pixels)


def shannon_entropy(h: Histogram256) -> float:
    """H = -sum p_k log2 p_k over the occupied bins, in bits."""
    total = h.total
    if total <= 0:
        raise EmptyHistogram("histogram has no samples")
    counts = h.counts[h.counts > 0].astype(np.float64)
    # log2(c/total) = log2(c) - log2(total) avoids forming tiny quotients
    log_p = np.log2(counts) - math.log2(total)
    p = counts / total
    value = -float(np.dot(p, log_p))
    return value if value > 0.0 else 0.0


def samples_entropy(gray: np.ndarray) -> float:
    """Entropy of a uint8 grayscale array; used on tile crops."""
    return shannon_entropy(histogram_of(gray))


def image_entropy(img: RasterImage) -> float:
    if img.width * img.height == 0:
        raise EmptyImage("cannot take entropy of an empty image")
    return samples_entropy(gray_array(img))
