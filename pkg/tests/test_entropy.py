import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slidesift.entropy import (
    Histogram256,
    histogram,
    histogram_of,
    image_entropy,
    shannon_entropy,
)
from slidesift.errors import ChannelMismatch, EmptyHistogram, EmptyImage
from slidesift.raster import RasterImage


def entropy_oracle(samples) -> float:
    """Pure-Python Shannon entropy over raw samples."""
    counts = Counter(int(v) for v in np.asarray(samples).ravel())
    n = sum(counts.values())
    return -sum(c / n * math.log2(c / n) for c in counts.values())


def gray(arr) -> RasterImage:
    return RasterImage(np.asarray(arr, dtype=np.uint8)[:, :, None])


def test_histogram_direct_count():
    h = histogram(gray([[0, 0], [255, 255]]))
    assert h.counts[0] == 2 and h.counts[255] == 2
    assert h.total == 4 and h.counts.sum() == 4


def test_histogram_single_pixel():
    h = histogram(gray([[128]]))
    assert h.counts[128] == 1 and h.total == 1


def test_histogram_all_values_once():
    img = gray(np.arange(256).reshape(16, 16))
    h = histogram(img)
    brute = [sum(1 for v in img.pixels.ravel() if v == k) for k in range(256)]
    assert list(h.counts) == brute == [1] * 256


def test_histogram_errors():
    with pytest.raises(ChannelMismatch):
        histogram(RasterImage(np.zeros((2, 2, 3), dtype=np.uint8)))
    with pytest.raises(EmptyImage):
        histogram(RasterImage(np.zeros((0, 2, 1), dtype=np.uint8)))
    with pytest.raises(EmptyHistogram):
        shannon_entropy(Histogram256(np.zeros(256)))


def test_closed_forms():
    assert shannon_entropy(histogram_of(np.full(10, 3))) == 0.0
    assert shannon_entropy(histogram_of(np.array([0, 255] * 50))) == pytest.approx(1.0, abs=1e-12)
    assert shannon_entropy(histogram_of(np.arange(256))) == pytest.approx(8.0, abs=1e-12)


def test_image_entropy_rgb_constant_is_zero():
    assert image_entropy(RasterImage(np.full((5, 7, 3), 42, dtype=np.uint8))) == 0.0


def test_image_entropy_checkerboard_is_one_bit():
    board = (np.indices((10, 10)).sum(axis=0) % 2) * 255
    assert image_entropy(gray(board)) == pytest.approx(1.0, abs=1e-12)


def test_uniform_noise_entropy_against_oracle():
    samples = np.random.default_rng(99).integers(0, 256, (100, 100), dtype=np.uint8)
    expected = entropy_oracle(samples)
    got = image_entropy(gray(samples))
    assert got == pytest.approx(expected, abs=1e-12)
    assert 7.9 <= got <= 8.0


def test_rgb_entropy_uses_luma():
    px = np.random.default_rng(5).integers(0, 256, (20, 20, 3), dtype=np.uint8)
    luma = (px.astype(int) @ np.array([299, 587, 114]) + 500) // 1000
    assert image_entropy(RasterImage(px)) == pytest.approx(entropy_oracle(luma), abs=1e-12)


def test_permutation_invariance(rng):
    samples = rng.integers(0, 256, 4096, dtype=np.uint8)
    base = image_entropy(gray(samples.reshape(64, 64)))
    for _ in range(20):
        assert image_entropy(gray(rng.permutation(samples).reshape(64, 64))) == base


def test_tiling_does_not_change_entropy(rng):
    small = rng.integers(0, 256, (16, 16), dtype=np.uint8)
    assert image_entropy(gray(np.tile(small, (2, 2)))) == pytest.approx(
        image_entropy(gray(small)), abs=1e-12
    )


@settings(max_examples=200)
@given(st.lists(st.integers(0, 10_000), min_size=256, max_size=256).filter(lambda c: sum(c) > 0))
def test_entropy_bounds(counts):
    h = shannon_entropy(Histogram256(np.array(counts)))
    occupied = sum(1 for c in counts if c)
    assert 0.0 <= h <= 8.0 + 1e-12
    assert h <= math.log2(occupied) + 1e-12
    assert (h == 0.0) == (occupied == 1)


@settings(max_examples=100)
@given(
    st.lists(st.integers(0, 255), min_size=1, max_size=200),
    st.lists(st.integers(0, 255), min_size=1, max_size=200),
)
def test_merged_histogram_bounded_by_occupied_bins(a, b):
    merged = histogram_of(np.array(a)) + histogram_of(np.array(b))
    occupied = int((merged.counts > 0).sum())
    assert shannon_entropy(merged) <= math.log2(occupied) + 1e-12
    assert shannon_entropy(merged) == pytest.approx(entropy_oracle(a + b), abs=1e-12)
