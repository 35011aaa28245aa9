"""Pixel-level probability maps built from overlapping retained tiles.

Every retained tile is classified once; its probability is added to every
pixel it covers, and each pixel's mean over the covering tiles is colour
coded on top of the slide:

* red  - probability of the class of interest >= 0.65
* gold - 0.5 <= probability < 0.65
* anything below 0.5, and uncovered pixels, keep the slide's own colour

Probabilities are accumulated as integers on a 2**-40 grid.  The sums are
then exact, so a map does not depend on the order tiles arrive in, and
each pixel mean is rounded only once.
"""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionMismatch, NoRetainedTiles, OutOfBounds, ShapeMismatch
from .evaluation import SlideResult, TilePrediction, aggregate_probabilities
from .nn.model import CnnModel, predict_tiles
from .raster import RasterImage
from .tiler import SiftCriterion, TileGridSpec, TileRecord, tile_slide

FIXED_POINT_BITS = 40
_SCALE = float(1 << FIXED_POINT_BITS)

RED = (255, 0, 0)
GOLD = (255, 200, 0)


def quantize_probability(p: float) -> int:
    """Grid value stored by the accumulator for probability ``p``."""
    return int(round(float(p) * _SCALE))


class ProbAccumulator:
    """Per-pixel probability sums and coverage counts."""

    def __init__(self, width: int, height: int):
        if width < 1 or height < 1:
            raise ValueError("accumulator needs positive dimensions")
        self.width = width
        self.height = height
        self.sum_fixed = np.zeros((height, width), dtype=np.int64)
        self.count = np.zeros((height, width), dtype=np.int64)

    def accumulate(self, tile: TileRecord, probability: float) -> "ProbAccumulator":
        return self.add(tile.x, tile.y, tile.size, probability)

    def add(self, x: int, y: int, size: int, probability: float) -> "ProbAccumulator":
        if x < 0 or y < 0 or x + size > self.width or y + size > self.height:
            raise OutOfBounds(f"tile ({x}, {y}, {size}) exceeds {self.width}x{self.height} map")
        if not 0.0 < probability < 1.0:
            raise ValueError(f"probability must lie in (0, 1), got {probability}")
        self.sum_fixed[y : y + size, x : x + size] += quantize_probability(probability)
        self.count[y : y + size, x : x + size] += 1
        return self

    @property
    def sum(self) -> np.ndarray:
        return self.sum_fixed / _SCALE

    def mean(self) -> np.ndarray:
        """Per-pixel mean probability; NaN where no tile covers the pixel."""
        out = np.full((self.height, self.width), np.nan)
        covered = self.count > 0
        out[covered] = self.sum_fixed[covered] / (self.count[covered] * _SCALE)
        return out

    def merge(self, other: "ProbAccumulator") -> "ProbAccumulator":
        if (other.width, other.height) != (self.width, self.height):
            raise DimensionMismatch("cannot merge accumulators of different sizes")
        self.sum_fixed += other.sum_fixed
        self.count += other.count
        return self

    def dump(self, path: str | os.PathLike[str]) -> None:
        """Raw means: u32 width, u32 height, then row-major float64 (LE).

        Uncovered pixels are written as NaN.
        """
        with open(path, "wb") as fh:
            fh.write(struct.pack("<II", self.width, self.height))
            fh.write(self.mean().astype("<f8").tobytes())


def read_dump(path: str | os.PathLike[str]) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h = struct.unpack("<II", fh.read(8))
        return np.frombuffer(fh.read(), dtype="<f8").reshape(h, w)


@dataclass(frozen=True)
class ColorRule:
    class_of_interest: int = 1
    high_cut: float = 0.65
    boundary: float = 0.5
    high_color: tuple[int, int, int] = RED
    moderate_color: tuple[int, int, int] = GOLD
    alpha: float = 0.45

    def __post_init__(self) -> None:
        if self.class_of_interest not in (0, 1):
            raise ValueError("class_of_interest must be 0 or 1")
        if not self.boundary < self.high_cut <= 1.0:
            raise ValueError("need boundary < high_cut <= 1")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")


def _blend(base: np.ndarray, color: Sequence[int], alpha: float) -> np.ndarray:
    v = alpha * np.asarray(color, dtype=np.float64) + (1.0 - alpha) * base.astype(np.float64)
    return np.floor(v + 0.5).astype(np.uint8)


def color_masks(acc: ProbAccumulator, rule: ColorRule) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (high, moderate) masks for the class of interest.

    Cuts are compared on the accumulator's integer grid, so a pixel whose
    tiles all sit exactly on a cut is classified by the ``>=`` rule.
    """
    covered = acc.count > 0
    if rule.class_of_interest == 1:
        score = acc.sum_fixed
    else:
        score = acc.count * (1 << FIXED_POINT_BITS) - acc.sum_fixed
    high = covered & (score >= acc.count * quantize_probability(rule.high_cut))
    at_least_boundary = covered & (score >= acc.count * quantize_probability(rule.boundary))
    return high, at_least_boundary & ~high


def render(
    acc: ProbAccumulator,
    base: RasterImage,
    rule: ColorRule | None = None,
    predicted_class: int | None = None,
) -> RasterImage:
    """Overlay the accumulated map on ``base``.

    ``predicted_class`` overrides ``rule.class_of_interest`` when given.
    """
    if (base.width, base.height) != (acc.width, acc.height):
        raise DimensionMismatch(
            f"map is {acc.width}x{acc.height} but base image is {base.width}x{base.height}"
        )
    rule = rule or ColorRule()
    if predicted_class is not None and predicted_class != rule.class_of_interest:
        rule = ColorRule(
            predicted_class, rule.high_cut, rule.boundary, rule.high_color,
            rule.moderate_color, rule.alpha,
        )
    px = base.pixels
    if base.channels == 1:
        px = np.repeat(px, 3, axis=2)
    out = np.array(px, copy=True)
    high, moderate = color_masks(acc, rule)
    out[high] = _blend(px[high], rule.high_color, rule.alpha)
    out[moderate] = _blend(px[moderate], rule.moderate_color, rule.alpha)
    return RasterImage(out)


@dataclass
class MapResult:
    slide: SlideResult
    image: RasterImage
    accumulator: ProbAccumulator
    predictions: list[TilePrediction] = field(default_factory=list)
    records: list[TileRecord] = field(default_factory=list)

    def sidecar(self) -> dict:
        return {
            "slide": asdict(self.slide),
            "retained_tiles": len(self.predictions),
            "generated_tiles": len(self.records),
            "width": self.accumulator.width,
            "height": self.accumulator.height,
        }

    def write_sidecar(self, path: str | os.PathLike[str]) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.sidecar(), fh, indent=2)
            fh.write("\n")


def classify_records(
    img: RasterImage,
    records: Iterable[TileRecord],
    model: CnnModel,
    batch_size: int = 64,
    threads: int = 1,
) -> list[TilePrediction]:
    """Run ``model`` once over every record's crop."""
    records = list(records)
    chunks = [records[i : i + batch_size] for i in range(0, len(records), batch_size)]

    def run(chunk: list[TileRecord]) -> np.ndarray:
        tiles = np.stack([img.crop(r.x, r.y, r.size) for r in chunk])
        return predict_tiles(model, tiles, batch_size=batch_size)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            probs = list(pool.map(run, chunks))
    else:
        probs = [run(c) for c in chunks]
    out = []
    for chunk, p in zip(chunks, probs):
        out.extend(
            TilePrediction(r.slide_id, r.x, r.y, r.size, float(v)) for r, v in zip(chunk, p)
        )
    return out


def map_slide(
    img: RasterImage,
    model: CnnModel,
    spec: TileGridSpec = TileGridSpec(550, 0.92),
    criterion: SiftCriterion = SiftCriterion(),
    slide_id: str = "slide",
    rule: ColorRule | None = None,
    ground_truth: int | None = None,
    threads: int = 1,
) -> MapResult:
    """Tile, sift, classify and render one slide.

    The overlay is drawn for the predicted slide class unless ``ground_truth``
    is supplied, in which case regions favouring the wrong class stay bare.
    """
    if model.input_size != spec.tile_size:
        raise ShapeMismatch(
            f"model expects {model.input_size}px tiles but grid uses {spec.tile_size}px"
        )
    records, _ = tile_slide(img, spec, criterion, slide_id, threads=threads)
    kept = [r for r in records if r.retained]
    if not kept:
        raise NoRetainedTiles(f"every tile of {slide_id!r} was sifted away")
    preds = classify_records(img, kept, model, threads=threads)
    acc = ProbAccumulator(img.width, img.height)
    for p in preds:
        acc.add(p.x, p.y, p.size, p.probability)
    slide = aggregate_probabilities(slide_id, [p.probability for p in preds])
    target = slide.label_by_mean if ground_truth is None else ground_truth
    image = render(acc, img, rule, predicted_class=target)
    return MapResult(slide, image, acc, preds, records)
