"""Glue between tiling, training and evaluation used by the CLI and tests."""

from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

from .evaluation import EvalReport, TilePrediction, evaluate
from .nn.model import CnnModel
from .probmap import classify_records
from .raster import RasterImage
from .tiler import SiftCriterion, TileGridSpec, TileRecord, tile_slide


def tile_corpus(
    images: Mapping[str, RasterImage],
    spec: TileGridSpec,
    criterion: SiftCriterion,
    threads: int = 1,
) -> list[TileRecord]:
    records: list[TileRecord] = []
    for sid in sorted(images):
        recs, _ = tile_slide(images[sid], spec, criterion, sid, threads=threads)
        records.extend(recs)
    return records


def gather_tiles(
    images: Mapping[str, RasterImage],
    records: Iterable[TileRecord],
    labels: Mapping[str, int],
    slide_ids: Iterable[str] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Stack retained tiles of the chosen slides as uint8 NHWC plus labels."""
    wanted = None if slide_ids is None else set(slide_ids)
    crops, ys = [], []
    for r in records:
        if not r.retained or (wanted is not None and r.slide_id not in wanted):
            continue
        crops.append(images[r.slide_id].crop(r.x, r.y, r.size))
        ys.append(labels[r.slide_id])
    if not crops:
        return np.zeros((0, 0, 0, 3), dtype=np.uint8), np.zeros(0)
    return np.stack(crops), np.asarray(ys, dtype=np.float64)


def predict_corpus(
    images: Mapping[str, RasterImage],
    records: Iterable[TileRecord],
    model: CnnModel,
    slide_ids: Iterable[str] | None = None,
    threads: int = 1,
) -> list[TilePrediction]:
    wanted = None if slide_ids is None else set(slide_ids)
    by_slide: dict[str, list[TileRecord]] = {}
    for r in records:
        if r.retained and (wanted is None or r.slide_id in wanted):
            by_slide.setdefault(r.slide_id, []).append(r)
    preds: list[TilePrediction] = []
    for sid in sorted(by_slide):
        preds.extend(classify_records(images[sid], by_slide[sid], model, threads=threads))
    return preds


def evaluate_model(
    model: CnnModel,
    images: Mapping[str, RasterImage],
    records: Iterable[TileRecord],
    labels: Mapping[str, int],
    slide_ids: Iterable[str],
    threads: int = 1,
) -> EvalReport:
    slide_ids = list(slide_ids)
    preds = predict_corpus(images, records, model, slide_ids, threads=threads)
    return evaluate(preds, {s: labels[s] for s in slide_ids}, slide_ids)
