"""Tile-to-slide aggregation, slide-level metrics and train/test partitions."""

from __future__ import annotations

import csv
import json
import logging
import os
import statistics
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyPredictionSet, InsufficientSlides, MissingGroundTruth

log = logging.getLogger(__name__)

DECISION_BOUNDARY = 0.5


@dataclass(frozen=True)
class TilePrediction:
    slide_id: str
    x: int
    y: int
    size: int
    probability: float


@dataclass(frozen=True)
class SlideResult:
    slide_id: str
    mean_probability: float
    vote_fraction_class1: float
    label_by_mean: int
    label_by_vote: int
    tile_count: int
    tile_prob_variance: float


@dataclass
class EvalReport:
    accuracy: float
    margin: float
    mean_tile_variance: float
    slides: list[SlideResult] = field(default_factory=list)
    excluded: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        payload = {
            "accuracy": self.accuracy,
            "margin": self.margin,
            "mean_tile_variance": self.mean_tile_variance,
            "slides": [asdict(s) for s in self.slides],
        }
        if self.excluded:
            payload["excluded"] = list(self.excluded)
        return json.dumps(payload, indent=2, sort_keys=False) + "\n"


@dataclass(frozen=True)
class Partition:
    name: str
    train_slides: list[str]
    test_slides: list[str]


def aggregate_probabilities(slide_id: str, probs: Sequence[float]) -> SlideResult:
    p = np.asarray(probs, dtype=np.float64)
    if p.size == 0:
        raise EmptyPredictionSet(f"slide {slide_id!r} has no tile predictions")
    # Both statistics are computed exactly and rounded once, so the result
    # does not depend on tile order and identical tiles give zero variance.
    values = p.tolist()
    mean = statistics.fmean(values)
    vote = float(np.count_nonzero(p >= DECISION_BOUNDARY)) / p.size
    return SlideResult(
        slide_id=slide_id,
        mean_probability=mean,
        vote_fraction_class1=vote,
        label_by_mean=int(mean >= DECISION_BOUNDARY),
        # A tie (exactly half the tiles) goes to class 1, like the mean rule.
        label_by_vote=int(vote >= 0.5),
        tile_count=int(p.size),
        tile_prob_variance=statistics.pvariance(values),
    )


def aggregate_slide(preds: Sequence[TilePrediction]) -> SlideResult:
    """Average tile probabilities and tally votes for a single slide."""
    if not preds:
        raise EmptyPredictionSet("no tile predictions to aggregate")
    ids = {p.slide_id for p in preds}
    if len(ids) != 1:
        raise ValueError(f"predictions span several slides: {sorted(ids)}")
    return aggregate_probabilities(preds[0].slide_id, [p.probability for p in preds])


def group_by_slide(preds: Iterable[TilePrediction]) -> dict[str, list[TilePrediction]]:
    grouped: dict[str, list[TilePrediction]] = defaultdict(list)
    for p in preds:
        grouped[p.slide_id].append(p)
    return dict(grouped)


def evaluate(
    preds: Iterable[TilePrediction],
    truth: Mapping[str, int],
    slide_ids: Iterable[str] | None = None,
) -> EvalReport:
    """Score slide classifications against ground truth.

    ``slide_ids`` lists the test slides; it defaults to the keys of ``truth``.
    A test slide without any retained tile is dropped from every metric with
    a warning and listed in ``EvalReport.excluded``.  Predictions for slides
    that have no ground truth raise :class:`MissingGroundTruth`.
    """
    grouped = group_by_slide(preds)
    missing = sorted(set(grouped) - set(truth))
    if missing:
        raise MissingGroundTruth(f"no ground truth for slides: {missing}")
    wanted = sorted(truth) if slide_ids is None else list(slide_ids)
    results, excluded = [], []
    correct = 0
    for sid in wanted:
        if sid not in truth:
            raise MissingGroundTruth(f"no ground truth for slide {sid!r}")
        if truth[sid] not in (0, 1):
            raise ValueError(f"label for {sid!r} must be 0 or 1, got {truth[sid]!r}")
        if sid not in grouped:
            log.warning("slide %s has no retained tiles; excluded from evaluation", sid)
            excluded.append(sid)
            continue
        res = aggregate_slide(grouped[sid])
        results.append(res)
        correct += res.label_by_mean == truth[sid]
    if not results:
        return EvalReport(0.0, 0.0, 0.0, [], excluded)
    return EvalReport(
        accuracy=correct / len(results),
        margin=float(np.mean([abs(r.mean_probability - DECISION_BOUNDARY) for r in results])),
        mean_tile_variance=float(np.mean([r.tile_prob_variance for r in results])),
        slides=results,
        excluded=excluded,
    )


def _round_half_up(x: float) -> int:
    return int(Decimal(repr(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def make_partitions(
    labels: Mapping[str, int],
    n_partitions: int = 3,
    test_fraction: float = 0.30,
    seed: int = 0,
) -> list[Partition]:
    """Stratified partitions with pairwise-disjoint test sets.

    Each test set takes round(test_fraction * N / 2) slides from each class;
    the rest of the slides form that partition's training set.
    """
    if n_partitions < 1:
        raise ValueError("n_partitions must be >= 1")
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    by_class = {c: sorted(s for s, l in labels.items() if l == c) for c in (0, 1)}
    if set(labels.values()) - {0, 1}:
        raise ValueError("labels must be 0 or 1")
    per_class = _round_half_up(test_fraction * len(labels) / 2)
    for c, ids in by_class.items():
        if per_class < 1 or n_partitions * per_class > len(ids):
            raise InsufficientSlides(
                f"class {c} has {len(ids)} slides; {n_partitions} disjoint test sets of "
                f"{max(per_class, 1)} need {n_partitions * max(per_class, 1)}"
            )
    rng = np.random.default_rng(seed)
    shuffled = {c: [ids[i] for i in rng.permutation(len(ids))] for c, ids in by_class.items()}
    everything = sorted(labels)
    parts = []
    for k in range(n_partitions):
        test = sorted(
            s for c in (0, 1) for s in shuffled[c][k * per_class : (k + 1) * per_class]
        )
        test_set = set(test)
        parts.append(
            Partition(
                name=f"XValSet{k + 1}",
                train_slides=[s for s in everything if s not in test_set],
                test_slides=test,
            )
        )
    return parts


def read_labels(path: str | os.PathLike[str]) -> dict[str, int]:
    """Read a ``slide_id,label`` CSV (header optional)."""
    labels: dict[str, int] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip() in ("", "slide_id"):
                continue
            sid, lab = row[0].strip(), row[1].strip()
            if lab not in ("0", "1"):
                raise ValueError(f"label for {sid!r} must be 0 or 1, got {lab!r}")
            labels[sid] = int(lab)
    return labels


def write_labels(labels: Mapping[str, int], path: str | os.PathLike[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slide_id", "label"])
        for sid in sorted(labels):
            w.writerow([sid, labels[sid]])
