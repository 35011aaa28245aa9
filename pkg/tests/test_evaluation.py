import itertools
import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slidesift.errors import EmptyPredictionSet, InsufficientSlides, MissingGroundTruth
from slidesift.evaluation import (
    TilePrediction,
    aggregate_slide,
    evaluate,
    make_partitions,
    read_labels,
    write_labels,
)


def preds(slide, probs):
    return [TilePrediction(slide, i * 10, 0, 10, p) for i, p in enumerate(probs)]


def test_aggregate_three_high():
    r = aggregate_slide(preds("a", [0.9, 0.8, 0.7]))
    assert r.mean_probability == pytest.approx(0.8, abs=1e-15)
    assert r.label_by_mean == 1 and r.label_by_vote == 1
    assert r.vote_fraction_class1 == 1.0
    # population variance: ((0.1)^2 + 0 + (0.1)^2) / 3
    assert r.tile_prob_variance == pytest.approx(0.02 / 3, abs=1e-15)
    assert r.tile_count == 3


def test_aggregate_boundaries_go_to_class_one():
    r = aggregate_slide(preds("a", [0.4, 0.6]))
    assert r.mean_probability == pytest.approx(0.5, abs=1e-15)
    assert r.vote_fraction_class1 == 0.5
    assert r.label_by_vote == 1
    exact = aggregate_slide(preds("a", [0.25, 0.75]))
    assert exact.mean_probability == 0.5 and exact.label_by_mean == 1


def test_aggregate_single():
    r = aggregate_slide(preds("a", [0.2]))
    assert (r.mean_probability, r.label_by_mean, r.tile_prob_variance) == (0.2, 0, 0.0)


def test_aggregate_errors():
    with pytest.raises(EmptyPredictionSet):
        aggregate_slide([])
    with pytest.raises(ValueError):
        aggregate_slide(preds("a", [0.1]) + preds("b", [0.2]))


@settings(max_examples=100)
@given(st.lists(st.floats(0.001, 0.999), min_size=1, max_size=30), st.randoms())
def test_aggregation_permutation_invariant(probs, rnd):
    shuffled = list(probs)
    rnd.shuffle(shuffled)
    a, b = aggregate_slide(preds("s", probs)), aggregate_slide(preds("s", shuffled))
    assert a.mean_probability == pytest.approx(b.mean_probability, abs=1e-15)
    assert a.vote_fraction_class1 == b.vote_fraction_class1
    assert a.label_by_vote == b.label_by_vote
    assert 0 <= a.tile_prob_variance <= 0.25


def test_evaluate_two_correct():
    p = preds("a", [0.9, 0.95]) + preds("b", [0.1, 0.05])
    rep = evaluate(p, {"a": 1, "b": 0})
    assert rep.accuracy == 1.0


def test_evaluate_margin():
    rep = evaluate(preds("a", [0.9]) + preds("b", [0.1]), {"a": 1, "b": 0})
    assert rep.margin == pytest.approx(0.4, abs=1e-15)


def test_evaluate_zero_variance():
    rep = evaluate(preds("a", [0.7] * 4) + preds("b", [0.2] * 3), {"a": 1, "b": 1})
    assert rep.mean_tile_variance == 0.0
    assert rep.accuracy == 0.5


def test_evaluate_missing_truth():
    with pytest.raises(MissingGroundTruth):
        evaluate(preds("a", [0.9]) + preds("zzz", [0.1]), {"a": 1})


def test_evaluate_excludes_slide_without_tiles(caplog):
    with caplog.at_level(logging.WARNING):
        rep = evaluate(preds("a", [0.9]), {"a": 1, "b": 0})
    assert rep.excluded == ["b"]
    assert [s.slide_id for s in rep.slides] == ["a"]
    assert rep.accuracy == 1.0
    assert "b" in caplog.text


def test_report_json_keys():
    rep = evaluate(preds("a", [0.9, 0.6]), {"a": 1})
    payload = json.loads(rep.to_json())
    assert list(payload)[:4] == ["accuracy", "margin", "mean_tile_variance", "slides"]
    assert payload["slides"][0]["slide_id"] == "a"


def test_accuracy_invariant_under_relabelling_ids():
    rng = np.random.default_rng(0)
    truth = {f"s{i}": int(rng.integers(0, 2)) for i in range(20)}
    p = [TilePrediction(s, 0, 0, 8, float(rng.uniform(0.01, 0.99))) for s in truth for _ in range(3)]
    rename = {s: f"renamed-{i * 7 % 20}" for i, s in enumerate(truth)}
    p2 = [TilePrediction(rename[t.slide_id], t.x, t.y, t.size, t.probability) for t in p]
    truth2 = {rename[s]: l for s, l in truth.items()}
    assert evaluate(p, truth).accuracy == evaluate(p2, truth2).accuracy


def _labels(n0, n1):
    return {**{f"a{i:02d}": 0 for i in range(n0)}, **{f"b{i:02d}": 1 for i in range(n1)}}


def test_partitions_84_slides():
    labels = _labels(42, 42)
    parts = make_partitions(labels, 3, 0.30, seed=0)
    assert len(parts) == 3
    for p in parts:
        assert len(p.test_slides) == 26 and len(p.train_slides) == 58
        assert sum(labels[s] for s in p.test_slides) == 13
        assert sum(labels[s] for s in p.train_slides) == 29
    for p, q in itertools.combinations(parts, 2):
        assert not set(p.test_slides) & set(q.test_slides)


def test_partitions_6_slides():
    labels = _labels(3, 3)
    parts = make_partitions(labels, 3, 0.30, seed=4)
    tests = [set(p.test_slides) for p in parts]
    assert all(len(t) == 2 and sum(labels[s] for s in t) == 1 for t in tests)
    # enumerate every pair of partitions and check disjointness
    for a, b in itertools.combinations(tests, 2):
        assert not a & b
    assert set().union(*tests) == set(labels)


def test_partitions_4_slides_insufficient():
    with pytest.raises(InsufficientSlides):
        make_partitions(_labels(2, 2), 3, 0.30)


def test_partitions_deterministic():
    labels = _labels(10, 10)
    assert make_partitions(labels, 2, 0.3, seed=5) == make_partitions(labels, 2, 0.3, seed=5)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(2, 60), k=st.integers(1, 4), frac=st.floats(0.05, 0.5), seed=st.integers(0, 99))
def test_partition_properties(n, k, frac, seed):
    labels = _labels(n, n)
    try:
        parts = make_partitions(labels, k, frac, seed)
    except InsufficientSlides:
        per_class = int(frac * n + 0.5)
        assert per_class < 1 or k * per_class > n
        return
    per_class = len(parts[0].test_slides) // 2
    seen = set()
    for p in parts:
        assert not set(p.train_slides) & set(p.test_slides)
        assert set(p.train_slides) | set(p.test_slides) == set(labels)
        assert sum(labels[s] for s in p.test_slides) == per_class
        assert len(p.test_slides) == 2 * per_class
        assert not seen & set(p.test_slides)
        seen |= set(p.test_slides)


def test_labels_file_round_trip(tmp_path):
    labels = {"x": 0, "y": 1}
    write_labels(labels, tmp_path / "labels.csv")
    assert (tmp_path / "labels.csv").read_text() == "slide_id,label\nx,0\ny,1\n"
    assert read_labels(tmp_path / "labels.csv") == labels
