"""End-to-end acceptance checks, one recorded PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they
happen; they are also repeated in the terminal summary.
"""

from pathlib import Path
from time import perf_counter

import numpy as np
import pytest

from slidesift.entropy import histogram_of, image_entropy, shannon_entropy
from slidesift.evaluation import aggregate_probabilities, make_partitions
from slidesift.nn import (
    TrainConfig,
    backward,
    bce_with_logits,
    build_model,
    build_reference_model,
    count_params_flops,
    forward_logits,
    load_model,
    model_bytes,
    save_model,
    train,
)
from slidesift.nn.layers import Conv, Dense, Flatten, Sigmoid
from slidesift.pipeline import evaluate_model, gather_tiles, tile_corpus
from slidesift.probmap import ProbAccumulator, quantize_probability, render
from slidesift.raster import load_image
from slidesift.synth import SynthSpec, generate_corpus, generate_slide
from slidesift.tiler import (
    SiftCriterion,
    TileGridSpec,
    export_manifest,
    grid_origins,
    import_manifest,
    tile_slide,
)

from .conftest import half_noise_half_white
from .oracles import (
    central_differences,
    conv_dense_loss,
    coverage_oracle,
    entropy_oracle,
    mean_map_oracle,
    relative_errors,
    render_oracle,
)

GOLDEN_MAP = Path(__file__).parent / "data" / "golden_map.png"


def test_entropy_exactness(criterion):
    with criterion("entropy exactness") as info:
        start = perf_counter()
        closed_forms = {
            0.0: np.full(1000, 77, dtype=np.uint8),
            1.0: np.repeat(np.array([0, 255], dtype=np.uint8), 500),
            8.0: np.arange(256, dtype=np.uint8).repeat(4),
        }
        worst = 0.0
        for expected, samples in closed_forms.items():
            worst = max(worst, abs(shannon_entropy(histogram_of(samples)) - expected))
        assert worst <= 1e-12

        rng = np.random.default_rng(0)
        samples = rng.integers(0, 256, 4096).astype(np.uint8)
        reference = shannon_entropy(histogram_of(samples))
        assert abs(reference - entropy_oracle(samples)) <= 1e-12
        for _ in range(1000):
            shuffled = rng.permutation(samples)
            assert abs(shannon_entropy(histogram_of(shuffled)) - reference) <= 1e-12
        elapsed = perf_counter() - start
        assert elapsed < 1.0
        info["note"] = f"max closed-form error {worst:.1e}, 1000 shuffles in {elapsed:.2f}s"


def _luma_oracle(px: np.ndarray) -> np.ndarray:
    r, g, b = (px[..., i].astype(np.int64) for i in range(3))
    return (299 * r + 587 * g + 114 * b + 500) // 1000


def test_sifting_semantics(criterion):
    with criterion("sifting semantics") as info:
        img = half_noise_half_white()
        spec = TileGridSpec(25, 0.5)
        gray = _luma_oracle(img.pixels)
        whole = entropy_oracle(gray)
        assert abs(image_entropy(img) - whole) <= 1e-12

        ent, ent_summary = tile_slide(img, spec, SiftCriterion("entropy"), "fx")
        thr, thr_summary = tile_slide(img, spec, SiftCriterion("threshold_gray"), "fx")
        _, all_summary = tile_slide(img, spec, SiftCriterion("unsifted"), "fx")
        assert len(ent) == len(thr) == len(grid_origins(img.width, img.height, spec))

        for e, t in zip(ent, thr):
            patch = gray[e.y : e.y + e.size, e.x : e.x + e.size]
            h = entropy_oracle(patch)
            assert abs(h - whole) > 1e-9, "tile entropy too close to the cut to judge"
            assert e.retained == (h >= whole)
            frac_white = float((patch > 240).mean())
            frac_black = float((patch < 15).mean())
            majority_white = frac_white > 0.5
            assert t.retained == (not majority_white and frac_black <= 0.5)
            assert t.frac_white == frac_white and t.frac_black == frac_black

        assert 0 < ent_summary.retained < ent_summary.generated
        assert ent_summary.retention_ratio <= all_summary.retention_ratio == 1.0
        info["note"] = (
            f"{ent_summary.generated} tiles, entropy kept {ent_summary.retention_ratio:.3f}, "
            f"threshold_gray kept {thr_summary.retention_ratio:.3f}, unsifted 1.000"
        )


def test_grid_coverage(criterion):
    with criterion("grid coverage") as info:
        start = perf_counter()
        rng = np.random.default_rng(2024)
        total_tiles = 0
        for _ in range(500):
            w, h = (int(v) for v in rng.integers(8, 513, 2))
            t = int(rng.integers(8, min(w, h) + 1))
            overlap = float(rng.uniform(0.0, 0.95))
            origins = grid_origins(w, h, TileGridSpec(t, overlap))
            assert coverage_oracle(w, h, t, origins).all(), (w, h, t, overlap)
            total_tiles += len(origins)
        elapsed = perf_counter() - start
        assert elapsed < 30.0
        info["note"] = f"500 configs, {total_tiles} tiles, every pixel covered"


def test_gradient_correctness(criterion):
    with criterion("gradient correctness") as info:
        start = perf_counter()
        model = build_model([Conv(2, 3), Flatten(), Dense(3 * 64, 1), Sigmoid()], 8, seed=3,
                            in_channels=2).astype(np.float64)
        rng = np.random.default_rng(11)
        x = rng.random((4, 2, 8, 8))
        y = np.array([0.0, 1.0, 1.0, 0.0])
        z, caches = forward_logits(model, x, keep_cache=True)
        grads = backward(model, caches, bce_with_logits(z, y)[1])
        analytic = [*grads[0], *grads[2]]
        params = [*model.weights[0], *model.weights[2]]
        numeric = central_differences(lambda p: conv_dense_loss(p, x, y), params, h=1e-5)
        worst = max(float(relative_errors(a, n).max()) for a, n in zip(analytic, numeric))
        n_params = sum(p.size for p in params)
        assert worst < 1e-6
        elapsed = perf_counter() - start
        assert elapsed < 10.0
        info["note"] = f"{n_params} parameters, max relative error {worst:.2e}"


def _reference_param_oracle(tile: int) -> int:
    chans = [3, 16, 32, 48, 64]
    conv = sum((9 * cin + 1) * cout for cin, cout in zip(chans, chans[1:]))
    side = tile // 16
    dense = (side * side * 64 + 1) * 48 + (48 + 1) * 1
    return conv + dense


def test_parameter_accounting(criterion):
    with criterion("parameter accounting") as info:
        params, flops = count_params_flops(build_reference_model(224))
        # conv 448 + 4,640 + 13,872 + 27,712; dense 602,160 + 49
        expected = 448 + 4_640 + 13_872 + 27_712 + 602_160 + 49
        assert expected == _reference_param_oracle(224) == 648_881
        assert params == expected
        deviation = (params - 597_000) / 597_000
        info["note"] = (
            f"{params:,} params ({deviation:+.2%} vs 597,000 published), "
            f"{flops / 1e6:.1f} MFLOPs per forward pass"
        )


@pytest.mark.slow
def test_end_to_end_desk_scale(criterion):
    with criterion("end-to-end desk-scale run") as info:
        start = perf_counter()
        images, labels = generate_corpus(12, (512, 512), seed=0)
        records = tile_corpus(images, TileGridSpec(64, 0.5), SiftCriterion("entropy"))
        part = make_partitions(labels, 1, 0.30, seed=0)[0]
        assert not set(part.train_slides) & set(part.test_slides)
        x, y = gather_tiles(images, records, labels, part.train_slides)
        model = build_reference_model(64, seed=0)
        history = train(model, x, y, TrainConfig(epochs=5, seed=0))
        report = evaluate_model(model, images, records, labels, part.test_slides)
        elapsed = perf_counter() - start
        assert len(history) == 5 <= 10
        assert report.accuracy >= 0.95
        assert elapsed < 600.0
        info["note"] = (
            f"{len(part.test_slides)} held-out slides, accuracy {report.accuracy:.3f}, "
            f"margin {report.margin:.3f}, {len(x)} training tiles, {elapsed:.0f}s"
        )


def test_aggregation_equivalence(criterion):
    with criterion("aggregation equivalence") as info:
        rng = np.random.default_rng(7)
        n_tiles = 0
        for i in range(10_000):
            n = int(rng.integers(1, 60))
            if i % 2:
                probs = rng.uniform(np.nextafter(0.5, 1.0), 1.0, n)
            else:
                probs = rng.uniform(0.0, 0.5, n)
            probs = np.clip(probs, 1e-12, 1 - 1e-12)
            assert ((probs > 0.5).all() or (probs < 0.5).all())
            res = aggregate_probabilities(f"s{i}", probs.tolist())
            assert res.label_by_mean == res.label_by_vote == (i % 2)
            n_tiles += n
        info["note"] = f"10,000 one-sided slides ({n_tiles} tiles), mean and vote labels agree"


def _map_fixture():
    """Fixed 256x256 slide, grid and tile probabilities for the map checks."""
    img = generate_slide(SynthSpec(256, 256, 1, tissue_fraction=0.55, seed=21))
    records, _ = tile_slide(img, TileGridSpec(64, 0.5), SiftCriterion("threshold_gray"), "gold")
    kept = [r for r in records if r.retained]
    probs = np.random.default_rng(5).uniform(0.2, 0.95, len(kept))
    acc = ProbAccumulator(img.width, img.height)
    for r, p in zip(kept, probs):
        acc.accumulate(r, float(p))
    return img, kept, probs, acc


def test_probability_map_oracle(criterion):
    with criterion("probability-map oracle") as info:
        img, kept, probs, acc = _map_fixture()
        assert 0 < len(kept)
        tiles = [(r.x, r.y, r.size, quantize_probability(p)) for r, p in zip(kept, probs)]
        expected = mean_map_oracle(img.width, img.height, tiles)
        np.testing.assert_array_equal(acc.mean(), expected)

        rendered = render(acc, img, predicted_class=1)
        union = coverage_oracle(img.width, img.height, 64, [(r.x, r.y) for r in kept])
        changed = (rendered.pixels != img.pixels).any(axis=2)
        assert changed.any()
        assert not (changed & ~union).any()
        assert rendered.pixels.tobytes() == render_oracle(img.pixels, expected).tobytes()

        golden = load_image(GOLDEN_MAP)
        assert golden.shape == rendered.shape
        assert golden.pixels.tobytes() == rendered.pixels.tobytes()
        info["note"] = (
            f"{len(kept)} tiles, {int(union.sum())} covered px exact, "
            f"{int(changed.sum())} coloured px inside the union, golden image identical"
        )


def test_serialization(criterion, tmp_path):
    with criterion("serialization") as info:
        model = build_reference_model(64, seed=9)
        save_model(model, tmp_path / "m.aeye")
        loaded = load_model(tmp_path / "m.aeye")
        assert model_bytes(loaded) == (tmp_path / "m.aeye").read_bytes() == model_bytes(model)
        for a, b in zip(model.weights, loaded.weights):
            for wa, wb in zip(a, b):
                assert wa.dtype == wb.dtype and wa.tobytes() == wb.tobytes()

        images, labels = generate_corpus(2, (192, 160), seed=4)
        records = tile_corpus(images, TileGridSpec(64, 0.25), SiftCriterion("entropy"))
        export_manifest(records, tmp_path / "a.csv")
        assert import_manifest(tmp_path / "a.csv") == records

        def rerun(tag: str) -> tuple[bytes, bytes]:
            imgs, labs = generate_corpus(2, (192, 160), seed=4)
            recs = tile_corpus(imgs, TileGridSpec(64, 0.25), SiftCriterion("entropy"))
            export_manifest(recs, tmp_path / f"{tag}.csv")
            x, y = gather_tiles(imgs, recs, labs)
            m = build_reference_model(64, seed=1)
            train(m, x, y, TrainConfig(epochs=1, batch_size=8, seed=3))
            return (tmp_path / f"{tag}.csv").read_bytes(), model_bytes(m)

        first, second = rerun("r1"), rerun("r2")
        assert first == second
        assert first[0] == (tmp_path / "a.csv").read_bytes()
        info["note"] = (
            f"model {len(model_bytes(model)):,} bytes bitwise equal, "
            f"{len(records)} manifest rows lossless, reruns byte-identical"
        )
