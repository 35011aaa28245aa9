"""Command-line entry point: ``slidesift <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Every subcommand
writes ``run.json`` with its resolved configuration under ``--out``.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from typing import Any, Sequence

from threadpoolctl import threadpool_limits

from . import __version__
from .errors import ConfigError, SlideSiftError
from .evaluation import aggregate_slide, group_by_slide, make_partitions, read_labels
from .nn import TrainConfig, build_reference_model, load_model, train
from .pipeline import evaluate_model, gather_tiles, predict_corpus, tile_corpus
from .probmap import ColorRule, map_slide
from .raster import RasterImage, RescalePolicy, load_image, rescale, save_png
from .synth import generate_corpus
from .tiler import (
    SiftCriterion,
    TileGridSpec,
    export_manifest,
    export_tile_pngs,
    import_manifest,
    summarize,
)

log = logging.getLogger("slidesift")

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".tif", ".tiff")


class UsageError(SlideSiftError):
    pass


@dataclass
class PipelineConfig:
    max_longer_dim: int = 6000
    tile_size: int = 100
    overlap_fraction: float = 0.5
    criterion: str = "entropy"
    epochs: int = 35
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    threads: int = 0
    n_partitions: int = 3
    test_fraction: float = 0.30
    partition: int = 0

    def validate(self) -> None:
        RescalePolicy(self.max_longer_dim)
        TileGridSpec(self.tile_size, self.overlap_fraction)
        SiftCriterion.parse(self.criterion)
        TrainConfig(self.epochs, self.batch_size, self.learning_rate).validate()
        if self.threads < 0:
            raise ConfigError("threads must be >= 0")
        if self.partition < 0 or self.partition > self.n_partitions:
            raise ConfigError("partition must lie in 0..n_partitions (0 = no split)")


_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}
_CASTS = {"int": int, "float": float, "str": str}


def read_config(path: str) -> dict[str, Any]:
    """Parse a ``key = value`` file; unknown keys are rejected."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    values: dict[str, Any] = {}
    for key, raw in parser["run"].items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}: unknown key {key!r}")
        raw = raw.strip().strip('"').strip("'")
        try:
            values[key] = _CASTS[_FIELD_TYPES[key]](raw)
        except ValueError as exc:
            raise ConfigError(f"{path}: bad value for {key}: {raw!r}") from exc
    return values


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    merged: dict[str, Any] = {}
    if getattr(args, "config", None):
        merged.update(read_config(args.config))
    for name in _FIELD_TYPES:
        val = getattr(args, name, None)
        if val is not None:
            merged[name] = val
    cfg = PipelineConfig(**merged)
    cfg.validate()
    return cfg


def _threads(cfg: PipelineConfig) -> int:
    return cfg.threads or os.cpu_count() or 1


def _write_run(out: str, command: str, cfg: PipelineConfig, extra: dict | None = None) -> None:
    os.makedirs(out, exist_ok=True)
    payload = {"command": command, "version": __version__, "config": asdict(cfg)}
    if extra:
        payload.update(extra)
    with open(os.path.join(out, "run.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _list_images(in_dir: str) -> tuple[list[str], list[str]]:
    if not os.path.isdir(in_dir):
        raise UsageError(f"not a directory: {in_dir}")
    images, skipped = [], []
    for name in sorted(os.listdir(in_dir)):
        path = os.path.join(in_dir, name)
        if not os.path.isfile(path):
            continue
        (images if name.lower().endswith(IMAGE_EXTS) else skipped).append(path)
    return images, skipped


def _slide_id(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def _load_slides(in_dir: str, cfg: PipelineConfig, wanted: set[str] | None = None):
    images, skipped = _list_images(in_dir)
    for path in skipped:
        if not path.endswith((".csv", ".json")):
            log.warning("skipping non-image %s", path)
    slides: dict[str, RasterImage] = {}
    for path in images:
        sid = _slide_id(path)
        if wanted is not None and sid not in wanted:
            continue
        slides[sid] = rescale(load_image(path), RescalePolicy(cfg.max_longer_dim))
    return slides


def _split(cfg: PipelineConfig, labels: dict[str, int]) -> tuple[list[str], list[str], dict]:
    """(train ids, test ids, description) for the configured partition."""
    if cfg.partition == 0:
        ids = sorted(labels)
        return ids, ids, {"partition": None}
    parts = make_partitions(labels, cfg.n_partitions, cfg.test_fraction, cfg.seed)
    part = parts[cfg.partition - 1]
    desc = {"partition": part.name, "train_slides": part.train_slides, "test_slides": part.test_slides}
    return part.train_slides, part.test_slides, desc


# --- subcommands -----------------------------------------------------------


def cmd_synth(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    _, labels = generate_corpus(args.n_per_class, (args.width, args.height), cfg.seed, args.out)
    log.info("wrote %d synthetic slides to %s", len(labels), args.out)
    _write_run(args.out, "synth", cfg, {"n_per_class": args.n_per_class,
                                        "width": args.width, "height": args.height})
    return 0


def cmd_rescale(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    images, skipped = _list_images(args.in_dir)
    for path in skipped:
        log.warning("skipping non-image %s", path)
    if not images:
        raise UsageError(f"no inputs in {args.in_dir}")
    os.makedirs(args.out, exist_ok=True)
    policy = RescalePolicy(cfg.max_longer_dim)
    failures = 0
    for path in images:
        try:
            img = load_image(path)
        except (OSError, SlideSiftError) as exc:
            log.error("%s: %s", path, exc)
            failures += 1
            continue
        small = rescale(img, policy)
        dest = os.path.join(args.out, _slide_id(path) + ".png")
        save_png(small, dest)
        log.info("%s: %dx%d -> %dx%d", path, img.width, img.height, small.width, small.height)
    _write_run(args.out, "rescale", cfg, {"in_dir": args.in_dir})
    return 1 if failures else 0


def cmd_tile(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    slides = _load_slides(args.in_dir, cfg)
    if not slides:
        raise UsageError(f"no inputs in {args.in_dir}")
    spec = TileGridSpec(cfg.tile_size, cfg.overlap_fraction)
    crit = SiftCriterion.parse(cfg.criterion)
    os.makedirs(args.out, exist_ok=True)
    records = tile_corpus(slides, spec, crit, threads=_threads(cfg))
    per_slide = {}
    for sid in sorted(slides):
        s = summarize(r for r in records if r.slide_id == sid)
        per_slide[sid] = {"generated": s.generated, "retained": s.retained,
                          "retention_ratio": s.retention_ratio}
        log.info("%s: %d/%d tiles retained (%.4f)", sid, s.retained, s.generated, s.retention_ratio)
        if args.export_tiles:
            export_tile_pngs(slides[sid], (r for r in records if r.slide_id == sid),
                             os.path.join(args.out, "tiles"))
    export_manifest(records, os.path.join(args.out, "manifest.csv"))
    total = summarize(records)
    print(f"retention {total.retained}/{total.generated} = {total.retention_ratio:.4f} "
          f"(criterion {crit}, stride {spec.stride})")
    _write_run(args.out, "tile", cfg, {"in_dir": args.in_dir, "stride": spec.stride,
                                       "summary": per_slide,
                                       "retention_ratio": total.retention_ratio})
    return 0


def _records_and_labels(args: argparse.Namespace):
    records = [r for m in args.manifest for r in import_manifest(m)]
    labels = read_labels(args.labels)
    return records, labels


def cmd_train(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    records, labels = _records_and_labels(args)
    in_manifest = {r.slide_id for r in records}
    labels = {s: l for s, l in labels.items() if s in in_manifest}
    train_ids, _, split = _split(cfg, labels)
    sizes = {r.size for r in records}
    if sizes != {cfg.tile_size}:
        if len(sizes) != 1:
            raise UsageError(f"manifests mix tile sizes {sorted(sizes)}")
        cfg.tile_size = sizes.pop()
    slides = _load_slides(args.images, cfg, set(train_ids))
    tiles, ys = gather_tiles(slides, records, labels, train_ids)
    ckpt_dir = os.path.join(args.out, "checkpoints")
    model = build_reference_model(cfg.tile_size, cfg.seed)
    tc = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                     learning_rate=cfg.learning_rate, seed=cfg.seed, checkpoint_dir=ckpt_dir)
    log.info("training on %d tiles from %d slides", len(tiles), len(train_ids))
    history = train(model, tiles, ys, tc)
    listing = [{"epoch": h.epoch, "path": os.path.relpath(h.path, args.out),
                "loss": h.loss, "train_accuracy": h.accuracy} for h in history]
    with open(os.path.join(args.out, "checkpoints.json"), "w", encoding="utf-8") as fh:
        json.dump(listing, fh, indent=2)
        fh.write("\n")
    with open(os.path.join(args.out, "train_log.csv"), "w", encoding="utf-8") as fh:
        fh.write("epoch,loss,train_accuracy\n")
        for h in history:
            fh.write(f"{h.epoch},{h.loss:.8f},{h.accuracy:.6f}\n")
    print(f"{len(history)} checkpoints in {ckpt_dir}")
    _write_run(args.out, "train", cfg, {"tiles": int(len(tiles)), **split})
    return 0


def _checkpoint_paths(spec: Sequence[str]) -> list[str]:
    paths = []
    for item in spec:
        if os.path.isdir(item):
            paths += [os.path.join(item, n) for n in sorted(os.listdir(item)) if n.endswith(".aeye")]
        else:
            paths.append(item)
    if not paths:
        raise UsageError("no checkpoints given")
    return paths


def cmd_eval(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    records, labels = _records_and_labels(args)
    in_manifest = {r.slide_id for r in records}
    labels = {s: l for s, l in labels.items() if s in in_manifest}
    _, test_ids, split = _split(cfg, labels)
    slides = _load_slides(args.images, cfg, set(test_ids))
    report_dir = os.path.join(args.out, "reports")
    os.makedirs(report_dir, exist_ok=True)
    summary = []
    for path in _checkpoint_paths(args.checkpoints):
        model = load_model(path)
        rep = evaluate_model(model, slides, records, labels, test_ids, threads=_threads(cfg))
        name = os.path.splitext(os.path.basename(path))[0]
        with open(os.path.join(report_dir, f"{name}.json"), "w", encoding="utf-8") as fh:
            fh.write(rep.to_json())
        summary.append({"checkpoint": name, "accuracy": rep.accuracy, "margin": rep.margin,
                        "mean_tile_variance": rep.mean_tile_variance})
        print(f"{name}: accuracy={rep.accuracy:.4f} margin={rep.margin:.4f} "
              f"variance={rep.mean_tile_variance:.4f}")
    best = max(summary, key=lambda s: (s["accuracy"], s["margin"]))
    print(f"best: {best['checkpoint']} accuracy={best['accuracy']:.4f} margin={best['margin']:.4f}")
    _write_run(args.out, "eval", cfg, {"reports": summary, "best": best, **split})
    return 0


def cmd_classify(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    model = load_model(args.model)
    spec = TileGridSpec(model.input_size, cfg.overlap_fraction)
    crit = SiftCriterion.parse(cfg.criterion)
    results = []
    for path in args.slides:
        sid = _slide_id(path)
        img = rescale(load_image(path), RescalePolicy(cfg.max_longer_dim))
        records = tile_corpus({sid: img}, spec, crit, threads=_threads(cfg))
        preds = predict_corpus({sid: img}, records, model, threads=_threads(cfg))
        if not preds:
            log.warning("%s: no retained tiles, not classified", sid)
            continue
        res = aggregate_slide(group_by_slide(preds)[sid])
        results.append(asdict(res))
        print(f"{sid}: p={res.mean_probability:.4f} label={res.label_by_mean} "
              f"vote={res.vote_fraction_class1:.4f} tiles={res.tile_count}")
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "classify.json"), "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=2)
        fh.write("\n")
    _write_run(args.out, "classify", cfg, {"model": args.model})
    return 0 if len(results) == len(args.slides) else 1


def cmd_map(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    if not os.path.isfile(args.model):
        raise FileNotFoundError(f"model file not found: {args.model}")
    model = load_model(args.model)
    overlap = 0.92 if args.overlap is None else args.overlap
    spec = TileGridSpec(model.input_size, overlap)
    sid = _slide_id(args.slide)
    img = rescale(load_image(args.slide), RescalePolicy(cfg.max_longer_dim))
    result = map_slide(img, model, spec, SiftCriterion.parse(cfg.criterion), sid,
                       rule=ColorRule(alpha=args.alpha), ground_truth=args.ground_truth,
                       threads=_threads(cfg))
    os.makedirs(args.out, exist_ok=True)
    save_png(result.image, os.path.join(args.out, f"{sid}_map.png"))
    result.write_sidecar(os.path.join(args.out, f"{sid}_map.json"))
    if args.dump_accumulator:
        result.accumulator.dump(os.path.join(args.out, f"{sid}_map.f64"))
    s = result.slide
    print(f"{sid}: p={s.mean_probability:.4f} label={s.label_by_mean} tiles={s.tile_count}")
    cfg.overlap_fraction = overlap
    cfg.tile_size = model.input_size
    _write_run(args.out, "map", cfg, {"slide": args.slide, "model": args.model})
    return 0


# --- parser ----------------------------------------------------------------


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--seed", type=int, help="RNG seed (default: 0)")
    p.add_argument("--threads", type=int,
                   help="thread ceiling; 0 means all available cores (default: 0)")
    p.add_argument("--max-dim", dest="max_longer_dim", type=int,
                   help="longer-side limit for rescaling in px (default: 6000)")


def _tiling(p: argparse.ArgumentParser, overlap_default: str = "0.5") -> None:
    p.add_argument("--size", dest="tile_size", type=int, help="tile side in px (default: 100)")
    p.add_argument("--overlap", dest="overlap_fraction", type=float,
                   help=f"fraction of a tile shared with its neighbour (default: {overlap_default})")
    p.add_argument("--criterion",
                   help="entropy | threshold_gray[:white:black] | unsifted (default: entropy; "
                        "threshold_gray cuts default to 240 and 15)")


def _partitioning(p: argparse.ArgumentParser) -> None:
    p.add_argument("--partition", type=int,
                   help="1-based stratified partition to use; 0 uses every slide (default: 0)")
    p.add_argument("--n-partitions", dest="n_partitions", type=int,
                   help="number of disjoint test sets (default: 3)")
    p.add_argument("--test-fraction", dest="test_fraction", type=float,
                   help="test share of the slides (default: 0.30)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slidesift", description="Entropy-sifted tile classification of large slide images."
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labelled corpus")
    _common(p)
    p.add_argument("--n-per-class", type=int, default=12, help="slides per class (default: 12)")
    p.add_argument("--width", type=int, default=512, help="slide width in px (default: 512)")
    p.add_argument("--height", type=int, default=512, help="slide height in px (default: 512)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("rescale", help="shrink images so the longer side fits --max-dim")
    p.add_argument("in_dir")
    _common(p)
    p.set_defaults(func=cmd_rescale)

    p = sub.add_parser("tile", help="tile and sift slides into manifest.csv")
    p.add_argument("in_dir")
    _common(p)
    _tiling(p)
    p.add_argument("--export-tiles", action="store_true", help="also write retained tile PNGs")
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("train", help="train the reference CNN, one checkpoint per epoch")
    p.add_argument("--manifest", nargs="+", required=True)
    p.add_argument("--images", required=True, help="directory holding <slide_id>.png")
    p.add_argument("--labels", required=True, help="slide_id,label CSV")
    _common(p)
    _partitioning(p)
    p.add_argument("--epochs", type=int, help="training epochs (default: 35)")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="batch size (default: 16)")
    p.add_argument("--lr", dest="learning_rate", type=float, help="Adam learning rate (default: 0.001)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate every checkpoint on the test slides")
    p.add_argument("--checkpoints", nargs="+", required=True, help="checkpoint files or directories")
    p.add_argument("--manifest", nargs="+", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    _common(p)
    _partitioning(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("classify", help="classify whole slides with a model")
    p.add_argument("slides", nargs="+")
    p.add_argument("--model", required=True)
    _common(p)
    _tiling(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("map", help="render a probability map for one slide")
    p.add_argument("slide")
    p.add_argument("--model", required=True)
    _common(p)
    p.add_argument("--overlap", type=float, help="tile overlap for the map (default: 0.92)")
    p.add_argument("--criterion", help="sift criterion (default: entropy)")
    p.add_argument("--alpha", type=float, default=0.45, help="overlay opacity (default: 0.45)")
    p.add_argument("--ground-truth", type=int, choices=(0, 1),
                   help="colour against this class instead of the predicted one")
    p.add_argument("--dump-accumulator", action="store_true",
                   help="also write raw float64 per-pixel means")
    p.set_defaults(func=cmd_map)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"slidesift: error: {exc}", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=_threads(cfg)):
            return args.func(args, cfg)
    except UsageError as exc:
        print(f"slidesift: error: {exc}", file=sys.stderr)
        return 2
    except (SlideSiftError, OSError, ValueError) as exc:
        print(f"slidesift: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
