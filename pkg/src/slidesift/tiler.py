"""Overlapping tile grids and tile sifting.

A rescaled slide is cut into square tiles on a regular grid whose stride is
set by the overlap fraction.  When the regular grid stops short of the right
or bottom edge an extra column/row anchored at the edge is added, so every
pixel is covered at least once.

Each tile is then sifted by one of three criteria:

* ``entropy``        keep tiles whose entropy is >= the whole-image entropy
* ``threshold_gray`` drop tiles where more than half the gray samples are
                     near-white (> white_cut) or near-black (< black_cut)
* ``unsifted``       keep everything
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .entropy import samples_entropy
from .errors import OutOfBounds, TileLargerThanImage
from .raster import RasterImage, gray_array, save_png

MANIFEST_HEADER = (
    "slide_id",
    "x",
    "y",
    "size",
    "entropy_bits",
    "frac_white",
    "frac_black",
    "retained",
    "criterion",
)

ENTROPY = "entropy"
THRESHOLD_GRAY = "threshold_gray"
UNSIFTED = "unsifted"
_KINDS = (ENTROPY, THRESHOLD_GRAY, UNSIFTED)


@dataclass(frozen=True)
class TileGridSpec:
    tile_size: int
    overlap_fraction: float = 0.0
    anchor_policy: str = "cover-edges"

    def __post_init__(self) -> None:
        if self.tile_size < 8:
            raise ValueError("tile_size must be >= 8")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValueError("overlap_fraction must lie in [0, 1)")
        if self.anchor_policy != "cover-edges":
            raise ValueError(f"unknown anchor policy {self.anchor_policy!r}")

    @property
    def stride(self) -> int:
        # Exact decimal arithmetic: 550 * (1 - 0.92) must give 44, not 43.99...
        step = self.tile_size * (1 - Fraction(str(self.overlap_fraction)))
        rounded = int(step + Fraction(1, 2))  # round half up, step >= 0
        return max(1, rounded)


@dataclass(frozen=True)
class SiftCriterion:
    kind: str = ENTROPY
    white_cut: int = 240
    black_cut: int = 15

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown sift criterion {self.kind!r}")
        if not 0 <= self.black_cut < self.white_cut <= 255:
            raise ValueError("need 0 <= black_cut < white_cut <= 255")

    @classmethod
    def parse(cls, text: str) -> "SiftCriterion":
        """Parse ``entropy``, ``unsifted``, ``threshold_gray`` or
        ``threshold_gray:<white>:<black>``."""
        name, *cuts = text.strip().lower().replace("-", "_").split(":")
        if name == "thresholdgray":
            name = THRESHOLD_GRAY
        if cuts:
            if name != THRESHOLD_GRAY or len(cuts) != 2:
                raise ValueError(f"malformed criterion {text!r}")
            return cls(name, int(cuts[0]), int(cuts[1]))
        return cls(name)

    def __str__(self) -> str:
        if self.kind == THRESHOLD_GRAY and (self.white_cut, self.black_cut) != (240, 15):
            return f"{THRESHOLD_GRAY}:{self.white_cut}:{self.black_cut}"
        return self.kind


@dataclass(frozen=True)
class TileRecord:
    slide_id: str
    x: int
    y: int
    size: int
    entropy_bits: float
    frac_white: float
    frac_black: float
    retained: bool
    criterion: SiftCriterion = field(default_factory=SiftCriterion)


@dataclass(frozen=True)
class TileSetSummary:
    generated: int
    retained: int

    @property
    def retention_ratio(self) -> float:
        return self.retained / self.generated if self.generated else 0.0


def _axis_origins(extent: int, tile: int, stride: int) -> list[int]:
    last = extent - tile
    origins = list(range(0, last + 1, stride))
    if origins[-1] != last:
        origins.append(last)
    return origins


def grid_origins(image_w: int, image_h: int, spec: TileGridSpec) -> list[tuple[int, int]]:
    """Top-left tile origins in row-major order (sorted by y, then x)."""
    t = spec.tile_size
    if image_w < t or image_h < t:
        raise TileLargerThanImage(f"tile {t}px does not fit a {image_w}x{image_h} image")
    xs = _axis_origins(image_w, t, spec.stride)
    ys = _axis_origins(image_h, t, spec.stride)
    return [(x, y) for y in ys for x in xs]


def _measure_gray(
    gray: np.ndarray, x: int, y: int, size: int, white_cut: int, black_cut: int
) -> tuple[float, float, float]:
    h, w = gray.shape
    if x < 0 or y < 0 or size < 1 or x + size > w or y + size > h:
        raise OutOfBounds(f"tile ({x}, {y}, {size}) exceeds {w}x{h} image")
    crop = gray[y : y + size, x : x + size]
    n = crop.size
    return (
        samples_entropy(crop),
        int(np.count_nonzero(crop > white_cut)) / n,
        int(np.count_nonzero(crop < black_cut)) / n,
    )


def measure_tile(
    img: RasterImage,
    x: int,
    y: int,
    size: int,
    white_cut: int = 240,
    black_cut: int = 15,
) -> tuple[float, float, float]:
    """Return (entropy_bits, frac_white, frac_black) for one tile."""
    if x < 0 or y < 0 or x + size > img.width or y + size > img.height:
        raise OutOfBounds(f"tile ({x}, {y}, {size}) exceeds {img.width}x{img.height} image")
    crop = RasterImage(img.crop(x, y, size))
    return _measure_gray(gray_array(crop), 0, 0, size, white_cut, black_cut)


def sift(
    measurements: tuple[float, float, float],
    criterion: SiftCriterion,
    whole_image_entropy: float,
) -> bool:
    entropy_bits, frac_white, frac_black = measurements
    if criterion.kind == ENTROPY:
        return entropy_bits >= whole_image_entropy
    if criterion.kind == THRESHOLD_GRAY:
        return frac_white <= 0.5 and frac_black <= 0.5
    return True


def _quantize_entropy(value: float) -> float:
    # Records carry entropy at manifest precision so export/import is lossless.
    return float(f"{value:.6f}")


def tile_slide(
    img: RasterImage,
    spec: TileGridSpec,
    criterion: SiftCriterion,
    slide_id: str,
    threads: int = 1,
    whole_image_entropy: float | None = None,
) -> tuple[list[TileRecord], TileSetSummary]:
    gray = gray_array(img)
    if whole_image_entropy is None:
        whole_image_entropy = samples_entropy(gray)
    origins = grid_origins(img.width, img.height, spec)
    t = spec.tile_size

    def run(origin: tuple[int, int]) -> TileRecord:
        x, y = origin
        m = _measure_gray(gray, x, y, t, criterion.white_cut, criterion.black_cut)
        return TileRecord(
            slide_id=slide_id,
            x=x,
            y=y,
            size=t,
            entropy_bits=_quantize_entropy(m[0]),
            frac_white=m[1],
            frac_black=m[2],
            retained=sift(m, criterion, whole_image_entropy),
            criterion=criterion,
        )

    if threads > 1 and len(origins) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(run, origins))
    else:
        records = [run(o) for o in origins]
    kept = sum(r.retained for r in records)
    return records, TileSetSummary(generated=len(records), retained=kept)


def summarize(records: Iterable[TileRecord]) -> TileSetSummary:
    records = list(records)
    return TileSetSummary(len(records), sum(r.retained for r in records))


def _sort_key(r: TileRecord) -> tuple[str, int, int]:
    return (r.slide_id, r.y, r.x)


def manifest_text(records: Sequence[TileRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for r in sorted(records, key=_sort_key):
        writer.writerow(
            [
                r.slide_id,
                r.x,
                r.y,
                r.size,
                f"{r.entropy_bits:.6f}",
                repr(float(r.frac_white)),
                repr(float(r.frac_black)),
                1 if r.retained else 0,
                str(r.criterion),
            ]
        )
    return buf.getvalue()


def export_manifest(records: Sequence[TileRecord], path: str | os.PathLike[str]) -> None:
    """Write records as a CSV manifest sorted by (slide_id, y, x)."""
    if not records:
        raise ValueError("refusing to write an empty manifest")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(manifest_text(records))


def parse_manifest(text: str) -> list[TileRecord]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if tuple(header or ()) != MANIFEST_HEADER:
        raise ValueError(f"unexpected manifest header: {header}")
    records = []
    for row in reader:
        if not row:
            continue
        sid, x, y, size, ent, fw, fb, kept, crit = row
        if kept not in ("0", "1"):
            raise ValueError(f"bad retained flag {kept!r}")
        records.append(
            TileRecord(
                slide_id=sid,
                x=int(x),
                y=int(y),
                size=int(size),
                entropy_bits=float(ent),
                frac_white=float(fw),
                frac_black=float(fb),
                retained=kept == "1",
                criterion=SiftCriterion.parse(crit),
            )
        )
    return records


def import_manifest(path: str | os.PathLike[str]) -> list[TileRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_manifest(fh.read())


def export_tile_pngs(
    img: RasterImage,
    records: Iterable[TileRecord],
    out_dir: str | os.PathLike[str],
    retained_only: bool = True,
) -> list[str]:
    """Save tile crops as ``{slide_id}_{x}_{y}_{size}.png``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for r in records:
        if retained_only and not r.retained:
            continue
        path = os.path.join(out_dir, f"{r.slide_id}_{r.x}_{r.y}_{r.size}.png")
        save_png(RasterImage(img.crop(r.x, r.y, r.size)), path)
        paths.append(path)
    return paths
