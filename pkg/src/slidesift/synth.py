"""Deterministic synthetic slides for desk-scale runs and tests.

Class 0 ("synA") tissue is a blobby, low-frequency pink texture; class 1
("synB") is a fine, oriented purple stripe pattern.  Tissue occupies a
smooth random region covering ``tissue_fraction`` of the slide; the rest is
near-white background (gray > 240) with slight noise, so both sifting
criteria have something to discard.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .evaluation import write_labels
from .raster import RasterImage, save_png

# (light, dark) RGB endpoints per class
_PALETTE = {
    0: ((232, 164, 204), (150, 62, 122)),
    1: ((205, 165, 228), (92, 52, 142)),
}
_BACKGROUND = np.array([247.0, 245.0, 247.0])
_STRIPE_PERIOD = 7.0
_BLOB_SIGMA = 4.0


@dataclass(frozen=True)
class SynthSpec:
    width: int
    height: int
    class_label: int
    tissue_fraction: float = 0.6
    seed: int = 0

    def __post_init__(self) -> None:
        if self.width < 128 or self.height < 128:
            raise ValueError("synthetic slides must be at least 128x128")
        if self.class_label not in (0, 1):
            raise ValueError("class_label must be 0 or 1")
        if not 0.0 < self.tissue_fraction <= 1.0:
            raise ValueError("tissue_fraction must lie in (0, 1]")


def _smooth_field(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    gh, gw = max(2, h // cell + 2), max(2, w // cell + 2)
    coarse = rng.standard_normal((gh, gw))
    fine = ndimage.zoom(coarse, (h / gh, w / gw), order=3, grid_mode=True, mode="nearest")
    return fine[:h, :w]


def _tissue_mask(rng: np.random.Generator, spec: SynthSpec) -> np.ndarray:
    if spec.tissue_fraction >= 1.0:
        return np.ones((spec.height, spec.width), dtype=bool)
    field = _smooth_field(rng, spec.height, spec.width, cell=max(32, min(spec.height, spec.width) // 4))
    # Rank-based cut gives the requested area exactly, up to ties.
    cut = np.quantile(field, 1.0 - spec.tissue_fraction)
    return field > cut


def _texture(rng: np.random.Generator, spec: SynthSpec) -> np.ndarray:
    h, w = spec.height, spec.width
    if spec.class_label == 0:
        z = ndimage.gaussian_filter(rng.standard_normal((h, w)), _BLOB_SIGMA)
        v = 0.5 + 0.5 * z / (3.0 * z.std())
    else:
        theta = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        # slow warp keeps stripes from looking perfectly periodic
        warp = 3.0 * _smooth_field(rng, h, w, cell=64)
        t = (xx * np.cos(theta) + yy * np.sin(theta) + warp) / _STRIPE_PERIOD
        v = 0.5 + 0.45 * np.sin(2 * np.pi * t + phase)
    return np.clip(v, 0.0, 1.0)


def generate_slide(spec: SynthSpec) -> RasterImage:
    rng = np.random.default_rng([spec.seed, spec.class_label, spec.width, spec.height])
    mask = _tissue_mask(rng, spec)
    v = _texture(rng, spec)[:, :, None]
    light, dark = (np.array(c, dtype=np.float64) for c in _PALETTE[spec.class_label])
    tissue = light + (dark - light) * v
    tissue += rng.normal(0.0, 8.0, size=tissue.shape)
    background = _BACKGROUND + rng.normal(0.0, 2.0, size=tissue.shape)
    rgb = np.where(mask[:, :, None], tissue, background)
    return RasterImage(np.clip(np.rint(rgb), 0, 255).astype(np.uint8))


def slide_id_for(label: int, index: int) -> str:
    return f"{'synA' if label == 0 else 'synB'}-{index:03d}"


def generate_corpus(
    n_per_class: int,
    dims: tuple[int, int] = (512, 512),
    seed: int = 0,
    out_dir: str | os.PathLike[str] | None = None,
    tissue_range: tuple[float, float] = (0.5, 0.9),
) -> tuple[dict[str, RasterImage], dict[str, int]]:
    """Generate ``n_per_class`` slides of each class.

    Returns ``(images, labels)`` keyed by slide id.  With ``out_dir`` the
    slides are also written as ``<slide_id>.png`` next to ``labels.csv``.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    width, height = dims
    rng = np.random.default_rng(seed)
    images: dict[str, RasterImage] = {}
    labels: dict[str, int] = {}
    for label in (0, 1):
        for i in range(1, n_per_class + 1):
            frac = float(rng.uniform(*tissue_range))
            slide_seed = int(rng.integers(0, 2**31 - 1))
            sid = slide_id_for(label, i)
            images[sid] = generate_slide(SynthSpec(width, height, label, frac, slide_seed))
            labels[sid] = label
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for sid, img in images.items():
            save_png(img, os.path.join(out_dir, f"{sid}.png"))
        write_labels(labels, os.path.join(out_dir, "labels.csv"))
    return images, labels
