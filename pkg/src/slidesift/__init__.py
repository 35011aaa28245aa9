"""Entropy-sifted tile classification of large slide images.

Pipeline: rescale -> tile -> sift -> train/classify a small CNN ->
aggregate tiles per slide -> render per-pixel probability maps.
"""

__version__ = "0.1.0"
