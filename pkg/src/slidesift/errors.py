"""Exception hierarchy shared by all slidesift modules."""


class SlideSiftError(Exception):
    """Base class for every error raised deliberately by this package."""


# raster
class DecodeError(SlideSiftError, ValueError):
    pass


# entropy
class EmptyImage(SlideSiftError, ValueError):
    pass


class ChannelMismatch(SlideSiftError, ValueError):
    pass


class EmptyHistogram(SlideSiftError, ValueError):
    pass


# tiler / probmap
class TileLargerThanImage(SlideSiftError, ValueError):
    pass


class OutOfBounds(SlideSiftError, ValueError):
    pass


class DimensionMismatch(SlideSiftError, ValueError):
    pass


class NoRetainedTiles(SlideSiftError, RuntimeError):
    pass


# nn
class UnsupportedTileSize(SlideSiftError, ValueError):
    pass


class ShapeMismatch(SlideSiftError, ValueError):
    pass


class EmptyDataset(SlideSiftError, ValueError):
    pass


class DivergenceDetected(SlideSiftError, RuntimeError):
    pass


class FormatError(SlideSiftError, ValueError):
    pass


class VersionError(SlideSiftError, ValueError):
    pass


# evaluation
class EmptyPredictionSet(SlideSiftError, ValueError):
    pass


class MissingGroundTruth(SlideSiftError, KeyError):
    pass


class InsufficientSlides(SlideSiftError, ValueError):
    pass


# cli / config
class ConfigError(SlideSiftError, ValueError):
    pass
