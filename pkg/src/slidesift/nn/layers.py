"""Layer descriptions and their forward/backward kernels.

Tensors are NCHW.  Convolutions are 3x3, stride 1, zero "same" padding and
are evaluated as an im2col matrix product.  Max pooling is 2x2/stride 2 with
floor semantics: a trailing odd row or column is dropped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class Conv:
    in_ch: int
    out_ch: int
    kernel: int = 3

    def __post_init__(self) -> None:
        if self.kernel != 3:
            raise ValueError("only 3x3 convolutions are supported")


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    size: int = 2

    def __post_init__(self) -> None:
        if self.size != 2:
            raise ValueError("only 2x2 pooling is supported")


@dataclass(frozen=True)
class Dropout:
    rate: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Sigmoid:
    pass


LayerSpec = Union[Conv, ReLU, MaxPool, Dropout, Flatten, Dense, Sigmoid]

LAYER_TYPES = {
    "conv": Conv,
    "relu": ReLU,
    "maxpool": MaxPool,
    "dropout": Dropout,
    "flatten": Flatten,
    "dense": Dense,
    "sigmoid": Sigmoid,
}
_TYPE_NAMES = {cls: name for name, cls in LAYER_TYPES.items()}


def layer_to_dict(layer: LayerSpec) -> dict:
    d = {"type": _TYPE_NAMES[type(layer)]}
    d.update(layer.__dict__)
    return d


def layer_from_dict(d: dict) -> LayerSpec:
    d = dict(d)
    cls = LAYER_TYPES[d.pop("type")]
    return cls(**d)


# --- convolution -----------------------------------------------------------


def _im2col(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # n, c, h, w, 3, 3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, _, h, wd = x.shape
    o = w.shape[0]
    cols = _im2col(x)
    out = cols @ w.reshape(o, -1).T
    out += b
    return out.reshape(n, h, wd, o).transpose(0, 3, 1, 2), cols


def conv_backward(
    dout: np.ndarray, cols: np.ndarray, w: np.ndarray, need_dx: bool = True
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    o = w.shape[0]
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (dmat.T @ cols).reshape(w.shape)
    db = dmat.sum(axis=0)
    dx = None
    if need_dx:
        # Gradient of a same-padded 3x3 correlation is a same-padded
        # correlation with the kernel rotated 180 degrees and channels swapped.
        w_rot = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx, _ = conv_forward(dout, w_rot, np.zeros(w_rot.shape[0], dtype=dout.dtype))
    return dx, dw, db


# --- pooling ---------------------------------------------------------------


def _pool_blocks(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    blocks = x[:, :, : h2 * 2, : w2 * 2].reshape(n, c, h2, 2, w2, 2)
    return blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)


def maxpool_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    blocks = _pool_blocks(x)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(dout: np.ndarray, idx: np.ndarray, in_shape: tuple) -> np.ndarray:
    n, c, h, w = in_shape
    h2, w2 = dout.shape[2], dout.shape[3]
    g = np.zeros((n, c, h2, w2, 4), dtype=dout.dtype)
    np.put_along_axis(g, idx[..., None], dout[..., None], axis=-1)
    g = g.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * 2, w2 * 2)
    if (h2 * 2, w2 * 2) == (h, w):
        return g
    dx = np.zeros(in_shape, dtype=dout.dtype)
    dx[:, :, : h2 * 2, : w2 * 2] = g
    return dx


# --- activations -----------------------------------------------------------


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function."""
    z = np.asarray(z)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(z: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy of sigmoid(z) against y, and dLoss/dz."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    losses = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    grad = (sigmoid(z) - y) / z.size
    return float(losses.mean()), grad


def bce(p: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy on probabilities."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(-(y * np.log(p) + (1 - y) * np.log1p(-p)).mean())
