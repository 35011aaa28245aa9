"""CnnModel container, reference architecture, inference and backprop.

The reference stack is four 3x3 conv blocks (16, 32, 48, 64 filters), each
followed by ReLU and 2x2 max pooling, with dropout after the last three
blocks, then a 48-unit dense layer and a single sigmoid output::

    Conv(3->16)  ReLU MaxPool
    Conv(16->32) ReLU MaxPool Dropout(0.25)
    Conv(32->48) ReLU MaxPool Dropout(0.25)
    Conv(48->64) ReLU MaxPool Dropout(0.25)
    Flatten Dense(->48) ReLU Dense(48->1) Sigmoid

FLOP accounting (batch of one, forward only):

* conv:    2 * H * W * out * in * 9   (one multiply-add = 2 FLOPs) + H*W*out bias adds
* dense:   2 * in * out + out
* ReLU:    1 per element
* maxpool: 3 comparisons per output element
* sigmoid: 4 per element
* dropout and flatten are free at inference time
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ShapeMismatch, UnsupportedTileSize
from .layers import (
    Conv,
    Dense,
    Dropout,
    Flatten,
    LayerSpec,
    MaxPool,
    ReLU,
    Sigmoid,
    conv_backward,
    conv_forward,
    maxpool_backward,
    maxpool_forward,
    sigmoid,
)

FORMAT_VERSION = 1
# Keeps probabilities strictly inside (0, 1) even when the logit saturates.
_PROB_EPS = 1e-12


@dataclass
class CnnModel:
    input_size: int
    layers: list[LayerSpec]
    weights: list[tuple[np.ndarray, ...]]
    rng_seed: int = 0
    in_channels: int = 3
    version: int = FORMAT_VERSION

    @property
    def dtype(self) -> np.dtype:
        for w in self.weights:
            if w:
                return w[0].dtype
        return np.dtype(np.float32)

    def astype(self, dtype) -> "CnnModel":
        clone = copy.deepcopy(self)
        clone.weights = [tuple(a.astype(dtype) for a in w) for w in self.weights]
        return clone

    def copy(self) -> "CnnModel":
        return copy.deepcopy(self)


def output_shapes(layers: Sequence[LayerSpec], in_channels: int, input_size: int) -> list[tuple]:
    """Per-layer output shapes (without the batch axis); raises on mismatch."""
    shape: tuple = (in_channels, input_size, input_size)
    shapes = []
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv):
            if len(shape) != 3 or shape[0] != layer.in_ch:
                raise ShapeMismatch(f"layer {i}: conv expects {layer.in_ch} channels, got {shape}")
            shape = (layer.out_ch, shape[1], shape[2])
        elif isinstance(layer, MaxPool):
            if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                raise ShapeMismatch(f"layer {i}: cannot pool shape {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, Dense):
            if len(shape) != 1 or shape[0] != layer.in_features:
                raise ShapeMismatch(
                    f"layer {i}: dense expects {layer.in_features} inputs, got {shape}"
                )
            shape = (layer.out_features,)
        shapes.append(shape)
    return shapes


def _he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def init_weights(layers: Sequence[LayerSpec], seed: int) -> list[tuple[np.ndarray, ...]]:
    rng = np.random.default_rng(seed)
    weights: list[tuple[np.ndarray, ...]] = []
    for layer in layers:
        if isinstance(layer, Conv):
            w = _he_uniform(rng, (layer.out_ch, layer.in_ch, 3, 3), layer.in_ch * 9)
            weights.append((w, np.zeros(layer.out_ch, dtype=np.float32)))
        elif isinstance(layer, Dense):
            w = _he_uniform(rng, (layer.out_features, layer.in_features), layer.in_features)
            weights.append((w, np.zeros(layer.out_features, dtype=np.float32)))
        else:
            weights.append(())
    return weights


def build_model(
    layers: Sequence[LayerSpec], input_size: int, seed: int = 0, in_channels: int = 3
) -> CnnModel:
    layers = list(layers)
    output_shapes(layers, in_channels, input_size)
    if not layers or not isinstance(layers[-1], Sigmoid):
        raise ShapeMismatch("model must end in a Sigmoid layer")
    return CnnModel(
        input_size=input_size,
        layers=layers,
        weights=init_weights(layers, seed),
        rng_seed=seed,
        in_channels=in_channels,
    )


def reference_layers(tile_size: int) -> list[LayerSpec]:
    layers: list[LayerSpec] = []
    chans = [3, 16, 32, 48, 64]
    for i in range(4):
        layers += [Conv(chans[i], chans[i + 1]), ReLU(), MaxPool()]
        if i > 0:
            layers.append(Dropout(0.25))
    side = tile_size
    for _ in range(4):
        side //= 2
    layers += [Flatten(), Dense(side * side * 64, 48), ReLU(), Dense(48, 1), Sigmoid()]
    return layers


def supported_tile_size(tile_size: int) -> bool:
    if 100 <= tile_size <= 650 and tile_size % 50 == 0:
        return True
    return tile_size >= 32 and tile_size % 16 == 0


def build_reference_model(tile_size: int, seed: int = 0) -> CnnModel:
    if not supported_tile_size(tile_size):
        raise UnsupportedTileSize(
            f"tile size {tile_size} unsupported: use 100..650 in steps of 50 "
            "or a multiple of 16 that is >= 32"
        )
    return build_model(reference_layers(tile_size), tile_size, seed)


# --- forward / backward ----------------------------------------------------


def _check_batch(model: CnnModel, batch: np.ndarray) -> None:
    expected = (model.in_channels, model.input_size, model.input_size)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise ShapeMismatch(f"batch shape {batch.shape} does not match (N, *{expected})")


def forward_logits(
    model: CnnModel,
    batch: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
    keep_cache: bool = False,
) -> tuple[np.ndarray, list]:
    """Run every layer but the final Sigmoid; return (logits, caches)."""
    batch = np.asarray(batch)
    _check_batch(model, batch)
    x = batch.astype(model.dtype, copy=False)
    caches: list = []
    for layer, params in zip(model.layers[:-1], model.weights[:-1]):
        cache = None
        if isinstance(layer, Conv):
            x, cols = conv_forward(x, params[0], params[1])
            cache = cols if keep_cache else None
        elif isinstance(layer, ReLU):
            mask = x > 0
            x = x * mask
            cache = mask
        elif isinstance(layer, MaxPool):
            in_shape = x.shape
            x, idx = maxpool_forward(x)
            cache = (idx, in_shape)
        elif isinstance(layer, Dropout):
            if training and layer.rate > 0:
                if rng is None:
                    raise ValueError("training-mode dropout needs an rng")
                keep = rng.random(x.shape) >= layer.rate
                scale = keep.astype(x.dtype) / x.dtype.type(1.0 - layer.rate)
                x = x * scale
                cache = scale
        elif isinstance(layer, Flatten):
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Dense):
            cache = x if keep_cache else None
            x = x @ params[0].T + params[1]
        if keep_cache:
            caches.append(cache)
    return x[:, 0], caches


def backward(model: CnnModel, caches: list, dlogits: np.ndarray) -> list[tuple[np.ndarray, ...]]:
    """Gradients for every layer's parameters given dLoss/dlogit."""
    grads: list[tuple[np.ndarray, ...]] = [() for _ in model.layers]
    g = np.asarray(dlogits, dtype=model.dtype)[:, None]
    n_body = len(model.layers) - 1
    for i in range(n_body - 1, -1, -1):
        layer, params, cache = model.layers[i], model.weights[i], caches[i]
        first = i == 0
        if isinstance(layer, Dense):
            grads[i] = (g.T @ cache, g.sum(axis=0))
            g = None if first else g @ params[0]
        elif isinstance(layer, Conv):
            g, dw, db = conv_backward(g, cache, params[0], need_dx=not first)
            grads[i] = (dw, db)
        elif isinstance(layer, ReLU):
            g = g * cache
        elif isinstance(layer, MaxPool):
            g = maxpool_backward(g, cache[0], cache[1])
        elif isinstance(layer, Dropout):
            if cache is not None:
                g = g * cache
        elif isinstance(layer, Flatten):
            g = g.reshape(cache)
        if g is None:
            break
    return grads


def forward(
    model: CnnModel,
    batch: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Per-sample probabilities (float64) for an NCHW batch scaled to [0, 1]."""
    logits, _ = forward_logits(model, batch, training=training, rng=rng)
    p = sigmoid(logits.astype(np.float64))
    return np.clip(p, _PROB_EPS, 1.0 - _PROB_EPS)


def predict_tiles(model: CnnModel, tiles: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Probabilities for uint8 NHWC tiles, scaling by 1/255 on the fly."""
    out = np.empty(len(tiles), dtype=np.float64)
    for start in range(0, len(tiles), batch_size):
        out[start : start + batch_size] = forward(
            model, to_batch(tiles[start : start + batch_size], model.dtype)
        )
    return out


def to_batch(tiles: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 (N, H, W, C) tiles -> (N, C, H, W) values in [0, 1]."""
    batch = np.asarray(tiles).transpose(0, 3, 1, 2).astype(dtype)
    batch /= 255
    return batch


# --- accounting ------------------------------------------------------------


def count_params_flops(model: CnnModel) -> tuple[int, int]:
    shapes = output_shapes(model.layers, model.in_channels, model.input_size)
    params = 0
    flops = 0
    prev: tuple = (model.in_channels, model.input_size, model.input_size)
    for layer, shape in zip(model.layers, shapes):
        if isinstance(layer, Conv):
            params += layer.out_ch * layer.in_ch * 9 + layer.out_ch
            hw = shape[1] * shape[2]
            flops += 2 * hw * layer.out_ch * layer.in_ch * 9 + hw * layer.out_ch
        elif isinstance(layer, Dense):
            params += layer.out_features * layer.in_features + layer.out_features
            flops += 2 * layer.in_features * layer.out_features + layer.out_features
        elif isinstance(layer, ReLU):
            flops += int(np.prod(shape))
        elif isinstance(layer, MaxPool):
            flops += 3 * int(np.prod(shape))
        elif isinstance(layer, Sigmoid):
            flops += 4 * int(np.prod(prev))
        prev = shape
    return params, flops
