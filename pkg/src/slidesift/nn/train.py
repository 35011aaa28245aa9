"""Mini-batch training with Adam, flip augmentation and per-epoch checkpoints.

There is deliberately no early stopping: a checkpoint is written after every
epoch and the caller picks an epoch afterwards by evaluating them all.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import ConfigError, DivergenceDetected, EmptyDataset
from .layers import bce_with_logits
from .model import CnnModel, backward, forward_logits, to_batch
from .serialize import save_model

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 35
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    flip_augmentation: bool = True
    seed: int = 0
    checkpoint_dir: Optional[str] = None

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("Adam needs 0 <= beta1, beta2 < 1 and eps > 0")


@dataclass(frozen=True)
class Checkpoint:
    epoch: int
    path: Optional[str]
    loss: float
    accuracy: float


class Adam:
    def __init__(self, weights, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [tuple(np.zeros_like(a) for a in w) for w in weights]
        self.v = [tuple(np.zeros_like(a) for a in w) for w in weights]
        self.t = 0

    def step(self, weights, grads) -> None:
        """Update ``weights`` in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for params, g_layer, m_layer, v_layer in zip(weights, grads, self.m, self.v):
            for p, g, m, v in zip(params, g_layer, m_layer, v_layer):
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * (g * g)
                p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def flip_tiles(tiles: np.ndarray, hflip: np.ndarray, vflip: np.ndarray) -> np.ndarray:
    """Flip NHWC tiles per sample; returns a new array."""
    out = np.array(tiles, copy=True)
    out[hflip] = out[hflip][:, :, ::-1]
    out[vflip] = out[vflip][:, ::-1]
    return out


def checkpoint_path(directory: str, epoch: int) -> str:
    return os.path.join(directory, f"epoch_{epoch:03d}.aeye")


def train(
    model: CnnModel,
    tiles: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
) -> list[Checkpoint]:
    """Train ``model`` in place on uint8 NHWC ``tiles`` with 0/1 ``labels``.

    Every epoch reshuffles the tiles and draws an independent 50% horizontal
    and 50% vertical flip for each tile, all from one generator seeded by
    ``cfg.seed``.  Returns one :class:`Checkpoint` per epoch.
    """
    cfg.validate()
    tiles = np.asarray(tiles)
    labels = np.asarray(labels, dtype=np.float64)
    if len(tiles) == 0:
        raise EmptyDataset("no training tiles")
    if len(tiles) != len(labels):
        raise ValueError("tiles and labels differ in length")
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    if cfg.checkpoint_dir:
        os.makedirs(cfg.checkpoint_dir, exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.weights, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    n = len(tiles)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        if cfg.flip_augmentation:
            hflip = rng.random(n) < 0.5
            vflip = rng.random(n) < 0.5
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch_tiles = tiles[idx]
            if cfg.flip_augmentation:
                batch_tiles = flip_tiles(batch_tiles, hflip[idx], vflip[idx])
            x = to_batch(batch_tiles, model.dtype)
            y = labels[idx]
            logits, caches = forward_logits(model, x, training=True, rng=rng, keep_cache=True)
            loss, dlogits = bce_with_logits(logits, y)
            if not math.isfinite(loss):
                raise DivergenceDetected(
                    f"non-finite loss {loss} at epoch {epoch}, batch starting at {start}"
                )
            grads = backward(model, caches, dlogits)
            opt.step(model.weights, grads)
            loss_sum += loss * len(idx)
            correct += int(((logits >= 0) == (y >= 0.5)).sum())
        mean_loss = loss_sum / n
        acc = correct / n
        path = None
        if cfg.checkpoint_dir:
            path = checkpoint_path(cfg.checkpoint_dir, epoch)
            save_model(model, path)
        log.info("epoch %d/%d loss=%.5f acc=%.4f", epoch, cfg.epochs, mean_loss, acc)
        history.append(Checkpoint(epoch, path, mean_loss, acc))
    return history
