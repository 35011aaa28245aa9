"""Small NumPy convolutional network: layers, training and model files."""

from .layers import Conv, Dense, Dropout, Flatten, MaxPool, ReLU, Sigmoid, bce, bce_with_logits
from .model import (
    CnnModel,
    backward,
    build_model,
    build_reference_model,
    count_params_flops,
    forward,
    forward_logits,
    output_shapes,
    predict_tiles,
    to_batch,
)
from .serialize import load_model, model_bytes, save_model
from .train import Adam, Checkpoint, TrainConfig, train

__all__ = [
    "Adam",
    "Checkpoint",
    "CnnModel",
    "Conv",
    "Dense",
    "Dropout",
    "Flatten",
    "MaxPool",
    "ReLU",
    "Sigmoid",
    "TrainConfig",
    "backward",
    "bce",
    "bce_with_logits",
    "build_model",
    "build_reference_model",
    "count_params_flops",
    "forward",
    "forward_logits",
    "load_model",
    "model_bytes",
    "output_shapes",
    "predict_tiles",
    "save_model",
    "to_batch",
    "train",
]
