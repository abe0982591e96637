"""Dimension-independent graph U-net with hand-written backpropagation."""

from .layers import (
    DegenerateProjectionError,
    ShapeError,
    clone_cluster_unpool,
    gcn_layer_forward,
    kmax_pool,
)
from .model import CorruptModelError, Descriptor, GraphSignal, GUNetModel, gunet_forward, load_model, save_model
from .train import TrainConfig, TrainingData, TrainingError, predict, train

__all__ = [
    "CorruptModelError", "DegenerateProjectionError", "Descriptor", "GraphSignal", "GUNetModel",
    "ShapeError", "TrainConfig", "TrainingData", "TrainingError", "clone_cluster_unpool",
    "gcn_layer_forward", "gunet_forward", "kmax_pool", "load_model", "predict", "save_model", "train",
]
