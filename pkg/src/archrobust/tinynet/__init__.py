"""Small double-precision network engine for cell architectures."""

from ._alloc import keep_freed_memory
from .data import SHAPES, SynthDataset, synth_dataset
from .network import Network, NetworkConfig, build_network, forward, loss_and_grads, predict_confidences
from .training import TrainingDiverged, accuracy, augment_batch, train

keep_freed_memory()

__all__ = [
    "keep_freed_memory",
    "SHAPES",
    "SynthDataset",
    "synth_dataset",
    "Network",
    "NetworkConfig",
    "build_network",
    "forward",
    "loss_and_grads",
    "predict_confidences",
    "TrainingDiverged",
    "accuracy",
    "augment_batch",
    "train",
]
