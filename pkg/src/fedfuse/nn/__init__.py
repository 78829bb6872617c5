"""From-scratch CNN: layers, model, Adam, and the local training loop."""

from .model import CnnConfig, CnnModel, ModelWeights
from .optim import Adam, AdamConfig
from .train import TrainStats, evaluate, train_local

__all__ = [
    "CnnConfig",
    "CnnModel",
    "ModelWeights",
    "Adam",
    "AdamConfig",
    "TrainStats",
    "evaluate",
    "train_local",
]
