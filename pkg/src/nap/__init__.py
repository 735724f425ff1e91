"""Transformer acquisition processes for meta-Bayesian optimisation on finite task sets."""
from .architecture import ModelConfig, ModelParams, forward, init_params
from .tasks import TaskDataset, synthetic_family
from .trainer import TrainConfig, train

__all__ = ["ModelConfig", "ModelParams", "TaskDataset", "TrainConfig", "forward", "init_params",
           "synthetic_family", "train"]
__version__ = "0.1.0"
