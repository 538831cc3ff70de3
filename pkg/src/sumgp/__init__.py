"""Multitask GP regression with linear and nonlinear sum constraints."""

from .constraints import ConstraintSpec, condition_constant_kronecker, condition_gaussian
from .errors import IngestError, InputError, NumericError, SumGPError, TrainingError
from .gaussian import GaussianDist, Hyperparameters, MultitaskGrid, TaskedDataset
from .model import FittedGP, ModelSpec
from .training import TrainConfig, train
from .transforms import TaskTransform, TransformSpec

__all__ = [
    "ConstraintSpec", "condition_constant_kronecker", "condition_gaussian",
    "IngestError", "InputError", "NumericError", "SumGPError", "TrainingError",
    "GaussianDist", "Hyperparameters", "MultitaskGrid", "TaskedDataset",
    "FittedGP", "ModelSpec", "TrainConfig", "train",
    "TaskTransform", "TransformSpec",
]
