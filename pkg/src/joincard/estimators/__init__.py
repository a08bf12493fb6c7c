"""Conditional-distribution backends for joined relations."""

from .base import ConditioningSession, Estimator
from .dae import DaeConfig, DaeModel, TrainingDiverged, load_model, save_model, train
from .exact import ExactEmpiricalEstimator

__all__ = [
    "ConditioningSession",
    "DaeConfig",
    "DaeModel",
    "Estimator",
    "ExactEmpiricalEstimator",
    "TrainingDiverged",
    "load_model",
    "save_model",
    "train",
]
