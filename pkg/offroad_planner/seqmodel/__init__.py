"""
Sequence model: gradient tape, transformer/LSTM network, training and evaluation.
"""

from offroad_planner.seqmodel.metrics import (
    StepMetrics,
    metrics_from_arrays,
    per_step_confusion,
    per_step_metrics,
)
from offroad_planner.seqmodel.network import forward, init_weights, loss, predict_batch
from offroad_planner.seqmodel.persistence import load_weights, save_weights
from offroad_planner.seqmodel.tape import GradTape, Node
from offroad_planner.seqmodel.training import TrainConfig, TrainResult, grad_check, train, train_ensemble
from offroad_planner.seqmodel.types import (
    ModelConfig,
    ModelWeights,
    StepPrediction,
    TrajectorySamples,
    VAR_MIN,
)

__all__ = [
    "GradTape",
    "ModelConfig",
    "ModelWeights",
    "Node",
    "StepMetrics",
    "StepPrediction",
    "TrainConfig",
    "TrainResult",
    "TrajectorySamples",
    "VAR_MIN",
    "forward",
    "grad_check",
    "init_weights",
    "load_weights",
    "loss",
    "metrics_from_arrays",
    "per_step_confusion",
    "per_step_metrics",
    "predict_batch",
    "save_weights",
    "train",
    "train_ensemble",
]
