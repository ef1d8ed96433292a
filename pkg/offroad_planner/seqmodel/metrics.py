"""
Per-step evaluation of event and bearing predictions along the horizon.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Union

import numpy as np
from sklearn.metrics import accuracy_score, confusion_matrix, f1_score, precision_score, recall_score

from offroad_planner.csvio import emit_csv
from offroad_planner.errors import DomainError
from offroad_planner.events import EVENT_CLASSES, N_CLASSES
from offroad_planner.seqmodel.network import predict_batch
from offroad_planner.seqmodel.types import ModelWeights, TrajectorySamples
from offroad_planner.vehicle import wrap_angle

logger = logging.getLogger(__name__)

METRICS_HEADER = ("step", "macro_f1", "accuracy", "bearing_mae")
PRECISION_RECALL_HEADER = ("step", "macro_precision", "macro_recall")
CONFUSION_HEADER = ("step", "true_class", "pred_class", "count")


@dataclass
class StepMetrics:
    step: int
    macro_f1: float
    accuracy: float
    bearing_mae: float
    macro_precision: float
    macro_recall: float


def metrics_from_arrays(event_labels: np.ndarray, event_probs: np.ndarray,
                        bearing_labels: np.ndarray, bearing_mu: np.ndarray) -> List[StepMetrics]:
    """
    Metrics at each step from labels (N, H) and predictions (N, H, 9), (N, H).

    Classes absent from the labels at a step are left out of the macro averages.
    """
    event_labels = np.asarray(event_labels)
    if event_labels.ndim != 2 or event_labels.shape[0] == 0:
        raise DomainError("Need a non-empty (N, H) label array")
    predicted = np.asarray(event_probs).argmax(axis=-1)
    rows = []
    for t in range(event_labels.shape[1]):
        y_true, y_pred = event_labels[:, t], predicted[:, t]
        present = sorted(set(int(c) for c in y_true))
        if len(present) < N_CLASSES:
            missing = [EVENT_CLASSES[c] for c in range(N_CLASSES) if c not in present]
            logger.debug(f"step {t}: skipping absent classes {missing} in macro averages")
        mae = float(np.mean(np.abs(wrap_angle(np.asarray(bearing_mu)[:, t] - np.asarray(bearing_labels)[:, t]))))
        rows.append(StepMetrics(
            step=t,
            macro_f1=float(f1_score(y_true, y_pred, labels=present, average="macro", zero_division=0)),
            accuracy=float(accuracy_score(y_true, y_pred)),
            bearing_mae=mae,
            macro_precision=float(precision_score(y_true, y_pred, labels=present, average="macro", zero_division=0)),
            macro_recall=float(recall_score(y_true, y_pred, labels=present, average="macro", zero_division=0)),
        ))
    return rows


def per_step_metrics(weights: ModelWeights, test_set: TrajectorySamples) -> List[StepMetrics]:
    """Evaluate a trained model step by step on a held-out set."""
    probs, mu, _ = predict_batch(weights, test_set.obs, test_set.actions)
    return metrics_from_arrays(test_set.event_labels, probs, test_set.bearing_labels, mu)


def per_step_confusion(weights: ModelWeights, test_set: TrajectorySamples) -> np.ndarray:
    """Confusion matrices of shape (H, 9, 9), rows true class, columns predicted class."""
    probs, _, _ = predict_batch(weights, test_set.obs, test_set.actions)
    predicted = probs.argmax(axis=-1)
    return np.stack([
        confusion_matrix(test_set.event_labels[:, t], predicted[:, t], labels=list(range(N_CLASSES)))
        for t in range(test_set.horizon)
    ])


def write_metrics_csv(path: Union[str, Path], rows: List[StepMetrics]) -> Path:
    return emit_csv(path, METRICS_HEADER, [(r.step, r.macro_f1, r.accuracy, r.bearing_mae) for r in rows])


def write_precision_recall_csv(path: Union[str, Path], rows: List[StepMetrics]) -> Path:
    return emit_csv(path, PRECISION_RECALL_HEADER, [(r.step, r.macro_precision, r.macro_recall) for r in rows])


def write_confusion_csv(path: Union[str, Path], matrices: np.ndarray) -> Path:
    rows = [
        (t, i, j, int(matrices[t, i, j]))
        for t in range(matrices.shape[0])
        for i in range(N_CLASSES)
        for j in range(N_CLASSES)
    ]
    return emit_csv(path, CONFUSION_HEADER, rows)
