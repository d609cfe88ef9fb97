# Classification scores

# Copyright (C) 2026   fedblocks developers

from dataclasses import dataclass

import numpy as np
from sklearn.metrics import accuracy_score, confusion_matrix, f1_score

from ..errors import DataError


@dataclass(frozen=True)
class Scores:
    accuracy: float
    macro_f1: float
    micro_f1: float
    n_samples: int
    support: tuple[int, ...]
    predicted: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "micro_f1": self.micro_f1,
            "n_samples": self.n_samples,
            "support": list(self.support),
            "predicted": list(self.predicted),
        }


def _check(predictions, labels) -> tuple[np.ndarray, np.ndarray]:
    y_pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    y_true = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y_pred.size != y_true.size:
        raise DataError(f"{y_pred.size} predictions for {y_true.size} labels")
    if y_true.size == 0:
        raise DataError("Cannot score an empty evaluation set")
    return y_pred, y_true


def macro_f1(predictions, labels, n_classes: int) -> float:
    """Unweighted mean of per-class F1 over ``range(n_classes)``.

    A class that appears in neither predictions nor labels contributes 0.

    Raises:
        DataError: On empty or length-mismatched input.
    """
    y_pred, y_true = _check(predictions, labels)
    return float(f1_score(y_true, y_pred, labels=list(range(n_classes)), average="macro", zero_division=0))


def confusion(predictions, labels, n_classes: int) -> np.ndarray:
    """Confusion matrix with true classes in rows and predicted classes in columns."""
    y_pred, y_true = _check(predictions, labels)
    return confusion_matrix(y_true, y_pred, labels=list(range(n_classes)))


def score_predictions(predictions, labels, n_classes: int) -> Scores:
    y_pred, y_true = _check(predictions, labels)
    classes = list(range(n_classes))
    return Scores(
        accuracy=float(accuracy_score(y_true, y_pred)),
        macro_f1=float(f1_score(y_true, y_pred, labels=classes, average="macro", zero_division=0)),
        micro_f1=float(f1_score(y_true, y_pred, labels=classes, average="micro", zero_division=0)),
        n_samples=int(y_true.size),
        support=tuple(int(v) for v in np.bincount(y_true, minlength=n_classes)[:n_classes]),
        predicted=tuple(int(v) for v in np.bincount(y_pred, minlength=n_classes)[:n_classes]),
    )
