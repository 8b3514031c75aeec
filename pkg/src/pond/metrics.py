"""Classification metrics: accuracy, per-class F1 and macro-F1."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError


def _check(predictions, truths, K: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions, dtype=np.int64).ravel()
    t = np.asarray(truths, dtype=np.int64).ravel()
    if len(p) != len(t):
        raise ConfigError(f"{len(p)} predictions vs {len(t)} truths")
    if len(p) == 0:
        raise ConfigError("metrics need at least one prediction")
    if K is not None and (p.min() < 0 or t.min() < 0 or p.max() >= K or t.max() >= K):
        raise ConfigError(f"labels must lie in 0..{K - 1}")
    return p, t


def confusion_matrix(predictions, truths, K: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    p, t = _check(predictions, truths, K)
    cm = np.zeros((K, K), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def per_class(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tp = np.diag(cm).astype(np.float64)
    pred = cm.sum(axis=0).astype(np.float64)
    true = cm.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1


def macro_f1(predictions, truths, K: int) -> float:
    """Unweighted mean of per-class F1 over all K classes (0/0 counts as 0)."""
    return float(per_class(confusion_matrix(predictions, truths, K))[2].mean())


def accuracy(predictions, truths) -> float:
    p, t = _check(predictions, truths)
    return float((p == t).mean())


@dataclass
class MetricsReport:
    scenario: str
    seed: int
    accuracy: float
    macro_f1: float
    per_class: list[dict]
    confusion: list[list[int]]
    losses: dict = field(default_factory=dict)
    selected_source: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(predictions, truths, K: int, scenario: str = "", seed: int = 0, losses: dict | None = None,
             selected_source: str | None = None) -> MetricsReport:
    cm = confusion_matrix(predictions, truths, K)
    precision, recall, f1 = per_class(cm)
    rows = [{"class": c, "precision": float(precision[c]), "recall": float(recall[c]), "f1": float(f1[c]),
             "support": int(cm[c].sum())} for c in range(K)]
    return MetricsReport(scenario, int(seed), accuracy(predictions, truths), float(f1.mean()), rows,
                         cm.tolist(), losses or {}, selected_source)
