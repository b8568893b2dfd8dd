"""Assigning unseen clients to cluster models and scoring the result."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn_core
from .cluster_fl import ClusterModel
from .dataset import ClientDataset
from .exceptions import DataError
from .federation import TrainConfig, local_train
from .nn_core import CnnSpec, FlatWeights

logger = logging.getLogger(__name__)


@dataclass
class TestRegistration:
    __test__ = False

    client_id: str
    trained: FlatWeights
    delta: FlatWeights
    cluster_idx: int = 0


def register_client(client: ClientDataset, global_weights: FlatWeights, spec: CnnSpec,
                    cfg: TrainConfig = TrainConfig(), rounds: int | None = None,
                    start: FlatWeights | None = None) -> TestRegistration:
    """Train ``rounds`` local epochs on the new client and return its delta.

    Training begins from ``start`` (default: ``global_weights``); the delta is
    always taken against ``global_weights``.
    """
    rounds = cfg.local_epochs * 5 if rounds is None else rounds
    if len(client) == 0:
        raise DataError(f"client {client.client_id} has no samples")
    origin = global_weights if start is None else start
    update = local_train(origin, client, spec, cfg, epochs=rounds)
    trained = origin.replace(origin.values + update.delta.values)
    delta = global_weights.replace(trained.values - global_weights.values)
    return TestRegistration(client.client_id, trained, delta)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return float("nan")
    return float(a @ b / (na * nb))


def find_nearest_cluster(delta: FlatWeights, clusters: list[ClusterModel],
                         global_weights: FlatWeights, literal: bool = False) -> int:
    """Cluster id whose displacement from ``global_weights`` is most cosine-similar.

    ``literal=True`` compares against the absolute cluster weights instead.
    Ties go to the lowest cluster id; if every similarity is undefined the
    lowest cluster id is returned with a warning.
    """
    if not clusters:
        raise ValueError("need at least one cluster")
    best, best_sim = None, -np.inf
    for cm in sorted(clusters, key=lambda c: c.cluster_id):
        delta.check_compatible(cm.weights)
        direction = cm.weights.values if literal else cm.weights.values - global_weights.values
        sim = cosine_similarity(delta.values, direction)
        if not np.isnan(sim) and sim > best_sim:
            best, best_sim = cm.cluster_id, sim
    if best is None:
        best = min(c.cluster_id for c in clusters)
        logger.warning("all cosine similarities undefined; assigning cluster %d", best)
    return best


# ---------------------------------------------------------------------------
# metrics

def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def sensitivity_specificity(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-class TP/(TP+FN) and TN/(TN+FP); NaN where the denominator is zero."""
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm)
    fn = cm.sum(axis=1) - tp
    fp = cm.sum(axis=0) - tp
    tn = cm.sum() - tp - fn - fp
    with np.errstate(invalid="ignore", divide="ignore"):
        sens = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), np.nan)
        spec = np.where(tn + fp > 0, tn / np.maximum(tn + fp, 1), np.nan)
    return sens.astype(float), spec.astype(float)


@dataclass
class EvalReport:
    num_classes: int
    client_accuracy: dict[str, float] = field(default_factory=dict)
    confusion: np.ndarray | None = None
    assignments: dict[str, int] = field(default_factory=dict)
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.confusion is None:
            self.confusion = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        if not self.class_names:
            self.class_names = tuple(f"class{i}" for i in range(self.num_classes))

    @property
    def accuracy(self) -> float:
        """Mean of per-client accuracies."""
        return float(np.mean(list(self.client_accuracy.values())))

    @property
    def pooled_accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.confusion.sum())

    @property
    def sensitivity(self) -> np.ndarray:
        return sensitivity_specificity(self.confusion)[0]

    @property
    def specificity(self) -> np.ndarray:
        return sensitivity_specificity(self.confusion)[1]

    def merge(self, other: "EvalReport") -> None:
        self.client_accuracy.update(other.client_accuracy)
        self.assignments.update(other.assignments)
        self.confusion = self.confusion + other.confusion

    def to_dict(self) -> dict:
        def clean(v):
            return None if np.isnan(v) else float(v)
        sens, spec = sensitivity_specificity(self.confusion)
        return {
            "num_classes": self.num_classes,
            "class_names": list(self.class_names),
            "accuracy": self.accuracy,
            "pooled_accuracy": self.pooled_accuracy,
            "client_accuracy": {k: self.client_accuracy[k] for k in sorted(self.client_accuracy)},
            "assignments": {k: self.assignments[k] for k in sorted(self.assignments)},
            "confusion_matrix": self.confusion.tolist(),
            "sensitivity": [clean(v) for v in sens],
            "specificity": [clean(v) for v in spec],
            "mean_sensitivity": clean(np.nanmean(sens)) if not np.isnan(sens).all() else None,
            "mean_specificity": clean(np.nanmean(spec)) if not np.isnan(spec).all() else None,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path) -> None:
        """Sensitivity/specificity table, one column per class."""
        sens, spec = sensitivity_specificity(self.confusion)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", *self.class_names, "mean"])
            for name, vals in (("sensitivity", sens), ("specificity", spec)):
                mean = np.nanmean(vals) if not np.isnan(vals).all() else np.nan
                w.writerow([name, *(_fmt(v) for v in vals), _fmt(mean)])
            w.writerow(["accuracy", *([""] * self.num_classes), _fmt(self.accuracy)])
            w.writerow(["pooled_accuracy", *([""] * self.num_classes),
                        _fmt(self.pooled_accuracy)])

    def to_text(self) -> str:
        sens, spec = sensitivity_specificity(self.confusion)
        width = max(12, *(len(c) for c in self.class_names))
        lines = [
            f"test clients      : {len(self.client_accuracy)}",
            f"accuracy (mean)   : {self.accuracy:.4f}",
            f"accuracy (pooled) : {self.pooled_accuracy:.4f}",
            "",
            " " * 12 + "".join(f"{c:>{width + 2}}" for c in self.class_names),
            "Sensitivity " + "".join(f"{_pct(v):>{width + 2}}" for v in sens),
            "Specificity " + "".join(f"{_pct(v):>{width + 2}}" for v in spec),
            "",
            "confusion matrix (rows = true, cols = predicted):",
        ]
        lines += ["  " + " ".join(f"{v:5d}" for v in row) for row in self.confusion]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return "" if np.isnan(v) else repr(float(v))


def _pct(v) -> str:
    return "n/a" if np.isnan(v) else f"{100 * v:.2f}%"


def evaluate(weights: FlatWeights, spec: CnnSpec, client: ClientDataset) -> EvalReport:
    X, y = client.arrays()
    pred = nn_core.predict(weights, spec, X)
    cm = confusion_matrix(y, pred, spec.num_classes)
    return EvalReport(spec.num_classes, {client.client_id: float(np.mean(pred == y))}, cm)


def test_all(test_clients, clusters: list[ClusterModel], global_weights: FlatWeights,
             spec: CnnSpec, cfg: TrainConfig = TrainConfig(), rounds: int | None = None,
             literal: bool = False, class_names=(),
             start: FlatWeights | None = None) -> EvalReport:
    """Register each test client, evaluate it with its nearest cluster model."""
    queue = sorted(test_clients, key=lambda c: c.client_id)
    if not queue:
        raise DataError("test queue is empty")
    by_id = {c.cluster_id: c for c in clusters}
    report = EvalReport(spec.num_classes, class_names=tuple(class_names))
    for client in queue:
        reg = register_client(client, global_weights, spec, cfg, rounds, start)
        idx = find_nearest_cluster(reg.delta, clusters, global_weights, literal)
        part = evaluate(by_id[idx].weights, spec, client)
        part.assignments[client.client_id] = idx
        report.merge(part)
    return report


test_all.__test__ = False  # keep pytest from collecting this as a test
