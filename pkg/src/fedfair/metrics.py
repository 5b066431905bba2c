"""Classification and group-fairness metrics.

Classification side: confusion matrix, accuracy, and one-vs-rest precision /
recall / F1 averaged with weights equal to each class's true-instance count.

Fairness side: population variance of per-group accuracies (lower = more
uniform = fairer), and per-group gap / worst scores where each group s is
compared against the pooled accuracy of everyone outside s:

    gap(s)   = |acc(s) - acc(not s)|
    worst(s) = min(acc(s), acc(not s))

Model-level gap/worst are plain means over the group set.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

FAIRNESS_CSV_HEADER = ["group", "accuracy", "gap", "worst"]


@dataclass
class GroupedPredictions:
    """Aligned per-sample arrays: group id, true label, predicted label."""

    groups: np.ndarray
    y_true: np.ndarray
    y_pred: np.ndarray

    def __post_init__(self):
        self.groups = np.asarray(self.groups, dtype=np.int64)
        self.y_true = np.asarray(self.y_true, dtype=np.int64)
        self.y_pred = np.asarray(self.y_pred, dtype=np.int64)
        n = self.groups.shape[0]
        if self.y_true.shape != (n,) or self.y_pred.shape != (n,):
            raise ValidationError("groups, y_true, y_pred must be equal-length 1-D arrays")


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """counts[i, j] = number of samples with true class i predicted as j."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValidationError("y_true and y_pred lengths differ")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    if y_true.size == 0:
        return cm
    if min(y_true.min(), y_pred.min()) < 0 or max(y_true.max(), y_pred.max()) >= num_classes:
        raise ValidationError(f"labels outside [0, {num_classes})")
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


@dataclass
class ClassificationReport:
    """Support-weighted classification metrics plus the per-class breakdown."""

    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray
    support: np.ndarray
    # classes where a zero denominator forced the 0 convention
    degenerate_classes: list[int] = field(default_factory=list)


def classification_report(cm: np.ndarray) -> ClassificationReport:
    """Accuracy, precision, recall, F1 from a confusion matrix.

    Per class (one-vs-rest): precision = TP/(TP+FP), recall = TP/(TP+FN),
    F1 their harmonic mean; any zero denominator yields 0 and flags the
    class. Report-level values weight classes by true-instance count.
    """
    cm = np.asarray(cm)
    total = int(cm.sum())
    if total == 0:
        raise ValidationError("empty confusion matrix")
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)  # true instances per class
    predicted = cm.sum(axis=0).astype(np.float64)

    degenerate = sorted(set(np.nonzero(predicted == 0)[0]) | set(np.nonzero(support == 0)[0]))
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        pr = precision + recall
        f1 = np.where(pr > 0, 2.0 * precision * recall / np.where(pr > 0, pr, 1.0), 0.0)

    weights = support / total
    return ClassificationReport(
        accuracy=float(tp.sum() / total),
        precision=float((weights * precision).sum()),
        recall=float((weights * recall).sum()),
        f1=float((weights * f1).sum()),
        per_class_precision=precision,
        per_class_recall=recall,
        per_class_f1=f1,
        support=support.astype(np.int64),
        degenerate_classes=[int(c) for c in degenerate],
    )


def accuracy_variance(per_group_acc) -> float:
    """Population variance (divide by the group count) of group accuracies."""
    accs = np.asarray(per_group_acc, dtype=np.float64)
    if accs.size == 0:
        raise ValidationError("need at least one group accuracy")
    return float(np.var(accs))


@dataclass
class FairnessReport:
    """Per-group accuracy/gap/worst plus model-level aggregates."""

    groups: list[int]
    accuracy: list[float]
    gap: list[float]
    worst: list[float]
    mean_gap: float
    mean_worst: float
    variance: float
    overall_accuracy: float


def gap_worst_report(preds: GroupedPredictions) -> FairnessReport:
    """Fairness report over all groups present in preds.

    Each group needs at least one sample and a nonempty complement (so at
    least two distinct groups overall).
    """
    if preds.groups.size == 0:
        raise ValidationError("no samples")
    correct = (preds.y_true == preds.y_pred).astype(np.float64)
    group_ids = [int(g) for g in np.unique(preds.groups)]
    if len(group_ids) < 2:
        raise ValidationError("gap/worst need at least two groups (complement must be nonempty)")

    accs, gaps, worsts = [], [], []
    for g in group_ids:
        inside = preds.groups == g
        acc_s = float(correct[inside].mean())
        acc_rest = float(correct[~inside].mean())
        accs.append(acc_s)
        gaps.append(abs(acc_s - acc_rest))
        worsts.append(min(acc_s, acc_rest))

    return FairnessReport(
        groups=group_ids,
        accuracy=accs,
        gap=gaps,
        worst=worsts,
        mean_gap=float(np.mean(gaps)),
        mean_worst=float(np.mean(worsts)),
        variance=accuracy_variance(accs),
        overall_accuracy=float(correct.mean()),
    )


def write_fairness_csv(report: FairnessReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FAIRNESS_CSV_HEADER)
        for g, acc, gap, worst in zip(report.groups, report.accuracy, report.gap, report.worst):
            writer.writerow([g, repr(acc), repr(gap), repr(worst)])


def read_fairness_csv(path) -> dict[int, tuple[float, float, float]]:
    """Parse a fairness CSV back into {group: (accuracy, gap, worst)}."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != FAIRNESS_CSV_HEADER:
        raise ValidationError(f"bad fairness CSV header in {path}")
    return {int(r[0]): (float(r[1]), float(r[2]), float(r[3])) for r in rows[1:]}


def fairness_summary_dict(report: FairnessReport) -> dict:
    """Model-level aggregates in JSON-friendly form."""
    return {
        "overall_accuracy": report.overall_accuracy,
        "accuracy_variance": report.variance,
        "mean_gap": report.mean_gap,
        "mean_worst": report.mean_worst,
        "groups": {
            str(g): {"accuracy": a, "gap": gp, "worst": w}
            for g, a, gp, w in zip(report.groups, report.accuracy, report.gap, report.worst)
        },
    }


def write_fairness_json(report: FairnessReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(fairness_summary_dict(report), fh, indent=2, sort_keys=True)
        fh.write("\n")
