"""Per-class recall and its worst-category summaries.

Geometric and harmonic means are taken after replacing zero recalls with a
small ``epsilon`` (1e-3 by default) so they stay informative; the arithmetic
mean and the lowest recall always use the raw values.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

DEFAULT_EPSILON = 1e-3
MANY_THRESHOLD = 100  # strictly more than this many training images
FEW_THRESHOLD = 20  # strictly fewer

CSV_COLUMNS = ("accuracy", "gmean", "hmean", "lowest", "epsilon", "substituted", "many", "medium", "few")


@dataclass(frozen=True)
class MetricsReport:
    arithmetic_mean: float
    geometric_mean: float
    harmonic_mean: float
    lowest_recall: float
    epsilon_used: float
    zero_substituted: bool
    many: float | None = None
    medium: float | None = None
    few: float | None = None

    def row(self) -> dict:
        """Flat record in :data:`CSV_COLUMNS` order."""
        return {
            "accuracy": self.arithmetic_mean,
            "gmean": self.geometric_mean,
            "hmean": self.harmonic_mean,
            "lowest": self.lowest_recall,
            "epsilon": self.epsilon_used,
            "substituted": self.zero_substituted,
            "many": self.many,
            "medium": self.medium,
            "few": self.few,
        }

    def to_json(self) -> str:
        return json.dumps(self.row(), indent=2) + "\n"

    def csv_header(self) -> str:
        return ",".join(CSV_COLUMNS)

    def csv_row(self) -> str:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, bool):
                return "true" if v else "false"
            return repr(float(v))

        return ",".join(fmt(v) for v in self.row().values())

    def with_subsets(self, subsets: tuple[float | None, float | None, float | None]) -> "MetricsReport":
        d = asdict(self)
        d["many"], d["medium"], d["few"] = subsets
        return MetricsReport(**d)


def per_class_recall(predictions, labels, num_classes: int) -> np.ndarray:
    """``correct_c / total_c`` for every class; each class needs a test sample."""
    pred = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if pred.shape != y.shape or y.ndim != 1:
        raise ValueError(f"predictions {pred.shape} and labels {y.shape} must be equal-length vectors")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    total = np.bincount(y, minlength=num_classes)
    missing = np.flatnonzero(total == 0)
    if missing.size:
        raise ValueError(f"recall undefined: no test samples for classes {missing.tolist()}")
    correct = np.bincount(y[pred == y], minlength=num_classes)
    return correct / total


def summarize(recalls, epsilon: float = DEFAULT_EPSILON) -> MetricsReport:
    r = np.asarray(recalls, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise ValueError("need a non-empty recall vector")
    if np.any((r < 0) | (r > 1)):
        raise ValueError("recalls must lie in [0, 1]")
    zero = r == 0
    s = np.where(zero, epsilon, r)
    gm = math.exp(float(np.mean(np.log(s))))
    with np.errstate(over="ignore"):  # subnormal recalls: HM -> 0
        hm = s.size / float(np.sum(1.0 / s))
    return MetricsReport(
        arithmetic_mean=float(np.mean(r)),
        geometric_mean=gm,
        harmonic_mean=hm,
        lowest_recall=float(r.min()),
        epsilon_used=float(epsilon),
        zero_substituted=bool(zero.any()),
    )


def overall_accuracy(predictions, labels) -> float:
    pred = np.asarray(predictions)
    y = np.asarray(labels)
    if y.size == 0:
        raise ValueError("no samples")
    return float(np.mean(pred == y))


def subset_report(recalls, train_counts) -> tuple[float | None, float | None, float | None]:
    """Mean recall over Many (>100 images), Medium, and Few (<20) classes.

    Empty buckets come back as ``None``.
    """
    r = np.asarray(recalls, dtype=np.float64)
    n = np.asarray(train_counts)
    if n.shape != r.shape:
        raise ValueError(f"{r.size} recalls but {n.size} class counts")
    many = n > MANY_THRESHOLD
    few = n < FEW_THRESHOLD
    medium = ~many & ~few
    return tuple(float(r[m].mean()) if m.any() else None for m in (many, medium, few))
