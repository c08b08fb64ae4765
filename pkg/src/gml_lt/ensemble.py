"""Temperature-scaled two-head ensembling and evaluation helpers."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .dataset import LabeledFeatureSet
from .losses import softmax
from .metrics import MetricsReport, per_class_recall, subset_report, summarize
from .model import ModelBundle, embed

DEFAULT_GRID_VALUES = (1.0, 2.0, 3.0)
SWEEP_COLUMNS = ("t_old", "t_new", "accuracy", "gmean", "hmean", "lowest")


@dataclass(frozen=True)
class TemperaturePair:
    t_old: float = 1.0
    t_new: float = 1.0

    def __post_init__(self):
        if not (self.t_old > 0 and self.t_new > 0):
            raise ValueError(f"temperatures must be > 0, got ({self.t_old}, {self.t_new})")


def default_grid() -> list[TemperaturePair]:
    return [TemperaturePair(a, b) for a in DEFAULT_GRID_VALUES for b in DEFAULT_GRID_VALUES]


def parse_grid(spec: str) -> list[TemperaturePair]:
    """Parse ``"1,2,3x1,2"`` (t_old values x t_new values) into pairs."""
    parts = spec.split("x")
    if len(parts) != 2:
        raise ValueError(f"grid spec {spec!r} must look like '1,2,3x1,2,3'")
    try:
        olds, news = ([float(v) for v in p.split(",")] for p in parts)
    except ValueError:
        raise ValueError(f"grid spec {spec!r} contains a non-numeric temperature") from None
    return [TemperaturePair(a, b) for a in olds for b in news]


def temperature_softmax(logits, t: float) -> np.ndarray:
    if not t > 0:
        raise ValueError(f"temperature must be > 0, got {t}")
    return softmax(np.asarray(logits, dtype=np.float64) / t)


def argmax_lowest(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. the lowest class on ties
    return np.argmax(probs, axis=1)


def ensemble_predict(logits_old, logits_new, temps: TemperaturePair = TemperaturePair()):
    """Average of the two temperature softmaxes; returns ``(probs, labels)``."""
    lo = np.asarray(logits_old, dtype=np.float64)
    ln = np.asarray(logits_new, dtype=np.float64)
    if lo.shape != ln.shape or lo.ndim != 2:
        raise ValueError(f"logit shapes differ: {lo.shape} vs {ln.shape}")
    probs = (temperature_softmax(ln, temps.t_new) + temperature_softmax(lo, temps.t_old)) / 2.0
    return probs, argmax_lowest(probs)


def predict(bundle: ModelBundle, features, head: str = "new", temps: TemperaturePair = TemperaturePair()):
    """Predicted labels for ``head`` in {"old", "new", "ensemble"}."""
    if head == "ensemble":
        old, new = bundle.head("old"), bundle.new_head
        z = embed(bundle.backbone, features)
        return ensemble_predict(z @ old.w.T + old.b, z @ new.w.T + new.b, temps)[1]
    h = bundle.head(head)
    z = embed(bundle.backbone, features)
    return argmax_lowest(z @ h.w.T + h.b)


def evaluate(
    bundle: ModelBundle,
    dataset: LabeledFeatureSet,
    head: str = "new",
    temps: TemperaturePair = TemperaturePair(),
) -> tuple[MetricsReport, np.ndarray]:
    """Metrics report (with Many/Medium/Few when train counts are known) and per-class recall."""
    pred = predict(bundle, dataset.features, head, temps)
    recalls = per_class_recall(pred, dataset.labels, dataset.num_classes)
    report = summarize(recalls)
    if bundle.class_counts is not None:
        report = report.with_subsets(subset_report(recalls, bundle.class_counts))
    return report, recalls


def sweep_temperatures(
    bundle: ModelBundle,
    dataset: LabeledFeatureSet,
    grid: Iterable[TemperaturePair] | None = None,
) -> list[tuple[TemperaturePair, MetricsReport]]:
    bundle.head("old")
    grid = default_grid() if grid is None else list(grid)
    return [(pair, evaluate(bundle, dataset, "ensemble", pair)[0]) for pair in grid]


def best_pair(table: Sequence[tuple[TemperaturePair, MetricsReport]]) -> tuple[TemperaturePair, MetricsReport]:
    """Row with the highest harmonic mean; earliest row wins ties."""
    return max(table, key=lambda row: row[1].harmonic_mean)


def sweep_to_csv(table: Sequence[tuple[TemperaturePair, MetricsReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for pair, rep in table:
        w.writerow([repr(pair.t_old), repr(pair.t_new)] + [
            repr(v) for v in (rep.arithmetic_mean, rep.geometric_mean, rep.harmonic_mean, rep.lowest_recall)
        ])
    return buf.getvalue()
