"""Confusion-matrix accumulation, per-class/macro scores and run aggregation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .schema import DAMAGE_CLASSES, NUM_CLASSES

METRIC_NAMES = ("iou", "f1", "precision", "recall")


@dataclass
class ConfusionMatrix:
    """``cells[t, p]`` counts pixels of true class ``t`` predicted as ``p``."""

    num_classes: int = NUM_CLASSES
    cells: np.ndarray = None

    def __post_init__(self):
        if self.cells is None:
            self.cells = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            self.cells = np.asarray(self.cells, dtype=np.int64)
            if self.cells.shape != (self.num_classes, self.num_classes) or (self.cells < 0).any():
                raise InvalidInputError("confusion cells must be a non-negative square grid")

    @property
    def total(self) -> int:
        return int(self.cells.sum())

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.cells.copy())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise InvalidInputError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.cells + other.cells)

    __add__ = merge


def accumulate(cm: ConfusionMatrix, predicted, target) -> ConfusionMatrix:
    """Return a new matrix with the joint counts of ``(target, predicted)`` added."""
    predicted = np.asarray(predicted)
    target = np.asarray(target)
    if predicted.shape != target.shape:
        raise InvalidInputError(f"shape mismatch: {predicted.shape} vs {target.shape}")
    k = cm.num_classes
    for name, arr in (("predicted", predicted), ("target", target)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise InvalidInputError(f"{name} holds class ids outside [0, {k})")
    joint = np.bincount(
        (target.astype(np.int64) * k + predicted.astype(np.int64)).ravel(), minlength=k * k
    )
    return ConfusionMatrix(k, cm.cells + joint.reshape(k, k))


@dataclass
class MetricReport:
    per_class: dict[int, dict[str, float]]
    macro: dict[str, float]
    epoch: int = -1
    run_id: str = ""
    background: dict[str, float] = field(default_factory=dict)

    def value(self, cls, metric: str) -> float:
        return self.macro[metric] if cls == "macro" else self.per_class[cls][metric]

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "epoch": self.epoch,
            "per_class": {str(c): v for c, v in self.per_class.items()},
            "macro": self.macro,
            "background": self.background,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(
            per_class={int(c): dict(v) for c, v in d["per_class"].items()},
            macro=dict(d["macro"]),
            epoch=d.get("epoch", -1),
            run_id=d.get("run_id", ""),
            background=dict(d.get("background", {})),
        )


def _ratio(num, den):
    return num / den if den > 0 else 0.0


def class_scores(cells: np.ndarray, n: int) -> dict[str, float]:
    tp = int(cells[n, n])
    fp = int(cells[:, n].sum()) - tp
    fn = int(cells[n, :].sum()) - tp
    return {
        "iou": _ratio(tp, tp + fp + fn),
        "f1": _ratio(2 * tp, 2 * tp + fp + fn),
        "precision": _ratio(tp, tp + fp),
        "recall": _ratio(tp, tp + fn),
    }


def per_class_metrics(cm: ConfusionMatrix, epoch: int = -1, run_id: str = "") -> MetricReport:
    """Scores for the damage classes; the macro average excludes background.

    A zero denominator yields 0 rather than NaN.
    """
    classes = [int(c) for c in DAMAGE_CLASSES if c < cm.num_classes]
    per_class = {c: class_scores(cm.cells, c) for c in classes}
    macro = {m: float(np.mean([per_class[c][m] for c in classes])) for m in METRIC_NAMES}
    return MetricReport(per_class, macro, epoch, run_id, class_scores(cm.cells, 0))


@dataclass
class RunSummary:
    mean: MetricReport
    std: MetricReport
    n_runs: int


def aggregate_runs(reports: list[MetricReport]) -> RunSummary:
    """Element-wise mean and population standard deviation across runs.

    Each run's macro is computed first and then averaged, so the summary macro
    is not the macro of the per-class means.
    """
    if not reports:
        raise InvalidInputError("aggregate_runs needs at least one report")
    classes = sorted(reports[0].per_class)
    if any(sorted(r.per_class) != classes for r in reports):
        raise InvalidInputError("reports cover different class sets")

    def stat(fn, getter):
        vals = np.array([getter(r) for r in reports], dtype=np.float64)
        if (vals == vals[0]).all():
            # exact for identical runs; summation would add rounding noise
            return float(vals[0]) if fn is np.mean else 0.0
        return float(fn(vals))

    def build(fn, run_id):
        per_class = {
            c: {m: stat(fn, lambda r, c=c, m=m: r.per_class[c][m]) for m in METRIC_NAMES}
            for c in classes
        }
        macro = {m: stat(fn, lambda r, m=m: r.macro[m]) for m in METRIC_NAMES}
        return MetricReport(per_class, macro, -1, run_id)

    return RunSummary(build(np.mean, "mean"), build(np.std, "std"), len(reports))
