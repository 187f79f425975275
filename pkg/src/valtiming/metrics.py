"""Classification metrics for the timing and emotion tasks.

Any ratio with a zero denominator is reported as 0 rather than NaN, so a
model that never predicts the validate class gets V-Prec = V-F1 = 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

VALIDATE = 1
NON_VALIDATE = 0
TIMING_COLUMNS = ("V-Prec", "V-F1", "NV-F1", "M-F1")


def confusion(true: Sequence[int], pred: Sequence[int], n_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if true.shape != pred.shape or true.ndim != 1:
        raise ValueError("true and pred must be 1-D sequences of equal length")
    for name, arr in (("true", true), ("pred", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} labels must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


@dataclass
class MetricsReport:
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_f1: float
    ua: float
    wa: float

    @classmethod
    def from_confusion(cls, cm: np.ndarray) -> "MetricsReport":
        cm = np.asarray(cm, dtype=np.int64)
        total = cm.sum()
        if total == 0:
            raise ValueError("cannot report on zero samples")
        tp = np.diag(cm)
        precision = _safe_div(tp, cm.sum(axis=0))
        recall = _safe_div(tp, cm.sum(axis=1))
        f1 = _safe_div(2 * precision * recall, precision + recall)
        return cls(
            confusion=cm,
            precision=precision,
            recall=recall,
            f1=f1,
            macro_f1=float(f1.mean()),
            ua=float(recall.mean()),
            wa=float(tp.sum() / total),
        )

    def timing_row(self) -> dict[str, float]:
        """The four timing-task numbers, as fractions in [0, 1]."""
        return {
            "V-Prec": float(self.precision[VALIDATE]),
            "V-F1": float(self.f1[VALIDATE]),
            "NV-F1": float(self.f1[NON_VALIDATE]),
            "M-F1": self.macro_f1,
        }

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "macro_f1": self.macro_f1,
            "ua": self.ua,
            "wa": self.wa,
        }


def classification_report(true: Sequence[int], pred: Sequence[int], n_classes: int) -> MetricsReport:
    if len(true) == 0:
        raise ValueError("empty evaluation set")
    return MetricsReport.from_confusion(confusion(true, pred, n_classes))


def format_timing_table(rows: Sequence[tuple[str, MetricsReport | dict[str, float]]]) -> str:
    """Aligned text table with percentages to two decimals."""
    width = max([len(name) for name, _ in rows] + [8])
    lines = [" " * width + "".join(f"{c:>9}" for c in TIMING_COLUMNS)]
    for name, report in rows:
        row = report.timing_row() if isinstance(report, MetricsReport) else report
        lines.append(f"{name:<{width}}" + "".join(f"{100 * row[c]:9.2f}" for c in TIMING_COLUMNS))
    return "\n".join(lines)
