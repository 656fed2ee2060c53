"""Benchmark-style evaluation: accuracy, macro F1, and the sensitivity /
specificity / S2 finding-extraction metric."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

from funduskit.core import normalize_answer

# Averaging scheme recorded in every report header so alternates can be
# compared side by side.
F1_SCHEME = "macro-f1-per-task, unweighted task mean"


class UndefinedRateError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("negative confusion count")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class TaskReport:
    task_tag: str
    metric_name: str  # "accuracy" or "f1"
    value: float  # percentage
    per_class: dict[str, float] = field(default_factory=dict)
    scheme: str = F1_SCHEME
    n_items: int = 0

    def to_dict(self) -> dict:
        return {
            "task_tag": self.task_tag,
            "metric_name": self.metric_name,
            "value": self.value,
            "per_class": self.per_class,
            "scheme": self.scheme,
            "n_items": self.n_items,
        }


def _check_aligned(predictions: Sequence[str], golds: Sequence[str]) -> None:
    if len(predictions) != len(golds):
        raise ValueError(
            f"length mismatch: {len(predictions)} predictions vs {len(golds)} golds"
        )
    if not predictions:
        raise ValueError("empty input")


def accuracy(
    predictions: Sequence[str],
    golds: Sequence[str],
    options: Optional[Sequence[Sequence[str]]] = None,
) -> float:
    """Percentage of predictions matching gold after answer normalization.
    ``options`` is an optional per-item option list used by the normalizer."""
    _check_aligned(predictions, golds)
    matches = 0
    for i, (pred, gold) in enumerate(zip(predictions, golds)):
        opts = options[i] if options is not None else None
        if normalize_answer(pred, opts) == normalize_answer(gold, opts):
            matches += 1
    return 100.0 * matches / len(predictions)


def macro_f1(
    predictions: Sequence[str],
    golds: Sequence[str],
    classes: Sequence[str],
) -> tuple[float, dict[str, float]]:
    """Unweighted mean of per-class F1 (percent), plus the per-class values.

    Per class: F1 = 2PR/(P+R), defined as 0 when P+R = 0. Golds must be drawn
    from ``classes``.
    """
    _check_aligned(predictions, golds)
    if not classes:
        raise ValueError("empty class list")
    norm_classes = [normalize_answer(c) for c in classes]
    preds = [normalize_answer(p, classes) for p in predictions]
    gold_norm = [normalize_answer(g, classes) for g in golds]
    unknown = sorted(set(gold_norm) - set(norm_classes))
    if unknown:
        raise ValueError(f"gold labels outside class list: {unknown}")
    per_class: dict[str, float] = {}
    for cls in norm_classes:
        tp = sum(1 for p, g in zip(preds, gold_norm) if p == cls and g == cls)
        fp = sum(1 for p, g in zip(preds, gold_norm) if p == cls and g != cls)
        fn = sum(1 for p, g in zip(preds, gold_norm) if p != cls and g == cls)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[cls] = 100.0 * f1
    value = sum(per_class.values()) / len(per_class)
    return value, per_class


def s2_metric(counts: ConfusionCounts) -> tuple[float, float, float]:
    """Sensitivity, specificity (percent), and their harmonic mean S2."""
    if counts.tp + counts.fn == 0:
        raise UndefinedRateError("no positive items: sensitivity undefined")
    if counts.tn + counts.fp == 0:
        raise UndefinedRateError("no negative items: specificity undefined")
    sen = 100.0 * counts.tp / (counts.tp + counts.fn)
    spe = 100.0 * counts.tn / (counts.tn + counts.fp)
    s2 = 2.0 * sen * spe / (sen + spe) if sen + spe > 0 else 0.0
    return sen, spe, s2


def harmonic_mean_s2(sen: float, spe: float) -> float:
    """S2 directly from already-computed rates (both in percent)."""
    return 2.0 * sen * spe / (sen + spe) if sen + spe > 0 else 0.0


def aggregate_reports(reports: Sequence[TaskReport]) -> float:
    """Benchmark-level score: unweighted mean of per-task values."""
    if not reports:
        raise ValueError("no task reports")
    return sum(r.value for r in reports) / len(reports)


def render_report_json(reports: Sequence[TaskReport]) -> str:
    payload = {
        "scheme": F1_SCHEME,
        "tasks": [r.to_dict() for r in reports],
        "average": aggregate_reports(reports),
    }
    return json.dumps(payload, sort_keys=True, indent=1, ensure_ascii=False)


def render_report_table(reports: Sequence[TaskReport]) -> str:
    """Aligned plain-text report table."""
    rows = [("task", "metric", "value", "n")]
    for r in reports:
        rows.append((r.task_tag, r.metric_name, f"{r.value:.2f}", str(r.n_items)))
    rows.append(("average", "-", f"{aggregate_reports(reports):.2f}", ""))
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    lines.insert(0, f"# scheme: {F1_SCHEME}")
    return "\n".join(lines)
