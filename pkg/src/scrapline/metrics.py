"""Railcar-level evaluation: regression, classification, and rater spread."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np


class MetricsError(Exception):
    pass


class UndefinedR2Error(MetricsError):
    """R^2 is undefined when every truth value is identical."""


def mae(pred, truth) -> float:
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.size == 0 or p.size != t.size:
        raise MetricsError(f"mae needs equal non-empty lengths, got {p.size} and {t.size}")
    return float(np.mean(np.abs(p - t)))


def r2(pred, truth) -> float:
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.size != t.size or p.size < 2:
        raise MetricsError(f"r2 needs equal lengths >= 2, got {p.size} and {t.size}")
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedR2Error("r2 undefined: truth vector is constant")
    ss_res = float(np.sum((p - t) ** 2))
    return 1.0 - ss_res / ss_tot


@dataclass
class ClassificationReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray  # rows = truth, columns = prediction
    per_class: list[dict]
    absent_classes: list[int] = field(default_factory=list)


def classification_metrics(pred, truth, class_num: int) -> ClassificationReport:
    """Accuracy plus macro precision/recall/F1 over all class_num classes.

    Classes absent from both pred and truth contribute 0 to the macro
    averages and are listed in absent_classes rather than silently dropped.
    """
    p = np.asarray(pred, dtype=np.int64).ravel()
    t = np.asarray(truth, dtype=np.int64).ravel()
    if p.size == 0 or p.size != t.size:
        raise MetricsError(f"classification needs equal non-empty lengths, got {p.size} and {t.size}")
    if p.min() < 0 or p.max() >= class_num or t.min() < 0 or t.max() >= class_num:
        raise MetricsError(f"labels outside [0, {class_num})")

    confusion = np.zeros((class_num, class_num), dtype=np.int64)
    for ti, pi in zip(t, p):
        confusion[ti, pi] += 1

    per_class = []
    absent = []
    for c in range(class_num):
        tp = confusion[c, c]
        fp = confusion[:, c].sum() - tp
        fn = confusion[c, :].sum() - tp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        if confusion[c, :].sum() == 0 and confusion[:, c].sum() == 0:
            absent.append(c)
        per_class.append({"class": c, "precision": float(precision),
                          "recall": float(recall), "f1": float(f1),
                          "support": int(confusion[c, :].sum())})
    return ClassificationReport(
        accuracy=float(np.trace(confusion) / p.size),
        macro_precision=float(np.mean([pc["precision"] for pc in per_class])),
        macro_recall=float(np.mean([pc["recall"] for pc in per_class])),
        macro_f1=float(np.mean([pc["f1"] for pc in per_class])),
        confusion=confusion,
        per_class=per_class,
        absent_classes=absent,
    )


@dataclass
class RaterSpread:
    rater_id: str
    bias: float       # mean(rater - consensus) over shared railcars
    spread: float     # population std of (rater - consensus)
    n_railcars: int


def inspector_spread(labels_by_railcar: dict[str, dict[str, float]]) -> tuple[list[RaterSpread], list[str]]:
    """Per-rater offset and dispersion against the per-railcar consensus mean.

    labels_by_railcar maps railcar id -> {rater id: label}. Raters with no
    railcar shared with at least one other rater are excluded and returned
    as warnings.
    """
    raters = sorted({r for labels in labels_by_railcar.values() for r in labels})
    if len(raters) < 2:
        raise MetricsError("inspector_spread needs at least 2 raters")
    consensus = {car: float(np.mean(list(labels.values())))
                 for car, labels in labels_by_railcar.items() if len(labels) >= 2}
    if not consensus:
        raise MetricsError("inspector_spread needs at least one railcar rated by 2+ raters")

    results, warnings = [], []
    for rater in raters:
        deltas = [labels_by_railcar[car][rater] - consensus[car]
                  for car in consensus if rater in labels_by_railcar[car]]
        if not deltas:
            warnings.append(f"rater {rater!r} shares no railcar with another rater; excluded")
            continue
        d = np.asarray(deltas)
        results.append(RaterSpread(rater_id=rater, bias=float(d.mean()),
                                   spread=float(d.std()), n_railcars=len(deltas)))
    return results, warnings


@dataclass
class EvalReport:
    """Railcar-level evaluation summary for one model on one split."""

    split: str
    model_version: str
    n_railcars: int
    mae: float
    r2: float | None
    accuracy: float | None = None
    macro_precision: float | None = None
    macro_recall: float | None = None
    macro_f1: float | None = None
    per_class: list[dict] = field(default_factory=list)
    confusion: list[list[int]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    averaging: str = "macro"

    def to_json(self) -> str:
        out = dict(self.__dict__)
        return json.dumps(out, indent=2, sort_keys=True)

    def to_csv_row(self) -> str:
        """Single flat CSV row (with header) for experiment tracking."""
        fields = ["split", "model_version", "n_railcars", "mae", "r2",
                  "accuracy", "macro_precision", "macro_recall", "macro_f1"]
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(fields)
        writer.writerow([getattr(self, f) for f in fields])
        return buf.getvalue()


def evaluate(pred_reg, truth_reg, pred_cls=None, truth_cls=None, class_num: int = 4,
             split: str = "test", model_version: str = "unknown") -> EvalReport:
    """Build an EvalReport from railcar-level prediction/label pairs."""
    warnings: list[str] = []
    try:
        r2_value: float | None = r2(pred_reg, truth_reg)
    except UndefinedR2Error as exc:
        r2_value = None
        warnings.append(str(exc))
    report = EvalReport(
        split=split,
        model_version=model_version,
        n_railcars=len(list(pred_reg)),
        mae=mae(pred_reg, truth_reg),
        r2=r2_value,
        warnings=warnings,
    )
    if pred_cls is not None and truth_cls is not None:
        cls = classification_metrics(pred_cls, truth_cls, class_num)
        report.accuracy = cls.accuracy
        report.macro_precision = cls.macro_precision
        report.macro_recall = cls.macro_recall
        report.macro_f1 = cls.macro_f1
        report.per_class = cls.per_class
        report.confusion = cls.confusion.tolist()
        if cls.absent_classes:
            report.warnings.append(f"classes absent from split: {cls.absent_classes}")
    return report
