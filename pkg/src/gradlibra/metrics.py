"""Classification-score average precision, recall and grouped summaries.

AP here is computed on per-class sigmoid scores (no boxes, no IoU matching):
the all-points interpolated area under the precision-recall curve.

Ties: samples are ranked by descending score with a stable sort, but every
run of equal scores enters the curve as one operating point. The result is
therefore independent of how ties are ordered, and a constant scorer gets
exactly the class prior.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import COMMON, FREQUENT, RARE, ClassGroups, SampleBatch
from .errors import DataError, DimensionError, UndefinedAPError
from .losses import sigmoid
from .model import Model

TABLE_COLUMNS = ("mR_f", "AP_f", "mR_c", "AP_c", "mR_r", "AP_r", "mAP")
RECALL_THRESHOLD = 0.5


def average_precision(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise DimensionError("scores and labels differ in length")
    n_pos = int(np.count_nonzero(labels == 1))
    if n_pos == 0:
        raise UndefinedAPError("average precision is undefined without positives")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.cumsum(labels[order] == 1)
    # last index of each tie run is the operating point
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_at = tp[ends]
    k_at = ends + 1
    # envelope: best precision at this or any later operating point, kept as
    # the integer pair (tp, k) so the final sum can be rounded once
    src = _suffix_argmax(tp_at / k_at)
    num = np.diff(np.r_[0, tp_at]) * tp_at[src]
    den = k_at[src] * n_pos
    return _exact_ratio_sum(num, den)


def _suffix_argmax(x: np.ndarray) -> np.ndarray:
    """Index of the maximum of ``x[i:]`` for every ``i``."""
    rev = x[::-1]
    running = np.maximum.accumulate(rev)
    # the latest record position at or before i attains running[i]
    idx = np.maximum.accumulate(np.where(rev == running, np.arange(len(rev)), 0))
    return (len(x) - 1 - idx)[::-1]


def _two_product(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Dekker's error-free product: ``a * b == p + e`` exactly."""
    def split(x):
        c = 134217729.0 * x  # 2**27 + 1
        hi = c - (c - x)
        return hi, x - hi

    p = a * b
    ah, al = split(a)
    bh, bl = split(b)
    e = ((ah * bh - p) + ah * bl + al * bh) + al * bl
    return p, e


def _exact_ratio_sum(num: np.ndarray, den: np.ndarray) -> float:
    """``sum(num / den)`` for integer arrays, rounded once to float64."""
    num = num.astype(np.float64)
    den = den.astype(np.float64)
    q = num / den
    p, e = _two_product(q, den)
    resid = ((num - p) - e) / den
    return math.fsum(np.concatenate([q, resid]))


def recall_at(probs, labels, threshold: float = RECALL_THRESHOLD) -> float:
    labels = np.asarray(labels).ravel()
    pos = labels == 1
    if not pos.any():
        raise UndefinedAPError("recall is undefined without positives")
    return float(np.count_nonzero(np.asarray(probs).ravel()[pos] >= threshold) / pos.sum())


def _mean(vals) -> float:
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


@dataclass
class EvalReport:
    per_class_ap: list[float]
    per_class_recall: list[float]
    map: float
    grouped: dict[str, float]
    excluded: list[int] = field(default_factory=list)
    note: str = "AP computed on classification scores, not detection boxes"

    def row(self) -> list[float]:
        return [self.grouped[c] if c != "mAP" else self.map for c in TABLE_COLUMNS]

    def to_dict(self) -> dict:
        clean = lambda v: None if math.isnan(v) else v  # noqa: E731
        return {
            "per_class_ap": [clean(v) for v in self.per_class_ap],
            "per_class_recall": [clean(v) for v in self.per_class_recall],
            "map": clean(self.map),
            "grouped": {k: clean(v) for k, v in self.grouped.items()},
            "excluded": self.excluded,
            "note": self.note,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        w.writerow([format_cell(v) for v in self.row()])
        return buf.getvalue()


def format_cell(v: float) -> str:
    return "" if v is None or math.isnan(v) else repr(float(v))


def evaluate_logits(logits: np.ndarray, labels: np.ndarray, groups: ClassGroups) -> EvalReport:
    """Per-class AP and recall from raw logits.

    Ranking uses the logits themselves: sigmoid is strictly monotone, and
    ranking before clamping keeps saturated scores from collapsing into ties.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    probs = sigmoid(logits)
    if probs.shape != labels.shape:
        raise DimensionError("probability and label matrices differ in shape")
    if probs.shape[0] == 0:
        raise DataError("empty test set")
    C = probs.shape[1]
    ap, rec, excluded = [], [], []
    for i in range(C):
        col = labels[:, i]
        if not (col == 1).any():
            warnings.warn(f"class {i} has no positives in the test set; excluded from means",
                          stacklevel=2)
            excluded.append(i)
            ap.append(math.nan)
            rec.append(math.nan)
            continue
        ap.append(average_precision(logits[:, i], col))
        rec.append(recall_at(probs[:, i], col))
    grouped = {}
    for key, g in (("f", FREQUENT), ("c", COMMON), ("r", RARE)):
        members = [i for i in groups.members(g) if i < C]
        grouped[f"AP_{key}"] = _mean(ap[i] for i in members)
        grouped[f"mR_{key}"] = _mean(rec[i] for i in members)
    return EvalReport(ap, rec, _mean(ap), grouped, excluded)


def evaluate(model: Model, test: SampleBatch, groups: ClassGroups) -> EvalReport:
    """Score ``test`` with ``model`` and summarize per class and per group."""
    if len(test) == 0:
        raise DataError("empty test set")
    return evaluate_logits(model.forward(test.features), test.labels, groups)
