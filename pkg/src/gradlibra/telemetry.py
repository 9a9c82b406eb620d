"""Gradient-balance and classifier-norm telemetry.

``GradientLedger`` keeps, per class, the running sum over iterations of the
absolute batch-mean gradient coming from positive samples and from negative
samples; their quotient is the cumulative positive/negative gradient ratio.
A ratio near 1 means the class is trained in balance, a ratio near 0 means
its positives are drowned out by negatives.
"""

from __future__ import annotations

import enum
import json
import math
from typing import IO, NamedTuple, Optional

import numpy as np

from .errors import DimensionError, UnsupportedArchError
from .model import Arch, EpochInfo, IterationInfo, Model, TrainHook


class LedgerMode(str, enum.Enum):
    RAW_CE = "raw-ce"
    ACTIVE_LOSS = "active-loss"


class GradientLedger:
    """Per-class cumulative positive/negative gradient magnitudes.

    In ``RAW_CE`` mode the increments are the plain cross-entropy gradients
    ``y * (p - 1)`` and ``(1 - y) * p``, whatever loss is being optimized.
    In ``ACTIVE_LOSS`` mode the per-sample gradients actually produced by the
    loss are split by label and averaged instead.
    """

    def __init__(self, num_classes: int, mode: LedgerMode = LedgerMode.ACTIVE_LOSS):
        self.mode = LedgerMode(mode)
        self.pos_sum = np.zeros(num_classes)
        self.neg_sum = np.zeros(num_classes)
        self.iteration = 0

    @property
    def num_classes(self) -> int:
        return self.pos_sum.shape[0]

    def accumulate(self, p: np.ndarray, y: np.ndarray, grad_per_sample: Optional[np.ndarray] = None) -> None:
        """Add one batch.

        ``grad_per_sample`` is the gradient of each sample's own loss w.r.t.
        its logits (i.e. *not* divided by the batch size); required in
        ``ACTIVE_LOSS`` mode, ignored otherwise.
        """
        p = np.asarray(p, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if p.shape != y.shape or p.ndim != 2 or p.shape[1] != self.num_classes:
            raise DimensionError(f"expected (N, {self.num_classes}) arrays, got {p.shape} and {y.shape}")
        n = p.shape[0]
        if n == 0:
            self.iteration += 1
            return
        pos = y == 1
        if self.mode is LedgerMode.RAW_CE:
            g = p - y
        else:
            if grad_per_sample is None or np.shape(grad_per_sample) != p.shape:
                raise DimensionError("active-loss mode needs per-sample gradients shaped like p")
            g = np.asarray(grad_per_sample, dtype=np.float64)
        self.pos_sum += np.abs(np.where(pos, g, 0.0).sum(axis=0) / n)
        self.neg_sum += np.abs(np.where(pos, 0.0, g).sum(axis=0) / n)
        self.iteration += 1

    def ratio(self) -> np.ndarray:
        """``pos_sum / neg_sum``; ``inf`` where no negative gradient was seen."""
        with np.errstate(divide="ignore", invalid="ignore"):
            r = self.pos_sum / self.neg_sum
        return np.where(self.neg_sum == 0, np.inf, r)

    def snapshot(self) -> dict:
        r = self.ratio()
        inf = ~np.isfinite(r)
        return {
            "pos_sum": self.pos_sum.tolist(),
            "neg_sum": self.neg_sum.tolist(),
            "r": [None if f else float(v) for v, f in zip(r, inf)],
            "r_inf": inf.tolist(),
        }


class NormSnapshot(NamedTuple):
    values: np.ndarray
    degenerate: bool  # every row had zero norm; values is a vector of ones


def normalized_norms(weights: np.ndarray) -> NormSnapshot:
    norms = np.linalg.norm(np.asarray(weights, dtype=np.float64), axis=1)
    mean = norms.mean()
    if mean == 0:
        return NormSnapshot(np.ones_like(norms), True)
    return NormSnapshot(norms / mean, False)


def weight_norms(model: Model) -> NormSnapshot:
    """Per-class L2 norms of the last classifier layer, divided by their mean."""
    if getattr(model.spec, "arch", None) not in (Arch.LINEAR, Arch.MLP1):
        raise UnsupportedArchError(f"no per-class classifier rows for arch {model.spec.arch!r}")
    return normalized_norms(model.classifier_weights())


def coefficient_of_variation(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(v.std() / v.mean())


def _clean(x: float) -> Optional[float]:
    return float(x) if math.isfinite(x) else None


class TelemetryRecorder(TrainHook):
    """Training hook feeding ledgers and writing JSONL records.

    One ``iteration`` record per update, one ``epoch`` record per epoch with
    the normalized classifier weight norms. ``stream`` may be ``None`` to
    keep everything in memory only.
    """

    def __init__(self, num_classes: int, modes=(LedgerMode.RAW_CE, LedgerMode.ACTIVE_LOSS),
                 stream: Optional[IO[str]] = None, every: int = 1):
        self.ledgers = {LedgerMode(m): GradientLedger(num_classes, m) for m in modes}
        self.stream = stream
        self.every = max(1, int(every))
        self.epoch_norms: list[NormSnapshot] = []

    def on_iteration(self, info: IterationInfo) -> None:
        n = info.labels.shape[0]
        per_sample = info.loss.grad_logits * n
        for ledger in self.ledgers.values():
            ledger.accumulate(info.probs, info.labels, per_sample)
        if self.stream is not None and info.iteration % self.every == 0:
            rec = {"type": "iteration", "iteration": info.iteration, "epoch": info.epoch,
                   "lr": info.lr, "loss": _clean(info.loss.total)}
            for mode, ledger in self.ledgers.items():
                rec[mode.value] = ledger.snapshot()
            self.stream.write(json.dumps(rec, sort_keys=True) + "\n")

    def on_epoch(self, info: EpochInfo) -> None:
        snap = weight_norms(info.model)
        self.epoch_norms.append(snap)
        if self.stream is not None:
            rec = {"type": "epoch", "epoch": info.epoch, "weight_norms": snap.values.tolist(),
                   "degenerate": snap.degenerate}
            self.stream.write(json.dumps(rec, sort_keys=True) + "\n")
