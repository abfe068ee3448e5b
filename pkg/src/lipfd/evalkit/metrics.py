"""Thresholded and ranking metrics over labelled fake-probabilities."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from ..errors import ValidationError


@dataclass
class PredictionSet:
    ids: list[str]
    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.ids) != self.probs.size or self.probs.size != self.labels.size:
            raise ValidationError("ids, probs and labels must have equal length")
        if np.any(~np.isfinite(self.probs)) or np.any((self.probs < 0) | (self.probs > 1)):
            raise ValidationError("probabilities must lie in [0, 1]")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise ValidationError("labels must be 0 or 1")

    @classmethod
    def from_items(cls, items: Iterable[tuple[str, float, int]]) -> "PredictionSet":
        items = list(items)
        return cls([i[0] for i in items], [i[1] for i in items], [i[2] for i in items])

    @classmethod
    def from_arrays(cls, probs, labels) -> "PredictionSet":
        probs = np.asarray(probs)
        return cls([str(i) for i in range(probs.size)], probs, labels)

    def __len__(self):
        return self.probs.size


@dataclass
class MetricsReport:
    acc: float
    ap: float | None
    auc: float | None
    fpr: float | None
    fnr: float | None
    threshold: float
    n_pos: int
    n_neg: int

    @property
    def undefined(self) -> list[str]:
        return [k for k in ("ap", "auc", "fpr", "fnr") if getattr(self, k) is None]

    def as_dict(self) -> dict:
        d = asdict(self)
        d["undefined"] = self.undefined
        return d


def roc_auc(probs, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg) with mid-ranks for ties."""
    probs, labels = np.asarray(probs, dtype=np.float64), np.asarray(labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    ranks = rankdata(probs)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(probs, labels) -> float:
    """Step-interpolated area under the precision-recall curve: sum_k (R_k - R_{k-1}) P_k."""
    probs, labels = np.asarray(probs, dtype=np.float64), np.asarray(labels)
    order = np.argsort(-probs, kind="stable")
    p, y = probs[order], labels[order]
    # last index of each run of tied scores is an operating point
    last = np.r_[np.flatnonzero(np.diff(p) != 0), p.size - 1]
    tp = np.cumsum(y)[last]
    precision = tp / (last + 1)
    recall = tp / y.sum()
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def compute_metrics(preds: PredictionSet, threshold: float = 0.5) -> MetricsReport:
    if len(preds) == 0:
        raise ValidationError("cannot compute metrics on an empty prediction set")
    y = preds.labels
    yhat = (preds.probs >= threshold).astype(np.int64)
    n_pos, n_neg = int(y.sum()), int(y.size - y.sum())
    acc = float(np.mean(yhat == y))
    fpr = float(np.sum((yhat == 1) & (y == 0)) / n_neg) if n_neg else None
    fnr = float(np.sum((yhat == 0) & (y == 1)) / n_pos) if n_pos else None
    both = n_pos > 0 and n_neg > 0
    ap = average_precision(preds.probs, y) if both else None
    auc = roc_auc(preds.probs, y) if both else None
    return MetricsReport(acc, ap, auc, fpr, fnr, float(threshold), n_pos, n_neg)


def format_report(report: MetricsReport) -> str:
    def f(v):
        return "undefined" if v is None else f"{v:.4f}"

    return "\n".join([
        f"threshold  {report.threshold:g}",
        f"n_pos      {report.n_pos}",
        f"n_neg      {report.n_neg}",
        f"ACC        {f(report.acc)}",
        f"AP         {f(report.ap)}",
        f"AUC        {f(report.auc)}",
        f"FPR        {f(report.fpr)}",
        f"FNR        {f(report.fnr)}",
    ]) + "\n"
