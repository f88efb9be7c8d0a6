"""Classification and regression metrics.

Positive class is 1 (MIR stage 2 or 3).  Degenerate denominators give 0 and a warning
string instead of NaN, so a trivial fold never crashes a pipeline.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DataError

log = logging.getLogger(__name__)


class MetricError(DataError, ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class ClassificationReport:
    balanced_accuracy: float
    mcc: float
    kappa: float
    sensitivity: float
    specificity: float
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class RegressionStats:
    rmse: float
    mae: float
    r2: float
    slope: float
    n: int


def confusion(predictions: Sequence[int], labels: Sequence[int]) -> ConfusionCounts:
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape:
        raise MetricError("predictions and labels differ in length")
    return ConfusionCounts(
        tp=int(((p == 1) & (y == 1)).sum()),
        fp=int(((p == 1) & (y == 0)).sum()),
        tn=int(((p == 0) & (y == 0)).sum()),
        fn=int(((p == 0) & (y == 1)).sum()),
    )


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUROC: P(score_pos > score_neg) with ties counted as 1/2.

    Computed from average ranks; doubled ranks are integers so the result is
    exact and equals pairwise counting bit for bit.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both classes present")
    doubled = np.rint(2.0 * rankdata(s, method="average")).astype(np.int64)
    twice_u = int(doubled[y == 1].sum()) - n_pos * (n_pos + 1)
    return twice_u / (2 * n_pos * n_neg)


def _ratio(num: float, den: float, name: str, warns: list[str]) -> float:
    if den == 0:
        warns.append(f"{name}: zero denominator, reported as 0")
        return 0.0
    return num / den


def classification_report(cc: ConfusionCounts) -> ClassificationReport:
    if cc.total <= 0:
        raise MetricError("empty confusion matrix")
    warns: list[str] = []
    tp, fp, tn, fn, n = cc.tp, cc.fp, cc.tn, cc.fn, cc.total
    sens = _ratio(tp, tp + fn, "sensitivity", warns)
    spec = _ratio(tn, tn + fp, "specificity", warns)
    # integer products stay exact before the single float division
    mcc_den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = _ratio(tp * tn - fp * fn, math.sqrt(mcc_den), "mcc", warns) if mcc_den else _ratio(0, 0, "mcc", warns)
    agree = tp + tn
    chance = (tp + fp) * (tp + fn) + (tn + fn) * (tn + fp)
    kappa = _ratio(agree * n - chance, n * n - chance, "kappa", warns)
    for w in warns:
        log.warning(w)
    return ClassificationReport((sens + spec) / 2.0, mcc, kappa, sens, spec, tuple(warns))


def rmse(predictions: Sequence[float], targets: Sequence[float]) -> float:
    e = np.asarray(predictions, dtype=np.float64) - np.asarray(targets, dtype=np.float64)
    return math.sqrt(math.fsum(e * e) / len(e))


def regression_report(predictions: Sequence[float], targets: Sequence[float]) -> RegressionStats:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    n = len(t)
    if p.shape != t.shape:
        raise MetricError("predictions and targets differ in length")
    if n < 2:
        raise MetricError("regression metrics need at least 2 samples")
    err = p - t
    t_mean = math.fsum(t) / n
    p_mean = math.fsum(p) / n
    ss_tot = math.fsum((t - t_mean) ** 2)
    if ss_tot == 0:
        raise MetricError("targets have zero variance: r2 and slope are undefined")
    ss_res = math.fsum(err * err)
    slope = math.fsum((t - t_mean) * (p - p_mean)) / ss_tot
    return RegressionStats(
        rmse=math.sqrt(ss_res / n),
        mae=math.fsum(np.abs(err)) / n,
        r2=1.0 - ss_res / ss_tot,
        slope=slope,
        n=n,
    )
