"""Losses, bin weighting, AdamW and the per-bag training loop."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import metrics
from .errors import TrainingError
from .net import MilClassifier, MilNet, MilRegressor, backward, forward, predict_label, softmax
from .rng import Stream
from .store import DatasetManifest, EmbeddingBag

log = logging.getLogger(__name__)

TASKS = ("mir", "wbc", "tmax")
LOSSES = ("hinge", "mse", "wmse")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0
    class_weighting: bool = False
    loss: str = "hinge"
    bins: int = 10
    hidden: int = 512
    attention_dim: int = 256

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning rate and weight decay must be non-negative")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be positive")
        if self.loss == "wmse" and self.bins < 2:
            raise ValueError("wmse needs at least 2 bins")


# -- losses ------------------------------------------------------------------------


def hinge_loss(logits, label: int, class_weight: float = 1.0) -> tuple[float, np.ndarray]:
    """Binary hinge on the logit margin ``m = s[label] - s[other]``.

    Returns ``(loss, dloss/dlogits)``; the subgradient at ``m == 1`` is 0.
    """
    s = np.asarray(logits, dtype=np.float64)
    other = 1 - label
    margin = s[label] - s[other]
    grad = np.zeros(2)
    if margin < 1.0:
        grad[label] = -class_weight
        grad[other] = class_weight
        return class_weight * (1.0 - margin), grad
    return 0.0, grad


def class_weights(labels: Sequence[int]) -> np.ndarray:
    """Balanced weights ``N / (2 * N_c)``, so the per-sample mean weight is 1."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=2)
    if len(counts) != 2 or (counts == 0).any():
        raise TrainingError(f"class weighting needs both classes present, got counts {counts.tolist()}")
    return counts.sum() / (2.0 * counts)


@dataclass
class BinWeights:
    edges: np.ndarray
    weights: np.ndarray
    counts: np.ndarray = field(default=None)

    def bin_of(self, target) -> np.ndarray:
        """Bin index per target; values outside the fitted range clamp to the end bins."""
        idx = np.searchsorted(self.edges[1:-1], np.asarray(target, dtype=np.float64), side="right")
        return idx

    def weight(self, target) -> float:
        return float(self.weights[self.bin_of(target)])


def fit_bins(targets: Sequence[float], bins: int = 10) -> BinWeights:
    """Equal-width bins over the training range, weights inverse to bin counts.

    Empty bins get weight 0; nonempty ones are scaled so the count-weighted
    mean weight is exactly 1.
    """
    t = np.asarray(targets, dtype=np.float64)
    if bins < 2:
        raise ValueError("need at least 2 bins")
    lo, hi = float(t.min()), float(t.max())
    if not hi > lo:
        raise TrainingError("cannot fit bins to constant targets")
    edges = np.linspace(lo, hi, bins + 1)
    proto = BinWeights(edges, np.zeros(bins))
    counts = np.bincount(proto.bin_of(t), minlength=bins)
    nonempty = counts > 0
    weights = np.zeros(bins)
    weights[nonempty] = len(t) / (nonempty.sum() * counts[nonempty])
    return BinWeights(edges, weights, counts)


def wmse_loss(prediction: float, target: float, bin_weights: BinWeights | None) -> tuple[float, float]:
    """Squared error scaled by the target's bin weight; plain MSE when ``bin_weights`` is None."""
    w = 1.0 if bin_weights is None else bin_weights.weight(target)
    err = prediction - target
    return w * err * err, 2.0 * w * err


# -- optimizer ---------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay over a MilNet's parameter arrays.

    Moments and the update arithmetic are float64; the result is written back
    in the parameters' storage dtype.
    """

    def __init__(self, model: MilNet, lr=1e-4, weight_decay=1e-5, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros(a.shape) for a in model.arrays()]
        self.v = [np.zeros(a.shape) for a in model.arrays()]

    def step(self, model: MilNet, grads: MilNet) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.b1**self.step_count
        bc2 = 1.0 - self.b2**self.step_count
        for p, g, m, v in zip(model.arrays(), grads.arrays(), self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.lr == 0.0:
                continue
            p64 = p.astype(np.float64)
            p64 -= self.lr * ((m / bc1) / (np.sqrt(v / bc2) + self.eps) + self.weight_decay * p64)
            p[...] = p64


# -- training loop -----------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float
    selected: bool = False


@dataclass
class TrainResult:
    model: MilNet
    log: list[EpochRecord]
    best_epoch: int

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_metric", "selected"])
        for r in self.log:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_metric), int(r.selected)])
        return buf.getvalue()


def _targets(bags: Sequence[EmbeddingBag], task: str, split: str) -> list:
    out = []
    for bag in bags:
        y = bag.labels.target(task)
        if y is None:
            raise TrainingError(f"{split} bag {bag.slide_id!r} has no {task} label")
        out.append(y)
    return out


def bag_loss(model, x, y, cfg: TrainConfig, weights):
    """Forward + loss + backward for one bag; returns (loss, grads)."""
    cache = forward(model, x)
    if isinstance(model, MilClassifier):
        cw = 1.0 if weights is None else float(weights[y])
        loss, d_out = hinge_loss(cache.out, y, cw)
    else:
        loss, d = wmse_loss(float(cache.out[0]), y, weights)
        d_out = np.array([d])
    return loss, backward(model, cache, d_out)


def evaluate(model: MilNet, xs, ys) -> float:
    """Validation balanced accuracy (classifier) or RMSE (regressor)."""
    if isinstance(model, MilClassifier):
        preds = [predict_label(softmax(forward(model, x).out)) for x in xs]
        return metrics.classification_report(metrics.confusion(preds, ys)).balanced_accuracy
    preds = [float(forward(model, x).out[0]) for x in xs]
    return metrics.rmse(preds, ys)


def train_bags(
    train: Sequence[EmbeddingBag],
    valid: Sequence[EmbeddingBag],
    task: str,
    cfg: TrainConfig,
) -> TrainResult:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if not train or not valid:
        raise TrainingError("need non-empty train and valid splits")
    classify = task == "mir"
    if classify != (cfg.loss == "hinge"):
        raise ValueError(f"loss {cfg.loss!r} does not fit task {task!r}")
    y_train = _targets(train, task, "train")
    y_valid = _targets(valid, task, "valid")
    dim = train[0].dim
    if any(b.dim != dim for b in list(train) + list(valid)):
        raise TrainingError("bags have inconsistent feature dims")
    x_train = [b.features.astype(np.float64) for b in train]
    x_valid = [b.features.astype(np.float64) for b in valid]

    cls = MilClassifier if classify else MilRegressor
    model = cls.init(dim, cfg.hidden, cfg.attention_dim, cfg.seed)
    weights = None
    if classify:
        if cfg.class_weighting:
            weights = class_weights(y_train)
            log.info("class weights %s", weights.tolist())
    else:
        # start the head at the training mean so lr-sized steps need not walk the output there
        model.head_b[0] = np.mean(y_train)
        if cfg.loss == "wmse":
            weights = fit_bins(y_train, cfg.bins)

    opt = AdamW(model, cfg.learning_rate, cfg.weight_decay)
    higher_better = classify
    best_metric = -math.inf if higher_better else math.inf
    best_model, best_epoch = model.copy(), 0
    records: list[EpochRecord] = []
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = Stream(cfg.seed, 2, epoch).permutation(len(x_train))
        losses = []
        for i in order:
            loss, grads = bag_loss(model, x_train[i], y_train[i], cfg, weights)
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} on bag {train[i].slide_id!r}; try a lower learning rate"
                )
            opt.step(model, grads)
            losses.append(loss)
        train_loss = math.fsum(losses) / len(losses)
        val = evaluate(model, x_valid, y_valid)
        if not model.is_finite() or not math.isfinite(val):
            raise TrainingError(f"training diverged at epoch {epoch} (val metric {val})")
        records.append(EpochRecord(epoch, train_loss, val))
        improved = val > best_metric if higher_better else val < best_metric
        if improved:
            best_metric, best_model, best_epoch, stale = val, model.copy(), epoch, 0
        else:
            stale += 1
        log.info("epoch %d train_loss %.6f val %.6f%s", epoch, train_loss, val, " *" if improved else "")
        if stale >= cfg.patience:
            log.info("no improvement for %d epochs, stopping", stale)
            break
    for r in records:
        r.selected = r.epoch == best_epoch
    return TrainResult(best_model, records, best_epoch)


def train(manifest: DatasetManifest, task: str, cfg: TrainConfig) -> TrainResult:
    return train_bags(manifest.load_split("train"), manifest.load_split("valid"), task, cfg)
