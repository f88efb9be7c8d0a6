"""Planted-signal bags and a deterministic stand-in for a patch encoder.

Background instances are isotropic Gaussian noise.  A planted instance is a
background draw shifted by ``signal_shift`` on its first ``signal_dims``
features; a bag is positive iff it contains at least one.  Every bag draws
from its own PRNG stream, so bag ``i`` is the same regardless of how many
bags are generated or in which order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .rng import Stream
from .store import EmbeddingBag, LabelSet

_STREAM_BAGS = 0
_STREAM_LABELS = 1
_STREAM_REGRESSION = 4


@dataclass(frozen=True)
class SyntheticSpec:
    n_bags: int = 200
    instances_per_bag: int = 100
    dim: int = 64
    pos_fraction_range: tuple[float, float] = (0.05, 0.15)
    signal_shift: float = 1.0
    signal_dims: int = 8
    noise_sigma: float = 1.0
    seed: int = 42

    def __post_init__(self):
        lo, hi = self.pos_fraction_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"pos_fraction_range must satisfy 0 <= lo <= hi <= 1, got {self.pos_fraction_range}")
        if self.n_bags < 1 or self.instances_per_bag < 1 or self.dim < 1:
            raise ValueError("n_bags, instances_per_bag and dim must be positive")
        if not 0 < self.signal_dims <= self.dim:
            raise ValueError("signal_dims must be in 1..dim")


def grid_coords(n: int) -> np.ndarray:
    """Lay ``n`` instances out row-major on the smallest square grid that fits."""
    side = math.ceil(math.sqrt(n))
    idx = np.arange(n)
    return np.stack([idx % side, idx // side], axis=1).astype(np.int32)


def _planted_bag(spec: SyntheticSpec, index: int, fraction_range, force_positive: bool | None):
    """Features and planted indices for bag ``index``."""
    st = Stream(spec.seed, _STREAM_BAGS, index)
    n, d = spec.instances_per_bag, spec.dim
    feats = st.normal(n * d, spec.noise_sigma).reshape(n, d)
    lo, hi = fraction_range
    frac = float(st.uniform(1, lo, hi)[0])
    if force_positive is False:
        k = 0
    else:
        k = int(round(frac * n))
        if force_positive:
            k = max(1, k)
    planted = np.sort(st.sample(n, k))
    feats[planted, : spec.signal_dims] += spec.signal_shift
    return feats, planted


def generate_bags(spec: SyntheticSpec) -> tuple[list[EmbeddingBag], list[np.ndarray]]:
    """Balanced positive/negative bags (within one) with ``mir_binary`` labels."""
    labels = np.arange(spec.n_bags) % 2
    labels = labels[Stream(spec.seed, _STREAM_LABELS).permutation(spec.n_bags)]
    bags, planted = [], []
    coords = grid_coords(spec.instances_per_bag)
    for i, y in enumerate(labels):
        feats, idx = _planted_bag(spec, i, spec.pos_fraction_range, bool(y))
        bags.append(EmbeddingBag(f"syn{i:05d}", coords, feats, LabelSet(mir_binary=int(y))))
        planted.append(idx)
    return bags, planted


def affine_rule(a: float = 98.6, b: float = 4.0, sigma: float = 0.2) -> Callable:
    """``target = a + b * p (+ noise)``; returns ``rule(p, stream) -> (noisy, clean)``."""

    def rule(p: float, st: Stream | None) -> tuple[float, float]:
        clean = a + b * p
        noise = 0.0 if st is None or sigma == 0 else float(st.normal(1, sigma)[0])
        return clean + noise, clean

    return rule


REGRESSION_DEFAULTS = SyntheticSpec(n_bags=500, pos_fraction_range=(0.0, 1.0))


@dataclass
class RegressionBags:
    bags: list[EmbeddingBag]
    planted: list[np.ndarray]
    fractions: np.ndarray
    clean_targets: np.ndarray


def generate_regression_bags(
    spec: SyntheticSpec = REGRESSION_DEFAULTS,
    target_rule: Callable | None = None,
    label: str = "t_max",
) -> RegressionBags:
    """Bags whose target is a function of their planted fraction.

    The planted fraction ``p`` of each bag is drawn uniformly from
    ``spec.pos_fraction_range``; the stored label is the noisy target, the
    noiseless value is returned alongside.
    """
    if label not in ("t_max", "wbc"):
        raise ValueError("label must be 't_max' or 'wbc'")
    rule = target_rule or affine_rule()
    coords = grid_coords(spec.instances_per_bag)
    bags, planted, fracs, clean = [], [], [], []
    for i in range(spec.n_bags):
        feats, idx = _planted_bag(spec, i, spec.pos_fraction_range, None)
        p = len(idx) / spec.instances_per_bag
        noisy, target = rule(p, Stream(spec.seed, _STREAM_REGRESSION, i))
        bags.append(EmbeddingBag(f"reg{i:05d}", coords, feats, LabelSet(**{label: noisy})))
        planted.append(idx)
        fracs.append(p)
        clean.append(target)
    return RegressionBags(bags, planted, np.array(fracs), np.array(clean))


def mock_embed(tile: np.ndarray, dim: int = 64) -> np.ndarray:
    """Pixel-statistics embedding of an RGB tile, zero-padded or cut to ``dim``.

    Layout: per-channel mean, std, min, max (12 values), then the mean of each
    channel over the four 2x2 blocks (12 values, block-major: top-left,
    top-right, bottom-left, bottom-right).  Intensities are scaled to [0, 1].
    """
    x = np.asarray(tile, dtype=np.float64) / 255.0
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 tile, got shape {x.shape}")
    flat = x.reshape(-1, 3)
    stats = [flat.mean(axis=0), flat.std(axis=0), flat.min(axis=0), flat.max(axis=0)]
    h2, w2 = x.shape[0] // 2, x.shape[1] // 2
    for rows in (slice(0, h2), slice(h2, None)):
        for cols in (slice(0, w2), slice(w2, None)):
            stats.append(x[rows, cols].reshape(-1, 3).mean(axis=0))
    vec = np.concatenate(stats)
    out = np.zeros(dim)
    n = min(dim, len(vec))
    out[:n] = vec[:n]
    return out
