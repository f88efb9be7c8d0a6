"""Gated-attention MIL networks with hand-written backpropagation.

Both models share one computation.  For a bag ``X`` (N x D)::

    P        = relu(X @ W_proj + b_proj)                      N x H
    e[c]     = (tanh(P @ V[c] + bV[c]) * sigmoid(P @ U[c] + bU[c])) @ w[c] + bw[c]
    a[c]     = softmax over patches of e[c]
    M[c]     = a[c] @ P                                       H
    out[c]   = head_w[c] . M[c] + head_b[c]

The classifier has one branch per class and applies a softmax over ``out``
to get class probabilities; the regressor has a single branch whose output
is the prediction.  Parameters are stored as float32; every forward and
backward pass runs in float64.
"""
from __future__ import annotations

import io
import os
from dataclasses import dataclass, fields
from typing import BinaryIO, Iterator

import numpy as np

from . import kernels
from ._binio import CrcReader, CrcWriter
from .errors import FormatError, NonFiniteError
from .rng import Stream
from .store import EmbeddingBag

MILW_MAGIC = b"MILW"
MILW_VERSION = 1

_F64 = np.float64


@dataclass(eq=False)
class MilNet:
    W_proj: np.ndarray  # D x H
    b_proj: np.ndarray  # H
    V: np.ndarray  # C x H x A
    bV: np.ndarray  # C x A
    U: np.ndarray  # C x H x A
    bU: np.ndarray  # C x A
    w: np.ndarray  # C x A
    bw: np.ndarray  # C
    head_w: np.ndarray  # C x H
    head_b: np.ndarray  # C

    n_branches = 0
    classes_field = 0

    @property
    def dims(self) -> tuple[int, int, int]:
        d, h = self.W_proj.shape
        return d, h, self.V.shape[2]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f.name) for f in fields(self)]

    def map(self, fn) -> "MilNet":
        return type(self)(*[fn(a) for a in self.arrays()])

    def astype(self, dtype) -> "MilNet":
        return self.map(lambda a: a.astype(dtype))

    def copy(self) -> "MilNet":
        return self.map(np.copy)

    def zeros_like(self, dtype=_F64) -> "MilNet":
        return self.map(lambda a: np.zeros(a.shape, dtype=dtype))

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def blocks(self) -> Iterator[tuple[str, np.ndarray]]:
        """Parameter views in checkpoint declaration order."""
        yield "W_proj", self.W_proj
        yield "b_proj", self.b_proj
        for c in range(self.n_branches):
            yield f"V{c}", self.V[c]
            yield f"bV{c}", self.bV[c]
            yield f"U{c}", self.U[c]
            yield f"bU{c}", self.bU[c]
            yield f"w{c}", self.w[c]
            yield f"bw{c}", self.bw[c : c + 1]
        for c in range(self.n_branches):
            yield f"head_w{c}", self.head_w[c]
            yield f"head_b{c}", self.head_b[c : c + 1]

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def equals(self, other: "MilNet") -> bool:
        return type(self) is type(other) and all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.arrays(), other.arrays())
        )

    @classmethod
    def zeros(cls, d: int, h: int, a: int, dtype=np.float32) -> "MilNet":
        c = cls.n_branches
        z = lambda *shape: np.zeros(shape, dtype=dtype)  # noqa: E731
        return cls(z(d, h), z(h), z(c, h, a), z(c, a), z(c, h, a), z(c, a), z(c, a), z(c), z(c, h), z(c))

    @classmethod
    def init(cls, d: int, h: int = 512, a: int = 256, seed: int = 0) -> "MilNet":
        """Glorot-uniform matrices and zero biases; deterministic in ``seed``."""
        return init_params(cls, d, h, a, seed)


class MilClassifier(MilNet):
    """Two-class model with one attention branch per class."""

    n_branches = 2
    classes_field = 2


class MilRegressor(MilNet):
    """Single attention branch with a scalar linear head."""

    n_branches = 1
    classes_field = 0


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(cls: type[MilNet], d: int, h: int = 512, a: int = 256, seed: int = 0) -> MilNet:
    if min(d, h, a) < 1:
        raise ValueError(f"dims must be positive, got D={d} H={h} A={a}")
    model = cls.zeros(d, h, a)
    fans = {"W_proj": (d, h), "V": (h, a), "U": (h, a), "w": (a, 1), "head_w": (h, 1)}
    for idx, (name, view) in enumerate(model.blocks()):
        key = name.rstrip("0123456789")
        if key in fans:
            bound = glorot_bound(*fans[key])
            view[...] = Stream(seed, 3, idx).uniform(view.size, -bound, bound).reshape(view.shape)
    return model


# -- forward / backward ----------------------------------------------------------


@dataclass
class ForwardCache:
    X: np.ndarray
    Z: np.ndarray
    P: np.ndarray
    t: list[np.ndarray]
    s: list[np.ndarray]
    attention: np.ndarray  # C x N
    M: np.ndarray  # C x H
    out: np.ndarray  # C


@dataclass
class ClassifyResult:
    probs: np.ndarray
    logits: np.ndarray
    attention: np.ndarray
    M: np.ndarray
    cache: ForwardCache


@dataclass
class RegressResult:
    prediction: float
    attention: np.ndarray
    M: np.ndarray
    cache: ForwardCache


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max())
    return z / z.sum()


def _features(model: MilNet, bag) -> np.ndarray:
    x = bag.features if isinstance(bag, EmbeddingBag) else bag
    x = np.asarray(x, dtype=_F64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("bag features must be a non-empty N x D matrix")
    if x.shape[1] != model.W_proj.shape[0]:
        raise ValueError(f"bag dim {x.shape[1]} != model input dim {model.W_proj.shape[0]}")
    if not np.isfinite(x).all():
        raise NonFiniteError("bag features contain NaN or Inf")
    return x


def forward(model: MilNet, bag) -> ForwardCache:
    X = _features(model, bag)
    Z = X @ np.asarray(model.W_proj, _F64) + np.asarray(model.b_proj, _F64)
    P = np.maximum(Z, 0.0)
    C = model.n_branches
    ts, ss = [], []
    att = np.empty((C, X.shape[0]))
    M = np.empty((C, P.shape[1]))
    out = np.empty(C)
    for c in range(C):
        zv = P @ np.asarray(model.V[c], _F64) + model.bV[c]
        zu = P @ np.asarray(model.U[c], _F64) + model.bU[c]
        t, s, e = kernels.gate_forward(zv, zu, model.w[c], model.bw[c])
        att[c] = softmax(e)
        M[c] = att[c] @ P
        out[c] = np.dot(np.asarray(model.head_w[c], _F64), M[c]) + float(model.head_b[c])
        ts.append(t)
        ss.append(s)
    return ForwardCache(X, Z, P, ts, ss, att, M, out)


def forward_classify(model: MilClassifier, bag) -> ClassifyResult:
    cache = forward(model, bag)
    return ClassifyResult(softmax(cache.out), cache.out.copy(), cache.attention, cache.M, cache)


def forward_regress(model: MilRegressor, bag) -> RegressResult:
    cache = forward(model, bag)
    return RegressResult(float(cache.out[0]), cache.attention, cache.M, cache)


def backward(model: MilNet, cache: ForwardCache, d_out) -> MilNet:
    """Parameter gradients given ``d_out = dLoss/d(head outputs)``.

    ``d_out`` is the gradient with respect to the logits (classifier, length
    2) or the prediction (regressor, scalar).  Returns a model-shaped
    container of float64 gradients.
    """
    d_out = np.atleast_1d(np.asarray(d_out, dtype=_F64))
    g = model.zeros_like()
    P = cache.P
    dP = np.zeros_like(P)
    for c in range(model.n_branches):
        ds = d_out[c]
        g.head_w[c] = ds * cache.M[c]
        g.head_b[c] = ds
        dM = ds * np.asarray(model.head_w[c], _F64)
        a = cache.attention[c]
        dP += np.multiply.outer(a, dM)
        da = P @ dM
        de = a * (da - np.dot(a, da))
        dzv, dzu, dw = kernels.gate_backward(de, cache.t[c], cache.s[c], model.w[c])
        g.w[c] = dw
        g.bw[c] = de.sum()
        g.V[c] = P.T @ dzv
        g.bV[c] = dzv.sum(axis=0)
        g.U[c] = P.T @ dzu
        g.bU[c] = dzu.sum(axis=0)
        dP += dzv @ np.asarray(model.V[c], _F64).T + dzu @ np.asarray(model.U[c], _F64).T
    dZ = dP * (cache.Z > 0)
    g.W_proj = cache.X.T @ dZ
    g.b_proj = dZ.sum(axis=0)
    return g


def top_k_patches(attention: np.ndarray, k: int, branch: int | None = None) -> np.ndarray:
    """Indices of the ``k`` highest weights, descending; ties go to the lower index."""
    weights = np.asarray(attention, dtype=_F64)
    if weights.ndim == 2:
        weights = weights[0 if branch is None else branch]
    n = weights.shape[0]
    if not 0 < k <= n:
        raise ValueError(f"k={k} must be in 1..{n}")
    return np.argsort(-weights, kind="stable")[:k]


def predict_label(probs: np.ndarray) -> int:
    # argmax; an exact tie goes to class 0
    return int(probs[1] > probs[0])


# -- checkpoint ------------------------------------------------------------------


def write_model(model: MilNet, sink: BinaryIO) -> int:
    if not model.is_finite():
        raise NonFiniteError("refusing to checkpoint non-finite parameters")
    d, h, a = model.dims
    buf = io.BytesIO()
    w = CrcWriter(buf)
    w.write(MILW_MAGIC)
    w.u32(MILW_VERSION)
    for v in (d, h, a, model.classes_field):
        w.u32(v)
    for _, block in model.blocks():
        w.array(block, "<f4")
    n = w.finish()
    sink.write(buf.getvalue())
    return n


def read_model(source: BinaryIO) -> MilNet:
    r = CrcReader(source, "MILW")
    r.header(MILW_MAGIC, MILW_VERSION)
    d, h, a, classes = (r.u32() for _ in range(4))
    cls = {MilClassifier.classes_field: MilClassifier, MilRegressor.classes_field: MilRegressor}.get(classes)
    if cls is None or min(d, h, a) < 1:
        # unreadable header: the CRC cannot be checked, so report the bad field
        raise FormatError(f"MILW: invalid dims D={d} H={h} A={a} classes={classes}")
    c = cls.n_branches
    count = d * h + h + c * (2 * h * a + 3 * a + 1) + c * (h + 1)
    # read (bounded by the stream length) before allocating from header dims
    flat = r.array(count, "<f4")
    r.verify()
    model = cls.zeros(d, h, a)
    pos = 0
    for _, view in model.blocks():
        view[...] = flat[pos : pos + view.size].reshape(view.shape)
        pos += view.size
    if not model.is_finite():
        raise NonFiniteError("MILW: non-finite parameter payload")
    return model


def save_model(model: MilNet, path: str | os.PathLike) -> int:
    with open(path, "wb") as fh:
        return write_model(model, fh)


def load_model(path: str | os.PathLike) -> MilNet:
    with open(path, "rb") as fh:
        return read_model(fh)


def model_to_bytes(model: MilNet) -> bytes:
    buf = io.BytesIO()
    write_model(model, buf)
    return buf.getvalue()


def model_from_bytes(data: bytes) -> MilNet:
    return read_model(io.BytesIO(data))
