"""numpy implementations of the hot kernels.

Must stay numerically interchangeable with ``_kernels.pyx``: the integer
kernels agree exactly, the float kernels to libm rounding.
"""
import numpy as np


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gate_forward(zv, zu, w, bw):
    """tanh/sigmoid gating and the attention score ``e = (t*s) @ w + bw``."""
    t = np.tanh(zv)
    s = _sigmoid(zu)
    e = (t * s) @ w + bw
    return t, s, e


def gate_backward(de, t, s, w):
    dg = np.multiply.outer(de, w)
    dzv = dg * s * (1.0 - t * t)
    dzu = dg * t * s * (1.0 - s)
    dw = (t * s).T @ de
    return dzv, dzu, dw


def saturation_histogram(rgb):
    """HSV saturation on the 0..255 scale, rounded half up, plus its histogram."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    mx = rgb.max(axis=2).astype(np.int64)
    mn = rgb.min(axis=2).astype(np.int64)
    safe = np.where(mx == 0, 1, mx)
    sat = np.where(mx == 0, 0, (255 * (mx - mn) + mx // 2) // safe).astype(np.uint8)
    hist = np.bincount(sat.ravel(), minlength=256).astype(np.int64)
    return sat, hist


def tile_counts(mask, tile_px, cols, rows):
    """Number of nonzero mask pixels inside each ``tile_px`` square of the grid."""
    m = np.asarray(mask)[: rows * tile_px, : cols * tile_px] != 0
    return m.reshape(rows, tile_px, cols, tile_px).sum(axis=(1, 3), dtype=np.int64)
