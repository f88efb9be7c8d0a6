"""Backend selection for the hot kernels.

The compiled ``_kernels`` extension is used when it imports; otherwise (or
when ``ATTNMIL_BACKEND=python``) the numpy versions take over.  ``BACKEND``
names whichever one is active.
"""
import logging
import os

import numpy as np

from . import _kernels_py

log = logging.getLogger(__name__)

_impl = _kernels_py
BACKEND = "python"

if os.environ.get("ATTNMIL_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        log.debug("compiled kernels unavailable, using numpy fallback")
    else:
        _impl = _compiled
        BACKEND = "cython"


def use_backend(name):
    """Switch backends at runtime (benchmarks and equivalence tests)."""
    global _impl, BACKEND
    if name == "python":
        _impl, BACKEND = _kernels_py, "python"
    elif name == "cython":
        from . import _kernels as compiled

        _impl, BACKEND = compiled, "cython"
    else:
        raise ValueError(f"unknown backend {name!r}")


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def gate_forward(zv, zu, w, bw):
    return _impl.gate_forward(_f64(zv), _f64(zu), _f64(w), float(bw))


def gate_backward(de, t, s, w):
    return _impl.gate_backward(_f64(de), _f64(t), _f64(s), _f64(w))


def saturation_histogram(rgb):
    return _impl.saturation_histogram(np.ascontiguousarray(rgb, dtype=np.uint8))


def tile_counts(mask, tile_px, cols, rows):
    return _impl.tile_counts(np.ascontiguousarray(mask, dtype=np.uint8), int(tile_px), int(cols), int(rows))
