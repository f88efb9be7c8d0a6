"""Compiled vs numpy kernels, plus one full forward/backward at default size.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from attnmil import kernels
from attnmil.net import MilClassifier, backward, forward


def cases(rng):
    n, a = 100, 256
    zv, zu = rng.standard_normal((n, a)), rng.standard_normal((n, a))
    w = rng.standard_normal(a)
    t, s, _ = kernels.gate_forward(zv, zu, w, 0.1)
    de = rng.standard_normal(n)
    img = rng.integers(0, 256, (1792, 1792, 3), dtype=np.uint8)
    sat, _ = kernels.saturation_histogram(img)
    mask = (sat > 100).astype(np.uint8)
    model = MilClassifier.init(64, 512, 256, seed=0)
    X = rng.standard_normal((n, 64))

    def step():
        backward(model, forward(model, X), [1.0, -1.0])

    return {
        "gate_forward N=100 A=256": lambda: kernels.gate_forward(zv, zu, w, 0.1),
        "gate_backward N=100 A=256": lambda: kernels.gate_backward(de, t, s, w),
        "saturation_histogram 1792^2": lambda: kernels.saturation_histogram(img),
        "tile_counts 8x8 tiles": lambda: kernels.tile_counts(mask, 224, 8, 8),
        "forward+backward D=64 H=512 A=256 N=100": step,
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    start = kernels.BACKEND
    results = {}
    for backend in ("python", "cython"):
        try:
            kernels.use_backend(backend)
        except ImportError:
            print("compiled extension not built; skipping cython backend")
            continue
        for name, fn in cases(np.random.default_rng(0)).items():
            fn()
            results.setdefault(name, {})[backend] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    kernels.use_backend(start)
    print(f"{'kernel':42s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, r in results.items():
        py, cy = r.get("python"), r.get("cython")
        speed = f"{py / cy:7.1f}x" if py and cy else "-"
        print(f"{name:42s} {1e3 * py:10.3f} {1e3 * cy if cy else float('nan'):10.3f} {speed:>8s}")


if __name__ == "__main__":
    main()
