"""Attention heatmaps, top-k tile export and aggregated-feature tables."""
from __future__ import annotations

import csv
import io
import logging
import os
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .net import MilClassifier, MilNet, forward, predict_label, softmax, top_k_patches
from .store import EmbeddingBag
from .tiler import tile_filename

log = logging.getLogger(__name__)

NEUTRAL_GRAY = (128, 128, 128)


@dataclass
class Heatmap:
    raster: np.ndarray  # rows*upscale x cols*upscale x 3, uint8
    normalized: np.ndarray  # per-patch weights after min-max scaling
    warning: str | None = None

    def save(self, path: str | os.PathLike) -> None:
        Image.fromarray(self.raster).save(path)


def colormap(v: np.ndarray) -> np.ndarray:
    """Linear blue (0) to red (1): red rises and blue falls with ``v``."""
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([255.0 * v, np.zeros_like(v), 255.0 * (1.0 - v)], axis=-1)
    return np.rint(rgb).astype(np.uint8)


def render_heatmap(
    weights: np.ndarray,
    coords: np.ndarray,
    grid_shape: tuple[int, int] | None = None,
    upscale: int = 1,
) -> Heatmap:
    """One cell per tile, colored by the slide's min-max-normalized weight.

    ``grid_shape`` is ``(cols, rows)``; by default the smallest grid holding
    every coordinate.  Cells without a patch stay neutral gray.
    """
    w = np.asarray(weights, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if len(w) != len(coords):
        raise ValueError("one weight per coordinate required")
    if upscale < 1:
        raise ValueError("upscale must be >= 1")
    if grid_shape is None:
        grid_shape = (int(coords[:, 0].max()) + 1, int(coords[:, 1].max()) + 1)
    cols, rows = grid_shape
    if (coords < 0).any() or (coords[:, 0] >= cols).any() or (coords[:, 1] >= rows).any():
        raise ValueError("coordinates fall outside the grid")
    lo, hi = w.min(), w.max()
    warning = None
    if hi > lo:
        norm = (w - lo) / (hi - lo)
    else:
        warning = "all attention weights equal; every patch drawn at 0.5"
        log.warning(warning)
        norm = np.full_like(w, 0.5)
    cells = np.empty((rows, cols, 3), dtype=np.uint8)
    cells[...] = NEUTRAL_GRAY
    cells[coords[:, 1], coords[:, 0]] = colormap(norm)
    raster = np.repeat(np.repeat(cells, upscale, axis=0), upscale, axis=1)
    return Heatmap(raster, norm, warning)


def export_topk(
    bag: EmbeddingBag,
    weights: np.ndarray,
    tile_dir: str | os.PathLike,
    out_dir: str | os.PathLike,
    k: int = 10,
) -> list[Path]:
    """Copy the ``k`` most-attended tiles and write ``topk.csv`` (rank,col,row,weight)."""
    w = np.asarray(weights, dtype=np.float64)
    idx = top_k_patches(w, k)
    tile_dir, out_dir = Path(tile_dir), Path(out_dir)
    sources = [tile_dir / tile_filename(*bag.coords[i]) for i in idx]
    missing = [tuple(int(v) for v in bag.coords[i]) for i, src in zip(idx, sources) if not src.is_file()]
    if missing:
        raise FileNotFoundError(f"missing tiles for coords {missing} in {tile_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    with open(out_dir / "topk.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rank", "col", "row", "weight"])
        for rank, (i, src) in enumerate(zip(idx, sources), 1):
            col, row = (int(v) for v in bag.coords[i])
            dst = out_dir / f"rank{rank:02d}_{tile_filename(col, row)}"
            shutil.copyfile(src, dst)
            paths.append(dst)
            writer.writerow([rank, col, row, repr(float(w[i]))])
    return paths


@dataclass
class FeatureRow:
    slide_id: str
    label: int | float | None
    pred: int | float
    features: np.ndarray


def export_features(model: MilNet, bags: Sequence[EmbeddingBag], branch: int = 1, task: str = "mir") -> list[FeatureRow]:
    """Aggregated embedding ``M[branch]`` per slide, sorted by slide id."""
    if not 0 <= branch < model.n_branches:
        raise ValueError(f"branch {branch} out of range for a {model.n_branches}-branch model")
    rows = []
    for bag in sorted(bags, key=lambda b: b.slide_id):
        cache = forward(model, bag)
        if isinstance(model, MilClassifier):
            pred = predict_label(softmax(cache.out))
        else:
            pred = float(cache.out[0])
        rows.append(FeatureRow(bag.slide_id, bag.labels.target(task), pred, cache.M[branch].copy()))
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def features_csv(rows: Sequence[FeatureRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    h = len(rows[0].features) if rows else 0
    w.writerow(["slide_id", "label", "pred"] + [f"f{i}" for i in range(h)])
    for r in rows:
        w.writerow([r.slide_id, _fmt(r.label), _fmt(r.pred)] + [repr(float(x)) for x in r.features])
    return buf.getvalue()


def parse_features_csv(text: str) -> list[tuple[str, str, str, np.ndarray]]:
    reader = csv.reader(io.StringIO(text))
    next(reader)
    return [(r[0], r[1], r[2], np.array([float(x) for x in r[3:]])) for r in reader]
