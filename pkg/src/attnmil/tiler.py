"""Non-overlapping tiling of a raster with a saturation-based tissue mask."""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from . import kernels

log = logging.getLogger(__name__)

Image.MAX_IMAGE_PIXELS = None


@dataclass(frozen=True)
class TileGrid:
    cols: int
    rows: int
    tile_px: int = 224
    level_scale: float = 1.0
    base_mpp: float = 0.263

    @property
    def n_tiles(self) -> int:
        return self.cols * self.rows

    def sidecar(self) -> str:
        return f"{self.cols} {self.rows} {self.tile_px} {self.level_scale!r}\n"

    @classmethod
    def from_sidecar(cls, text: str) -> "TileGrid":
        cols, rows, tile_px, scale = text.split()
        return cls(int(cols), int(rows), int(tile_px), float(scale))


@dataclass
class TissueMask:
    keep: np.ndarray  # rows x cols (numpy orientation)
    threshold: float
    otsu_level: int
    fractions: np.ndarray = field(repr=False, default=None)
    warning: str | None = None

    @property
    def n_kept(self) -> int:
        return int(self.keep.sum())


def level_size(width: int, height: int, level_scale: float) -> tuple[int, int]:
    return int(math.floor(width / level_scale)), int(math.floor(height / level_scale))


def plan_grid(width: int, height: int, tile_px: int = 224, level_scale: float = 1.0) -> TileGrid:
    """Floor grid of whole tiles over the image at ``base / level_scale``."""
    if tile_px < 1 or level_scale < 1:
        raise ValueError("tile_px must be positive and level_scale >= 1")
    lw, lh = level_size(width, height, level_scale)
    if lw < tile_px or lh < tile_px:
        raise ValueError(f"image {width}x{height} at scale {level_scale} is smaller than one {tile_px}px tile")
    return TileGrid(lw // tile_px, lh // tile_px, tile_px, float(level_scale))


def downsample(image: np.ndarray, level_scale: float) -> np.ndarray:
    """Area-average downsample.  Integer factors use exact integer block means
    (rounded half up); other factors fall back to PIL's box filter."""
    img = np.asarray(image, dtype=np.uint8)
    if level_scale == 1:
        return img
    h, w = img.shape[:2]
    lw, lh = level_size(w, h, level_scale)
    k = int(level_scale)
    if k == level_scale:
        block = img[: lh * k, : lw * k].reshape(lh, k, lw, k, 3).astype(np.int64)
        total = block.sum(axis=(1, 3))
        return ((total + k * k // 2) // (k * k)).astype(np.uint8)
    return np.asarray(Image.fromarray(img).resize((lw, lh), Image.BOX))


def otsu_level(hist: np.ndarray) -> int | None:
    """Threshold ``t`` maximizing between-class variance of ``<= t`` vs ``> t``.

    Returns None when the histogram has a single occupied level.  The first
    maximizing level wins.
    """
    hist = np.asarray(hist, dtype=np.float64)
    if np.count_nonzero(hist) < 2:
        return None
    levels = np.arange(len(hist), dtype=np.float64)
    w0 = np.cumsum(hist)
    s0 = np.cumsum(hist * levels)
    total, stotal = w0[-1], s0[-1]
    w1 = total - w0
    valid = (w0 > 0) & (w1 > 0)
    between = np.full(len(hist), -1.0)
    m0 = s0[valid] / w0[valid]
    m1 = (stotal - s0[valid]) / w1[valid]
    between[valid] = w0[valid] * w1[valid] * (m0 - m1) ** 2
    return int(np.argmax(between))


def build_tissue_mask(level_image: np.ndarray, grid: TileGrid, min_tissue_fraction: float = 0.10) -> TissueMask:
    """Keep tiles whose fraction of above-Otsu saturation pixels is at least
    ``min_tissue_fraction``.

    A single-valued saturation image has no Otsu split: it is all tissue if
    that value is nonzero and all background otherwise, with a warning.
    """
    img = np.asarray(level_image, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an 8-bit RGB image")
    sat, hist = kernels.saturation_histogram(img)
    level = otsu_level(hist)
    warning = None
    if level is None:
        only = int(np.flatnonzero(hist)[0])
        warning = f"uniform saturation ({only}); Otsu undefined, {'keeping' if only else 'dropping'} all tiles"
        log.warning(warning)
        level = -1 if only > 0 else 255
    counts = kernels.tile_counts(sat > level, grid.tile_px, grid.cols, grid.rows)
    fractions = counts / float(grid.tile_px * grid.tile_px)
    return TissueMask(fractions >= min_tissue_fraction, min_tissue_fraction, max(level, 0), fractions, warning)


def extract_tiles(
    level_image: np.ndarray, grid: TileGrid, mask: TissueMask | None = None, workers: int = 1
) -> Iterator[tuple[tuple[int, int], np.ndarray]]:
    """Yield ``((col, row), tile)`` for kept tiles in row-major order."""
    img = np.asarray(level_image)
    keep = np.ones((grid.rows, grid.cols), bool) if mask is None else mask.keep
    if keep.shape != (grid.rows, grid.cols):
        raise ValueError("mask does not match grid")
    cells = [(c, r) for r in range(grid.rows) for c in range(grid.cols) if keep[r, c]]
    t = grid.tile_px

    def cut(cell):
        c, r = cell
        return cell, img[r * t : (r + 1) * t, c * t : (c + 1) * t].copy()

    if workers <= 1:
        yield from map(cut, cells)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            yield from pool.map(cut, cells)


def tile_filename(col: int, row: int) -> str:
    return f"x{col}_y{row}.png"


def tile_image_file(
    path: str | os.PathLike,
    out_dir: str | os.PathLike,
    tile_px: int = 224,
    level_scale: float = 2.0,
    min_tissue_fraction: float = 0.10,
    workers: int = 1,
) -> tuple[TileGrid, TissueMask, int]:
    """Tile an image file into ``out_dir`` as PNGs plus a ``grid.txt`` sidecar."""
    with Image.open(path) as im:
        image = np.asarray(im.convert("RGB"))
    h, w = image.shape[:2]
    grid = plan_grid(w, h, tile_px, level_scale)
    level = downsample(image, level_scale)
    mask = build_tissue_mask(level, grid, min_tissue_fraction)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def save(item):
        (c, r), tile = item
        Image.fromarray(tile).save(out / tile_filename(c, r))

    tiles = extract_tiles(level, grid, mask, workers)
    if workers <= 1:
        n = sum(1 for _ in map(save, tiles))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            n = sum(1 for _ in pool.map(save, tiles))
    (out / "grid.txt").write_text(grid.sidecar())
    return grid, mask, n
