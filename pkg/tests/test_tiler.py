import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from attnmil.tiler import (
    TileGrid,
    build_tissue_mask,
    downsample,
    extract_tiles,
    otsu_level,
    plan_grid,
    tile_filename,
    tile_image_file,
)

MAGENTA = (255, 0, 255)
WHITE = (255, 255, 255)


def test_plan_grid_examples():
    g = plan_grid(1000, 500, 224, 1)
    assert (g.cols, g.rows, g.n_tiles) == (4, 2, 8)
    assert plan_grid(448, 448, 224, 2).n_tiles == 1
    g = plan_grid(100_000, 60_000, 224, 2)
    assert (g.cols, g.rows) == (223, 133)


@settings(max_examples=50, deadline=None)
@given(st.integers(224, 20_000), st.integers(224, 20_000), st.sampled_from([1.0, 2.0, 4.0]))
def test_plan_grid_floor_arithmetic(w, h, scale):
    if w // scale < 224 or h // scale < 224:
        with pytest.raises(ValueError):
            plan_grid(w, h, 224, scale)
        return
    g = plan_grid(w, h, 224, scale)
    assert g.cols == int(w // scale) // 224 and g.rows == int(h // scale) // 224


def test_plan_grid_rejects_small():
    with pytest.raises(ValueError):
        plan_grid(300, 300, 224, 2)


def test_sidecar_roundtrip():
    g = TileGrid(3, 5, 224, 2.0)
    assert g.sidecar() == "3 5 224 2.0\n"
    assert TileGrid.from_sidecar(g.sidecar()) == g


def half_magenta(cols=4, rows=2, t=224):
    img = np.full((rows * t, cols * t, 3), WHITE, np.uint8)
    img[:, : cols * t // 2] = MAGENTA
    return img


def test_half_magenta_keeps_exactly_the_magenta_side():
    img = half_magenta()
    grid = plan_grid(img.shape[1], img.shape[0])
    mask = build_tissue_mask(img, grid)
    want = np.zeros((2, 4), bool)
    want[:, :2] = True
    assert np.array_equal(mask.keep, want)
    assert mask.warning is None


def test_blob_tile_kept_neighbors_dropped():
    t = 224
    img = np.full((3 * t, 3 * t, 3), WHITE, np.uint8)
    img[t : 2 * t, t : 2 * t] = (200, 40, 90)
    img[2 * t : 2 * t + 10, t : 2 * t] = (200, 40, 90)  # ~4.5% spill into the tile below
    mask = build_tissue_mask(img, plan_grid(3 * t, 3 * t))
    want = np.zeros((3, 3), bool)
    want[1, 1] = True
    assert np.array_equal(mask.keep, want)
    assert mask.fractions[2, 1] == pytest.approx(10 / t)


def test_uniform_images():
    white = np.full((224, 448, 3), 255, np.uint8)
    m = build_tissue_mask(white, plan_grid(448, 224))
    assert not m.keep.any() and m.warning
    pink = np.full((224, 448, 3), (250, 100, 180), np.uint8)
    m = build_tissue_mask(pink, plan_grid(448, 224))
    assert m.keep.all() and m.warning


def test_otsu_two_level_histogram():
    h = np.zeros(256)
    h[10], h[200] = 5, 5
    lvl = otsu_level(h)
    assert 10 <= lvl < 200
    assert otsu_level(np.eye(256)[7]) is None


def test_extract_tiles_examples_and_pixels():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (224, 448, 3), dtype=np.uint8)
    grid = plan_grid(448, 224)
    tiles = list(extract_tiles(img, grid))
    assert [c for c, _ in tiles] == [(0, 0), (1, 0)]
    assert np.array_equal(tiles[1][1], img[:, 224:448])
    mask = build_tissue_mask(np.full((224, 448, 3), 255, np.uint8), grid)
    assert list(extract_tiles(img, grid, mask)) == []


def test_parallel_matches_sequential():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (224 * 3, 224 * 5, 3), dtype=np.uint8)
    grid = plan_grid(img.shape[1], img.shape[0])
    seq = list(extract_tiles(img, grid, workers=1))
    par = list(extract_tiles(img, grid, workers=4))
    assert [c for c, _ in seq] == [c for c, _ in par]
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(seq, par))
    rects = {(c * 224, r * 224) for (c, r), _ in seq}
    assert len(rects) == len(seq) == grid.n_tiles


def test_downsample_integer_factor_is_block_mean():
    img = np.array([[[0, 0, 0], [255, 255, 255]], [[1, 2, 3], [4, 5, 6]]], np.uint8)
    out = downsample(img, 2)
    # (0+255+1+4 + 2) // 4 = 65
    assert out.shape == (1, 1, 3) and out[0, 0].tolist() == [65, 66, 66]


def test_tile_image_file_writes_pngs(tmp_path):
    img = half_magenta(4, 2)
    big = np.repeat(np.repeat(img, 2, axis=0), 2, axis=1)
    Image.fromarray(big).save(tmp_path / "slide.png")
    grid, mask, n = tile_image_file(tmp_path / "slide.png", tmp_path / "tiles", level_scale=2)
    assert (grid.cols, grid.rows, n) == (4, 2, 4)
    names = sorted(p.name for p in (tmp_path / "tiles").glob("*.png"))
    assert names == sorted(tile_filename(c, r) for c in (0, 1) for r in (0, 1))
    assert (tmp_path / "tiles" / "grid.txt").read_text() == "4 2 224 2.0\n"
    tile = np.asarray(Image.open(tmp_path / "tiles" / "x1_y0.png"))
    assert np.array_equal(tile, img[:224, 224:448])
