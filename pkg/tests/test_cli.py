import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from attnmil.cli import run
from attnmil.store import load_bag


def pipeline(d, seed=1):
    d.mkdir(parents=True, exist_ok=True)
    steps = [
        ["synth", "--bags", "20", "--instances", "12", "--dim", "8", "--seed", str(seed), "--out", str(d / "bags")],
        ["split", "--dir", str(d / "bags"), "--frac", "0.6:0.2:0.2", "--seed", str(seed)],
        ["train", "--manifest", str(d / "bags" / "manifest.tsv"), "--hidden", "8", "--attn-dim", "4",
         "--epochs", "3", "--lr", "1e-3", "--seed", str(seed), "--out", str(d / "m.milw")],
        ["eval", "--model", str(d / "m.milw"), "--manifest", str(d / "bags" / "manifest.tsv"),
         "--csv", str(d / "eval.csv"), "--report", str(d / "eval.txt")],
    ]
    for argv in steps:
        assert run(argv) == 0, argv
    return d


def test_full_pipeline(tmp_path, capsys):
    d = pipeline(tmp_path / "a")
    header = (d / "eval.csv").read_text().splitlines()[0]
    assert header == "n,auroc,balanced_acc,mcc,kappa,specificity,sensitivity,tn,fp,fn,tp"
    assert (d / "m.milw.epochs.csv").read_text().startswith("epoch,train_loss,val_metric,selected\n")
    assert len((d / "bags" / "planted.txt").read_text().splitlines()) == 20
    assert "Balanced Acc" in (d / "eval.txt").read_text()


def test_pipeline_is_byte_deterministic(tmp_path):
    a, b = pipeline(tmp_path / "a"), pipeline(tmp_path / "b")
    for name in ("eval.csv", "m.milw", "m.milw.epochs.csv", "bags/manifest.tsv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_heatmap_and_feature_export(tmp_path):
    d = pipeline(tmp_path)
    bag = sorted((d / "bags").glob("*.milb"))[0]
    assert run(["heatmap", "--model", str(d / "m.milw"), "--bag", str(bag), "--upscale", "2", "--out", str(d / "h.png")]) == 0
    assert np.asarray(Image.open(d / "h.png")).shape == (6, 8, 3)  # 12 patches on a 4x3 grid, upscale 2
    assert run(["export-features", "--model", str(d / "m.milw"), "--manifest", str(d / "bags" / "manifest.tsv"),
                "--out", str(d / "f.csv")]) == 0
    lines = (d / "f.csv").read_text().splitlines()
    assert len(lines) == 1 + 4 and lines[0].endswith(",f7")


def test_regression_pipeline(tmp_path):
    assert run(["synth", "--regression", "--bags", "20", "--instances", "10", "--dim", "4", "--signal-dims", "2", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "targets.txt").exists()
    assert run(["split", "--dir", str(tmp_path), "--frac", "0.6:0.2:0.2"]) == 0
    m = str(tmp_path / "r.milw")
    assert run(["train", "--manifest", str(tmp_path / "manifest.tsv"), "--task", "tmax", "--loss", "wmse",
                "--hidden", "4", "--attn-dim", "2", "--epochs", "2", "--out", m]) == 0
    assert run(["eval", "--model", m, "--manifest", str(tmp_path / "manifest.tsv"), "--task", "tmax",
                "--csv", str(tmp_path / "e.csv")]) == 0
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "n,rmse,mae,r2,slope"


def test_missing_split_exits_2(tmp_path, capsys):
    d = pipeline(tmp_path)
    text = (d / "bags" / "manifest.tsv").read_text()
    only_train = "\n".join(l for l in text.splitlines() if not l.endswith("\ttest")) + "\n"
    (d / "bags" / "m.tsv").write_text(only_train)
    assert run(["eval", "--model", str(d / "m.milw"), "--manifest", str(d / "bags" / "m.tsv")]) == 2
    assert "'test'" in capsys.readouterr().err


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run(["frobnicate"]) == 1
    assert run(["synth", "--out", str(tmp_path), "--bogus-flag"]) == 1
    assert "--bogus-flag" in capsys.readouterr().err
    assert run([]) == 1
    assert run(["train", "--manifest", "x", "--task", "mir", "--loss", "mse", "--out", "y"]) == 1


def test_data_errors_exit_2(tmp_path):
    assert run(["eval", "--model", str(tmp_path / "none.milw"), "--manifest", "x"]) == 2
    (tmp_path / "bad.milw").write_bytes(b"MILWgarbage")
    (tmp_path / "m.tsv").write_text("# seed=0\n")
    assert run(["eval", "--model", str(tmp_path / "bad.milw"), "--manifest", str(tmp_path / "m.tsv")]) == 2


def test_version(capsys):
    assert run(["--version"]) == 0
    assert "MILB 1, MILW 1" in capsys.readouterr().out


def _slide(path, cols=4, rows=2):
    img = np.full((rows * 448, cols * 448, 3), 255, np.uint8)
    rng = np.random.default_rng(0)
    img[:, : cols * 224] = rng.integers(0, 120, (rows * 448, cols * 224, 3))
    img[:, : cols * 224, 0] = 230
    Image.fromarray(img).save(path)


def test_tile_then_embed(tmp_path, capsys):
    _slide(tmp_path / "s.png")
    assert run(["tile", "--input", str(tmp_path / "s.png"), "--out-dir", str(tmp_path / "t"), "--threads", "2"]) == 0
    assert len(list((tmp_path / "t").glob("*.png"))) == 4
    args = ["embed", "--tiles", str(tmp_path / "t"), "--mir-stage", "2", "--slide-id", "S1"]
    assert run(args + ["--out", str(tmp_path / "a.milb")]) == 0
    assert run(args + ["--out", str(tmp_path / "b.milb"), "--threads", "3"]) == 0
    assert (tmp_path / "a.milb").read_bytes() == (tmp_path / "b.milb").read_bytes()
    bag = load_bag(tmp_path / "a.milb")
    assert bag.n_patches == 4 and bag.dim == 64 and bag.labels.mir_binary == 1
    assert bag.coords.tolist() == [[0, 0], [1, 0], [0, 1], [1, 1]]


def test_embed_errors(tmp_path):
    (tmp_path / "empty").mkdir()
    assert run(["embed", "--tiles", str(tmp_path / "empty"), "--out", str(tmp_path / "x.milb")]) == 2
    (tmp_path / "odd").mkdir()
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "odd" / "tile7.png")
    assert run(["embed", "--tiles", str(tmp_path / "odd"), "--out", str(tmp_path / "x.milb")]) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "attnmil", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("attnmil ")
