"""Command-line entry point: ``attnmil <subcommand> [flags]``.

Exit status: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__, metrics
from .errors import DataError
from .net import MILW_VERSION, MilClassifier, forward, load_model, predict_label, save_model, softmax
from .store import MILB_VERSION, DatasetManifest, EmbeddingBag, LabelSet, load_bag, make_split, save_bag
from .synthetic import SyntheticSpec, affine_rule, generate_bags, generate_regression_bags, mock_embed
from .tiler import TileGrid, tile_image_file
from .trainer import TrainConfig, train
from .viz import export_features, export_topk, features_csv, render_heatmap

log = logging.getLogger("attnmil")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
_TILE_RE = re.compile(r"^x(\d+)_y(\d+)\.png$")
_TASK_LABEL = {"wbc": "wbc", "tmax": "t_max"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _pair(text: str, sep=":") -> list[float]:
    try:
        return [float(v) for v in text.split(sep)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected numbers separated by '{sep}', got {text!r}") from None


# -- subcommands -------------------------------------------------------------------


def cmd_tile(a) -> int:
    grid, mask, n = tile_image_file(a.input, a.out_dir, a.tile, a.scale, a.min_tissue, a.threads)
    print(f"{n} of {grid.n_tiles} tiles kept ({grid.cols}x{grid.rows}, otsu level {mask.otsu_level})")
    return EXIT_OK


def _tile_files(tile_dir: Path) -> list[tuple[int, int, Path]]:
    found = []
    for p in sorted(tile_dir.iterdir()):
        if p.suffix.lower() != ".png":
            continue
        m = _TILE_RE.match(p.name)
        if not m:
            raise DataError(f"malformed tile filename {p.name!r} (expected x<col>_y<row>.png)")
        found.append((int(m.group(1)), int(m.group(2)), p))
    if not found:
        raise DataError(f"no tiles in {tile_dir}")
    found.sort(key=lambda t: (t[1], t[0]))
    return found


def embed_directory(tile_dir, dim: int = 64, slide_id: str | None = None, labels: LabelSet | None = None, workers: int = 1):
    """Mock-embed every tile in grid (row-major) order into one bag."""
    tile_dir = Path(tile_dir)
    if not tile_dir.is_dir():
        raise DataError(f"tile directory {tile_dir} does not exist")
    tiles = _tile_files(tile_dir)

    def embed_one(item):
        with Image.open(item[2]) as im:
            return mock_embed(np.asarray(im.convert("RGB")), dim)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            feats = list(pool.map(embed_one, tiles))
    else:
        feats = [embed_one(t) for t in tiles]
    coords = np.array([(c, r) for c, r, _ in tiles], dtype=np.int32)
    return EmbeddingBag(slide_id or tile_dir.name, coords, np.stack(feats), labels or LabelSet())


def cmd_embed(a) -> int:
    labels = LabelSet(mir_stage=a.mir_stage, mir_binary=a.mir_binary, wbc=a.wbc, t_max=a.tmax)
    bag = embed_directory(a.tiles, a.dim, a.slide_id, labels, a.threads)
    save_bag(bag, a.out)
    print(f"wrote {bag.n_patches} x {bag.dim} bag {bag.slide_id!r} to {a.out}")
    return EXIT_OK


def cmd_synth(a) -> int:
    lo, hi = a.pos_frac
    spec = SyntheticSpec(
        n_bags=a.bags,
        instances_per_bag=a.instances,
        dim=a.dim,
        pos_fraction_range=(lo, hi),
        signal_shift=a.shift,
        signal_dims=a.signal_dims,
        noise_sigma=a.noise,
        seed=a.seed,
    )
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = None
    if a.regression:
        rb = generate_regression_bags(spec, affine_rule(*a.rule), _TASK_LABEL[a.target])
        bags, planted = rb.bags, rb.planted
        extra = "".join(f"{b.slide_id}\t{p!r}\t{t!r}\n" for b, p, t in zip(bags, rb.fractions, rb.clean_targets))
    else:
        bags, planted = generate_bags(spec)
    for bag in bags:
        save_bag(bag, out / f"{bag.slide_id}.milb")
    lines = [f"{b.slide_id}\t{','.join(str(int(i)) for i in idx)}\n" for b, idx in zip(bags, planted)]
    (out / "planted.txt").write_text("".join(lines))
    if extra is not None:
        (out / "targets.txt").write_text(extra)
    print(f"wrote {len(bags)} bags to {out}")
    return EXIT_OK


def cmd_split(a) -> int:
    d = Path(a.dir)
    files = sorted(d.glob("*.milb"))
    if not files:
        raise DataError(f"no .milb bags in {d}")
    out = Path(a.out) if a.out else d / "manifest.tsv"
    slides, paths = [], {}
    for f in files:
        bag = load_bag(f)
        slides.append((bag.slide_id, bag.labels.mir_binary))
        paths[bag.slide_id] = os.path.relpath(f, out.parent)
    manifest = make_split(slides, a.frac, a.seed, paths)
    manifest.save(out)
    counts = {s: len(manifest.split(s)) for s in ("train", "valid", "test")}
    print(f"wrote {out}: {counts}")
    return EXIT_OK


def cmd_train(a) -> int:
    loss = a.loss or ("hinge" if a.task == "mir" else "mse")
    if (a.task == "mir") != (loss == "hinge"):
        raise UsageError(f"--loss {loss} does not apply to --task {a.task}")
    cfg = TrainConfig(
        learning_rate=a.lr,
        weight_decay=a.weight_decay,
        max_epochs=a.epochs,
        patience=a.patience,
        seed=a.seed,
        class_weighting=a.class_weights,
        loss=loss,
        bins=a.bins,
        hidden=a.hidden,
        attention_dim=a.attn_dim,
    )
    manifest = DatasetManifest.load(a.manifest)
    result = train(manifest, a.task, cfg)
    save_model(result.model, a.out)
    log_path = a.log or f"{a.out}.epochs.csv"
    Path(log_path).write_text(result.log_csv())
    best = result.log[result.best_epoch - 1] if result.best_epoch else None
    print(f"best epoch {result.best_epoch} (val {best.val_metric if best else float('nan'):.6f}); wrote {a.out}")
    return EXIT_OK


def evaluate_split(model, bags, task: str):
    """(text report, csv) for one split."""
    classify = isinstance(model, MilClassifier)
    if classify != (task == "mir"):
        raise UsageError(f"model kind does not match --task {task}")
    labels = []
    for b in bags:
        y = b.labels.target(task)
        if y is None:
            raise DataError(f"bag {b.slide_id!r} has no {task} label")
        labels.append(y)
    outs = [forward(model, b).out for b in bags]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if classify:
        probs = [softmax(o) for o in outs]
        preds = [predict_label(p) for p in probs]
        cc = metrics.confusion(preds, labels)
        rep = metrics.classification_report(cc)
        try:
            auc = metrics.auroc([p[1] for p in probs], labels)
        except metrics.MetricError:
            auc = float("nan")
        cols = ["n", "auroc", "balanced_acc", "mcc", "kappa", "specificity", "sensitivity", "tn", "fp", "fn", "tp"]
        vals = [cc.total, auc, rep.balanced_accuracy, rep.mcc, rep.kappa, rep.specificity, rep.sensitivity, cc.tn, cc.fp, cc.fn, cc.tp]
        text = [
            f"n            {cc.total}",
            f"AUROC        {auc:.3f}",
            f"Balanced Acc {100 * rep.balanced_accuracy:.1f} %",
            f"MCC          {rep.mcc:.3f}",
            f"kappa        {rep.kappa:.3f}",
            f"Specificity  {rep.specificity:.2f}",
            f"Sensitivity  {rep.sensitivity:.2f}",
            f"confusion    tn={cc.tn} fp={cc.fp} fn={cc.fn} tp={cc.tp}",
        ] + [f"warning: {m}" for m in rep.warnings]
    else:
        st = metrics.regression_report([float(o[0]) for o in outs], labels)
        cols = ["n", "rmse", "mae", "r2", "slope"]
        vals = [st.n, st.rmse, st.mae, st.r2, st.slope]
        text = [f"n      {st.n}", f"RMSE   {st.rmse:.3f}", f"MAE    {st.mae:.3f}", f"R2     {st.r2:.3f}", f"slope  {st.slope:.3f}"]
    w.writerow(cols)
    w.writerow([repr(float(v)) if isinstance(v, float) else v for v in vals])
    return "\n".join(text) + "\n", buf.getvalue()


def cmd_eval(a) -> int:
    model = load_model(a.model)
    manifest = DatasetManifest.load(a.manifest)
    if not manifest.split(a.split):
        raise DataError(f"manifest {a.manifest} has no {a.split!r} split")
    task = a.task or ("mir" if isinstance(model, MilClassifier) else None)
    if task is None:
        raise UsageError("--task wbc|tmax is required for a regression model")
    text, table = evaluate_split(model, manifest.load_split(a.split), task)
    sys.stdout.write(text)
    if a.report:
        Path(a.report).write_text(text)
    if a.csv:
        Path(a.csv).write_text(table)
    return EXIT_OK


def cmd_heatmap(a) -> int:
    model = load_model(a.model)
    bag = load_bag(a.bag)
    if not 0 <= a.branch < model.n_branches:
        raise UsageError(f"--branch {a.branch} out of range (model has {model.n_branches})")
    weights = forward(model, bag).attention[a.branch]
    grid_shape = None
    if a.grid:
        g = TileGrid.from_sidecar(Path(a.grid).read_text())
        grid_shape = (g.cols, g.rows)
    hm = render_heatmap(weights, bag.coords, grid_shape, a.upscale)
    hm.save(a.out)
    print(f"wrote {a.out} ({hm.raster.shape[1]}x{hm.raster.shape[0]})")
    if a.tiles:
        out = Path(a.topk_out) if a.topk_out else Path(a.out).with_suffix("") / "topk"
        k = min(a.topk, bag.n_patches)
        try:
            export_topk(bag, weights, a.tiles, out, k)
        except FileNotFoundError as exc:
            raise DataError(str(exc)) from exc
        print(f"wrote top-{k} tiles to {out}")
    return EXIT_OK


def cmd_export_features(a) -> int:
    model = load_model(a.model)
    manifest = DatasetManifest.load(a.manifest)
    if not manifest.split(a.split):
        raise DataError(f"manifest {a.manifest} has no {a.split!r} split")
    task = a.task or ("mir" if isinstance(model, MilClassifier) else "tmax")
    branch = a.branch if a.branch is not None else model.n_branches - 1
    rows = export_features(model, manifest.load_split(a.split), branch, task)
    Path(a.out).write_text(features_csv(rows))
    print(f"wrote {len(rows)} rows to {a.out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="attnmil", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="store_true", help="print package and file format versions")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("tile", help="tile an image into 224px PNGs")
    s.add_argument("--input", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--tile", type=int, default=224)
    s.add_argument("--scale", type=float, default=2.0)
    s.add_argument("--min-tissue", type=float, default=0.10)
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_tile)

    s = sub.add_parser("embed", help="mock-embed a tile directory into a MILB bag")
    s.add_argument("--tiles", required=True)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--out", required=True)
    s.add_argument("--slide-id")
    s.add_argument("--mir-stage", type=int, choices=range(4))
    s.add_argument("--mir-binary", type=int, choices=(0, 1))
    s.add_argument("--wbc", type=float)
    s.add_argument("--tmax", type=float)
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("synth", help="generate planted-signal bags")
    s.add_argument("--bags", type=int, default=200)
    s.add_argument("--instances", type=int, default=100)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--pos-frac", type=_pair, default=None, help="lo:hi planted fraction")
    s.add_argument("--shift", type=float, default=1.0)
    s.add_argument("--signal-dims", type=int, default=8)
    s.add_argument("--noise", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--regression", action="store_true", help="targets from the planted fraction")
    s.add_argument("--target", choices=("tmax", "wbc"), default="tmax")
    s.add_argument("--rule", type=_pair, default=[98.6, 4.0, 0.2], help="a:b:sigma of target = a + b*p + noise")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="stratified train/valid/test manifest")
    s.add_argument("--dir", required=True)
    s.add_argument("--frac", type=_pair, default=[0.8, 0.1, 0.1])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train a classifier or regressor")
    s.add_argument("--manifest", required=True)
    s.add_argument("--task", choices=("mir", "wbc", "tmax"), default="mir")
    s.add_argument("--loss", choices=("hinge", "mse", "wmse"))
    s.add_argument("--class-weights", action="store_true")
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--weight-decay", type=float, default=1e-5)
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--patience", type=int, default=10)
    s.add_argument("--bins", type=int, default=10)
    s.add_argument("--hidden", type=int, default=512)
    s.add_argument("--attn-dim", type=int, default=256)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="epoch log CSV (default <out>.epochs.csv)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="metrics on one manifest split")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", choices=("train", "valid", "test"), default="test")
    s.add_argument("--task", choices=("mir", "wbc", "tmax"))
    s.add_argument("--report", help="also write the text report here")
    s.add_argument("--csv", help="machine-readable metrics CSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("heatmap", help="render one bag's attention map")
    s.add_argument("--model", required=True)
    s.add_argument("--bag", required=True)
    s.add_argument("--branch", type=int, default=1)
    s.add_argument("--upscale", type=int, default=8)
    s.add_argument("--grid", help="grid.txt sidecar from `tile` (default: fit coords)")
    s.add_argument("--tiles", help="tile directory; enables top-k export")
    s.add_argument("--topk", type=int, default=10)
    s.add_argument("--topk-out")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_heatmap)

    s = sub.add_parser("export-features", help="aggregated per-slide features as CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", choices=("train", "valid", "test"), default="test")
    s.add_argument("--branch", type=int)
    s.add_argument("--task", choices=("mir", "wbc", "tmax"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_features)
    return p


def _setup_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.version:
            print(f"attnmil {__version__} (MILB {MILB_VERSION}, MILW {MILW_VERSION})")
            return EXIT_OK
        if args.command is None:
            raise UsageError("attnmil: a subcommand is required")
        _setup_logging(args.verbose)
        config = {k: v for k, v in vars(args).items() if k != "func"}
        config["formats"] = {"MILB": MILB_VERSION, "MILW": MILW_VERSION}
        log.info("config %s", json.dumps(config, sort_keys=True, default=str))
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be >= 1")
        if args.command == "split" and len(args.frac) != 3:
            raise UsageError("--frac needs three values train:valid:test")
        if args.command == "synth" and args.pos_frac is None:
            args.pos_frac = [0.0, 1.0] if args.regression else [0.05, 0.15]
        if args.command == "synth" and (len(args.pos_frac) != 2 or len(args.rule) != 3):
            raise UsageError("--pos-frac needs lo:hi and --rule needs a:b:sigma")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
