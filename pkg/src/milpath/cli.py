"""Command-line entry point: ``milpath <subcommand> [--flag value ...]``.

Every option can also come from ``--config FILE`` (flat ``key=value`` lines,
keys spelled like the flags without the leading dashes). Flags win over the
file. The resolved configuration is printed before work starts and saved as
``config.txt`` under ``--out``; feeding that file back through ``--config``
repeats the run.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import aggregators, bagstore, heatmap, slideprep, trainer
from .numkernel import DimensionError, NumericError

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
REQUIRED = object()
GRADCHECK_TOL = 1e-6

log = logging.getLogger("milpath")


class UsageError(Exception):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _cutoff(text):
    return None if text in (None, "", "none") else int(text)


def _hyper(text) -> dict:
    """``hidden=16,attn=8`` -> {"hidden": 16, "attn": 8}."""
    out = {}
    for part in filter(None, (s.strip() for s in str(text).split(","))):
        key, sep, value = part.partition("=")
        if not sep:
            raise ValueError(f"hyperparameter {part!r} is not key=value")
        num = float(value)
        out[key.strip()] = int(num) if num.is_integer() and "." not in value else num
    return out


def _seed_default() -> int:
    raw = os.environ.get("MILPATH_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw, 0)
    except ValueError:
        raise UsageError(f"MILPATH_SEED={raw!r} is not an integer") from None


# option tables: name -> (type, default, help)
SEG_OPTS = {
    "downsample": (int, 1, "integer downsample applied before segmentation"),
    "median-kernel": (int, 9, "median blur kernel (odd)"),
    "close-kernel": (int, 5, "morphological closing kernel"),
    "sat-threshold": (str, "auto", "'auto' (Otsu) or a fixed 0..255 threshold"),
    "area-tissue": (float, 80.0, "minimum region area, in reference patch areas"),
    "area-hole": (float, 10.0, "minimum hole area, in reference patch areas"),
    "max-holes": (int, 20, "holes kept per region"),
    "ref-patch": (int, 256, "reference patch size for the area thresholds"),
}
TRAIN_OPTS = {
    "agg": (str, REQUIRED, "aggregator: abmil, clam-sb, dsmil or dtfd"),
    "task": (str, "subtype", "subtype, grade, idh, atrx, tp53 or ki67"),
    "cutoff": (_cutoff, None, "Ki-67 cutoff (5, 10 or 20) for --task ki67"),
    "manifest": (str, REQUIRED, "manifest CSV"),
    "lr": (float, None, "learning rate (default per aggregator)"),
    "weight-decay": (float, None, "weight decay (default per aggregator)"),
    "decay": (str, "decoupled", "weight decay style: decoupled or l2"),
    "feature-dropout": (float, 0.25, "dropout rate on instance features during training"),
    "min-epochs": (int, 50, "earliest epoch at which early stopping may fire"),
    "max-epochs": (int, 200, "hard epoch limit"),
    "patience": (int, 25, "epochs without validation improvement before stopping"),
    "hyper": (_hyper, {}, "aggregator hyperparameters, e.g. hidden=64,attn=32"),
    "seed": (int, None, "run seed (default: $MILPATH_SEED or 0)"),
}
SPLIT_OPTS = {
    "k": (int, 10, "number of patient folds"),
    "fold": (int, 0, "fold whose test/val blocks are held out"),
}

COMMANDS = {
    "segment": ("tissue mask of a raster image", {
        "image": (str, REQUIRED, "input raster (PPM, PNG, ...)"),
        **SEG_OPTS,
    }),
    "patch": ("patch grid over the tissue mask", {
        "image": (str, REQUIRED, "input raster"),
        "mask": (str, None, "mask raster (default: segment the image)"),
        "patch-size": (int, 256, "patch side in pixels"),
        "stride": (int, None, "grid stride (default: patch size)"),
        "coverage": (float, 0.5, "minimum tissue fraction per patch"),
        **SEG_OPTS,
    }),
    "featurize": ("toy colour/texture features for a patch grid", {
        "image": (str, REQUIRED, "input raster"),
        "grid": (str, REQUIRED, "grid CSV written by 'patch'"),
        "patch-size": (int, 256, "patch side in pixels"),
        "dim": (int, 64, "feature dimension: 16, 64 or 256"),
        "slide-id": (str, None, "slide id (default: image file stem)"),
    }),
    "synth": ("synthetic bags plus a manifest", {
        "bags": (int, 500, "number of bags"),
        "classes": (int, 3, "number of classes"),
        "dim": (int, 64, "feature dimension"),
        "bag-min": (int, 20, "smallest bag"),
        "bag-max": (int, 100, "largest bag"),
        "witness-rate": (float, 0.1, "fraction of witness instances per bag"),
        "sigma": (float, 1.0, "instance noise standard deviation"),
        "seed": (int, None, "generator seed (default: $MILPATH_SEED or 0)"),
    }),
    "train": ("train on one fold's train/val split, report its test split", {
        **TRAIN_OPTS, **SPLIT_OPTS,
    }),
    "cv": ("patient-wise k-fold cross-validation", {
        **TRAIN_OPTS,
        "folds": (int, 10, "number of folds"),
        "only": (str, "", "comma-separated fold indices to run (default: all)"),
        "jobs": (int, 1, "folds trained in parallel"),
    }),
    "finetune": ("re-head a checkpoint for a binary task and retrain", {
        **TRAIN_OPTS, **SPLIT_OPTS,
        "checkpoint": (str, REQUIRED, "source checkpoint"),
        "freeze-backbone": (_bool, False, "update only the re-initialised heads"),
    }),
    "eval": ("evaluate a checkpoint", {
        "checkpoint": (str, REQUIRED, "checkpoint to evaluate"),
        "manifest": (str, REQUIRED, "manifest CSV"),
        "task": (str, "subtype", "task the checkpoint predicts"),
        "cutoff": (_cutoff, None, "Ki-67 cutoff"),
        "fold": (int, None, "restrict to this fold's test patients"),
        "k": (int, 10, "number of folds when --fold is given"),
        "seed": (int, None, "fold seed when --fold is given"),
    }),
    "heatmap": ("attention heatmap for one slide", {
        "checkpoint": (str, REQUIRED, "trained checkpoint"),
        "features": (str, REQUIRED, "feature file of the slide (with coordinates)"),
        "downsample": (int, 1, "output downsample factor"),
        "alpha": (float, 0.4, "overlay opacity"),
        "source": (str, None, "raster to draw on instead of white"),
        "png": (_bool, False, "also write a PNG"),
        "stem": (str, "heatmap", "output file stem"),
    }),
    "gradcheck": ("finite-difference check of every aggregator's gradients", {
        "points": (int, 10, "random bag/parameter points per aggregator"),
        "eps": (float, 1e-5, "central-difference step"),
        "seed": (int, None, "seed of the random points"),
    }),
}


def _dest(name: str) -> str:
    return name.replace("-", "_")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="milpath", description="Attention MIL for slide-level prediction.")
    parser.add_argument("--log-level", default="WARNING", help="logging level for diagnostics")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for cmd, (summary, opts) in COMMANDS.items():
        p = sub.add_parser(cmd, help=summary, description=summary,
                           argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="flat key=value file; explicit flags override it")
        p.add_argument("--out", help="output directory (required)")
        for name, (typ, default, text) in opts.items():
            shown = "required" if default is REQUIRED else f"default: {default}"
            p.add_argument(f"--{name}", dest=_dest(name), type=str, metavar=name.split("-")[-1].upper(),
                           help=f"{text} ({shown})")
    return parser


def read_config_file(path: str | Path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        values[key.strip()] = value.strip()
    return values


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags into one typed dict."""
    opts = COMMANDS[command][1]
    raw: dict[str, object] = {}
    if getattr(ns, "config", None):
        for key, value in read_config_file(ns.config).items():
            name = key.replace("_", "-")
            if name != "out" and name not in opts:
                raise UsageError(f"unknown key {key!r} in {ns.config}")
            raw[name] = value
    for name in list(opts) + ["out"]:
        if hasattr(ns, _dest(name)):
            raw[name] = getattr(ns, _dest(name))
    conf: dict[str, object] = {}
    for name, (typ, default, _) in opts.items():
        if name in raw and not (raw[name] == "" and default is not REQUIRED):
            try:
                conf[name] = typ(raw[name])
            except (TypeError, ValueError) as exc:
                raise UsageError(f"--{name}: {exc}") from None
        elif default is REQUIRED:
            raise UsageError(f"missing required flag --{name}")
        else:
            conf[name] = default
    if "seed" in opts and conf["seed"] is None:
        conf["seed"] = _seed_default()
    if "agg" in opts:
        if conf["agg"] not in trainer.DEFAULT_OPTIM:
            raise UsageError(f"--agg must be one of {sorted(trainer.DEFAULT_OPTIM)}")
        lr, wd = trainer.DEFAULT_OPTIM[conf["agg"]]
        conf["lr"] = lr if conf["lr"] is None else conf["lr"]
        conf["weight-decay"] = wd if conf["weight-decay"] is None else conf["weight-decay"]
    if not raw.get("out"):
        raise UsageError("missing required flag --out")
    conf["out"] = str(raw["out"])
    return conf


def format_config(command: str, conf: dict) -> str:
    lines = [f"# milpath {command}"]
    for key in sorted(conf):
        value = conf[key]
        if isinstance(value, dict):
            value = ",".join(f"{k}={v}" for k, v in sorted(value.items()))
        elif value is None:
            value = ""
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def _task(conf) -> bagstore.TaskSpec:
    return bagstore.TaskSpec(conf["task"], conf.get("cutoff"))


def _train_config(conf) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        agg=conf["agg"], task=_task(conf), lr=conf["lr"], weight_decay=conf["weight-decay"],
        min_epochs=conf["min-epochs"], max_epochs=conf["max-epochs"], patience=conf["patience"],
        seed=conf["seed"], hyper=conf["hyper"], decay=conf["decay"],
        feature_dropout=conf["feature-dropout"], freeze_backbone=conf.get("freeze-backbone", False))


def _seg_params(conf) -> slideprep.SegParams:
    thr = conf["sat-threshold"]
    return slideprep.SegParams(
        median_kernel=conf["median-kernel"], close_kernel=conf["close-kernel"],
        sat_threshold=thr if thr == "auto" else int(thr), area_tissue=conf["area-tissue"],
        area_hole=conf["area-hole"], max_holes=conf["max-holes"], ref_patch=conf["ref-patch"])


def _segment(conf):
    img = slideprep.read_raster(conf["image"])
    small = slideprep.downsample(img, conf["downsample"])
    return img, slideprep.segment_tissue(small, _seg_params(conf))


def _split(conf, manifest, bags):
    plan = bagstore.make_folds(manifest, conf["k"], conf["seed"])
    if not 0 <= conf["fold"] < conf["k"]:
        raise UsageError(f"--fold must lie in [0, {conf['k']})")
    order = [row.slide_id for row in manifest.rows]
    return plan, trainer.split_bags(bags, plan.folds[conf["fold"]], order)


def _load(conf, task):
    manifest = bagstore.read_manifest(conf["manifest"])
    bags, skipped = bagstore.load_bags(manifest, task)
    if skipped:
        log.warning("%d slide(s) lack a %s label and are excluded", len(skipped), task)
    return manifest, bags


def _write_metrics(report, path: Path) -> None:
    row = report.as_row()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(row))
        writer.writerow(list(row.values()))


def _print_report(report, prefix: str = "test") -> None:
    print(f"{prefix}: AUC {report.auc:.2f}  ACC {report.acc:.2f}  F1 {report.f1_macro:.2f}  "
          f"(n={report.n_samples})")


def cmd_segment(conf, out: Path) -> int:
    _, mask = _segment(conf)
    slideprep.write_ppm(mask.bits, out / "mask.ppm")
    with open(out / "regions.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["region", "area", "x0", "y0", "x1", "y1", "holes"])
        for i, r in enumerate(mask.regions):
            writer.writerow([i, r.area, *r.bbox, len(r.holes)])
    print(f"status {mask.status}: {len(mask.regions)} region(s), threshold {mask.threshold}")
    return EXIT_OK


def cmd_patch(conf, out: Path) -> int:
    if conf["mask"]:
        img = slideprep.read_raster(conf["image"])
        with Image.open(conf["mask"]) as im:
            bits = np.array(im.convert("L")) > 127
    else:
        img, mask = _segment(conf)
        bits = mask.bits
    grid = slideprep.extract_patches(img, bits, conf["patch-size"], conf["stride"], conf["coverage"])
    slideprep.write_grid_csv(grid, out / "grid.csv")
    print(f"{len(grid)} patch(es) of {conf['patch-size']} px")
    return EXIT_OK


def cmd_featurize(conf, out: Path) -> int:
    img = slideprep.read_raster(conf["image"])
    grid = slideprep.read_grid_csv(conf["grid"], conf["patch-size"])
    if len(grid) == 0:
        raise UsageError("grid has no patches")
    feats = slideprep.toy_features(img, grid, conf["dim"])
    slide_id = conf["slide-id"] or Path(conf["image"]).stem
    bag = bagstore.Bag(slide_id=slide_id, patient_id="", features=feats,
                       coords=np.asarray(grid.coords, dtype=np.int64).reshape(-1, 2),
                       patch_size=grid.patch_size, slide_w=img.width, slide_h=img.height)
    path = out / f"{slide_id}.milf"
    bagstore.write_feature_file(bag, path)
    print(f"wrote {path} ({len(grid)} x {conf['dim']})")
    return EXIT_OK


def cmd_synth(conf, out: Path) -> int:
    syn = bagstore.generate_synthetic(
        n_bags=conf["bags"], n_classes=conf["classes"], d=conf["dim"],
        bag_size=(conf["bag-min"], conf["bag-max"]), witness_rate=conf["witness-rate"],
        noise_sigma=conf["sigma"], seed=conf["seed"])
    (out / "features").mkdir(exist_ok=True)
    for bag in syn.bags:
        bagstore.write_feature_file(bag, out / "features" / f"{bag.slide_id}.milf")
    bagstore.write_manifest(bagstore.synthetic_manifest(syn.bags), out / "manifest.csv")
    with open(out / "witnesses.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["slide_id", "label", "witness_indices"])
        for bag, wit in zip(syn.bags, syn.witnesses):
            writer.writerow([bag.slide_id, bag.label, " ".join(map(str, wit))])
    print(f"wrote {len(syn.bags)} bags to {out}")
    return EXIT_OK


def _finish_run(model, record, test, out: Path) -> None:
    report = trainer.evaluate(model, test)
    record.test = report
    aggregators.save_checkpoint(model, out / "model.milc")
    record.write_csv(out / "history.csv")
    record.write_json(out / "summary.json")
    _write_metrics(report, out / "metrics.csv")
    print(f"stopped at epoch {record.stopped_epoch}, best epoch {record.best_epoch}")
    _print_report(report)


def cmd_train(conf, out: Path) -> int:
    config = _train_config(conf)
    manifest, bags = _load(conf, config.task)
    plan, (train, val, test) = _split(conf, manifest, bags)
    plan.write_csv(out / "fold_plan.csv")
    model, record = trainer.train_one(config, train, val)
    _finish_run(model, record, test, out)
    return EXIT_OK


def cmd_cv(conf, out: Path) -> int:
    config = _train_config(conf)
    manifest, bags = _load(conf, config.task)
    folds = [int(s) for s in conf["only"].split(",") if s.strip()] or None
    if folds is not None and any(not 0 <= f < conf["folds"] for f in folds):
        raise UsageError(f"--only indices must lie in [0, {conf['folds']})")
    bagstore.make_folds(manifest, conf["folds"], config.seed).write_csv(out / "fold_plan.csv")
    results, table = trainer.run_cv(config, manifest, k=conf["folds"], folds=folds,
                                    jobs=conf["jobs"], bags=bags)
    trainer.write_cv_outputs(results, table, out)
    print(table, end="")
    return EXIT_OK


def cmd_finetune(conf, out: Path) -> int:
    config = _train_config(conf)
    source = aggregators.load_checkpoint(conf["checkpoint"])
    manifest, bags = _load(conf, config.task)
    plan, (train, val, test) = _split(conf, manifest, bags)
    plan.write_csv(out / "fold_plan.csv")
    model, record = trainer.transfer_finetune(source, config.task, config, train, val)
    _finish_run(model, record, test, out)
    return EXIT_OK


def cmd_eval(conf, out: Path) -> int:
    model = aggregators.load_checkpoint(conf["checkpoint"])
    task = _task(conf)
    if model.n_classes != task.n_classes:
        raise trainer.CompatibilityError(
            f"checkpoint predicts {model.n_classes} classes, task {task} has {task.n_classes}")
    manifest, bags = _load(conf, task)
    selected = list(bags.values())
    if conf["fold"] is not None:
        conf = dict(conf)
        _, (_, _, selected) = _split(conf, manifest, bags)
    probs = trainer.predict(model, selected)
    report = trainer.evaluate(model, selected)
    _write_metrics(report, out / "metrics.csv")
    with open(out / "predictions.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["slide_id", "label"] + [f"p{c}" for c in range(probs.shape[1])])
        for bag, row in zip(selected, probs):
            writer.writerow([bag.slide_id, bag.label] + [repr(float(v)) for v in row])
    _print_report(report, "eval")
    return EXIT_OK


def cmd_heatmap(conf, out: Path) -> int:
    model = aggregators.load_checkpoint(conf["checkpoint"])
    bag = bagstore.read_feature_file(conf["features"])
    if bag.coords.size == 0:
        raise UsageError(f"{conf['features']} carries no patch coordinates")
    attention = model.forward(bag.features).attention
    source = slideprep.read_raster(conf["source"]) if conf["source"] else None
    spec = heatmap.HeatmapSpec(downsample=conf["downsample"], alpha=conf["alpha"],
                               background="source" if source is not None else "white")
    image = heatmap.render(bag.coords, attention, bag.slide_w, bag.slide_h, spec,
                           patch_size=bag.patch_size, source=source)
    paths = heatmap.write_heatmap(image, bag.coords, attention, out, conf["stem"], png=conf["png"])
    print(f"wrote {paths['ppm']} ({image.width}x{image.height})")
    return EXIT_OK


def cmd_gradcheck(conf, out: Path) -> int:
    results = aggregators.gradient_suite(n_points=conf["points"], seed=conf["seed"], eps=conf["eps"])
    ok = True
    rows = []
    for r in results:
        passed = r.max_rel_err < GRADCHECK_TOL
        ok &= passed
        print(f"{r.arch:8s} max_rel_err {r.max_rel_err:.3e}  scaled_err {r.max_scaled_err:.3e}  "
              f"{'ok' if passed else 'FAIL'}")
        rows.append({"arch": r.arch, "max_rel_err": r.max_rel_err,
                     "max_scaled_err": r.max_scaled_err, "points": r.n_points})
    (out / "gradcheck.json").write_text(json.dumps(rows, indent=2) + "\n")
    if not ok:
        print(f"gradient check above tolerance {GRADCHECK_TOL:g}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


HANDLERS = {
    "segment": cmd_segment, "patch": cmd_patch, "featurize": cmd_featurize, "synth": cmd_synth,
    "train": cmd_train, "cv": cmd_cv, "finetune": cmd_finetune, "eval": cmd_eval,
    "heatmap": cmd_heatmap, "gradcheck": cmd_gradcheck,
}

INPUT_ERRORS = (UsageError, ValueError, KeyError, FileNotFoundError, IsADirectoryError,
                PermissionError, DimensionError, IndexError)


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, trainer.FoldError):
        return _exit_code(exc.cause)
    if isinstance(exc, (NumericError, FloatingPointError, ArithmeticError)):
        return EXIT_NUMERIC
    return EXIT_INPUT


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    logging.basicConfig(level=getattr(logging, str(ns.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if ns.command is None:
        parser.print_help(sys.stderr)
        return EXIT_INPUT
    try:
        conf = resolve(ns.command, ns)
        out = Path(conf["out"])
        print(format_config(ns.command, conf), end="", flush=True)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(format_config(ns.command, conf))
        with np.errstate(over="ignore", under="ignore"):
            return HANDLERS[ns.command](conf, out)
    except INPUT_ERRORS + (NumericError, ArithmeticError, trainer.FoldError, OSError) as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        print(f"milpath {ns.command}: error: {msg}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
