import json
import os
import subprocess
import sys

import numpy as np
import pytest

from milpath.cli import main
from milpath.slideprep import RasterImage, write_ppm

FAST = ["--max-epochs", "4", "--min-epochs", "2", "--patience", "2", "--hyper", "hidden=8,attn=4"]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--bags", "60", "--dim", "16", "--seed", "3", "--out", str(out)]) == 0
    return out


def test_missing_manifest_names_the_flag(tmp_path, capsys):
    assert main(["train", "--agg", "clam-sb", "--out", str(tmp_path)]) == 2
    assert "--manifest" in capsys.readouterr().err


def test_bad_inputs_exit_2(tmp_path, synth_dir, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("agg=abmil\nlearning_rate=0.1\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "learning_rate" in capsys.readouterr().err
    assert main(["train", "--agg", "transmil", "--manifest", str(synth_dir / "manifest.csv"),
                 "--out", str(tmp_path)]) == 2
    assert main(["train", "--agg", "abmil", "--bogus", "1"]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "none.milc"),
                 "--manifest", str(synth_dir / "manifest.csv"), "--out", str(tmp_path)]) == 2


def test_synth_outputs(synth_dir):
    assert (synth_dir / "manifest.csv").read_text().startswith("slide_id,")
    assert len(list((synth_dir / "features").glob("*.milf"))) == 60
    assert (synth_dir / "config.txt").read_text().splitlines()[0] == "# milpath synth"


def test_train_then_eval_and_config_replay(tmp_path, synth_dir, capsys):
    run1, run2, ev = tmp_path / "a", tmp_path / "b", tmp_path / "e"
    manifest = str(synth_dir / "manifest.csv")
    assert main(["train", "--agg", "abmil", "--manifest", manifest, "--seed", "5", "--out", str(run1)] + FAST) == 0
    printed = capsys.readouterr().out
    assert "seed=5" in printed and "lr=0.0002" in printed and "test: AUC" in printed
    for name in ["model.milc", "history.csv", "summary.json", "metrics.csv", "fold_plan.csv", "config.txt"]:
        assert (run1 / name).exists()
    # the saved config alone reproduces the run
    assert main(["train", "--config", str(run1 / "config.txt"), "--out", str(run2)]) == 0
    assert (run1 / "history.csv").read_bytes() == (run2 / "history.csv").read_bytes()
    assert (run1 / "model.milc").read_bytes() == (run2 / "model.milc").read_bytes()
    assert main(["eval", "--checkpoint", str(run1 / "model.milc"), "--manifest", manifest,
                 "--fold", "0", "--seed", "5", "--out", str(ev)]) == 0
    assert (ev / "metrics.csv").read_text() == (run1 / "metrics.csv").read_text()


def test_flags_override_config_file(tmp_path, synth_dir, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text(f"agg=abmil\nmanifest={synth_dir / 'manifest.csv'}\nseed=1\nmax-epochs=3\n"
                   "min-epochs=2\npatience=1\nhyper=hidden=4,attn=2\n")
    assert main(["train", "--config", str(cfg), "--seed", "9", "--out", str(tmp_path / "o")]) == 0
    assert "seed=9" in capsys.readouterr().out


def test_seed_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("MILPATH_SEED", "12")
    assert main(["synth", "--bags", "12", "--dim", "8", "--out", str(tmp_path)]) == 0
    assert "seed=12" in capsys.readouterr().out


def test_cv_is_byte_deterministic(tmp_path, synth_dir, capsys):
    args = ["cv", "--agg", "abmil", "--manifest", str(synth_dir / "manifest.csv"), "--seed", "2",
            "--only", "0,3"] + FAST
    assert main(args + ["--out", str(tmp_path / "x")]) == 0
    table = capsys.readouterr().out
    assert "±" in table
    assert main(args + ["--out", str(tmp_path / "y")]) == 0
    names = sorted(p.name for p in (tmp_path / "x").iterdir())
    assert "fold03_metrics.csv" in names and "aggregate.txt" in names
    for name in names:
        if name == "config.txt":  # records --out, which differs by design
            continue
        assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()


def test_slide_pipeline_and_heatmap(tmp_path, synth_dir):
    px = np.full((600, 700, 3), 255, dtype=np.uint8)
    px[100:500, 150:600] = (170, 60, 140)
    write_ppm(RasterImage(px), tmp_path / "slide.ppm")
    img = str(tmp_path / "slide.ppm")
    assert main(["segment", "--image", img, "--ref-patch", "32", "--out", str(tmp_path / "seg")]) == 0
    assert (tmp_path / "seg" / "regions.csv").read_text().count("\n") == 2
    assert main(["patch", "--image", img, "--mask", str(tmp_path / "seg" / "mask.ppm"),
                 "--patch-size", "64", "--out", str(tmp_path / "p")]) == 0
    assert main(["featurize", "--image", img, "--grid", str(tmp_path / "p" / "grid.csv"),
                 "--patch-size", "64", "--dim", "16", "--out", str(tmp_path / "f")]) == 0
    assert main(["train", "--agg", "dtfd", "--manifest", str(synth_dir / "manifest.csv"),
                 "--out", str(tmp_path / "m")] + FAST) == 0
    assert main(["heatmap", "--checkpoint", str(tmp_path / "m" / "model.milc"),
                 "--features", str(tmp_path / "f" / "slide.milf"), "--downsample", "4",
                 "--png", "true", "--out", str(tmp_path / "h")]) == 0
    assert (tmp_path / "h" / "heatmap.ppm").read_bytes().startswith(b"P6\n175 150\n")
    assert (tmp_path / "h" / "heatmap.png").exists()
    assert (tmp_path / "h" / "heatmap.csv").read_text().startswith("x,y,attention_raw,attention_norm\n")


def test_finetune_to_binary(tmp_path, synth_dir):
    manifest = str(synth_dir / "manifest.csv")
    assert main(["train", "--agg", "abmil", "--manifest", manifest, "--out", str(tmp_path / "s")] + FAST) == 0
    assert main(["finetune", "--agg", "abmil", "--task", "idh", "--manifest", manifest,
                 "--checkpoint", str(tmp_path / "s" / "model.milc"), "--out", str(tmp_path / "t")] + FAST) == 0
    assert json.loads((tmp_path / "t" / "summary.json").read_text())["test"]["n_samples"] > 0


def test_gradcheck_reports_per_architecture(tmp_path):
    code = main(["gradcheck", "--points", "1", "--out", str(tmp_path)])
    rows = json.loads((tmp_path / "gradcheck.json").read_text())
    assert [r["arch"] for r in rows] == ["abmil", "clam-sb", "dsmil", "dtfd"]
    worst = max(r["max_rel_err"] for r in rows)
    assert code == (0 if worst < 1e-6 else 3)


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "milpath.cli", "--help"], capture_output=True, text=True,
                         env={**os.environ, "PYTHONWARNINGS": "ignore"})
    assert res.returncode == 0 and "gradcheck" in res.stdout
