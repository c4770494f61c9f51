import json
import subprocess
import sys

import numpy as np

from panoworld import fileio
from panoworld.cli import main
from panoworld.config import PipelineConfig
from panoworld.distortion import load_checkpoint

from conftest import textured

SMALL = ["--set", "pano_width=256", "--set", "view_size=128", "--set", "grid_size=64", "--set", "grid_subset=4"]


def _input(tmp_path):
    p = tmp_path / "in.png"
    fileio.write_png(p, textured(64, 64, seed=1))
    return str(p)


def test_init_config(tmp_path):
    assert main(["init-config", str(tmp_path / "c.json")]) == 0
    assert PipelineConfig.load(tmp_path / "c.json") == PipelineConfig()


def test_run_and_eval(tmp_path, capsys):
    inp = _input(tmp_path)
    out = str(tmp_path / "out")
    assert main(["run", "--input", inp, "--out", out, "--stop-after", "lift", *SMALL]) == 0
    assert main(["grid", "--config", str(tmp_path / "out" / "config.json")]) == 0
    assert main(["export", "--config", str(tmp_path / "out" / "config.json")]) == 0
    capsys.readouterr()
    assert main(["eval", "--out", out]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["coverage"] == 1.0 and rep["grid_views"] == 4
    assert main(["pairs", "--out", out, "--pairs-out", str(tmp_path / "pairs"), "--per-view", "1"]) == 0


def test_exit_codes(tmp_path):
    inp = _input(tmp_path)
    assert main(["run", "--input", inp, "--out", str(tmp_path / "a"), "--set", "bogus=1"]) == 2
    assert main(["run", "--input", inp, "--out", str(tmp_path / "a"), "--set", "quantiles=[0.9,0.1]"]) == 2
    assert main(["run", "--input", str(tmp_path / "missing.png"), "--out", str(tmp_path / "b")]) == 4
    dead = ["--set", f'inpaint_oracle="dir:{tmp_path / "nobody"}"', "--set", "oracle_timeout=0.3"]
    assert main(["run", "--input", inp, "--out", str(tmp_path / "c"), *SMALL, *dead]) == 3
    assert main(["pairs", "--out", str(tmp_path / "c"), "--pairs-out", str(tmp_path / "p")]) == 4


def test_distort_fit(tmp_path, capsys):
    img = textured(48, 48, seed=2)
    fileio.write_png(tmp_path / "a.png", img)
    fileio.write_png(tmp_path / "b.png", np.roll(img, 1, axis=1))
    ck = tmp_path / "f.bin"
    assert main(["distort-fit", "--image", str(tmp_path / "a.png"), "--target", str(tmp_path / "b.png"),
                 "--checkpoint", str(ck), "--steps", "30", "--grid-res", "16"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["final_loss"] < rep["initial_loss"]
    assert "image" in load_checkpoint(ck).codes


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "panoworld.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "distort-fit" in r.stdout
