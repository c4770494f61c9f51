import json
import math

import numpy as np
import pytest

from panoworld import fileio
from panoworld.config import ConfigError, GSSettings, PipelineConfig
from panoworld.export import (
    ExportView,
    MaskPolicyError,
    ReconExport,
    check_mask_policy,
    export_gs_config,
    load_export,
    settings_from_doc,
)
from panoworld.geometry import CameraView, Intrinsics, pose_from_angles
from panoworld.lift import PointCloud
from panoworld.metrics import MetricError, psnr
from panoworld.oracle import Failing, MirrorFill, MockRefine, SyntheticDepth
from panoworld.pipeline import Oracles, Pipeline, StageError, evaluate, make_pairs, run_pipeline

from conftest import textured


def small_config(tmp_path, name="out", **kw):
    inp = tmp_path / "input.png"
    if not inp.exists():
        fileio.write_png(inp, textured(64, 64, seed=3))
    base = dict(input=str(inp), output_dir=str(tmp_path / name), pano_width=256, view_size=128, grid_size=64,
                grid_subset=6)
    base.update(kw)
    return PipelineConfig(**base)


def test_config_round_trip(tmp_path):
    cfg = PipelineConfig(input="x.png", seed=7, quantiles=(0.1, 0.9))
    cfg.save(tmp_path / "c.json")
    assert PipelineConfig.load(tmp_path / "c.json") == cfg
    assert PipelineConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"nope": 1})
    with pytest.raises(ConfigError):
        PipelineConfig(heuristic="Spiral").validate()
    over = cfg.override(**{"gs.iterations": 4000, "seed": 1})
    assert over.gs.iterations == 4000 and over.seed == 1 and cfg.gs.iterations == 5000


def test_gs_settings_exact():
    exp = ReconExport([], PointCloud(np.zeros((1, 3)), np.zeros((1, 3))))
    doc = export_gs_config(exp)
    assert doc["training"] == {"iterations": 5000, "opacity_reset": "off", "adc": [500, 2500], "sh_degree": 1,
                               "batch": 2}
    assert settings_from_doc(doc) == GSSettings()
    exp2 = ReconExport([], exp.points, GSSettings(iterations=3000, batch=4))
    assert settings_from_doc(export_gs_config(exp2)) == GSSettings(iterations=3000, batch=4)


def test_psnr_examples():
    rng = np.random.default_rng(0)
    a = rng.uniform(20, 230, (200, 200, 3))
    sigma = 5.0
    b = a + rng.normal(0, sigma, a.shape)
    assert abs(psnr(a, b) - 10 * math.log10(255 ** 2 / sigma ** 2)) < 0.1
    assert psnr(a, a) == math.inf
    with pytest.raises(MetricError):
        psnr(a, b, np.zeros((200, 200), bool))


def _view():
    return CameraView(pose_from_angles(), Intrinsics.from_fov(1.0, 8))


def test_mask_policy():
    rgb = np.zeros((8, 8, 3), np.uint8)
    hole = np.zeros((8, 8), bool)
    hole[2:5, 2:5] = True
    pts = PointCloud(np.zeros((1, 3)), np.zeros((1, 3)))
    check_mask_policy(ReconExport([ExportView("g", "grid", _view(), rgb, hole.copy(), hole)], pts))
    with pytest.raises(MaskPolicyError):
        check_mask_policy(ReconExport([ExportView("g", "grid", _view(), rgb, ~hole, hole)], pts))
    allowed = np.ones((8, 8), bool)
    allowed[:, :3] = False
    check_mask_policy(ReconExport([ExportView("p", "pano", _view(), rgb, allowed & hole, allowed)], pts))
    with pytest.raises(MaskPolicyError):
        check_mask_policy(ReconExport([ExportView("p", "pano", _view(), rgb, np.ones((8, 8), bool), allowed)], pts))


def test_small_pipeline(tmp_path):
    cfg = small_config(tmp_path)
    res = run_pipeline(cfg)
    assert res.stages_run == ["pano", "lift", "grid", "export"]
    exp = load_export(tmp_path / "out" / "export")
    assert len(exp.by_kind("pano")) == 16 and len(exp.by_kind("grid")) == 6
    check_mask_policy(exp)
    assert exp.settings == GSSettings()
    done = json.loads((tmp_path / "out" / "pano" / "done.json").read_text())
    assert done["inpaint_calls"] == 16 and done["anchor_actions"] == 2
    # grid views are usable exactly on their holes
    for v in exp.by_kind("grid"):
        hole = fileio.read_mask(tmp_path / "out" / "grid" / f"hole_{v.name[5:]}.png")
        assert np.array_equal(v.usable, hole)
    # pano views never use pixels the temporary backside copy touched
    back = [v for v in exp.by_kind("pano") if v.view.pose.forward[0] < -0.99]
    assert back and all(not v.usable[v.usable.shape[0] // 2, v.usable.shape[1] // 2] for v in back)
    rep = evaluate(tmp_path / "out")
    assert rep["coverage"] == 1.0 and rep["input_psnr"] > 35 and rep["grid_views"] == 6
    n = make_pairs(tmp_path / "out", tmp_path / "pairs", per_view=1)
    assert n == 16 and len(list((tmp_path / "pairs").iterdir())) == 16


def test_stop_after_and_resume(tmp_path):
    cfg = small_config(tmp_path)
    res = Pipeline(cfg).run("pano")
    assert res.stages_run == ["pano"] and not (tmp_path / "out" / "lift").exists()
    stamp = (tmp_path / "out" / "pano" / "pano.png").stat().st_mtime_ns
    # a second run must not redo the finished pano stage, so a failing inpainter is never called
    oracles = Oracles(Failing("should not be called"), MockRefine(), SyntheticDepth("room", relative=True),
                      SyntheticDepth("room"))
    with pytest.raises(StageError) as e:
        Pipeline(cfg, oracles).run()
    assert e.value.stage == "grid" and e.value.is_oracle_error
    assert (tmp_path / "out" / "pano" / "pano.png").stat().st_mtime_ns == stamp
    assert (tmp_path / "out" / "lift" / "done.json").exists()
    Pipeline(cfg).run()
    assert (tmp_path / "out" / "export" / "gs_config.json").exists()


def test_pipeline_deterministic(tmp_path):
    a = small_config(tmp_path, "a")
    b = small_config(tmp_path, "b")
    run_pipeline(a)
    run_pipeline(b)
    fa = sorted(p.relative_to(tmp_path / "a" / "export") for p in (tmp_path / "a" / "export").rglob("*") if p.is_file())
    fb = sorted(p.relative_to(tmp_path / "b" / "export") for p in (tmp_path / "b" / "export").rglob("*") if p.is_file())
    assert fa == fb and fa
    for p in fa:
        assert (tmp_path / "a" / "export" / p).read_bytes() == (tmp_path / "b" / "export" / p).read_bytes()


def test_oracles_from_config():
    o = Oracles.from_config(PipelineConfig())
    assert o.inpaint is not None and o.depth_metric is not None
    with pytest.raises((ConfigError, ValueError)):
        Oracles.from_config(PipelineConfig(inpaint_oracle="warp:drive"))


def test_pano_failure_wrapped(tmp_path):
    cfg = small_config(tmp_path)
    oracles = Oracles(Failing("down", after=3, inner=MirrorFill()), MockRefine(), SyntheticDepth("room", True),
                      SyntheticDepth("room"))
    with pytest.raises(StageError) as e:
        Pipeline(cfg, oracles).run()
    assert e.value.stage == "pano" and e.value.is_oracle_error
