"""End-to-end orchestration: panorama, lifting, grid inpainting and export.

Every stage writes its outputs plus a ``done.json`` marker under
``<output_dir>/<stage>/``; a later run picks finished stages up from disk.
Stages always continue from the on-disk state (e.g. the PLY as written), so
a resumed run produces the same bytes as an uninterrupted one.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio, kernels
from .cameras import camera_grid, grid_labels, grid_subset
from .config import PipelineConfig
from .export import ExportView, ReconExport, write_export
from .geometry import (
    CameraView,
    EquirectPanorama,
    Intrinsics,
    pose_from_angles,
    render_view_from_pano,
    _view_to_pano_coords,
)
from .lift import DepthMap, PointCloud, lift_panorama
from .metrics import psnr
from .oracle import OracleClient, OracleError, OracleRequest, make_backend
from .oracle.protocol import check_response
from .pano import OutpaintConfig, PromptSet, StepError, run_progressive_outpaint
from .warp import make_warp_pair, render_pointcloud, write_warp_pair

logger = logging.getLogger(__name__)

STAGES = ("pano", "lift", "grid", "export")


class StageError(RuntimeError):
    def __init__(self, stage: str, step, cause: Exception):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"stage {stage!r} failed{where}: {cause}")
        self.stage = stage
        self.step = step
        self.cause = cause

    @property
    def is_oracle_error(self) -> bool:
        return isinstance(self.cause, OracleError)


@dataclass
class Oracles:
    inpaint: object
    refine: object | None
    depth_rel: object
    depth_metric: object

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "Oracles":
        def build(spec):
            if not spec:
                return None
            return OracleClient(make_backend(spec, timeout=cfg.oracle_timeout), cfg.max_in_flight, name=spec)

        return cls(build(cfg.inpaint_oracle), build(cfg.refine_oracle), build(cfg.depth_rel_oracle),
                   build(cfg.depth_metric_oracle))


def standard_views(size: int, mid_fov: float, polar_fov: float, polar_pitch: float) -> list:
    """8 level views (yaw 0, 45, ... 315) then 4 up and 4 down views (yaw 0, 90, 180, 270)."""
    mid = Intrinsics.from_fov(mid_fov, size)
    polar = Intrinsics.from_fov(polar_fov, size)
    views = [CameraView(pose_from_angles(2 * math.pi * k / 8), mid) for k in range(8)]
    for sign in (1.0, -1.0):
        views += [CameraView(pose_from_angles(2 * math.pi * k / 4, sign * polar_pitch), polar) for k in range(4)]
    return views


def _views_for(cfg: PipelineConfig, size: int) -> list:
    return standard_views(size, math.radians(cfg.mid_fov_deg), math.radians(cfg.polar_fov_deg),
                          math.radians(cfg.polar_pitch_deg))


def _done(d: Path):
    p = d / "done.json"
    return json.loads(p.read_text()) if p.exists() else None


def _mark(d: Path, info: dict) -> None:
    (d / "done.json").write_text(json.dumps(info, indent=1, sort_keys=True))


def load_input(cfg: PipelineConfig) -> np.ndarray:
    if not cfg.input:
        raise FileNotFoundError("config has no input image")
    return fileio.read_png(cfg.input)


@dataclass
class PipelineResult:
    root: Path
    stages_run: list = field(default_factory=list)
    pano: EquirectPanorama | None = None
    cloud: PointCloud | None = None
    export: ReconExport | None = None


class Pipeline:
    def __init__(self, config: PipelineConfig, oracles: Oracles | None = None):
        self.cfg = config
        self.oracles = oracles or Oracles.from_config(config)
        self.root = Path(config.output_dir)

    def stage_dir(self, name: str) -> Path:
        d = self.root / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _seed(self, block: int, i: int) -> int:
        return self.cfg.seed * 100_000 + block * 1000 + i

    # ------------------------------------------------------------------ stages

    def pano(self) -> EquirectPanorama:
        cfg, d = self.cfg, self.stage_dir("pano")
        if _done(d) is None:
            image = load_input(cfg)
            ocfg = OutpaintConfig(
                pano_width=cfg.pano_width, view_size=cfg.view_size, feather_px=cfg.feather_px,
                min_overlap=cfg.min_overlap, refine_views=cfg.refine_views, refine_final=cfg.refine_final,
                refine_strength=cfg.refine_strength, refine_blur=cfg.refine_blur,
                polar_pitch=math.radians(cfg.polar_pitch_deg), seed=cfg.seed,
            )
            prompts = PromptSet(cfg.prompt_scene, cfg.prompt_sky, cfg.prompt_ground)
            try:
                res = run_progressive_outpaint(image, cfg.fov_x, prompts, cfg.heuristic, self.oracles.inpaint,
                                               self.oracles.refine, ocfg, checkpoint_dir=d / "steps", resume=True)
            except StepError as exc:
                raise StageError("pano", exc.step, exc.cause) from exc
            anchor = res.anchor_mask if res.anchor_mask is not None else np.zeros_like(res.input_mask)
            fileio.write_png(d / "pano.png", res.pano.rgb)
            fileio.write_png(d / "pano_mask.png", res.pano.fill_mask)
            fileio.write_png(d / "input_mask.png", res.input_mask)
            fileio.write_png(d / "anchor_mask.png", anchor)
            _mark(d, {"inpaint_calls": res.inpaint_calls, "refine_calls": res.refine_calls,
                      "anchor_actions": res.anchor_actions, "coverage": res.pano.coverage(),
                      "executed": [res.plan.steps[i].label for i in res.executed]})
        return EquirectPanorama(fileio.read_png(d / "pano.png"), fileio.read_mask(d / "pano_mask.png"))

    def _depth(self, oracle, kind: str, rgb, view: CameraView, seed: int) -> DepthMap:
        req = OracleRequest(kind, rgb, seed=seed, camera=view.to_dict())
        resp = check_response(req, oracle(req))
        return resp.depth

    def lift(self) -> PointCloud:
        cfg, d = self.cfg, self.stage_dir("lift")
        if _done(d) is None:
            pano = self.pano()
            views = _views_for(cfg, cfg.lift_resolution)
            rel = {}

            def depth_rel(rgb, view, i):
                rel[i] = self._depth(self.oracles.depth_rel, "depth_rel", rgb, view, self._seed(2, i))
                return rel[i]

            def depth_metric(rgb, view, i):
                return self._depth(self.oracles.depth_metric, "depth_metric", rgb, view, self._seed(3, i))

            try:
                res = lift_panorama(pano, views, depth_rel, depth_metric, tuple(cfg.quantiles), cfg.conf_threshold,
                                    cfg.min_ground, cfg.stitch_min_overlap)
            except Exception as exc:
                raise StageError("lift", len(rel), exc) from exc
            res.cloud.save_ply(d / "points.ply")
            for i, v in enumerate(views):
                rgb, _ = render_view_from_pano(pano, v.pose, v.intr)
                fileio.write_png(d / f"view_{i:02d}.png", rgb)
                dm = rel[i]
                metric = np.where(dm.valid(cfg.conf_threshold), dm.values * res.scales[i] * res.ground_scale, np.nan)
                fileio.write_pfm(d / f"depth_{i:02d}.pfm", metric.astype(np.float32))
            _mark(d, {"scales": [float(s) for s in res.scales], "s_metric": float(res.s_metric),
                      "ground_scale": float(res.ground_scale), "points": len(res.cloud),
                      "views": [v.to_dict() for v in views]})
        return PointCloud.load_ply(d / "points.ply")

    def grid_views(self) -> list:
        cfg = self.cfg
        views = camera_grid(cfg.cube_side, math.radians(cfg.grid_fov_deg), cfg.grid_resolution)
        idx = list(range(len(views)))
        if cfg.grid_subset:
            idx = grid_subset(idx, cfg.grid_subset)
        return [(i, views[i]) for i in idx]

    def grid(self) -> list:
        cfg, d = self.cfg, self.stage_dir("grid")
        chosen = self.grid_views()
        if _done(d) is None:
            cloud = self.lift()
            labels = grid_labels(cfg.cube_side)

            def work(item):
                i, view = item
                out = d / f"grid_{i:03d}.png"
                if out.exists() and (d / f"hole_{i:03d}.png").exists():
                    return i
                r = render_pointcloud(cloud, view.pose, view.intr, cfg.splat_px)
                hole = ~r.valid_mask
                rgb = r.rgb
                if hole.any():
                    req = OracleRequest("inpaint", r.rgb, hole, cfg.prompt_scene, seed=self._seed(5, i),
                                        camera=view.to_dict())
                    try:
                        resp = check_response(req, self.oracles.inpaint(req))
                    except OracleError as exc:
                        raise StageError("grid", i, exc) from exc
                    rgb = np.where(hole[..., None], resp.rgb, r.rgb)
                fileio.write_png(d / f"hole_{i:03d}.png", hole)
                fileio.write_png(out, rgb)
                return i

            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                list(pool.map(work, chosen))
            _mark(d, {"views": [{"index": i, "translation": labels[i][0], "rotation": labels[i][1],
                                  "camera": v.to_dict()} for i, v in chosen]})
        return [(i, v, fileio.read_png(d / f"grid_{i:03d}.png"), fileio.read_mask(d / f"hole_{i:03d}.png"))
                for i, v in chosen]

    def export(self) -> ReconExport:
        cfg = self.cfg
        d = self.root / "export"
        pano = self.pano()
        cloud = self.lift()
        grid = self.grid()
        anchor = fileio.read_mask(self.root / "pano" / "anchor_mask.png").astype(np.float64)
        views = []
        for k, v in enumerate(_views_for(cfg, cfg.view_size)):
            rgb, known = render_view_from_pano(pano, v.pose, v.intr)
            x, y = _view_to_pano_coords(v.pose, v.intr, pano.width, pano.height)
            touches = kernels.bilinear(anchor, x, y, wrap_x=True).reshape(known.shape) > 0
            allowed = ~touches
            views.append(ExportView(f"pano_{k:02d}", "pano", v, rgb, allowed & known, allowed))
        for i, v, rgb, hole in grid:
            views.append(ExportView(f"grid_{i:03d}", "grid", v, rgb, hole.copy(), hole))
        exp = write_export(ReconExport(views, cloud, cfg.gs), d)
        _mark(d, {"views": len(views), "pano_views": 16, "grid_views": len(grid)})
        return exp

    def run(self, stop_after: str | None = None) -> PipelineResult:
        if stop_after is not None and stop_after not in STAGES:
            raise ValueError(f"unknown stage {stop_after!r}; expected one of {STAGES}")
        self.root.mkdir(parents=True, exist_ok=True)
        self.cfg.save(self.root / "config.json")
        res = PipelineResult(self.root)
        for name in STAGES:
            out = getattr(self, name)()
            res.stages_run.append(name)
            if name == "pano":
                res.pano = out
            elif name == "lift":
                res.cloud = out
            elif name == "export":
                res.export = out
            if name == stop_after:
                break
        return res


def run_pipeline(config: PipelineConfig, stop_after: str | None = None, oracles: Oracles | None = None):
    return Pipeline(config, oracles).run(stop_after)


# ------------------------------------------------------------------ auxiliary verbs


def evaluate(root) -> dict:
    """Coverage of the panorama, input adherence and grid hole statistics of a pipeline output."""
    root = Path(root)
    cfg = PipelineConfig.load(root / "config.json")
    out = {}
    pano_dir = root / "pano"
    if (pano_dir / "done.json").exists():
        pano = EquirectPanorama(fileio.read_png(pano_dir / "pano.png"), fileio.read_mask(pano_dir / "pano_mask.png"))
        out["coverage"] = pano.coverage()
        if cfg.input and Path(cfg.input).exists():
            image = fileio.read_png(cfg.input)
            intr = Intrinsics.from_fov(cfg.fov_x, image.shape[1], image.shape[0])
            view, _ = render_view_from_pano(pano, pose_from_angles(), intr)
            interior = np.zeros(image.shape[:2], bool)
            b = max(2, image.shape[0] // 64)
            interior[b:-b, b:-b] = True
            out["input_psnr"] = psnr(view, image, interior)
    grid_dir = root / "grid"
    if (grid_dir / "done.json").exists():
        holes = [fileio.read_mask(p).mean() for p in sorted(grid_dir.glob("hole_*.png"))]
        out["grid_views"] = len(holes)
        out["grid_hole_fraction"] = float(np.mean(holes)) if holes else 0.0
    return out


def make_pairs(root, out_dir, per_view: int = 2, max_translation: float = 0.3, max_rotation_deg: float = 5.0,
               seed: int = 0) -> int:
    """Forward-backward warp pairs from the lifted views of a pipeline output."""
    root = Path(root)
    lift_dir = root / "lift"
    info = _done(lift_dir)
    if info is None:
        raise FileNotFoundError(f"no finished lift stage under {root}")
    rng = np.random.default_rng(seed)
    n = 0
    for i, vd in enumerate(info["views"]):
        view = CameraView.from_dict(vd)
        rgb = fileio.read_png(lift_dir / f"view_{i:02d}.png")
        depth = fileio.read_pfm(lift_dir / f"depth_{i:02d}.pfm").astype(np.float64)
        for j in range(per_view):
            t = rng.normal(size=3)
            t *= max_translation * rng.random() ** (1 / 3) / np.linalg.norm(t)
            yaw, pitch = np.radians(rng.uniform(-max_rotation_deg, max_rotation_deg, 2))
            dst = view.pose.compose(pose_from_angles(yaw, pitch, translation=t))
            pair = make_warp_pair(rgb, depth, view.pose, dst, view.intr)
            meta = {"source": view.to_dict(), "target": CameraView(dst, view.intr).to_dict(),
                    "hole_fraction": float(pair.hole_mask.mean())}
            write_warp_pair(out_dir, f"view{i:02d}_{j:02d}", pair, meta)
            n += 1
    return n
