"""Progressive panorama outpainting from a single perspective image."""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import fileio
from .geometry import (
    CV_TO_BODY,
    DEFAULT_FEATHER_PX,
    DEFAULT_PANO_SIZE,
    CameraPose,
    CameraView,
    EquirectPanorama,
    Intrinsics,
    _to_uint8,
    pixel_rays_cv,
    pose_from_angles,
    project_view_into_pano,
    render_view_from_pano,
    view_footprint,
)
from .oracle.protocol import OracleError, OracleRequest, check_response

logger = logging.getLogger(__name__)

ADHOC_SUFFIX = ", equirectangular image, panorama"
MID_FOV = math.radians(85.0)
POLAR_FOV = math.radians(120.0)
POLAR_PITCH = math.radians(60.0)
VIEW_SIZE = 1024
SLOTS = ("scene", "sky", "ground", "verbatim")
ANCHOR_ACTIONS = ("none", "place_backside", "remove_backside")


class HeuristicKind(str, enum.Enum):
    ADHOC = "AdHoc"
    SEQUENTIAL = "Sequential"
    ANCHORED = "Anchored"

    @classmethod
    def parse(cls, value) -> "HeuristicKind":
        if isinstance(value, cls):
            return value
        for k in cls:
            if str(value).lower() in (k.value.lower(), k.name.lower()):
                return k
        raise ValueError(f"unknown heuristic {value!r}; expected one of {[k.value for k in cls]}")


@dataclass(frozen=True)
class PromptSet:
    scene: str
    sky_or_ceiling: str = ""
    ground_or_floor: str = ""

    def validate(self, kind: HeuristicKind) -> None:
        if not self.scene.strip():
            raise ValueError("the scene prompt must not be empty")
        if kind is HeuristicKind.ANCHORED and not (self.sky_or_ceiling.strip() and self.ground_or_floor.strip()):
            raise ValueError("anchored outpainting needs sky/ceiling and ground/floor prompts")

    def text(self, slot: str, verbatim: str | None = None) -> str:
        if slot == "verbatim":
            return verbatim or ""
        if slot == "sky":
            return self.sky_or_ceiling or self.scene
        if slot == "ground":
            return self.ground_or_floor or self.scene
        return self.scene

    def to_dict(self) -> dict:
        return {"scene": self.scene, "sky_or_ceiling": self.sky_or_ceiling, "ground_or_floor": self.ground_or_floor}


@dataclass
class PlanStep:
    pose: CameraPose
    intr: Intrinsics | None
    prompt_slot: str = "scene"
    anchor_action: str = "none"
    label: str = ""
    verbatim: str | None = None
    # "view" renders a perspective view; "equirect" hands the whole canvas to the oracle
    canvas: str = "view"

    @property
    def is_inpaint(self) -> bool:
        return self.anchor_action == "none"

    def to_dict(self) -> dict:
        d = {
            "label": self.label,
            "rotation": [float(x) for x in self.pose.rotation.ravel()],
            "prompt_slot": self.prompt_slot,
            "anchor_action": self.anchor_action,
            "canvas": self.canvas,
        }
        if self.intr is not None:
            d.update(fov_x=self.intr.fov_x, fov_y=self.intr.fov_y, width=self.intr.width, height=self.intr.height)
        if self.verbatim is not None:
            d["verbatim"] = self.verbatim
        return d


@dataclass
class ViewPlan:
    kind: HeuristicKind
    steps: list

    @property
    def inpaint_steps(self) -> list:
        return [s for s in self.steps if s.is_inpaint]

    @property
    def anchor_steps(self) -> list:
        return [s for s in self.steps if not s.is_inpaint]

    def validate(self) -> None:
        for s in self.steps:
            if not s.pose.is_rotation_only:
                raise ValueError(f"plan step {s.label!r} has a translation")
            if s.prompt_slot not in SLOTS or s.anchor_action not in ANCHOR_ACTIONS:
                raise ValueError(f"plan step {s.label!r} has an unknown slot or action")
        if self.kind is HeuristicKind.ANCHORED:
            acts = [s.anchor_action for s in self.steps]
            if acts.count("place_backside") != 1 or acts.count("remove_backside") != 1:
                raise ValueError("anchored plan needs exactly one place and one remove action")
            ip, ir = acts.index("place_backside"), acts.index("remove_backside")
            polar = [i for i, s in enumerate(self.steps) if s.prompt_slot in ("sky", "ground")]
            if not polar or not (ip < min(polar) and ir > max(polar)):
                raise ValueError("anchor must bracket every sky/ground step")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "steps": [s.to_dict() for s in self.steps]}


@dataclass
class PlanConfig:
    input_fov_x: float = math.radians(60.0)
    view_size: int = VIEW_SIZE
    mid_fov: float = MID_FOV
    polar_fov: float = POLAR_FOV
    polar_pitch: float = POLAR_PITCH
    n_mid: int = 8
    n_polar: int = 4
    prompt_suffix: str = ADHOC_SUFFIX


def _alternating_yaws(n: int) -> list:
    """0, +s, -s, +2s, -2s, ... ending at 180 degrees for even n (positive = right)."""
    step = 2 * math.pi / n
    out = [0.0]
    k = 1
    while len(out) < n:
        out.append(k * step)
        if len(out) < n and k * step < math.pi - 1e-9:
            out.append(-k * step)
        k += 1
    return out


def _sequential_yaws(n: int) -> list:
    """Rightward from the input up to 180 degrees, then leftward."""
    step = 2 * math.pi / n
    right = [k * step for k in range(n // 2 + 1)]
    left = [-k * step for k in range(1, n - len(right) + 1)]
    return right + left


def _mid_steps(cfg: PlanConfig, yaws) -> list:
    intr = Intrinsics.from_fov(cfg.mid_fov, cfg.view_size)
    return [
        PlanStep(pose_from_angles(y), intr, "scene", label=f"mid{round(math.degrees(y)):+d}") for y in yaws
    ]


def _polar_steps(cfg: PlanConfig, sign: float) -> list:
    intr = Intrinsics.from_fov(cfg.polar_fov, cfg.view_size)
    slot = "sky" if sign > 0 else "ground"
    out = []
    for k in range(cfg.n_polar):
        yaw = 2 * math.pi * k / cfg.n_polar
        out.append(PlanStep(pose_from_angles(yaw, sign * cfg.polar_pitch), intr, slot,
                            label=f"{'top' if sign > 0 else 'bottom'}{round(math.degrees(yaw))}"))
    return out


def plan_views(kind, config: PlanConfig | None = None) -> ViewPlan:
    kind = HeuristicKind.parse(kind)
    cfg = config or PlanConfig()
    if kind is HeuristicKind.ADHOC:
        steps = [PlanStep(pose_from_angles(), None, "verbatim", label="equirect", canvas="equirect")]
    elif kind is HeuristicKind.SEQUENTIAL:
        steps = _mid_steps(cfg, _sequential_yaws(cfg.n_mid)) + _polar_steps(cfg, 1.0) + _polar_steps(cfg, -1.0)
    else:
        back = Intrinsics.from_fov(cfg.input_fov_x, cfg.view_size)
        steps = (
            [PlanStep(pose_from_angles(math.pi), back, "scene", "place_backside", label="anchor_place")]
            + _polar_steps(cfg, 1.0)
            + _polar_steps(cfg, -1.0)
            + [PlanStep(pose_from_angles(math.pi), back, "scene", "remove_backside", label="anchor_remove")]
            + _mid_steps(cfg, _alternating_yaws(cfg.n_mid))
        )
    plan = ViewPlan(kind, steps)
    plan.validate()
    return plan


# ------------------------------------------------------------------ plan geometry


def in_frustum(dirs: np.ndarray, pose: CameraPose, intr: Intrinsics) -> np.ndarray:
    """Which world directions (N, 3) fall inside a camera's field of view."""
    cv = dirs @ (pose.rotation @ CV_TO_BODY)
    z = cv[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        return (z > 0) & (np.abs(cv[:, 0]) <= z * intr.tan_half_x) & (np.abs(cv[:, 1]) <= z * intr.tan_half_y)


def random_directions(n: int, seed: int = 0) -> np.ndarray:
    d = np.random.default_rng(seed).normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def plan_coverage(plan: ViewPlan, input_intr: Intrinsics | None = None, n: int = 100_000, seed: int = 0) -> float:
    """Fraction of random directions seen by at least one inpainting view (plus the input view)."""
    dirs = random_directions(n, seed)
    hit = np.zeros(n, bool)
    if input_intr is not None:
        hit |= in_frustum(dirs, pose_from_angles(), input_intr)
    for s in plan.inpaint_steps:
        if s.canvas == "equirect":
            return 1.0
        hit |= in_frustum(dirs, s.pose, s.intr)
    return float(hit.mean())


def frustum_overlap(view: CameraView, other: CameraView, stride: int = 8) -> float:
    """Fraction of ``view`` pixels (subsampled) whose rays lie inside ``other``'s frustum."""
    rays = pixel_rays_cv(view.intr)[::stride, ::stride].reshape(-1, 3)
    dirs = rays @ (view.pose.rotation @ CV_TO_BODY).T
    return float(in_frustum(dirs, other.pose, other.intr).mean())


# ------------------------------------------------------------------ refinement blend


def refine_blend(base: np.ndarray, refined: np.ndarray, inpaint_mask: np.ndarray, blur_radius: float) -> np.ndarray:
    """Blend a refined image over ``base`` with a Gaussian-softened mask (sigma = ``blur_radius`` px)."""
    base = np.asarray(base)
    refined = np.asarray(refined)
    mask = np.asarray(inpaint_mask, dtype=np.float64)
    if base.shape != refined.shape or base.shape[:2] != mask.shape:
        raise ValueError(f"refine_blend size mismatch: {base.shape}, {refined.shape}, {mask.shape}")
    soft = ndimage.gaussian_filter(mask, sigma=blur_radius, mode="nearest") if blur_radius > 0 else mask
    if base.ndim == 3:
        soft = soft[..., None]
    out = soft * refined.astype(np.float64) + (1.0 - soft) * base.astype(np.float64)
    return _to_uint8(out) if base.dtype == np.uint8 else out


# ------------------------------------------------------------------ outpainting loop


class StepError(RuntimeError):
    """An outpainting step failed; ``pano`` holds the canvas before that step."""

    def __init__(self, step: int, label: str, pano: EquirectPanorama, cause: Exception):
        super().__init__(f"outpainting step {step} ({label}) failed: {cause}")
        self.step = step
        self.label = label
        self.pano = pano
        self.cause = cause


@dataclass
class OutpaintConfig:
    pano_width: int = DEFAULT_PANO_SIZE[0]
    view_size: int = VIEW_SIZE
    feather_px: float = DEFAULT_FEATHER_PX
    min_overlap: float = 0.25
    refine_views: bool = True
    refine_final: bool = True
    refine_strength: float = 0.3
    refine_blur: float = 4.0
    polar_pitch: float = POLAR_PITCH
    seed: int = 0


@dataclass
class OutpaintResult:
    pano: EquirectPanorama
    plan: ViewPlan
    input_mask: np.ndarray
    anchor_mask: np.ndarray | None
    executed: list  # plan indices in execution order
    inpaint_calls: int = 0
    refine_calls: int = 0
    anchor_actions: int = 0
    coverage: list = field(default_factory=list)


def _call(oracle, req: OracleRequest) -> np.ndarray:
    resp = check_response(req, oracle(req))
    if resp.rgb is None or resp.rgb.shape != req.rgb.shape:
        raise OracleError("oracle returned no image or an image of the wrong size")
    return resp.rgb


class _Checkpoint:
    def __init__(self, root):
        self.root = Path(root) if root is not None else None

    def write(self, k: int, plan: ViewPlan, executed, pano, view=None, mask=None, result=None, extra=None):
        if self.root is None:
            return
        d = self.root / f"step_{k:03d}"
        d.mkdir(parents=True, exist_ok=True)
        if view is not None:
            fileio.write_png(d / "view.png", view)
            fileio.write_png(d / "mask.png", mask)
            fileio.write_png(d / "result.png", result)
        fileio.write_png(d / "pano.png", pano.rgb)
        fileio.write_png(d / "pano_mask.png", pano.fill_mask)
        doc = plan.to_dict()
        doc["executed"] = list(executed)
        doc.update(extra or {})
        # written last: a step directory without plan.json is incomplete
        (d / "plan.json").write_text(json.dumps(doc, indent=1, sort_keys=True))

    def write_masks(self, input_mask, anchor_mask):
        if self.root is None:
            return
        self.root.mkdir(parents=True, exist_ok=True)
        fileio.write_png(self.root / "input_mask.png", input_mask)
        if anchor_mask is not None:
            fileio.write_png(self.root / "anchor_mask.png", anchor_mask)

    def latest(self):
        if self.root is None or not self.root.exists():
            return None
        done = sorted(p for p in self.root.glob("step_*") if (p / "plan.json").exists())
        if not done:
            return None
        d = done[-1]
        doc = json.loads((d / "plan.json").read_text())
        pano = EquirectPanorama(fileio.read_png(d / "pano.png"), fileio.read_mask(d / "pano_mask.png"))
        input_mask = fileio.read_mask(self.root / "input_mask.png")
        am = self.root / "anchor_mask.png"
        anchor = fileio.read_mask(am) if am.exists() else None
        return int(d.name.split("_")[1]), doc, pano, input_mask, anchor


def _place(image: np.ndarray, pose: CameraPose, intr: Intrinsics, pano: EquirectPanorama, protect, feather_px):
    before = pano.fill_mask.copy()
    out = project_view_into_pano(image, np.ones(image.shape[:2], bool), pose, intr, pano, feather_px, protect=protect)
    return out, out.fill_mask & ~before


def _pick_next(pending, plan, pano, min_overlap):
    """First pending step (in plan order) with enough known context, or the best one available."""
    best, best_frac = None, -1.0
    for i in pending:
        s = plan.steps[i]
        if not s.is_inpaint or s.canvas == "equirect":
            return i, 1.0
        small = s.intr.with_size(64)
        _, known = render_view_from_pano(pano, s.pose, small)
        frac = float(known.mean())
        if frac >= min_overlap:
            return i, frac
        if frac > best_frac:
            best, best_frac = i, frac
    logger.warning("no pending view reaches %.0f%% known context; running %s (%.1f%%)",
                   100 * min_overlap, plan.steps[best].label, 100 * best_frac)
    return best, best_frac


def _segments(plan: ViewPlan, done: set):
    """Pending plan indices up to (and including) the next anchor action; reordering never crosses one."""
    seg = []
    for i, s in enumerate(plan.steps):
        if i in done:
            continue
        if not s.is_inpaint:
            return seg or [i]
        seg.append(i)
    return seg


def run_progressive_outpaint(
    image: np.ndarray,
    fov_x: float,
    prompts: PromptSet,
    kind,
    oracle,
    refine_oracle=None,
    config: OutpaintConfig | None = None,
    checkpoint_dir=None,
    resume: bool = False,
) -> OutpaintResult:
    """Grow a full equirectangular panorama around ``image`` (placed at yaw 0, pitch 0).

    Each inpainting step renders the current canvas at the planned pose, asks
    ``oracle`` to fill the unknown pixels, composites the answer so known pixels
    are kept, and projects the view back.  The input footprint is never
    rewritten.  With ``checkpoint_dir`` the canvas is saved after every step and
    ``resume=True`` continues from the last complete one.
    """
    cfg = config or OutpaintConfig()
    kind = HeuristicKind.parse(kind)
    prompts.validate(kind)
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError("input must be an H x W x 3 uint8 image")
    in_intr = Intrinsics.from_fov(fov_x, image.shape[1], image.shape[0])
    plan = plan_views(kind, PlanConfig(input_fov_x=fov_x, view_size=cfg.view_size, polar_pitch=cfg.polar_pitch))
    ckpt = _Checkpoint(checkpoint_dir)

    state = ckpt.latest() if resume else None
    if state is not None:
        last_k, doc, pano, input_mask, anchor_mask = state
        executed = list(doc["executed"])
        k = last_k + 1
        logger.info("resuming outpainting after step %d (%d plan steps done)", last_k, len(executed))
    else:
        pano, input_mask = _place(image, pose_from_angles(), in_intr, EquirectPanorama.empty(cfg.pano_width), None,
                                  cfg.feather_px)
        anchor_mask = None
        executed = []
        k = 0
        ckpt.write_masks(input_mask, None)
    res = OutpaintResult(pano, plan, input_mask, anchor_mask, executed)
    res.coverage.append(pano.coverage())

    while len(executed) < len(plan.steps):
        pending = _segments(plan, set(executed))
        i, frac = _pick_next(pending, plan, pano, cfg.min_overlap)
        step = plan.steps[i]
        seed = cfg.seed * 1000 + i
        try:
            if step.anchor_action == "place_backside":
                bintr = Intrinsics.from_fov(fov_x, image.shape[1], image.shape[0])
                pano, anchor_mask = _place(image, step.pose, bintr, pano, input_mask, cfg.feather_px)
                ckpt.write_masks(input_mask, anchor_mask)
                res.anchor_actions += 1
                ckpt.write(k, plan, executed + [i], pano)
            elif step.anchor_action == "remove_backside":
                if anchor_mask is None:
                    raise RuntimeError("remove_backside before place_backside")
                pano = pano.copy()
                pano.rgb[anchor_mask] = 0
                pano.fill_mask[anchor_mask] = False
                res.anchor_actions += 1
                ckpt.write(k, plan, executed + [i], pano)
            elif step.canvas == "equirect":
                mask = ~pano.fill_mask
                prompt = prompts.scene + ADHOC_SUFFIX
                out = _call(oracle, OracleRequest("inpaint", pano.rgb.copy(), mask, prompt, seed=seed))
                res.inpaint_calls += 1
                comp = np.where(pano.fill_mask[..., None], pano.rgb, out)
                ckpt.write(k, plan, executed + [i], EquirectPanorama(comp, np.ones_like(mask)),
                           pano.rgb, mask, comp)
                pano = EquirectPanorama(comp, np.ones_like(mask))
            else:
                pano = _inpaint_view(step, pano, prompts, oracle, refine_oracle, cfg, seed, input_mask, res, ckpt, k,
                                     plan, executed + [i])
        except (OracleError, OSError, ValueError, RuntimeError) as exc:
            raise StepError(k, step.label, pano, exc) from exc
        executed.append(i)
        res.coverage.append(pano.coverage())
        k += 1

    if cfg.refine_final and refine_oracle is not None:
        region = ~input_mask
        try:
            out = _call(refine_oracle, OracleRequest("refine", pano.rgb.copy(), region, prompts.scene,
                                                     strength=cfg.refine_strength, seed=cfg.seed * 1000 + 999))
        except OracleError as exc:
            raise StepError(k, "final_refine", pano, exc) from exc
        res.refine_calls += 1
        blended = refine_blend(pano.rgb, out, region, cfg.refine_blur)
        pano = EquirectPanorama(np.where(input_mask[..., None], pano.rgb, blended), pano.fill_mask.copy())
        ckpt.write(k, plan, executed, pano, extra={"final_refine": True})

    res.pano = pano
    res.anchor_mask = anchor_mask
    return res


def _inpaint_view(step, pano, prompts, oracle, refine_oracle, cfg, seed, input_mask, res, ckpt, k, plan, executed):
    view, known = render_view_from_pano(pano, step.pose, step.intr)
    mask = ~known
    if not mask.any():
        logger.info("view %s is already fully known; skipping the oracle", step.label)
        ckpt.write(k, plan, executed, pano, view, mask, view)
        return pano
    cam = CameraView(step.pose, step.intr).to_dict()
    prompt = prompts.text(step.prompt_slot, step.verbatim)
    out = _call(oracle, OracleRequest("inpaint", view, mask, prompt, seed=seed, camera=cam))
    res.inpaint_calls += 1
    if cfg.refine_views and refine_oracle is not None:
        ref = _call(refine_oracle, OracleRequest("refine", out, mask, prompt, strength=cfg.refine_strength,
                                                 seed=seed, camera=cam))
        res.refine_calls += 1
        out = refine_blend(out, ref, mask, cfg.refine_blur)
    comp = np.where(known[..., None], view, out)
    write = ndimage.binary_dilation(mask, iterations=1)
    new = project_view_into_pano(comp, write, step.pose, step.intr, pano, cfg.feather_px, protect=input_mask)
    ckpt.write(k, plan, executed, new, view, mask, comp)
    return new
