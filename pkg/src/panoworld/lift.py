"""Lift a panorama to an approximately metric, colored point cloud."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import fileio, kernels
from .geometry import (
    CV_TO_BODY,
    CameraPose,
    CameraView,
    EquirectPanorama,
    Intrinsics,
    angles_to_equirect,
    direction_to_angles,
    pixel_rays_cv,
    project_cv,
    render_view_from_pano,
)

logger = logging.getLogger(__name__)

DEFAULT_QUANTILES = (0.2, 0.8)
DEFAULT_CONF_THRESHOLD = 0.3
DEFAULT_MIN_GROUND = 1.5
MIN_VALID_PIXELS = 100


class DegenerateDepthError(ValueError):
    pass


class AlignmentError(RuntimeError):
    def __init__(self, view_ids, message):
        super().__init__(f"{message} (views {list(view_ids)})")
        self.view_ids = list(view_ids)


@dataclass
class DepthMap:
    """Per-pixel depth along the optical axis, with confidence in [0, 1]."""

    values: np.ndarray
    confidence: np.ndarray
    scale_class: str = "metric"

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.confidence = np.asarray(self.confidence)
        if self.values.shape != self.confidence.shape or self.values.ndim != 2:
            raise ValueError("depth and confidence must be matching 2-D arrays")
        if self.scale_class not in ("relative", "metric"):
            raise ValueError(f"unknown scale class {self.scale_class!r}")

    @classmethod
    def from_values(cls, values, scale_class="metric") -> "DepthMap":
        values = np.asarray(values, dtype=np.float64)
        ok = np.isfinite(values) & (values > 0)
        return cls(np.where(ok, values, np.nan), ok.astype(np.float64), scale_class)

    def valid(self, threshold: float = 0.0) -> np.ndarray:
        v = self.values
        with np.errstate(invalid="ignore"):
            return (self.confidence > 0) & (self.confidence >= threshold) & np.isfinite(v) & (v > 0)

    def scaled(self, s: float) -> "DepthMap":
        return DepthMap(self.values * s, self.confidence, "metric")


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray
    source_view: np.ndarray = None
    confidence: np.ndarray = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(n, 3)
        self.source_view = (
            np.zeros(n, np.int64) if self.source_view is None else np.asarray(self.source_view, np.int64).reshape(n)
        )
        self.confidence = np.ones(n) if self.confidence is None else np.asarray(self.confidence, np.float64).reshape(n)

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, sel) -> "PointCloud":
        return PointCloud(self.positions[sel], self.colors[sel], self.source_view[sel], self.confidence[sel])

    def scaled(self, s: float) -> "PointCloud":
        return PointCloud(self.positions * s, self.colors, self.source_view, self.confidence)

    @staticmethod
    def concat(clouds: Sequence["PointCloud"]) -> "PointCloud":
        return PointCloud(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
            np.concatenate([c.source_view for c in clouds]),
            np.concatenate([c.confidence for c in clouds]),
        )

    def save_ply(self, path) -> None:
        fileio.write_ply(path, self.positions, self.colors, self.confidence, self.source_view)

    @classmethod
    def load_ply(cls, path) -> "PointCloud":
        a = fileio.read_ply(path)
        pos = np.stack([a["x"], a["y"], a["z"]], axis=1).astype(np.float64)
        names = a.dtype.names
        col = np.stack([a["red"], a["green"], a["blue"]], axis=1) if "red" in names else np.zeros((len(a), 3))
        conf = a["confidence"] if "confidence" in names else None
        src = a["source_view"] if "source_view" in names else None
        return cls(pos, col, src, conf)


# ------------------------------------------------------------------ scale


def align_scale_quantile(
    d_rel: DepthMap,
    d_metric: DepthMap,
    q_low: float = DEFAULT_QUANTILES[0],
    q_high: float = DEFAULT_QUANTILES[1],
    conf_threshold: float = DEFAULT_CONF_THRESHOLD,
) -> float:
    """Scale mapping relative depth to metric depth via inter-quantile ranges.

    Quantiles use linear interpolation between order statistics, over pixels
    that are valid in both maps.
    """
    if d_rel.values.shape != d_metric.values.shape:
        raise ValueError("depth maps must have the same resolution")
    valid = d_rel.valid(conf_threshold) & d_metric.valid(conf_threshold)
    if valid.sum() < MIN_VALID_PIXELS:
        raise DegenerateDepthError(f"only {int(valid.sum())} confidence-valid pixels, need {MIN_VALID_PIXELS}")
    rel = d_rel.values[valid].astype(np.float64)
    met = d_metric.values[valid].astype(np.float64)
    lo_r, hi_r = np.quantile(rel, [q_low, q_high])
    if not hi_r > lo_r:
        raise DegenerateDepthError("relative depth has zero inter-quantile range")
    lo_m, hi_m = np.quantile(met, [q_low, q_high])
    return float((hi_m - lo_m) / (hi_r - lo_r))


def enforce_ground_clearance(pc: PointCloud, min_height: float = DEFAULT_MIN_GROUND):
    """Scale the cloud about the origin until the mean ground distance is at least ``min_height``.

    Ground = points with negative z.  Returns (cloud, applied_scale).
    """
    z = pc.positions[:, 2]
    ground = z < 0
    if not ground.any():
        warnings.warn("point cloud has no ground points; ground clearance not enforced", RuntimeWarning)
        return pc, 1.0
    h = float(np.mean(-z[ground]))
    if h >= min_height:
        return pc, 1.0
    s = min_height / h
    while np.mean(-z[ground] * s) < min_height:
        s = float(np.nextafter(s, math.inf))
    return pc.scaled(s), s


# ------------------------------------------------------------------ unprojection


def backproject(depth_values: np.ndarray, pose: CameraPose, intr: Intrinsics) -> np.ndarray:
    """(H, W, 3) world points for a z-depth map."""
    rays = pixel_rays_cv(intr)
    return pose.cv_to_world(rays * np.asarray(depth_values, dtype=np.float64)[..., None])


def unproject_view(
    rgb: np.ndarray,
    depth: DepthMap,
    pose: CameraPose,
    intr: Intrinsics,
    conf_threshold: float = DEFAULT_CONF_THRESHOLD,
    view_id: int = 0,
) -> PointCloud:
    if depth.values.shape != (intr.height, intr.width) or rgb.shape[:2] != depth.values.shape:
        raise ValueError("rgb, depth and intrinsics resolutions differ")
    valid = depth.valid(conf_threshold)
    pts = backproject(np.where(valid, depth.values, 0.0), pose, intr)
    return PointCloud(pts[valid], rgb[valid], np.full(int(valid.sum()), view_id), depth.confidence[valid])


# ------------------------------------------------------------------ stitching


@dataclass
class StitchView:
    rgb: np.ndarray
    d_rel: DepthMap
    view: CameraView


def _as_stitch_view(v) -> StitchView:
    if isinstance(v, StitchView):
        return v
    rgb, d_rel, view = v
    return StitchView(rgb, d_rel, view)


def _range_factor(intr: Intrinsics) -> np.ndarray:
    return np.linalg.norm(pixel_rays_cv(intr), axis=-1)


def solve_view_scales(
    views,
    d_metric_anchor: DepthMap,
    quantiles=DEFAULT_QUANTILES,
    conf_threshold: float = DEFAULT_CONF_THRESHOLD,
    min_overlap: float = 0.2,
    outlier_tol: float = 0.05,
) -> list[float]:
    """Per-view scalar scales that bring every relative depth map into metric units.

    View 0 is anchored to the metric map by quantile alignment; each later view
    is solved by least squares on ranges of overlapping directions, compared
    against the already-scaled earlier views.  All views share the optical
    center (they come from a panorama).
    """
    views = [_as_stitch_view(v) for v in views]
    if not views:
        raise ValueError("no views to stitch")
    scales = [align_scale_quantile(views[0].d_rel, d_metric_anchor, *quantiles, conf_threshold=conf_threshold)]
    ranges = []  # scaled range maps (NaN where invalid)
    for i, sv in enumerate(views):
        intr, pose = sv.view.intr, sv.view.pose
        valid = sv.d_rel.valid(conf_threshold)
        r = np.where(valid, sv.d_rel.values * _range_factor(intr), np.nan)
        if i > 0:
            rays = pixel_rays_cv(intr)[valid]
            dirs = rays @ (pose.rotation @ CV_TO_BODY).T
            r_i = r[valid]
            pair_i, pair_j = [], []
            matched = np.zeros(len(r_i), bool)
            for j in range(i):
                vj = views[j].view
                col, row, z = project_cv(dirs @ (vj.pose.rotation @ CV_TO_BODY), vj.intr)
                with np.errstate(invalid="ignore"):
                    inside = (z > 0) & (col >= 0.5) & (col <= vj.intr.width - 0.5) & (row >= 0.5) & (row <= vj.intr.height - 0.5)
                if not inside.any():
                    continue
                rj = ranges[j]
                ok_j = np.isfinite(rj)
                cx, cy = col[inside] - 0.5, row[inside] - 0.5
                sampled = kernels.bilinear(np.where(ok_j, rj, 0.0), cx, cy)
                support = kernels.bilinear(ok_j.astype(np.float64), cx, cy)
                good = support > 1.0 - 1e-9
                idx = np.flatnonzero(inside)[good]
                # scale r_j's range to direction-i: both are ranges along the same direction
                pair_i.append(r_i[idx])
                pair_j.append(sampled[good])
                matched[idx] = True
            if matched.sum() < min_overlap * max(len(r_i), 1):
                raise AlignmentError([i], f"insufficient overlap: {matched.sum()} of {len(r_i)} pixels")
            a = np.concatenate(pair_i)
            b = np.concatenate(pair_j)
            ratio = b / a
            med = np.median(ratio)
            keep = np.abs(ratio / med - 1.0) < outlier_tol
            a, b = a[keep], b[keep]
            scales.append(float(np.dot(a, b) / np.dot(a, a)))
        ranges.append(r * scales[i])
    return scales


def dedupe_angular(pc: PointCloud, pano_w: int, pano_h: int, center=(0.0, 0.0, 0.0)) -> PointCloud:
    """Keep one point per equirect bin (highest confidence, then earliest view, then input order)."""
    if len(pc) == 0:
        return pc
    d = pc.positions - np.asarray(center)
    theta, phi = direction_to_angles(d)
    x, y = angles_to_equirect(theta, phi, pano_w, pano_h)
    col = np.clip(np.floor(x).astype(np.int64), 0, pano_w - 1)
    row = np.clip(np.floor(y).astype(np.int64), 0, pano_h - 1)
    bins = row * pano_w + col
    order = np.lexsort((np.arange(len(pc)), pc.source_view, -pc.confidence, bins))
    b = bins[order]
    first = np.ones(len(b), bool)
    first[1:] = b[1:] != b[:-1]
    return pc.subset(np.sort(order[first]))


def stitch_depth_views(
    views,
    d_metric_anchor: DepthMap,
    pano_size=(2048, 1024),
    quantiles=DEFAULT_QUANTILES,
    conf_threshold: float = DEFAULT_CONF_THRESHOLD,
    min_overlap: float = 0.2,
    return_scales: bool = False,
):
    views = [_as_stitch_view(v) for v in views]
    scales = solve_view_scales(views, d_metric_anchor, quantiles, conf_threshold, min_overlap)
    if len(views) == 1:
        sv = views[0]
        pc = unproject_view(sv.rgb, sv.d_rel.scaled(scales[0]), sv.view.pose, sv.view.intr, conf_threshold, 0)
    else:
        clouds = [
            unproject_view(sv.rgb, sv.d_rel.scaled(s), sv.view.pose, sv.view.intr, conf_threshold, i)
            for i, (sv, s) in enumerate(zip(views, scales))
        ]
        pc = dedupe_angular(PointCloud.concat(clouds), *pano_size)
    return (pc, scales) if return_scales else pc


DepthFn = Callable[[np.ndarray, CameraView, int], DepthMap]


@dataclass
class LiftResult:
    cloud: PointCloud
    scales: list[float]
    s_metric: float
    ground_scale: float
    views: list[CameraView] = field(default_factory=list)


def lift_panorama(
    pano: EquirectPanorama,
    views: Sequence[CameraView],
    depth_rel: DepthFn,
    depth_metric: DepthFn,
    quantiles=DEFAULT_QUANTILES,
    conf_threshold: float = DEFAULT_CONF_THRESHOLD,
    min_ground: float | None = DEFAULT_MIN_GROUND,
    min_overlap: float = 0.2,
) -> LiftResult:
    """Render ``views`` from the panorama, predict depth, align, stitch, and enforce ground clearance.

    ``depth_rel(rgb, view, index)`` and ``depth_metric(...)`` wrap the depth
    oracles; the metric one is consulted for the first view only.
    """
    stitch = []
    for i, v in enumerate(views):
        rgb, _ = render_view_from_pano(pano, v.pose, v.intr)
        stitch.append(StitchView(rgb, depth_rel(rgb, v, i), v))
    anchor = depth_metric(stitch[0].rgb, views[0], 0)
    pc, scales = stitch_depth_views(
        stitch, anchor, (pano.width, pano.height), quantiles, conf_threshold, min_overlap, return_scales=True
    )
    ground = 1.0
    if min_ground is not None:
        pc, ground = enforce_ground_clearance(pc, min_ground)
    logger.info("lifted %d points, metric scale %.4f, ground scale %.4f", len(pc), scales[0], ground)
    return LiftResult(pc, scales, scales[0], ground, list(views))
