"""Z-buffered point-cloud rendering and forward-backward warp pairs."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio, kernels
from .geometry import CameraPose, Intrinsics, project_cv
from .lift import DepthMap, PointCloud, backproject

NEAR = 1e-6


@dataclass
class RenderedView:
    rgb: np.ndarray
    depth: np.ndarray
    valid_mask: np.ndarray
    point_index: np.ndarray  # winning point id per pixel, -1 where empty


def project_points(positions: np.ndarray, pose: CameraPose, intr: Intrinsics):
    """Integer pixel (col, row), depth and an in-view flag for every point."""
    col, row, z = project_cv(pose.world_to_cv(positions), intr)
    with np.errstate(invalid="ignore"):
        ok = (z > NEAR) & np.isfinite(col) & np.isfinite(row)
        ix = np.floor(np.where(ok, col, -1.0)).astype(np.int64)
        iy = np.floor(np.where(ok, row, -1.0)).astype(np.int64)
    ok &= (ix >= 0) & (ix < intr.width) & (iy >= 0) & (iy < intr.height)
    return ix, iy, z, ok


def render_pointcloud(pc: PointCloud, pose: CameraPose, intr: Intrinsics, splat_px: int = 1) -> RenderedView:
    """Render points as squares of side ``2 * splat_px - 1`` with a z-buffer.

    The nearest point wins each pixel; exact depth ties go to the lowest point index.
    """
    if len(pc) == 0:
        raise ValueError("cannot render an empty point cloud")
    if splat_px < 1:
        raise ValueError("splat_px must be >= 1")
    w, h = intr.width, intr.height
    ix, iy, z, ok = project_points(pc.positions, pose, intr)
    ids = np.flatnonzero(ok)
    ix, iy, z = ix[ids], iy[ids], z[ids]
    r = splat_px - 1
    if r:
        offs = np.arange(-r, r + 1)
        dx, dy = (a.ravel() for a in np.meshgrid(offs, offs))
        ix = (ix[:, None] + dx).ravel()
        iy = (iy[:, None] + dy).ravel()
        z = np.repeat(z, dx.size)
        ids = np.repeat(ids, dx.size)
        inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        ix, iy, z, ids = ix[inside], iy[inside], z[inside], ids[inside]
    win, zbuf = kernels.zbuffer(iy * w + ix, z, ids, h * w)
    valid = win >= 0
    rgb = np.zeros((h * w, 3), np.uint8)
    rgb[valid] = pc.colors[win[valid]]
    depth = np.where(valid, zbuf, np.nan)
    return RenderedView(rgb.reshape(h, w, 3), depth.reshape(h, w), valid.reshape(h, w), win.reshape(h, w))


@dataclass
class WarpPair:
    condition_rgb: np.ndarray
    hole_mask: np.ndarray
    target_rgb: np.ndarray
    forward: RenderedView | None = None

    def check(self) -> None:
        keep = ~self.hole_mask
        if not np.array_equal(self.condition_rgb[keep], self.target_rgb[keep]):
            raise AssertionError("warp pair condition differs from target outside the hole mask")


def make_warp_pair(
    rgb: np.ndarray,
    depth,
    pose_src: CameraPose,
    pose_dst: CameraPose,
    intr: Intrinsics,
    intr_dst: Intrinsics | None = None,
    depth_tol: float = 0.01,
    splat_px: int = 1,
) -> WarpPair:
    """Warp an image to ``pose_dst`` and back.

    A source pixel survives when its point lands inside the destination view
    and is not behind the destination z-buffer by more than ``depth_tol``
    (relative).  Survivors are rendered back into the source camera; all other
    pixels form the hole mask.
    """
    intr_dst = intr if intr_dst is None else intr_dst
    d = depth.values if isinstance(depth, DepthMap) else np.asarray(depth, dtype=np.float64)
    h, w = d.shape
    with np.errstate(invalid="ignore"):
        valid = np.isfinite(d) & (d > 0)
    if isinstance(depth, DepthMap):
        valid &= depth.confidence > 0
    pts = backproject(np.where(valid, d, 0.0), pose_src, intr)
    flat_ids = np.flatnonzero(valid.ravel())
    pc = PointCloud(pts.reshape(-1, 3)[flat_ids], rgb.reshape(-1, 3)[flat_ids])

    target = np.ascontiguousarray(rgb)
    if len(pc) == 0:
        return WarpPair(np.zeros_like(target), np.ones((h, w), bool), target)
    fwd = render_pointcloud(pc, pose_dst, intr_dst, splat_px)
    ix, iy, z, ok = project_points(pc.positions, pose_dst, intr_dst)
    zb = np.full(len(pc), -np.inf)
    zb[ok] = fwd.depth[iy[ok], ix[ok]]
    survive = ok & (z <= zb * (1.0 + depth_tol))

    back = render_pointcloud(pc.subset(survive), pose_src, intr, 1) if survive.any() else None
    if back is None:
        hole = np.ones((h, w), bool)
    else:
        hole = ~back.valid_mask
    cond = np.zeros_like(target)
    if back is not None:
        cond[~hole] = back.rgb[~hole]
    pair = WarpPair(cond, hole, target, fwd)
    pair.check()
    return pair


def write_warp_pair(root, pair_id: str, pair: WarpPair, meta: dict) -> Path:
    """Write ``{id}/condition.png, mask.png (255 = hole), target.png, meta.json``."""
    d = Path(root) / pair_id
    d.mkdir(parents=True, exist_ok=True)
    fileio.write_png(d / "condition.png", pair.condition_rgb)
    fileio.write_png(d / "mask.png", pair.hole_mask)
    fileio.write_png(d / "target.png", pair.target_rgb)
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return d
