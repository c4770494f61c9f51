"""Procedural scenes with exact ray casting, used as ground truth by the depth mocks and tests."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import CV_TO_BODY, CameraPose, Intrinsics, pixel_rays_cv

_EPS = 1e-9


class Primitive:
    color = (128, 128, 128)

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError


@dataclass
class Room(Primitive):
    """Inside of an axis-aligned box; rays must start inside."""

    lo: tuple = (-4.0, -4.0, -2.0)
    hi: tuple = (4.0, 4.0, 2.5)
    color: tuple = (170, 150, 120)

    def intersect(self, o, d):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_hi = (hi - o) / d
            t_lo = (lo - o) / d
        t = np.where(d > 0, t_hi, np.where(d < 0, t_lo, np.inf))
        return t.min(axis=-1)


@dataclass
class Box(Primitive):
    """Solid axis-aligned box."""

    lo: tuple
    hi: tuple
    color: tuple = (60, 90, 200)

    def intersect(self, o, d):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - o) / d
            t2 = (hi - o) / d
        par = d == 0
        outside = par & ((o < lo) | (o > hi))
        tmin = np.where(par, -np.inf, np.minimum(t1, t2))
        tmax = np.where(par, np.inf, np.maximum(t1, t2))
        tmin = np.where(outside, np.inf, tmin)
        t_near = tmin.max(axis=-1)
        t_far = tmax.min(axis=-1)
        hit = (t_near <= t_far) & (t_far > _EPS)
        t = np.where(t_near > _EPS, t_near, t_far)
        return np.where(hit, t, np.inf)


@dataclass
class Sphere(Primitive):
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 3.0
    color: tuple = (200, 80, 80)

    def intersect(self, o, d):
        oc = o - np.asarray(self.center)
        a = np.einsum("...i,...i->...", d, d)
        b = 2.0 * np.einsum("...i,...i->...", oc, d)
        c = np.einsum("...i,...i->...", oc, oc) - self.radius**2
        disc = b * b - 4 * a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > _EPS, t0, np.where(t1 > _EPS, t1, np.inf))
        return np.where(disc >= 0, t, np.inf)


@dataclass
class Rect(Primitive):
    """Axis-aligned rectangle on the plane ``x[axis] == offset``; ``lo``/``hi`` bound the other two axes."""

    axis: int
    offset: float
    lo: tuple
    hi: tuple
    color: tuple = (230, 200, 40)

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.offset - o[..., self.axis]) / d[..., self.axis]
        p = o + t[..., None] * d
        others = [i for i in range(3) if i != self.axis]
        ok = (t > _EPS) & np.isfinite(t)
        for k, i in enumerate(others):
            ok &= (p[..., i] >= self.lo[k]) & (p[..., i] <= self.hi[k])
        return np.where(ok, t, np.inf)


@dataclass
class Scene:
    primitives: list = field(default_factory=list)
    texture_scale: float = 4.0

    def raycast(self, o, d):
        """Nearest hit along rays ``o + t d``.  Returns (t, primitive index or -1)."""
        o = np.broadcast_to(np.asarray(o, dtype=np.float64), np.shape(d))
        ts = np.stack([p.intersect(o, d) for p in self.primitives], axis=-1)
        idx = np.argmin(ts, axis=-1)
        t = np.take_along_axis(ts, idx[..., None], axis=-1)[..., 0]
        return t, np.where(np.isfinite(t), idx, -1)

    def shade(self, points, prim) -> np.ndarray:
        base = np.array([p.color for p in self.primitives] + [(0, 0, 0)], dtype=np.float64)[prim]
        q = np.floor(points * self.texture_scale).astype(np.int64).sum(axis=-1) % 2
        smooth = 0.5 + 0.5 * np.sin(points[..., 0] * 1.7 + points[..., 1] * 2.3 + points[..., 2] * 1.1)
        return np.clip(base * (0.55 + 0.25 * q[..., None] + 0.2 * smooth[..., None]), 0, 255)

    def render(self, pose: CameraPose, intr: Intrinsics):
        """Ground-truth (rgb uint8, z-depth with NaN for misses) seen from a camera."""
        rays = pixel_rays_cv(intr)
        d = rays @ (pose.rotation @ CV_TO_BODY).T
        t, prim = self.raycast(pose.translation, d)
        hit = np.isfinite(t)
        pts = pose.translation + np.where(hit, t, 0.0)[..., None] * d
        rgb = np.where(hit[..., None], self.shade(pts, prim), 0.0)
        return np.rint(rgb).astype(np.uint8), np.where(hit, t, np.nan)


def default_room() -> Scene:
    """Room with a couple of objects; the floor sits 1.6 m below the origin."""
    return Scene(
        [
            Room((-4.0, -3.5, -1.6), (5.0, 4.0, 2.4)),
            Box((2.0, -1.2, -1.6), (2.8, 0.2, -0.6), (70, 110, 190)),
            Sphere((-2.2, 2.0, -0.8), 0.7, (190, 70, 70)),
        ]
    )


def occluder_scene(wall_depth: float = 4.0, occ_depth: float = 2.0, half: float = 0.4, offsets=((0.0, 0.0),)) -> Scene:
    """Background wall facing the +x camera plus square occluders at ``occ_depth``.

    ``offsets`` are (y, z) centers of the occluder squares.
    """
    prims = [Rect(0, wall_depth, (-50.0, -50.0), (50.0, 50.0), (120, 170, 120))]
    for y, z in offsets:
        prims.append(Rect(0, occ_depth, (y - half, z - half), (y + half, z + half), (220, 60, 60)))
    return Scene(prims)


SCENES = {"room": default_room, "occluder": occluder_scene}
