"""Camera pose generators: the inpainting grid inside the navigable cube and evaluation orbits."""

from __future__ import annotations

import itertools
import math

import numpy as np

from .geometry import CameraPose, CameraView, Intrinsics, look_at, pose_from_angles

GRID_FOV = math.radians(85.0)
ROLL = math.radians(45.0)

_DIRECTIONS = {
    "forward": (0.0, 0.0),
    "backward": (math.pi, 0.0),
    "left": (-math.pi / 2, 0.0),
    "right": (math.pi / 2, 0.0),
    "up": (0.0, math.pi / 2),
    "down": (0.0, -math.pi / 2),
}


def grid_translations(cube_side: float = 2.0) -> dict[str, np.ndarray]:
    """Six face centers and eight corners of a cube centered on the origin."""
    if cube_side <= 0:
        raise ValueError("cube side must be positive")
    a = cube_side / 2.0
    out = {}
    for axis, name in enumerate("xyz"):
        for sign, s in (("+", 1.0), ("-", -1.0)):
            t = np.zeros(3)
            t[axis] = s * a
            out[f"face{sign}{name}"] = t
    for signs in itertools.product((1.0, -1.0), repeat=3):
        label = "".join("+" if s > 0 else "-" for s in signs)
        out[f"corner{label}"] = a * np.array(signs)
    return out


def grid_rotations() -> dict[str, np.ndarray]:
    """Six principal viewing directions plus four horizontal ones rolled by +-45 degrees.

    Directions are fixed in the world frame, independent of the camera position.
    """
    out = {name: pose_from_angles(yaw, pitch).rotation for name, (yaw, pitch) in _DIRECTIONS.items()}
    for name in ("forward", "backward", "left", "right"):
        yaw, _ = _DIRECTIONS[name]
        for sign, roll in (("+", ROLL), ("-", -ROLL)):
            out[f"{name}_roll{sign}45"] = pose_from_angles(yaw, 0.0, roll).rotation
    return out


def camera_grid(cube_side: float = 2.0, fov: float = GRID_FOV, resolution: int = 1024) -> list[CameraView]:
    """All 14 x 14 = 196 grid cameras, translation-major."""
    intr = Intrinsics.from_fov(fov, resolution)
    rots = grid_rotations()
    return [
        CameraView(CameraPose(r, t), intr)
        for t in grid_translations(cube_side).values()
        for r in rots.values()
    ]


def grid_labels(cube_side: float = 2.0) -> list[tuple[str, str]]:
    return [(tn, rn) for tn in grid_translations(cube_side) for rn in grid_rotations()]


def grid_subset(views: list, n: int) -> list:
    """Evenly strided subset of ``n`` grid views (deterministic)."""
    if n >= len(views):
        return list(views)
    idx = np.linspace(0, len(views) - 1, n).round().astype(int)
    return [views[i] for i in idx]


def eval_trajectories(
    radius: float = 0.5, n: int = 8, fov: float = math.radians(60.0), resolution: int = 1024
) -> list[list[CameraView]]:
    """Three inward-looking circles: level, roll +45 deg at z=-0.5 m, roll -45 deg at z=+0.5 m.

    Each circle starts behind the origin looking along +x (the input view
    direction) and steps evenly through ``n`` azimuths.
    """
    intr = Intrinsics.from_fov(fov, resolution)
    trajectories = []
    for roll, z in ((0.0, 0.0), (ROLL, -0.5), (-ROLL, 0.5)):
        views = []
        for k in range(n):
            a = math.pi + 2.0 * math.pi * k / n
            eye = np.array([radius * math.cos(a), radius * math.sin(a), z])
            views.append(CameraView(look_at(eye, (0.0, 0.0, z), roll=roll), intr))
        trajectories.append(views)
    return trajectories
