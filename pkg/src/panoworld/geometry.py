"""Camera models and perspective <-> equirectangular machinery.

Conventions
-----------
World frame is z-up, ground below the origin.  A camera "body" frame has x
forward, y left, z up, so the identity rotation looks along world +x with a
level horizon.  Image-plane math uses the usual vision frame (x right, y down,
z forward); ``CV_TO_BODY`` maps between them.

Panorama longitude ``theta`` grows to the right (clockwise seen from above)
and latitude ``phi`` grows downwards, so that equirect column/row indices
increase with ``theta``/``phi``: row 0 is the zenith, the last row the nadir.
Pixel centers sit at half-integer coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels

DEFAULT_FOV_X = math.radians(60.0)
DEFAULT_PANO_SIZE = (2048, 1024)
DEFAULT_FEATHER_PX = 5.0
_ORTHO_TOL = 1e-9

# columns: image x (right), image y (down), optical axis (forward) in body coordinates
CV_TO_BODY = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


class DomainError(ValueError):
    """Input outside the domain of a geometric operation."""


class ContractError(ValueError):
    """Caller violated an operation's precondition."""


@dataclass(frozen=True)
class Intrinsics:
    fov_x: float
    fov_y: float
    width: int
    height: int

    def __post_init__(self):
        if not (0.0 < self.fov_x < math.pi) or not (0.0 < self.fov_y < math.pi):
            raise DomainError(f"field of view must lie in (0, pi), got {self.fov_x}, {self.fov_y}")
        if self.width < 1 or self.height < 1:
            raise DomainError("image size must be at least 1x1")

    @classmethod
    def from_fov(cls, fov_x: float, width: int, height: int | None = None) -> "Intrinsics":
        """Build intrinsics from a horizontal fov, assuming equal focal length on both axes."""
        height = width if height is None else height
        if not (0.0 < fov_x < math.pi):
            raise DomainError(f"field of view must lie in (0, pi), got {fov_x}")
        fov_y = 2.0 * math.atan(math.tan(fov_x / 2.0) * height / width)
        return cls(float(fov_x), fov_y, int(width), int(height))

    @property
    def tan_half_x(self) -> float:
        return math.tan(self.fov_x / 2.0)

    @property
    def tan_half_y(self) -> float:
        return math.tan(self.fov_y / 2.0)

    @property
    def focal_x(self) -> float:
        return self.width / 2.0 / self.tan_half_x

    @property
    def focal_y(self) -> float:
        return self.height / 2.0 / self.tan_half_y

    def with_size(self, width: int, height: int | None = None) -> "Intrinsics":
        return Intrinsics.from_fov(self.fov_x, width, height)

    def to_dict(self) -> dict:
        return {"fov_x": self.fov_x, "fov_y": self.fov_y, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fov_x"]), float(d["fov_y"]), int(d["width"]), int(d["height"]))


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def check_rotation(r: np.ndarray, tol: float = _ORTHO_TOL) -> None:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise ContractError(f"rotation must be 3x3, got {r.shape}")
    if np.abs(r.T @ r - np.eye(3)).max() > tol or abs(np.linalg.det(r) - 1.0) > tol:
        raise ContractError("rotation is not a proper orthonormal matrix")


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World <- body rigid transform (meters, z-up)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        check_rotation(r)
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    __hash__ = None

    @property
    def is_rotation_only(self) -> bool:
        return not np.any(self.translation)

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 0].copy()

    def compose(self, other: "CameraPose") -> "CameraPose":
        """``self`` applied after ``other``."""
        return CameraPose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "CameraPose":
        return CameraPose(self.rotation.T, -self.rotation.T @ self.translation)

    def world_to_cv(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 3) world points into the camera's vision frame (z = depth)."""
        m = (self.rotation @ CV_TO_BODY).T
        return (np.asarray(points, dtype=np.float64) - self.translation) @ m.T

    def cv_to_world(self, points: np.ndarray) -> np.ndarray:
        m = self.rotation @ CV_TO_BODY
        return np.asarray(points, dtype=np.float64) @ m.T + self.translation

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.reshape(-1).tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3), d.get("translation", [0.0, 0.0, 0.0]))


def pose_from_angles(yaw: float = 0.0, pitch: float = 0.0, roll: float = 0.0, translation=None) -> CameraPose:
    """Camera pose from look angles.

    ``yaw`` turns right (same sense as panorama longitude), ``pitch`` looks up,
    ``roll`` spins about the optical axis.
    """
    r = rot_z(-yaw) @ rot_y(-pitch) @ rot_x(roll)
    return CameraPose(r, np.zeros(3) if translation is None else translation)


def look_at(eye, target, up=(0.0, 0.0, 1.0), roll: float = 0.0) -> CameraPose:
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    left = np.cross(np.asarray(up, dtype=np.float64), fwd)
    n = np.linalg.norm(left)
    if n < 1e-12:
        raise DomainError("look direction is parallel to the up vector")
    left /= n
    upb = np.cross(fwd, left)
    r = np.stack([fwd, left, upb], axis=1) @ rot_x(roll)
    return CameraPose(r, eye)


@dataclass(frozen=True, eq=False)
class CameraView:
    pose: CameraPose
    intr: Intrinsics

    def to_dict(self) -> dict:
        return {"pose": self.pose.to_dict(), "intrinsics": self.intr.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraView":
        return cls(CameraPose.from_dict(d["pose"]), Intrinsics.from_dict(d["intrinsics"]))


@dataclass
class EquirectPanorama:
    rgb: np.ndarray
    fill_mask: np.ndarray

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb)
        self.fill_mask = np.asarray(self.fill_mask, dtype=bool)
        h, w = self.fill_mask.shape
        if w != 2 * h:
            raise DomainError(f"panorama must be 2:1, got {w}x{h}")
        if self.rgb.shape != (h, w, 3):
            raise DomainError(f"rgb shape {self.rgb.shape} does not match mask {self.fill_mask.shape}")
        if self.rgb.dtype != np.uint8:
            raise DomainError("panorama rgb must be uint8")

    @classmethod
    def empty(cls, width: int = DEFAULT_PANO_SIZE[0], height: int | None = None) -> "EquirectPanorama":
        height = width // 2 if height is None else height
        return cls(np.zeros((height, width, 3), np.uint8), np.zeros((height, width), bool))

    @property
    def width(self) -> int:
        return self.fill_mask.shape[1]

    @property
    def height(self) -> int:
        return self.fill_mask.shape[0]

    def copy(self) -> "EquirectPanorama":
        return EquirectPanorama(self.rgb.copy(), self.fill_mask.copy())

    def coverage(self) -> float:
        return float(self.fill_mask.mean())


# ---------------------------------------------------------------- coordinate maps


def pixel_to_angles(u, v, intr: Intrinsics):
    """Normalized view coordinates in [-1, 1] to (theta, phi), linear in the fov."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(np.abs(u) > 1.0) or np.any(np.abs(v) > 1.0):
        raise DomainError("normalized coordinates must lie in [-1, 1]")
    return u * (intr.fov_x / 2.0), v * (intr.fov_y / 2.0)


def angles_to_pixel(theta, phi, intr: Intrinsics):
    return np.asarray(theta, dtype=np.float64) / (intr.fov_x / 2.0), np.asarray(phi, dtype=np.float64) / (
        intr.fov_y / 2.0
    )


def angles_to_equirect(theta, phi, pano_w: int, pano_h: int):
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    return (theta + math.pi) / (2.0 * math.pi) * pano_w, (phi + math.pi / 2.0) / math.pi * pano_h


def equirect_to_angles(x, y, pano_w: int, pano_h: int):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return x / pano_w * (2.0 * math.pi) - math.pi, y / pano_h * math.pi - math.pi / 2.0


def angles_to_direction(theta, phi) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    c = np.cos(phi)
    return np.stack([c * np.cos(theta), -c * np.sin(theta), -np.sin(phi)], axis=-1)


def direction_to_angles(d: np.ndarray):
    d = np.asarray(d, dtype=np.float64)
    theta = np.arctan2(-d[..., 1], d[..., 0])
    phi = np.arctan2(-d[..., 2], np.hypot(d[..., 0], d[..., 1]))
    return theta, phi


def pixel_grid(intr: Intrinsics):
    """Normalized coordinates (u, v) of every pixel center, each (H, W)."""
    u = (np.arange(intr.width) + 0.5) / intr.width * 2.0 - 1.0
    v = (np.arange(intr.height) + 0.5) / intr.height * 2.0 - 1.0
    return np.meshgrid(u, v)


def pixel_rays_cv(intr: Intrinsics) -> np.ndarray:
    """(H, W, 3) rays in the vision frame with unit z."""
    u, v = pixel_grid(intr)
    return np.stack([u * intr.tan_half_x, v * intr.tan_half_y, np.ones_like(u)], axis=-1)


def project_cv(points_cv: np.ndarray, intr: Intrinsics):
    """Vision-frame points to continuous image coordinates (pixel j spans [j, j+1)).

    Returns (col, row, depth); points behind the camera get NaN coordinates.
    """
    p = np.asarray(points_cv, dtype=np.float64)
    z = p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = z > 0
        zs = np.where(ok, z, np.nan)
        col = (p[..., 0] / zs / intr.tan_half_x + 1.0) * 0.5 * intr.width
        row = (p[..., 1] / zs / intr.tan_half_y + 1.0) * 0.5 * intr.height
    return col, row, z


def pano_directions(pano_w: int, pano_h: int) -> np.ndarray:
    x = np.arange(pano_w) + 0.5
    y = np.arange(pano_h) + 0.5
    theta, phi = equirect_to_angles(*np.meshgrid(x, y), pano_w, pano_h)
    return angles_to_direction(theta, phi)


def feather(mask: np.ndarray, radius: float) -> np.ndarray:
    """Soft version of a boolean mask; a Gaussian whose support reaches ``radius`` px."""
    m = np.asarray(mask, dtype=np.float64)
    if radius <= 0:
        return m
    return ndimage.gaussian_filter(m, sigma=radius / 2.0, truncate=2.0, mode="nearest")


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- pano <-> view


def _view_to_pano_coords(pose: CameraPose, intr: Intrinsics, pano_w: int, pano_h: int):
    rays = pixel_rays_cv(intr).reshape(-1, 3)
    dirs = rays @ (pose.rotation @ CV_TO_BODY).T
    theta, phi = direction_to_angles(dirs)
    x, y = angles_to_equirect(theta, phi, pano_w, pano_h)
    return x - 0.5, y - 0.5


def render_view_from_pano(pano: EquirectPanorama, pose: CameraPose, intr: Intrinsics):
    """Perspective view of the panorama.  Returns (rgb uint8, known_mask)."""
    if not pose.is_rotation_only:
        raise ContractError("a panorama only supports rotation; pose translation must be zero")
    x, y = _view_to_pano_coords(pose, intr, pano.width, pano.height)
    rgb = kernels.bilinear(pano.rgb, x, y, wrap_x=True)
    filled = kernels.bilinear(pano.fill_mask.astype(np.float64), x, y, wrap_x=True)
    shape = (intr.height, intr.width)
    return _to_uint8(rgb).reshape(shape + (3,)), (filled > 1.0 - 1e-6).reshape(shape)


def view_footprint(pose: CameraPose, intr: Intrinsics, pano_w: int, pano_h: int):
    """Pano pixels whose center direction falls inside the view frustum.

    Returns (mask, col, row) with view-image coordinates (pixel-center = integer)
    for the masked pixels.
    """
    dirs = pano_directions(pano_w, pano_h).reshape(-1, 3)
    cv = dirs @ (pose.rotation @ CV_TO_BODY)
    col, row, z = project_cv(cv, intr)
    with np.errstate(invalid="ignore"):
        inside = (z > 0) & (col >= 0) & (col <= intr.width) & (row >= 0) & (row <= intr.height)
    return inside.reshape(pano_h, pano_w), col[inside] - 0.5, row[inside] - 0.5


def project_view_into_pano(
    view_rgb: np.ndarray,
    write_mask: np.ndarray,
    pose: CameraPose,
    intr: Intrinsics,
    pano: EquirectPanorama,
    feather_px: float = DEFAULT_FEATHER_PX,
    protect: np.ndarray | None = None,
) -> EquirectPanorama:
    """Write a perspective view back into a copy of ``pano``.

    Every pano pixel inside the view frustum looks up the view bilinearly.  The
    blend weight is the feathered ``write_mask`` (radius ``feather_px``); pano
    pixels that are still empty take the view fully, pixels in ``protect`` are
    never modified.
    """
    if intr.fov_x >= math.pi or intr.fov_y >= math.pi:
        raise DomainError("field of view must be below 180 degrees")
    if not pose.is_rotation_only:
        raise ContractError("a panorama only supports rotation; pose translation must be zero")
    write_mask = np.asarray(write_mask, dtype=bool)
    if write_mask.shape != (intr.height, intr.width) or view_rgb.shape[:2] != write_mask.shape:
        raise ContractError("view and write mask must match the intrinsics resolution")
    out = pano.copy()
    if not write_mask.any():
        return out
    inside, col, row = view_footprint(pose, intr, pano.width, pano.height)
    weight = kernels.bilinear(feather(write_mask, feather_px), col, row)
    sampled = kernels.bilinear(view_rgb.astype(np.float64), col, row)

    flat_rgb = out.rgb.reshape(-1, 3)
    flat_fill = out.fill_mask.reshape(-1)
    idx = np.flatnonzero(inside)
    old_fill = flat_fill[idx]
    w = np.where(~old_fill & (weight > 0), 1.0, weight)
    if protect is not None:
        w[np.asarray(protect, dtype=bool).reshape(-1)[idx]] = 0.0
    touched = w > 0
    idx, w, sampled = idx[touched], w[touched, None], sampled[touched]
    flat_rgb[idx] = _to_uint8(w * sampled + (1.0 - w) * flat_rgb[idx])
    flat_fill[idx] = True
    return out


def solid_angle_rect(fov_x: float, fov_y: float) -> float:
    """Solid angle of a rectangular pinhole frustum."""
    return 4.0 * math.asin(math.sin(fov_x / 2.0) * math.sin(fov_y / 2.0))


def area_weighted_fraction(mask: np.ndarray) -> float:
    """Fraction of the sphere covered by an equirect mask (cos-latitude weighted)."""
    h = mask.shape[0]
    phi = (np.arange(h) + 0.5) / h * math.pi - math.pi / 2.0
    w = np.cos(phi)[:, None] * np.ones(mask.shape[1])
    return float((w * mask).sum() / w.sum())
