"""Deterministic stand-ins for the generative models.

Every mock is a pure function of (request, seed) and answers via the same
``OracleResponse`` type as remote backends.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..geometry import CameraView
from ..lift import DepthMap
from .protocol import OracleRequest, OracleResponse
from .scenes import SCENES, Scene


def _ok(req: OracleRequest, **kw) -> OracleResponse:
    return OracleResponse(job_id=req.job_id, kind=req.kind, **kw)


def seeded_color(seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 7]).integers(0, 256, 3).astype(np.uint8)


class ConstantFill:
    """Inpaint by painting every masked pixel one color."""

    def __init__(self, color=(128, 128, 128)):
        self.color = np.asarray(color, dtype=np.uint8)

    def __call__(self, req: OracleRequest) -> OracleResponse:
        req.validate()
        out = req.rgb.copy()
        out[np.asarray(req.mask, bool)] = self.color
        return _ok(req, rgb=out)


class MirrorFill:
    """Inpaint masked pixels by point-reflecting them through their nearest unmasked pixel.

    Falls back to the nearest pixel itself when the reflection leaves the image
    or lands in the mask; with no unmasked pixel at all the seed picks a color.
    """

    def __call__(self, req: OracleRequest) -> OracleResponse:
        req.validate()
        mask = np.asarray(req.mask, bool)
        out = req.rgb.copy()
        if not mask.any():
            return _ok(req, rgb=out)
        if mask.all():
            out[:] = seeded_color(req.seed)
            return _ok(req, rgb=out)
        h, w = mask.shape
        _, (iy, ix) = ndimage.distance_transform_edt(mask, return_indices=True)
        ys, xs = np.nonzero(mask)
        ny, nx = iy[ys, xs], ix[ys, xs]
        ry, rx = 2 * ny - ys, 2 * nx - xs
        inb = (ry >= 0) & (ry < h) & (rx >= 0) & (rx < w)
        use = inb.copy()
        use[inb] = ~mask[ry[inb], rx[inb]]
        sy = np.where(use, ry, ny)
        sx = np.where(use, rx, nx)
        out[ys, xs] = req.rgb[sy, sx]
        return _ok(req, rgb=out)


class MockRefine:
    """Mild blur-then-sharpen pass inside the mask, scaled by the request strength."""

    def __init__(self, enabled: bool = True, sigma: float = 1.0):
        self.enabled = enabled
        self.sigma = sigma

    def __call__(self, req: OracleRequest) -> OracleResponse:
        req.validate()
        out = req.rgb.copy()
        mask = np.ones(req.rgb.shape[:2], bool) if req.mask is None else np.asarray(req.mask, bool)
        if not self.enabled or not mask.any():
            return _ok(req, rgb=out)
        x = req.rgb.astype(np.float64)
        blur = ndimage.gaussian_filter(x, sigma=(self.sigma, self.sigma, 0), mode="nearest")
        sharp = x + 0.5 * (x - blur)
        filt = x + req.effective_strength * (0.5 * blur + 0.5 * sharp - x)
        out[mask] = np.clip(np.rint(filt[mask]), 0, 255).astype(np.uint8)
        return _ok(req, rgb=out)


def hidden_scale(seed: int) -> float:
    """Per-call affine-invariant scale in [0.5, 2] used by relative synthetic depth."""
    u = np.random.default_rng([seed, 11]).random()
    return float(0.5 * 4.0**u)


class SyntheticDepth:
    """Exact ray-cast depth of a procedural scene for the request's camera.

    ``relative=True`` multiplies the depth by ``hidden_scale(seed)``, emulating
    an affine-invariant estimator.
    """

    def __init__(self, scene: Scene | str = "room", relative: bool = False):
        self.scene = SCENES[scene]() if isinstance(scene, str) else scene
        self.relative = relative

    def __call__(self, req: OracleRequest) -> OracleResponse:
        req.validate()
        if req.camera is None:
            raise ValueError("synthetic depth needs the request camera")
        view = CameraView.from_dict(req.camera)
        _, depth = self.scene.render(view.pose, view.intr)
        if depth.shape != req.rgb.shape[:2]:
            raise ValueError("request camera resolution differs from the image")
        if self.relative:
            depth = depth * hidden_scale(req.seed)
        ok = np.isfinite(depth)
        values = np.where(ok, depth, np.nan).astype(np.float32)
        dm = DepthMap(values, ok.astype(np.float32), "relative" if self.relative else "metric")
        return _ok(req, depth=dm)


class Failing:
    """Always reports an error; for exercising failure paths."""

    def __init__(self, message: str = "mock failure", after: int = 0, inner=None):
        self.message = message
        self.after = after
        self.inner = inner
        self.calls = 0

    def __call__(self, req: OracleRequest) -> OracleResponse:
        self.calls += 1
        if self.calls > self.after or self.inner is None:
            return OracleResponse(job_id=req.job_id, kind=req.kind, status="error", error=self.message)
        return self.inner(req)
