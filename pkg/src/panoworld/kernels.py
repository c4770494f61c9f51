"""Hot inner loops with a compiled backend and a pure numpy fallback.

The compiled extension (``panoworld._kernels``) is used when it was built and
``PANOWORLD_PURE_PYTHON`` is not set.  Both backends produce bit-identical
results; ``tests/test_kernels.py`` checks this.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = ["BACKEND", "bilinear", "zbuffer", "use_backend"]


def _py_zbuffer(pixel, depth, point, n_pixels):
    zbuf = np.full(n_pixels, np.inf)
    win = np.full(n_pixels, -1, dtype=np.int64)
    keep = pixel >= 0
    pixel, depth, point = pixel[keep], depth[keep], point[keep]
    if pixel.size == 0:
        return win, zbuf
    order = np.lexsort((point, depth, pixel))
    pix_sorted = pixel[order]
    first = np.ones(pix_sorted.size, dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    chosen = order[first]
    zbuf[pixel[chosen]] = depth[chosen]
    win[pixel[chosen]] = point[chosen]
    return win, zbuf


def _py_bilinear(img, x, y, wrap_x):
    h, w = img.shape[:2]
    y = np.clip(y, 0.0, h - 1)
    if wrap_x:
        fx = np.floor(x)
        x0 = fx.astype(np.int64)
        fx = x - fx
        x0 = np.mod(x0, w)
        x1 = (x0 + 1) % w
    else:
        x = np.clip(x, 0.0, w - 1)
        fx = np.floor(x)
        x0 = fx.astype(np.int64)
        fx = x - fx
        x1 = np.minimum(x0 + 1, w - 1)
    gy = np.floor(y)
    y0 = gy.astype(np.int64)
    fy = y - gy
    y1 = np.minimum(y0 + 1, h - 1)
    gx = (1.0 - fx)[:, None]
    gy = (1.0 - fy)[:, None]
    fx = fx[:, None]
    fy = fy[:, None]
    top = img[y0, x0] * gx + img[y0, x1] * fx
    bot = img[y1, x0] * gx + img[y1, x1] * fx
    return top * gy + bot * fy


try:
    from . import _kernels as _ext
except ImportError:  # extension not built
    _ext = None

BACKEND = "python"
_zbuffer_impl = _py_zbuffer
_bilinear_impl = _py_bilinear


def use_backend(name: str) -> None:
    """Switch between ``"compiled"`` and ``"python"`` kernels at runtime."""
    global BACKEND, _zbuffer_impl, _bilinear_impl
    if name == "compiled":
        if _ext is None:
            raise RuntimeError("compiled kernels are not available; build the extension first")
        _zbuffer_impl, _bilinear_impl = _ext.zbuffer, _ext.bilinear
    elif name == "python":
        _zbuffer_impl, _bilinear_impl = _py_zbuffer, _py_bilinear
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name


if _ext is not None and not os.environ.get("PANOWORLD_PURE_PYTHON"):
    use_backend("compiled")


def compiled_available() -> bool:
    return _ext is not None


def zbuffer(pixel, depth, point, n_pixels: int):
    """Resolve per-pixel visibility.

    ``pixel[i]`` is a flat pixel index (or -1 to skip), ``depth[i]`` the
    camera depth and ``point[i]`` the id of the point that produced entry i.
    Returns ``(winner, zbuf)``: for every pixel the id of the nearest point
    (ties go to the lowest id, -1 where empty) and its depth (inf where empty).
    """
    pixel = np.ascontiguousarray(pixel, dtype=np.int64)
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    point = np.ascontiguousarray(point, dtype=np.int64)
    return _zbuffer_impl(pixel, depth, point, int(n_pixels))


def bilinear(img, x, y, wrap_x: bool = False):
    """Sample ``img`` (H, W, C) at pixel-index coordinates ``(x, y)``.

    Pixel centers sit at integer coordinates.  Rows are clamped; columns are
    clamped, or wrapped modulo W when ``wrap_x`` is set.  Returns (N, C) float64.
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    x = np.ascontiguousarray(x, dtype=np.float64).ravel()
    y = np.ascontiguousarray(y, dtype=np.float64).ravel()
    out = _bilinear_impl(img, x, y, bool(wrap_x))
    return out[:, 0] if squeeze else out
