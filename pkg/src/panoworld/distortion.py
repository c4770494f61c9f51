"""Trainable per-image grid distortion.

An image ``I`` is resampled as ``I_hat(p) = bilinear(I; p + up(f)(p))`` where
``f(p, c) = offset_scale * tanh(MLP([embed(p), c]))`` is evaluated on a coarse
``grid_res x grid_res`` lattice and bilinearly upsampled to full resolution.
``p`` is in normalized coordinates ([-1, 1] across the image, pixel centers
at half-integers), ``c`` is a per-image latent code.

Gradients are derived by hand (numpy only) so the module can be dropped into
any trainer; ``tests/test_distortion.py`` checks them against central finite
differences.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

logger = logging.getLogger(__name__)

EMBED_FREQS = 8
CODE_DIM = 32
HIDDEN = 128
GRID_RES = 128
OFFSET_SCALE = 0.02
CHECKPOINT_MAGIC = "#panoworld-distortion v1"
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


class DivergenceError(RuntimeError):
    pass


def harmonic_embed(p, n_freq: int = EMBED_FREQS) -> np.ndarray:
    """Per frequency k: sin/cos of 2^k pi u, then sin/cos of 2^k pi v.  Output has 4 * n_freq values."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != 2:
        raise ValueError("positions must have two components")
    freqs = (2.0 ** np.arange(n_freq)) * math.pi
    u = p[..., 0:1] * freqs
    v = p[..., 1:2] * freqs
    out = np.stack([np.sin(u), np.cos(u), np.sin(v), np.cos(v)], axis=-1)
    return out.reshape(p.shape[:-1] + (4 * n_freq,))


def grid_coords(grid_res: int) -> np.ndarray:
    """(G, G, 2) normalized (u, v) of the lattice; corners sit on the image corners."""
    g = np.linspace(-1.0, 1.0, grid_res)
    u, v = np.meshgrid(g, g)
    return np.stack([u, v], axis=-1)


def upsample_matrix(grid_res: int, n: int, dtype=np.float64) -> np.ndarray:
    """(n, G) linear-interpolation weights from the lattice to ``n`` pixel centers."""
    p = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    g = (p + 1.0) / 2.0 * (grid_res - 1)
    i0 = np.clip(np.floor(g).astype(np.int64), 0, grid_res - 2)
    f = g - i0
    m = np.zeros((n, grid_res), dtype=dtype)
    rows = np.arange(n)
    m[rows, i0] = 1.0 - f
    m[rows, i0 + 1] += f
    return m


def upsample(offsets: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinearly upsample (G, G, 2) offsets to (H, W, 2)."""
    g = offsets.shape[0]
    ay = upsample_matrix(g, height, offsets.dtype)
    ax = upsample_matrix(g, width, offsets.dtype)
    return np.stack([ay @ offsets[..., k] @ ax.T for k in range(2)], axis=-1)


@dataclass
class DistortionField:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    codes: dict = field(default_factory=dict)
    grid_res: int = GRID_RES
    n_freq: int = EMBED_FREQS
    offset_scale: float = OFFSET_SCALE

    def __post_init__(self):
        if self.grid_res < 2:
            raise ValueError("grid_res must be at least 2")
        if self.W1.shape[0] != 4 * self.n_freq + self.code_dim:
            raise ValueError("first layer input must be embedding + code")
        self._embed = None

    @classmethod
    def create(
        cls,
        seed: int = 0,
        grid_res: int = GRID_RES,
        offset_scale: float = OFFSET_SCALE,
        n_freq: int = EMBED_FREQS,
        code_dim: int = CODE_DIM,
        hidden: int = HIDDEN,
        zero_last_layer: bool = True,
        dtype=np.float64,
    ) -> "DistortionField":
        rng = np.random.default_rng(seed)
        d_in = 4 * n_freq + code_dim
        w3 = np.zeros((hidden, 2)) if zero_last_layer else rng.normal(0, 1 / math.sqrt(hidden), (hidden, 2))
        f = cls(
            W1=rng.normal(0, math.sqrt(2.0 / d_in), (d_in, hidden)).astype(dtype),
            b1=np.zeros(hidden, dtype),
            W2=rng.normal(0, math.sqrt(2.0 / hidden), (hidden, hidden)).astype(dtype),
            b2=np.zeros(hidden, dtype),
            W3=w3.astype(dtype),
            b3=np.zeros(2, dtype),
            grid_res=grid_res,
            n_freq=n_freq,
            offset_scale=offset_scale,
        )
        f._code_rng = np.random.default_rng([seed, 1])
        return f

    @property
    def code_dim(self) -> int:
        return self.W1.shape[0] - 4 * self.n_freq

    @property
    def dtype(self):
        return self.W1.dtype

    def params(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def register(self, image_id: str, code=None, scale: float = 0.1) -> np.ndarray:
        if code is None:
            rng = getattr(self, "_code_rng", None) or np.random.default_rng([len(self.codes), 1])
            code = rng.normal(0, scale, self.code_dim)
        code = np.asarray(code, dtype=self.dtype).reshape(self.code_dim)
        self.codes[image_id] = code
        return code

    def astype(self, dtype) -> "DistortionField":
        f = DistortionField(
            **{k: v.astype(dtype) for k, v in self.params().items()},
            codes={k: v.astype(dtype) for k, v in self.codes.items()},
            grid_res=self.grid_res, n_freq=self.n_freq, offset_scale=self.offset_scale,
        )
        return f

    def copy(self) -> "DistortionField":
        return self.astype(self.dtype)

    def embedding(self) -> np.ndarray:
        if self._embed is None or self._embed.dtype != self.dtype:
            e = harmonic_embed(grid_coords(self.grid_res).reshape(-1, 2), self.n_freq)
            self._embed = e.astype(self.dtype)
        return self._embed

    def code(self, image_id) -> np.ndarray:
        try:
            return self.codes[image_id]
        except KeyError:
            raise KeyError(f"no code registered for image {image_id!r}") from None

    # ----------------------------------------------------------- forward / backward

    def _forward(self, code):
        d_e = 4 * self.n_freq
        e = self.embedding()
        a1 = e @ self.W1[:d_e] + (code @ self.W1[d_e:] + self.b1)
        h1 = np.maximum(a1, 0)
        a2 = h1 @ self.W2 + self.b2
        h2 = np.maximum(a2, 0)
        t = np.tanh(h2 @ self.W3 + self.b3)
        return t * self.offset_scale, (e, a1, h1, a2, h2, t)

    def _backward(self, code, cache, d_off):
        e, a1, h1, a2, h2, t = cache
        d_e = 4 * self.n_freq
        da3 = d_off * self.offset_scale * (1.0 - t * t)
        g = {"W3": h2.T @ da3, "b3": da3.sum(0)}
        da2 = (da3 @ self.W3.T) * (a2 > 0)
        g["W2"] = h1.T @ da2
        g["b2"] = da2.sum(0)
        da1 = (da2 @ self.W2.T) * (a1 > 0)
        s1 = da1.sum(0)
        g["W1"] = np.concatenate([e.T @ da1, np.outer(code, s1)], axis=0)
        g["b1"] = s1
        return g, self.W1[d_e:] @ s1


def offset_grid(fld: DistortionField, image_id) -> np.ndarray:
    """(G, G, 2) offsets in normalized units for one image."""
    off, _ = fld._forward(fld.code(image_id))
    return off.reshape(fld.grid_res, fld.grid_res, 2)


def _sample_coords(offsets: np.ndarray, height: int, width: int):
    up = upsample(offsets, height, width)
    x = np.arange(width, dtype=offsets.dtype)[None, :] + up[..., 0] * (width / 2.0)
    y = np.arange(height, dtype=offsets.dtype)[:, None] + up[..., 1] * (height / 2.0)
    return x, y


def apply_distortion(image: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Resample ``image`` (H, W[, C]) at ``p + up(offsets)(p)``; borders clamp.  Returns float64."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    x, y = _sample_coords(np.asarray(offsets, dtype=np.float64), h, w)
    out = kernels.bilinear(img.astype(np.float64), x.ravel(), y.ravel())
    return out.reshape(img.shape)


def _bilinear_taps(img, x, y):
    """Value, spatial derivatives and tap layout of a clamped bilinear lookup."""
    h, w = img.shape[:2]
    cx = (x >= 0) & (x <= w - 1)
    cy = (y >= 0) & (y <= h - 1)
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = (x - x0.astype(x.dtype))[..., None]
    fy = (y - y0.astype(y.dtype))[..., None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    a, b, c, d = img[y0, x0], img[y0, x1], img[y1, x0], img[y1, x1]
    gx, gy = 1 - fx, 1 - fy
    top = a * gx + b * fx
    bot = c * gx + d * fx
    val = top * gy + bot * fy
    dx = ((b - a) * gy + (d - c) * fy) * cx[..., None]
    dy = (bot - top) * cy[..., None]
    taps = ((y0, x0, gx * gy), (y0, x1, fx * gy), (y1, x0, gx * fy), (y1, x1, fx * fy))
    return val, dx, dy, taps


def gradients(fld: DistortionField, image, target, image_id, offset_l2: float = 0.0, with_image: bool = False):
    """Mean squared photometric loss of the distorted image and its gradients.

    Returns ``(loss, grads)`` where ``grads`` maps every MLP parameter name,
    ``"code"`` and, if requested, ``"image"`` to arrays shaped like their inputs.
    """
    dt = fld.dtype
    img = np.asarray(image, dtype=dt)
    tgt = np.asarray(target, dtype=dt)
    if img.shape != tgt.shape:
        raise ValueError("image and target must have the same size")
    squeeze = img.ndim == 2
    if squeeze:
        img, tgt = img[..., None], tgt[..., None]
    h, w, ch = img.shape
    code = fld.code(image_id)
    off, cache = fld._forward(code)
    g_res = fld.grid_res
    off_grid = off.reshape(g_res, g_res, 2)
    x, y = _sample_coords(off_grid, h, w)
    val, dx, dy, taps = _bilinear_taps(img, x, y)
    resid = val - tgt
    n = resid.size
    loss = float(np.sum(resid * resid) / n)
    g_val = resid * (2.0 / n)
    g_x = (g_val * dx).sum(-1) * (w / 2.0)
    g_y = (g_val * dy).sum(-1) * (h / 2.0)
    ay = upsample_matrix(g_res, h, dt)
    ax = upsample_matrix(g_res, w, dt)
    d_off = np.stack([ay.T @ g_x @ ax, ay.T @ g_y @ ax], axis=-1).reshape(-1, 2)
    if offset_l2:
        loss += float(offset_l2 * np.mean(off * off))
        d_off = d_off + off * (2.0 * offset_l2 / off.size)
    grads, g_code = fld._backward(code, cache, d_off)
    grads["code"] = g_code
    if with_image:
        gi = np.zeros((h * w, ch), dtype=dt)
        for yy, xx, wt in taps:
            flat = (yy * w + xx).ravel()
            contrib = (g_val * wt).reshape(-1, ch)
            for k in range(ch):
                gi[:, k] += np.bincount(flat, weights=contrib[:, k], minlength=h * w)
        gi = gi.reshape(h, w, ch)
        grads["image"] = gi[..., 0] if squeeze else gi
    return loss, grads


def photometric_loss(fld: DistortionField, image, target, image_id, offset_l2: float = 0.0) -> float:
    return gradients(fld, image, target, image_id, offset_l2)[0]


@dataclass
class FitResult:
    field: DistortionField
    losses: list
    initial_losses: dict
    final_losses: dict


def fit(
    fld: DistortionField,
    pairs,
    steps: int = 2000,
    lr: float = 1e-3,
    betas=(0.9, 0.999),
    eps: float = 1e-8,
    offset_l2: float = 0.0,
    divergence: float = 1e3,
    rel_tol: float | None = None,
    log_every: int = 0,
) -> FitResult:
    """Adam on the mean loss over ``pairs`` = [(image, target, image_id), ...].  Updates ``fld`` in place.

    With ``rel_tol`` set, stops early once the mean loss falls to ``rel_tol`` times the first-step loss.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("fit needs at least one (image, target, image_id) pair")
    for _, _, iid in pairs:
        if iid not in fld.codes:
            fld.register(iid)
    ids = sorted({iid for _, _, iid in pairs}, key=str)
    dt = fld.dtype
    pairs = [(np.asarray(i, dt), np.asarray(t, dt), iid) for i, t, iid in pairs]
    m = {k: np.zeros_like(v) for k, v in fld.params().items()}
    v = {k: np.zeros_like(a) for k, a in fld.params().items()}
    mc = {i: np.zeros_like(fld.codes[i]) for i in ids}
    vc = {i: np.zeros_like(fld.codes[i]) for i in ids}
    b1, b2 = betas
    losses = []
    initial = {}
    for step in range(1, steps + 1):
        total = 0.0
        acc = {k: np.zeros_like(a) for k, a in fld.params().items()}
        acc_c = {i: np.zeros_like(fld.codes[i]) for i in ids}
        for img, tgt, iid in pairs:
            loss, g = gradients(fld, img, tgt, iid, offset_l2)
            if step == 1:
                initial[iid] = initial.get(iid, 0.0) + loss
            total += loss
            for k in PARAM_NAMES:
                acc[k] += g[k]
            acc_c[iid] += g["code"]
        total /= len(pairs)
        losses.append(total)
        if not np.isfinite(total) or total > divergence * max(losses[0], 1e-6):
            raise DivergenceError(
                f"loss {total:.4g} at step {step} exceeds {divergence:g} x initial {losses[0]:.4g}; lower the learning rate"
            )
        if rel_tol is not None and total <= rel_tol * losses[0]:
            break
        corr1 = 1 - b1**step
        corr2 = 1 - b2**step
        for k in PARAM_NAMES:
            g = acc[k] / len(pairs)
            m[k] = b1 * m[k] + (1 - b1) * g
            v[k] = b2 * v[k] + (1 - b2) * g * g
            setattr(fld, k, (getattr(fld, k) - lr * (m[k] / corr1) / (np.sqrt(v[k] / corr2) + eps)).astype(dt))
        for i in ids:
            g = acc_c[i] / len(pairs)
            mc[i] = b1 * mc[i] + (1 - b1) * g
            vc[i] = b2 * vc[i] + (1 - b2) * g * g
            fld.codes[i] = (fld.codes[i] - lr * (mc[i] / corr1) / (np.sqrt(vc[i] / corr2) + eps)).astype(dt)
        if log_every and step % log_every == 0:
            logger.info("distortion fit step %d loss %.6g", step, total)
    final = {}
    for img, tgt, iid in pairs:
        final[iid] = final.get(iid, 0.0) + photometric_loss(fld, img, tgt, iid)
    return FitResult(fld, losses, initial, final)


# ------------------------------------------------------------------ checkpoint


def save_checkpoint(fld: DistortionField, path) -> None:
    """Write parameters as: magic line, one JSON header line, then a raw blob.

    The header lists ``tensors`` as ``{"name", "shape", "offset", "nbytes"}``
    with offsets into the blob that follows the header's newline.  Every tensor
    is little-endian float32, row-major.  Codes are named ``code/<image id>``.
    """
    tensors = [(k, a) for k, a in fld.params().items()] + [(f"code/{i}", c) for i, c in sorted(fld.codes.items())]
    entries, blobs, off = [], [], 0
    for name, a in tensors:
        b = np.ascontiguousarray(a, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(a)), "offset": off, "nbytes": len(b)})
        blobs.append(b)
        off += len(b)
    header = {
        "grid_res": fld.grid_res,
        "n_freq": fld.n_freq,
        "code_dim": fld.code_dim,
        "hidden": fld.W2.shape[0],
        "offset_scale": fld.offset_scale,
        "activations": ["relu", "relu", "tanh"],
        "dtype": "<f4",
        "tensors": entries,
    }
    data = (CHECKPOINT_MAGIC + "\n" + json.dumps(header, sort_keys=True) + "\n").encode("utf-8") + b"".join(blobs)
    Path(path).write_bytes(data)


def load_checkpoint(path, dtype=np.float64) -> DistortionField:
    data = Path(path).read_bytes()
    nl1 = data.index(b"\n")
    if data[:nl1].decode("utf-8") != CHECKPOINT_MAGIC:
        raise ValueError("not a distortion checkpoint (bad magic line)")
    nl2 = data.index(b"\n", nl1 + 1)
    header = json.loads(data[nl1 + 1:nl2])
    base = nl2 + 1
    arrays, codes = {}, {}
    for e in header["tensors"]:
        a = np.frombuffer(data, dtype="<f4", count=e["nbytes"] // 4, offset=base + e["offset"])
        a = a.reshape(e["shape"]).astype(dtype)
        if e["name"].startswith("code/"):
            codes[e["name"][5:]] = a
        else:
            arrays[e["name"]] = a
    return DistortionField(
        **arrays, codes=codes, grid_res=header["grid_res"], n_freq=header["n_freq"], offset_scale=header["offset_scale"]
    )
