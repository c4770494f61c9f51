"""Oracle request/response types and the multipart wire format.

A request travels as a JSON manifest plus image parts::

    manifest   application/json   {"version", "job_id", "kind", "width", "height",
                                   "prompt", "strength", "seed", "camera"}
    rgb        image/png          H x W x 3 uint8
    mask       image/png          H x W uint8, 255 = region to synthesize (optional)

A response carries a manifest ``{"version", "job_id", "kind", "status", "error"}``
and, on success, either ``rgb`` (PNG) or ``depth`` (PFM, float32) plus
``confidence`` (PNG, confidence x 255).  Multipart bodies use CRLF line ends and
the boundary ``panoworld-<sha1(job_id)[:24]>``; part order is fixed, so encoding
the same response always yields the same bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .. import fileio
from ..lift import DepthMap

WIRE_VERSION = 1
KINDS = ("inpaint", "refine", "depth_rel", "depth_metric")
DEFAULT_REFINE_STRENGTH = 0.3


class OracleError(RuntimeError):
    """Base class of oracle failures."""


class OracleTimeout(OracleError):
    pass


class MalformedResponse(OracleError):
    pass


class SizeMismatch(OracleError):
    pass


class OracleFailure(OracleError):
    """The oracle answered with ``status: error``."""


@dataclass
class OracleRequest:
    kind: str
    rgb: np.ndarray
    mask: np.ndarray | None = None
    prompt: str | None = None
    strength: float | None = None
    seed: int = 0
    # optional camera for oracles that need it (synthetic scenes); CameraView.to_dict() form
    camera: dict | None = None
    job_id: str | None = None

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown oracle kind {self.kind!r}")
        rgb = np.asarray(self.rgb)
        if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
            raise ValueError("request rgb must be an H x W x 3 uint8 image")
        if self.kind == "inpaint" and (self.mask is None or self.prompt is None):
            raise ValueError("inpaint requests carry a mask and a prompt")
        if self.kind in ("depth_rel", "depth_metric") and (self.mask is not None or self.prompt is not None):
            raise ValueError("depth requests carry neither mask nor prompt")
        if self.mask is not None and np.asarray(self.mask).shape != rgb.shape[:2]:
            raise SizeMismatch("mask and rgb sizes differ")
        if self.kind == "refine":
            s = self.effective_strength
            if not 0.0 < s <= 1.0:
                raise ValueError("refine strength must lie in (0, 1]")

    @property
    def effective_strength(self) -> float:
        return DEFAULT_REFINE_STRENGTH if self.strength is None else float(self.strength)

    def manifest(self) -> dict:
        h, w = self.rgb.shape[:2]
        return {
            "version": WIRE_VERSION,
            "job_id": self.job_id,
            "kind": self.kind,
            "width": int(w),
            "height": int(h),
            "prompt": self.prompt,
            "strength": self.effective_strength if self.kind == "refine" else self.strength,
            "seed": int(self.seed),
            "camera": self.camera,
        }


@dataclass
class OracleResponse:
    job_id: str | None = None
    kind: str | None = None
    rgb: np.ndarray | None = None
    depth: DepthMap | None = None
    status: str = "ok"
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def manifest(self) -> dict:
        return {"version": WIRE_VERSION, "job_id": self.job_id, "kind": self.kind, "status": self.status, "error": self.error}


def check_response(req: OracleRequest, resp: OracleResponse) -> OracleResponse:
    """Raise a typed error unless ``resp`` is a well-formed answer to ``req``."""
    if resp.status == "error":
        raise OracleFailure(resp.error or "oracle reported an error")
    if resp.status != "ok":
        raise MalformedResponse(f"unknown status {resp.status!r}")
    if req.job_id is not None and resp.job_id != req.job_id:
        raise MalformedResponse(f"response for job {resp.job_id!r} does not match request {req.job_id!r}")
    h, w = req.rgb.shape[:2]
    if req.kind in ("inpaint", "refine"):
        if resp.rgb is None or resp.depth is not None:
            raise MalformedResponse("image request must be answered with rgb only")
        if resp.rgb.shape != (h, w, 3):
            raise SizeMismatch(f"response image {resp.rgb.shape} for request {(h, w, 3)}")
    else:
        if resp.depth is None or resp.rgb is not None:
            raise MalformedResponse("depth request must be answered with depth only")
        if resp.depth.values.shape != (h, w):
            raise SizeMismatch(f"response depth {resp.depth.values.shape} for request {(h, w)}")
    return resp


# ------------------------------------------------------------------ multipart


def boundary_for(job_id: str | None) -> str:
    digest = hashlib.sha1((job_id or "").encode("utf-8")).hexdigest()[:24]
    return f"panoworld-{digest}"


def encode_multipart(parts: list[tuple[str, str, bytes]], boundary: str) -> bytes:
    """``parts`` is a list of (name, content_type, payload)."""
    out = []
    b = boundary.encode("ascii")
    for name, ctype, payload in parts:
        out.append(b"--" + b + b"\r\n")
        out.append(f'Content-Disposition: form-data; name="{name}"; filename="{name}"\r\n'.encode("ascii"))
        out.append(f"Content-Type: {ctype}\r\n\r\n".encode("ascii"))
        out.append(payload)
        out.append(b"\r\n")
    out.append(b"--" + b + b"--\r\n")
    return b"".join(out)


def content_type(boundary: str) -> str:
    return f"multipart/form-data; boundary={boundary}"


def parse_boundary(ctype: str) -> str:
    for piece in ctype.split(";"):
        piece = piece.strip()
        if piece.startswith("boundary="):
            return piece[len("boundary="):].strip('"')
    raise MalformedResponse(f"no multipart boundary in {ctype!r}")


def decode_multipart(body: bytes, boundary: str) -> dict[str, bytes]:
    delim = b"--" + boundary.encode("ascii")
    parts = {}
    chunks = body.split(delim)
    if len(chunks) < 2 or not chunks[-1].startswith(b"--"):
        raise MalformedResponse("truncated multipart body")
    for chunk in chunks[1:-1]:
        if not chunk.startswith(b"\r\n") or not chunk.endswith(b"\r\n"):
            raise MalformedResponse("bad multipart framing")
        chunk = chunk[2:-2]
        head, sep, payload = chunk.partition(b"\r\n\r\n")
        if not sep:
            raise MalformedResponse("multipart part without headers")
        name = None
        for line in head.decode("latin-1").split("\r\n"):
            if line.lower().startswith("content-disposition"):
                for item in line.split(";"):
                    item = item.strip()
                    if item.startswith("name="):
                        name = item[5:].strip('"')
        if name is None:
            raise MalformedResponse("multipart part without a name")
        parts[name] = payload
    return parts


def _json_bytes(d: dict) -> bytes:
    return json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")


def request_parts(req: OracleRequest) -> list[tuple[str, str, bytes]]:
    parts = [("manifest", "application/json", _json_bytes(req.manifest())), ("rgb", "image/png", fileio.encode_png(req.rgb))]
    if req.mask is not None:
        parts.append(("mask", "image/png", fileio.encode_png(np.asarray(req.mask, dtype=bool))))
    return parts


def request_from_parts(parts: dict[str, bytes]) -> OracleRequest:
    try:
        man = json.loads(parts["manifest"])
        rgb = fileio.decode_png(parts["rgb"])
    except (KeyError, ValueError) as exc:
        raise MalformedResponse(f"bad request: {exc}") from exc
    if man.get("version") != WIRE_VERSION:
        raise MalformedResponse(f"unsupported wire version {man.get('version')!r}")
    mask = None
    if "mask" in parts:
        m = fileio.decode_png(parts["mask"])
        mask = (m[..., 0] if m.ndim == 3 else m) >= 128
    req = OracleRequest(
        kind=man["kind"], rgb=rgb, mask=mask, prompt=man.get("prompt"), strength=man.get("strength"),
        seed=int(man.get("seed", 0)), camera=man.get("camera"), job_id=man.get("job_id"),
    )
    if rgb.shape[:2] != (man["height"], man["width"]):
        raise SizeMismatch("manifest size does not match the rgb part")
    return req


def response_parts(resp: OracleResponse) -> list[tuple[str, str, bytes]]:
    parts = [("manifest", "application/json", _json_bytes(resp.manifest()))]
    if resp.rgb is not None:
        parts.append(("rgb", "image/png", fileio.encode_png(resp.rgb)))
    if resp.depth is not None:
        parts.append(("depth", "application/x-pfm", fileio.encode_pfm(resp.depth.values)))
        parts.append(("confidence", "image/png", fileio.encode_png(confidence_to_u8(resp.depth.confidence))))
    return parts


def confidence_to_u8(conf: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(conf) * 255.0), 0, 255).astype(np.uint8)


def response_from_parts(parts: dict[str, bytes]) -> OracleResponse:
    try:
        man = json.loads(parts["manifest"])
    except (KeyError, ValueError) as exc:
        raise MalformedResponse(f"bad response manifest: {exc}") from exc
    if man.get("version") != WIRE_VERSION:
        raise MalformedResponse(f"unsupported wire version {man.get('version')!r}")
    resp = OracleResponse(job_id=man.get("job_id"), kind=man.get("kind"), status=man.get("status", "ok"), error=man.get("error"))
    try:
        if "rgb" in parts:
            resp.rgb = fileio.decode_png(parts["rgb"])
        if "depth" in parts:
            values = fileio.decode_pfm(parts["depth"])
            conf = fileio.decode_png(parts["confidence"]).astype(np.float32) / 255.0
            scale_class = "relative" if man.get("kind") == "depth_rel" else "metric"
            resp.depth = DepthMap(values, conf, scale_class)
    except (KeyError, ValueError) as exc:
        raise MalformedResponse(f"bad response payload: {exc}") from exc
    return resp


def encode_request(req: OracleRequest) -> tuple[bytes, str]:
    b = boundary_for(req.job_id)
    return encode_multipart(request_parts(req), b), content_type(b)


def encode_response(resp: OracleResponse) -> tuple[bytes, str]:
    b = boundary_for(resp.job_id)
    return encode_multipart(response_parts(resp), b), content_type(b)


def canonical(resp: OracleResponse) -> OracleResponse:
    """Round-trip a response through the wire format (quantizes confidence, depth to float32)."""
    body, ctype = encode_response(resp)
    return response_from_parts(decode_multipart(body, parse_boundary(ctype)))
