"""Pluggable generative-model oracles and their deterministic mocks."""

from __future__ import annotations

from .mocks import ConstantFill, Failing, MirrorFill, MockRefine, SyntheticDepth, hidden_scale
from .protocol import (
    MalformedResponse,
    OracleError,
    OracleFailure,
    OracleRequest,
    OracleResponse,
    OracleTimeout,
    SizeMismatch,
)
from .transport import DirectoryBackend, DirectoryServer, HttpBackend, OracleClient, start_http_server

__all__ = [
    "ConstantFill", "DirectoryBackend", "DirectoryServer", "Failing", "HttpBackend", "MalformedResponse",
    "MirrorFill", "MockRefine", "OracleClient", "OracleError", "OracleFailure", "OracleRequest",
    "OracleResponse", "OracleTimeout", "SizeMismatch", "SyntheticDepth", "hidden_scale", "make_backend",
    "start_http_server",
]


def make_backend(spec: str, timeout: float = 600.0):
    """Build a backend from a config string.

    ``mock:constant[:r,g,b]``, ``mock:mirror``, ``mock:refine[:off]``,
    ``synthetic:<scene>`` (metric depth), ``synthetic-rel:<scene>`` (relative depth),
    ``dir:<path>`` or an ``http(s)://`` URL.
    """
    kind, _, arg = spec.partition(":")
    if spec.startswith(("http://", "https://")):
        return HttpBackend(spec, timeout=timeout)
    if kind == "dir":
        return DirectoryBackend(arg, timeout=timeout)
    if kind == "mock":
        name, _, opt = arg.partition(":")
        if name == "constant":
            color = tuple(int(c) for c in opt.split(",")) if opt else (128, 128, 128)
            return ConstantFill(color)
        if name == "mirror":
            return MirrorFill()
        if name == "refine":
            return MockRefine(enabled=opt != "off")
    if kind == "synthetic":
        return SyntheticDepth(arg or "room", relative=False)
    if kind == "synthetic-rel":
        return SyntheticDepth(arg or "room", relative=True)
    raise ValueError(f"unknown oracle backend {spec!r}")
