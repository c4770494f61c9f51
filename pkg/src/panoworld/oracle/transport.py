"""Oracle transports: in-process, directory exchange and HTTP.

Directory exchange
------------------
The client creates ``<root>/<job_id>/`` (atomically, via a ``.tmp`` rename)
holding ``request.json`` (the request manifest), ``rgb.png`` and optionally
``mask.png``.  The oracle answers in the same folder with ``out.png`` (image
kinds) or ``out.pfm`` + ``confidence.png`` (depth kinds), then
``response.json`` last; the client polls for ``response.json``.

HTTP
----
A single endpoint ``POST /oracle`` takes the multipart request body described
in :mod:`panoworld.oracle.protocol` and answers with a multipart response.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import threading
import time
import uuid
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import httpx

from .. import fileio
from .protocol import (
    MalformedResponse,
    OracleError,
    OracleFailure,
    OracleRequest,
    OracleResponse,
    OracleTimeout,
    check_response,
    confidence_to_u8,
    decode_multipart,
    encode_request,
    encode_response,
    parse_boundary,
    request_from_parts,
    response_from_parts,
)

logger = logging.getLogger(__name__)

ENDPOINT = "/oracle"


class OracleClient:
    """Thread-safe front end: validates, tags job ids, bounds in-flight calls, checks answers."""

    def __init__(self, backend, max_in_flight: int = 2, name: str | None = None):
        self.backend = backend
        self.name = name or type(backend).__name__
        self._sem = threading.BoundedSemaphore(max_in_flight)
        self._lock = threading.Lock()
        self.calls = 0

    def __call__(self, req: OracleRequest) -> OracleResponse:
        req.validate()
        if req.job_id is None:
            req.job_id = f"{req.kind}-{uuid.uuid4().hex}"
        with self._sem:
            with self._lock:
                self.calls += 1
            try:
                resp = self.backend(req)
            except OracleError:
                raise
            except Exception as exc:
                raise OracleFailure(f"{self.name}: {type(exc).__name__}: {exc}") from exc
        return check_response(req, resp)


def _safe(oracle, req: OracleRequest) -> OracleResponse:
    try:
        resp = oracle(req)
    except Exception as exc:  # reported to the caller as a protocol error
        logger.exception("oracle raised on job %s", req.job_id)
        return OracleResponse(job_id=req.job_id, kind=req.kind, status="error", error=f"{type(exc).__name__}: {exc}")
    resp.job_id = req.job_id
    resp.kind = req.kind
    return resp


# ------------------------------------------------------------------ directory


class DirectoryBackend:
    def __init__(self, root, timeout: float = 600.0, poll: float = 0.05, cleanup: bool = True):
        self.root = Path(root)
        self.timeout = timeout
        self.poll = poll
        self.cleanup = cleanup

    def __call__(self, req: OracleRequest) -> OracleResponse:
        self.root.mkdir(parents=True, exist_ok=True)
        job = self.root / req.job_id
        tmp = self.root / f"{req.job_id}.tmp"
        tmp.mkdir()
        man = req.manifest()
        (tmp / "request.json").write_text(json.dumps(man, sort_keys=True, indent=1))
        fileio.write_png(tmp / "rgb.png", req.rgb)
        if req.mask is not None:
            fileio.write_png(tmp / "mask.png", req.mask)
        os.replace(tmp, job)
        deadline = time.monotonic() + self.timeout
        while not (job / "response.json").exists():
            if time.monotonic() > deadline:
                raise OracleTimeout(f"no response for job {req.job_id} within {self.timeout}s")
            time.sleep(self.poll)
        try:
            resp = read_directory_response(job)
        finally:
            if self.cleanup:
                shutil.rmtree(job, ignore_errors=True)
        return resp


def read_directory_response(job: Path) -> OracleResponse:
    parts = {"manifest": (job / "response.json").read_bytes()}
    for name, fname in (("rgb", "out.png"), ("depth", "out.pfm"), ("confidence", "confidence.png")):
        if (job / fname).exists():
            parts[name] = (job / fname).read_bytes()
    return response_from_parts(parts)


def read_directory_request(job: Path) -> OracleRequest:
    parts = {"manifest": (job / "request.json").read_bytes(), "rgb": (job / "rgb.png").read_bytes()}
    if (job / "mask.png").exists():
        parts["mask"] = (job / "mask.png").read_bytes()
    return request_from_parts(parts)


def write_directory_response(job: Path, resp: OracleResponse) -> None:
    if resp.rgb is not None:
        fileio.write_png(job / "out.png", resp.rgb)
    if resp.depth is not None:
        fileio.write_pfm(job / "out.pfm", resp.depth.values)
        fileio.write_png(job / "confidence.png", confidence_to_u8(resp.depth.confidence))
    tmp = job / "response.json.tmp"
    tmp.write_text(json.dumps(resp.manifest(), sort_keys=True, indent=1))
    os.replace(tmp, job / "response.json")


class DirectoryServer:
    """Oracle side of the directory exchange, wrapping any in-process oracle."""

    def __init__(self, oracle, root):
        self.oracle = oracle
        self.root = Path(root)

    def process_pending(self) -> int:
        n = 0
        if not self.root.exists():
            return 0
        for job in sorted(self.root.iterdir()):
            if not job.is_dir() or job.name.endswith(".tmp") or (job / "response.json").exists():
                continue
            try:
                req = read_directory_request(job)
            except OracleError as exc:
                resp = OracleResponse(job_id=job.name, status="error", error=str(exc))
            else:
                resp = _safe(self.oracle, req)
            write_directory_response(job, resp)
            n += 1
        return n

    def serve_forever(self, stop: threading.Event, poll: float = 0.02) -> None:
        while not stop.is_set():
            if not self.process_pending():
                time.sleep(poll)

    def start(self):
        """Serve in a daemon thread.  Returns the stop event."""
        stop = threading.Event()
        threading.Thread(target=self.serve_forever, args=(stop,), daemon=True).start()
        return stop


# ------------------------------------------------------------------ HTTP


class HttpBackend:
    TRANSIENT_STATUS = {429, 500, 502, 503, 504}

    def __init__(self, url: str, timeout: float = 600.0, retries: int = 3, backoff: float = 0.5):
        self.url = url if url.rstrip("/").endswith(ENDPOINT) else url.rstrip("/") + ENDPOINT
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._client = httpx.Client(timeout=timeout)

    def __call__(self, req: OracleRequest) -> OracleResponse:
        body, ctype = encode_request(req)
        last = None
        for attempt in range(self.retries):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                r = self._client.post(self.url, content=body, headers={"Content-Type": ctype})
            except httpx.TimeoutException as exc:
                last = OracleTimeout(f"HTTP oracle timed out: {exc}")
                continue
            except httpx.TransportError as exc:
                last = OracleError(f"HTTP transport failure: {exc}")
                continue
            if r.status_code in self.TRANSIENT_STATUS:
                last = OracleError(f"HTTP oracle answered {r.status_code}")
                continue
            if r.status_code != 200:
                raise MalformedResponse(f"HTTP oracle answered {r.status_code}: {r.text[:200]}")
            return response_from_parts(decode_multipart(r.content, parse_boundary(r.headers.get("content-type", ""))))
        raise last

    def close(self) -> None:
        self._client.close()


def _make_handler(oracle):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            logger.debug("oracle http: " + fmt, *args)

        def do_POST(self):
            if self.path.rstrip("/") != ENDPOINT:
                self.send_error(404)
                return
            n = int(self.headers.get("Content-Length", 0))
            body = self.rfile.read(n)
            try:
                req = request_from_parts(decode_multipart(body, parse_boundary(self.headers.get("Content-Type", ""))))
            except (OracleError, ValueError, KeyError) as exc:
                self.send_error(400, str(exc))
                return
            payload, ctype = encode_response(_safe(oracle, req))
            self.send_response(200)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

    return Handler


def make_http_server(oracle, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    server = ThreadingHTTPServer((host, port), _make_handler(oracle))
    server.daemon_threads = True
    return server


def start_http_server(oracle, host: str = "127.0.0.1", port: int = 0):
    """Serve ``oracle`` on a background thread.  Returns (server, base_url)."""
    server = make_http_server(oracle, host, port)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    h, p = server.server_address[:2]
    return server, f"http://{h}:{p}"
