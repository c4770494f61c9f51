import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from panoworld.geometry import CameraView, Intrinsics, pose_from_angles
from panoworld.oracle import (
    ConstantFill,
    DirectoryBackend,
    DirectoryServer,
    Failing,
    HttpBackend,
    MalformedResponse,
    MirrorFill,
    MockRefine,
    OracleClient,
    OracleFailure,
    OracleRequest,
    OracleResponse,
    OracleTimeout,
    SizeMismatch,
    SyntheticDepth,
    hidden_scale,
    make_backend,
    start_http_server,
)
from panoworld.oracle.protocol import OracleError, encode_response
from panoworld.oracle.scenes import default_room
from panoworld.oracle.transport import ENDPOINT, _safe

from conftest import textured


def _inpaint_req(seed=0, job="job-1"):
    rgb = textured(24, 32, seed=seed)
    mask = np.zeros((24, 32), bool)
    mask[5:15, 10:25] = True
    return OracleRequest("inpaint", rgb, mask, "a prompt", seed=seed, job_id=job)


def _depth_req(kind="depth_rel", seed=5, job="job-d"):
    view = CameraView(pose_from_angles(0.3, 0.1), Intrinsics.from_fov(1.2, 24))
    return OracleRequest(kind, textured(24, 24), seed=seed, camera=view.to_dict(), job_id=job)


def test_constant_fill():
    req = _inpaint_req()
    out = ConstantFill((1, 2, 3))(req).rgb
    assert np.all(out[req.mask] == [1, 2, 3])
    assert np.array_equal(out[~req.mask], req.rgb[~req.mask])


def test_mirror_fill_deterministic_and_local():
    req = _inpaint_req()
    a = MirrorFill()(req).rgb
    b = MirrorFill()(req).rgb
    assert np.array_equal(a, b)
    assert np.array_equal(a[~req.mask], req.rgb[~req.mask])
    # every filled value is copied from some unmasked pixel
    src = {tuple(p) for p in req.rgb[~req.mask]}
    assert all(tuple(p) in src for p in a[req.mask])


def test_mirror_fill_reflects():
    rgb = np.zeros((1, 6, 3), np.uint8)
    rgb[0, :3, 0] = [10, 20, 30]
    mask = np.zeros((1, 6), bool)
    mask[0, 3:] = True
    out = MirrorFill()(OracleRequest("inpaint", rgb, mask, "p")).rgb
    # reflections through pixel 2 land on 1 and 0; pixel 5 would leave the image and copies pixel 2
    assert list(out[0, 3:, 0]) == [20, 10, 30]


def test_mock_refine_contract():
    req = _inpaint_req()
    r = OracleRequest("refine", req.rgb, np.zeros_like(req.mask), strength=0.9)
    assert np.array_equal(MockRefine()(r).rgb, req.rgb)
    r = OracleRequest("refine", req.rgb, np.ones_like(req.mask))
    assert np.array_equal(MockRefine(enabled=False)(r).rgb, req.rgb)
    noisy = np.random.default_rng(0).integers(0, 256, req.rgb.shape, dtype=np.uint8)
    r = OracleRequest("refine", noisy, req.mask)
    out = MockRefine()(r).rgb
    assert np.array_equal(out[~req.mask], noisy[~req.mask])
    assert not np.array_equal(out, noisy)
    with pytest.raises(ValueError):
        OracleRequest("refine", req.rgb, req.mask, strength=1.5).validate()


def test_request_invariants():
    rgb = textured(8, 8)
    with pytest.raises(ValueError):
        OracleRequest("inpaint", rgb, None, "p").validate()
    with pytest.raises(ValueError):
        OracleRequest("depth_rel", rgb, prompt="p").validate()
    with pytest.raises(SizeMismatch):
        OracleRequest("inpaint", rgb, np.zeros((4, 4), bool), "p").validate()
    with pytest.raises(ValueError):
        OracleRequest("paint", rgb).validate()


def test_synthetic_depth_exact_and_relative():
    req = _depth_req("depth_metric")
    view = CameraView.from_dict(req.camera)
    _, truth = default_room().render(view.pose, view.intr)
    d = SyntheticDepth("room")(req).depth
    assert d.scale_class == "metric"
    assert np.allclose(d.values, truth.astype(np.float32), equal_nan=True)
    rel = SyntheticDepth("room", relative=True)(_depth_req("depth_rel", seed=9)).depth
    a = hidden_scale(9)
    assert 0.5 <= a <= 2.0
    assert np.allclose(rel.values, (truth * a).astype(np.float32), rtol=1e-6, equal_nan=True)


def test_hidden_scale_range():
    s = [hidden_scale(k) for k in range(500)]
    assert min(s) >= 0.5 and max(s) <= 2.0 and max(s) - min(s) > 1.0


@pytest.mark.parametrize("make_req,oracle", [(_inpaint_req, MirrorFill()), (_depth_req, SyntheticDepth("room", True))])
def test_transport_equivalence(tmp_path, make_req, oracle):
    req = make_req()
    builtin = encode_response(_safe(oracle, req))[0]

    server = DirectoryServer(oracle, tmp_path / "x")
    stop = server.start()
    try:
        via_dir = DirectoryBackend(tmp_path / "x", timeout=10, poll=0.01)(make_req())
    finally:
        stop.set()
    assert encode_response(via_dir)[0] == builtin

    http, url = start_http_server(oracle)
    try:
        backend = HttpBackend(url, timeout=10)
        via_http = backend(make_req())
        backend.close()
    finally:
        http.shutdown()
    assert encode_response(via_http)[0] == builtin


def test_client_bounds_in_flight_and_matches_ids():
    active, peak = [0], [0]
    lock = threading.Lock()

    def slow(req):
        with lock:
            active[0] += 1
            peak[0] = max(peak[0], active[0])
        time.sleep(0.05)
        with lock:
            active[0] -= 1
        return ConstantFill()(req)

    client = OracleClient(slow, max_in_flight=2)
    results = {}

    def go(k):
        req = _inpaint_req(seed=k, job=f"job-{k}")
        results[k] = client(req)

    threads = [threading.Thread(target=go, args=(k,)) for k in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert peak[0] <= 2 and client.calls == 6
    assert all(results[k].job_id == f"job-{k}" for k in range(6))

    def wrong_id(req):
        r = ConstantFill()(req)
        r.job_id = "someone-else"
        return r

    with pytest.raises(MalformedResponse):
        OracleClient(wrong_id)(_inpaint_req())


def test_client_typed_errors():
    with pytest.raises(OracleFailure):
        OracleClient(Failing("boom"))(_inpaint_req())

    def small(req):
        return OracleResponse(req.job_id, req.kind, rgb=np.zeros((2, 2, 3), np.uint8))

    with pytest.raises(SizeMismatch):
        OracleClient(small)(_inpaint_req())

    def raises(req):
        raise RuntimeError("backend crashed")

    with pytest.raises(OracleFailure):
        OracleClient(raises)(_inpaint_req())


def test_directory_timeout(tmp_path):
    with pytest.raises(OracleTimeout):
        DirectoryBackend(tmp_path, timeout=0.2, poll=0.02)(_inpaint_req())


class _Flaky:
    """HTTP oracle that answers 503 a few times before delegating."""

    def __init__(self, failures):
        self.failures = failures
        self.hits = 0
        oracle = ConstantFill()
        owner = self

        class H(BaseHTTPRequestHandler):
            def log_message(self, *a):
                pass

            def do_POST(self):
                from panoworld.oracle.protocol import decode_multipart, parse_boundary, request_from_parts

                body = self.rfile.read(int(self.headers["Content-Length"]))
                owner.hits += 1
                if owner.hits <= owner.failures:
                    self.send_response(503)
                    self.send_header("Content-Length", "0")
                    self.end_headers()
                    return
                req = request_from_parts(decode_multipart(body, parse_boundary(self.headers["Content-Type"])))
                payload, ctype = encode_response(_safe(oracle, req))
                self.send_response(200)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), H)
        threading.Thread(target=self.server.serve_forever, daemon=True).start()
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}{ENDPOINT}"


def test_http_retries_transient_failures():
    flaky = _Flaky(2)
    try:
        resp = OracleClient(HttpBackend(flaky.url, timeout=5, backoff=0.01))(_inpaint_req())
        assert resp.ok and flaky.hits == 3
    finally:
        flaky.server.shutdown()
    flaky = _Flaky(3)
    try:
        with pytest.raises(OracleError):
            OracleClient(HttpBackend(flaky.url, timeout=5, backoff=0.01))(_inpaint_req())
        assert flaky.hits == 3
    finally:
        flaky.server.shutdown()


def test_make_backend():
    assert isinstance(make_backend("mock:constant:1,2,3"), ConstantFill)
    assert isinstance(make_backend("mock:mirror"), MirrorFill)
    assert make_backend("mock:refine:off").enabled is False
    assert make_backend("synthetic-rel:occluder").relative
    with pytest.raises(ValueError):
        make_backend("nope:thing")
