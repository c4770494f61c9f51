"""PNG, PFM and PLY readers/writers used across the pipeline."""

from __future__ import annotations

import io
import re
from pathlib import Path

import numpy as np
from PIL import Image

PLY_PROPERTIES = [
    ("x", "<f4"),
    ("y", "<f4"),
    ("z", "<f4"),
    ("red", "u1"),
    ("green", "u1"),
    ("blue", "u1"),
    ("confidence", "<f4"),
    ("source_view", "<u2"),
]

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}
_PLY_NAMES = {v: k for k, v in [("uchar", "u1"), ("ushort", "<u2"), ("float", "<f4"), ("int", "<i4"), ("double", "<f8")]}


# ------------------------------------------------------------------- PNG


def encode_png(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    if img.dtype != np.uint8:
        raise TypeError(f"PNG data must be uint8 or bool, got {img.dtype}")
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG", compress_level=6)
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.array(im)


def write_png(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_png(img))


def read_png(path) -> np.ndarray:
    return decode_png(Path(path).read_bytes())


def read_mask(path) -> np.ndarray:
    m = read_png(path)
    if m.ndim == 3:
        m = m[..., 0]
    return m >= 128


# ------------------------------------------------------------------- PFM


def encode_pfm(data: np.ndarray) -> bytes:
    """Little-endian PFM.  (H, W) -> ``Pf``; (H, W, 3) -> ``PF``.  Rows stored bottom-up."""
    a = np.asarray(data, dtype="<f4")
    if a.ndim == 2:
        kind = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        kind = b"PF"
    else:
        raise ValueError(f"PFM supports (H, W) or (H, W, 3), got {a.shape}")
    h, w = a.shape[:2]
    header = kind + b"\n%d %d\n-1.0\n" % (w, h)
    return header + np.ascontiguousarray(a[::-1]).tobytes()


def decode_pfm(data: bytes) -> np.ndarray:
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(-?[\d.eE+-]+)\s", data)
    if m is None:
        raise ValueError("not a PFM file")
    kind, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    ch = 3 if kind == b"PF" else 1
    dt = "<f4" if scale < 0 else ">f4"
    n = w * h * ch
    a = np.frombuffer(data, dtype=dt, count=n, offset=m.end())
    shape = (h, w, 3) if ch == 3 else (h, w)
    return a.reshape(shape)[::-1].astype(np.float32)


def write_pfm(path, data: np.ndarray) -> None:
    Path(path).write_bytes(encode_pfm(data))


def read_pfm(path) -> np.ndarray:
    return decode_pfm(Path(path).read_bytes())


# ------------------------------------------------------------------- PLY


def write_ply(path, positions, colors, confidence=None, source_view=None) -> None:
    """Binary little-endian PLY with the pipeline's point layout."""
    positions = np.asarray(positions)
    n = positions.shape[0]
    arr = np.zeros(n, dtype=PLY_PROPERTIES)
    arr["x"], arr["y"], arr["z"] = positions[:, 0], positions[:, 1], positions[:, 2]
    colors = np.asarray(colors, dtype=np.uint8)
    arr["red"], arr["green"], arr["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]
    arr["confidence"] = 1.0 if confidence is None else confidence
    arr["source_view"] = 0 if source_view is None else source_view
    lines = ["ply", "format binary_little_endian 1.0", "comment panoworld point cloud", f"element vertex {n}"]
    lines += [f"property {_PLY_NAMES[t]} {name}" for name, t in PLY_PROPERTIES]
    lines.append("end_header")
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii") + arr.tobytes())


def read_ply(path) -> np.ndarray:
    """Read the vertex element of a binary-LE or ASCII PLY into a structured array."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError("not a PLY file")
    body_start = data.index(b"\n", end) + 1
    header = data[:body_start].decode("ascii").splitlines()
    fmt = None
    elements = []  # (name, count, [(prop, dtype)])
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                raise ValueError("list properties are not supported")
            elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
    if not elements or elements[0][0] != "vertex":
        raise ValueError("PLY has no leading vertex element")
    _, count, props = elements[0]
    dtype = np.dtype(props)
    if fmt == "binary_little_endian":
        return np.frombuffer(data, dtype=dtype, count=count, offset=body_start).copy()
    if fmt == "ascii":
        rows = data[body_start:].decode("ascii").split("\n")[:count]
        table = np.array([[float(v) for v in r.split()[: len(props)]] for r in rows])
        out = np.zeros(count, dtype=dtype)
        for i, (name, _) in enumerate(props):
            out[name] = table[:, i]
        return out
    raise ValueError(f"unsupported PLY format {fmt!r}")
