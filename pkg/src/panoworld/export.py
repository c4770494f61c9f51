"""Reconstruction export: images, usage masks, poses, initial points and trainer settings.

Layout of an export directory::

    images/<name>.png     training images
    masks/<name>.png      usage masks, 255 = pixel may supervise the trainer
    cameras.json          per image: intrinsics, c2w (4x4, OpenCV camera axes: x right, y down, z forward)
    points.ply            initial point cloud
    gs_config.json        trainer settings plus relative data paths
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio
from .config import GSSettings
from .geometry import CV_TO_BODY, CameraView
from .lift import PointCloud


class MaskPolicyError(AssertionError):
    pass


@dataclass
class ExportView:
    name: str
    kind: str  # "pano" or "grid"
    view: CameraView
    rgb: np.ndarray
    usable: np.ndarray
    # pixels the view may ever mark usable: the hole for grid views, everything but the anchor region for pano views
    allowed: np.ndarray


@dataclass
class ReconExport:
    views: list
    points: PointCloud
    settings: GSSettings = GSSettings()
    root: Path | None = None

    def by_kind(self, kind: str) -> list:
        return [v for v in self.views if v.kind == kind]


def check_mask_policy(export: ReconExport) -> None:
    """Grid views are usable exactly on their holes; pano views never use the anchor region."""
    for v in export.views:
        if v.usable.shape != v.rgb.shape[:2]:
            raise MaskPolicyError(f"{v.name}: mask size differs from the image")
        if np.any(v.usable & ~v.allowed):
            raise MaskPolicyError(f"{v.name}: usable pixels outside the permitted region")
        if v.kind == "grid" and not np.array_equal(v.usable, v.allowed):
            raise MaskPolicyError(f"{v.name}: grid view mask must equal its hole mask")


def camera_record(v: ExportView) -> dict:
    intr = v.view.intr
    c2w = np.eye(4)
    c2w[:3, :3] = v.view.pose.rotation @ CV_TO_BODY
    c2w[:3, 3] = v.view.pose.translation
    return {
        "name": v.name,
        "kind": v.kind,
        "image": f"images/{v.name}.png",
        "mask": f"masks/{v.name}.png",
        "width": intr.width,
        "height": intr.height,
        "fov_x": intr.fov_x,
        "fov_y": intr.fov_y,
        "fx": intr.focal_x,
        "fy": intr.focal_y,
        "cx": intr.width / 2.0,
        "cy": intr.height / 2.0,
        "c2w": [[float(x) for x in row] for row in c2w],
    }


def export_gs_config(export: ReconExport, path=None) -> dict:
    """Trainer settings document; written to ``path`` when given."""
    s = export.settings
    doc = {
        "training": {
            "iterations": s.iterations,
            "opacity_reset": "on" if s.opacity_reset else "off",
            "adc": [s.adc_start, s.adc_stop],
            "sh_degree": s.sh_degree,
            "batch": s.batch,
        },
        "data": {
            "images": "images",
            "masks": "masks",
            "cameras": "cameras.json",
            "points": "points.ply",
            "views": [v.name for v in export.views],
        },
    }
    if path is not None:
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))
    return doc


def read_gs_config(path) -> dict:
    return json.loads(Path(path).read_text())


def settings_from_doc(doc: dict) -> GSSettings:
    t = doc["training"]
    return GSSettings(
        iterations=int(t["iterations"]),
        opacity_reset=t["opacity_reset"] == "on",
        adc_start=int(t["adc"][0]),
        adc_stop=int(t["adc"][1]),
        sh_degree=int(t["sh_degree"]),
        batch=int(t["batch"]),
    )


def write_export(export: ReconExport, root) -> ReconExport:
    check_mask_policy(export)
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for v in export.views:
        fileio.write_png(root / "images" / f"{v.name}.png", v.rgb)
        fileio.write_png(root / "masks" / f"{v.name}.png", v.usable)
    cams = [camera_record(v) for v in export.views]
    (root / "cameras.json").write_text(json.dumps(cams, indent=1, sort_keys=True))
    export.points.save_ply(root / "points.ply")
    export_gs_config(export, root / "gs_config.json")
    return dataclasses.replace(export, root=root)


def load_export(root) -> ReconExport:
    """Read an export back.  ``allowed`` is set to the stored masks (the policy was checked on write)."""
    from .geometry import CameraPose, Intrinsics

    root = Path(root)
    views = []
    for c in json.loads((root / "cameras.json").read_text()):
        c2w = np.asarray(c["c2w"])
        pose = CameraPose(c2w[:3, :3] @ CV_TO_BODY.T, c2w[:3, 3])
        intr = Intrinsics(c["fov_x"], c["fov_y"], c["width"], c["height"])
        usable = fileio.read_mask(root / c["mask"])
        views.append(ExportView(c["name"], c["kind"], CameraView(pose, intr), fileio.read_png(root / c["image"]),
                                usable, usable.copy()))
    settings = settings_from_doc(read_gs_config(root / "gs_config.json"))
    return ReconExport(views, PointCloud.load_ply(root / "points.ply"), settings, root)
