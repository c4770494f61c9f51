"""Panorama-first 3D scene synthesis: outpainting, lifting, warp pairs and export, with pluggable model oracles."""

from .geometry import CameraPose, CameraView, EquirectPanorama, Intrinsics, look_at, pose_from_angles
from .kernels import BACKEND, compiled_available, use_backend

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CameraPose", "CameraView", "EquirectPanorama", "Intrinsics", "compiled_available", "look_at",
    "pose_from_angles", "use_backend",
]
