"""Pinhole cameras, pixel rays, and cosine-weighted hemisphere sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .errors import InvalidInputError
from .gaussians import Ray
from .rng import RngStream


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))  # world_from_camera
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.ascontiguousarray(self.rotation, dtype=np.float64)
        self.center = np.ascontiguousarray(self.center, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidInputError("principal point outside image")
        if self.rotation.shape != (3, 3):
            raise InvalidInputError("rotation must be 3x3")
        if np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3))) > 1e-6:
            raise InvalidInputError("rotation is not orthonormal")

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2].copy()

    def to_dict(self) -> dict:
        return {
            "width": self.width, "height": self.height,
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "world_from_camera_rotation": self.rotation.reshape(-1).tolist(),
            "center": self.center.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            width=int(d["width"]), height=int(d["height"]),
            fx=float(d["fx"]), fy=float(d["fy"]),
            cx=float(d["cx"]), cy=float(d["cy"]),
            rotation=np.array(d["world_from_camera_rotation"], dtype=np.float64).reshape(3, 3),
            center=np.array(d["center"], dtype=np.float64),
        )


def pixel_ray(cam: Camera, px: float, py: float, t_min: float = 0.0) -> Ray:
    """World-space ray through a (possibly fractional) pixel position."""
    if not (0 <= px < cam.width and 0 <= py < cam.height):
        raise InvalidInputError(f"pixel ({px}, {py}) outside {cam.width}x{cam.height} image")
    d_cam = np.array([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, 1.0])
    d_world = cam.rotation @ d_cam
    return Ray(origin=cam.center.copy(), dir=d_world / np.linalg.norm(d_world), t_min=t_min)


def project(cam: Camera, point) -> tuple[float, float]:
    """Pixel coordinates of a world point (inverse of pixel_ray up to depth)."""
    p_cam = cam.rotation.T @ (np.asarray(point, dtype=np.float64) - cam.center)
    if p_cam[2] <= 0:
        raise InvalidInputError("point is behind the camera")
    return (
        float(cam.fx * p_cam[0] / p_cam[2] + cam.cx),
        float(cam.fy * p_cam[1] / p_cam[2] + cam.cy),
    )


def orthonormal_basis(n: np.ndarray):
    """Branchless tangent basis around a unit vector (Duff et al. style)."""
    nx, ny, nz = float(n[0]), float(n[1]), float(n[2])
    s = math.copysign(1.0, nz)
    a = -1.0 / (s + nz)
    b = nx * ny * a
    b1 = np.array([1.0 + s * nx * nx * a, s * b, -s * nx])
    b2 = np.array([b, s + ny * ny * a, -ny])
    return b1, b2


def cosine_direction(n: np.ndarray, u1: float, u2: float):
    """Map two uniforms to a cosine-weighted direction about n. Returns (dir, pdf)."""
    r = math.sqrt(u1)
    phi = 2.0 * math.pi * u2
    lx = r * math.cos(phi)
    ly = r * math.sin(phi)
    lz = math.sqrt(max(1.0 - u1, 1e-12))
    b1, b2 = orthonormal_basis(n)
    d = lx * b1 + ly * b2 + lz * np.asarray(n, dtype=np.float64)
    return d, lz / math.pi


def cosine_sample(n, rng: RngStream):
    """Cosine-weighted hemisphere sample around a unit normal.

    pdf = (dir . n) / pi > 0; the cos/pdf estimator weight is exactly pi.
    """
    n = np.asarray(n, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(n) - 1.0) > 1e-6:
        raise InvalidInputError("normal must be unit length")
    u1 = rng.uniform()
    u2 = rng.uniform()
    return cosine_direction(n, u1, u2)
