"""2D Gaussian surfel primitives: local frames, point response, ray intersection.

A surfel is a planar elliptical Gaussian embedded in 3D. All functions here
are pure; the array-of-structs `Gaussian2D` is convenient for construction
and tests, while `GaussianCloud` holds the struct-of-arrays layout the
tracing kernels consume.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInputError

DEFAULT_R_CUT = 3.33  # support cutoff in standard deviations (response ~ 1/255)
QUAT_MIN_NORM = 1e-12


def _as_vec(x, n, name):
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.shape[0] != n:
        raise InvalidInputError(f"{name} must have {n} components, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError(f"{name} must be finite")
    return v


@dataclass
class Frame:
    """Orthonormal surfel frame: in-plane axes t_u, t_v and normal n = t_u x t_v."""

    t_u: np.ndarray
    t_v: np.ndarray
    n: np.ndarray


@dataclass
class Ray:
    origin: np.ndarray
    dir: np.ndarray
    t_min: float = 0.0

    def __post_init__(self):
        self.origin = _as_vec(self.origin, 3, "origin")
        self.dir = _as_vec(self.dir, 3, "dir")
        norm = float(np.linalg.norm(self.dir))
        if abs(norm - 1.0) > 1e-6:
            if norm < 1e-12:
                raise InvalidInputError("ray direction has zero norm")
            self.dir = self.dir / norm
        if self.t_min < 0:
            raise InvalidInputError("t_min must be >= 0")


@dataclass
class Gaussian2D:
    """One surfel: geometry (p, s_u, s_v, q, sigma) and appearance (r, e, rho)."""

    p: np.ndarray
    s_u: float
    s_v: float
    q: np.ndarray
    sigma: float
    r: np.ndarray = field(default_factory=lambda: np.zeros(3))
    e: float = 0.0
    rho: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))

    def __post_init__(self):
        self.p = _as_vec(self.p, 3, "p")
        self.q = _as_vec(self.q, 4, "q")
        self.r = _as_vec(self.r, 3, "r")
        self.rho = _as_vec(self.rho, 3, "rho")
        if not (self.s_u > 0 and self.s_v > 0):
            raise InvalidInputError("scales must be positive")
        norm = float(np.linalg.norm(self.q))
        if norm < QUAT_MIN_NORM:
            raise InvalidInputError("quaternion norm too small")
        self.q = self.q / norm
        if not (0.0 < self.sigma <= 1.0):
            raise InvalidInputError("sigma must be in (0, 1]")
        if not (0.0 <= self.e <= 1.0):
            raise InvalidInputError("e must be in [0, 1]")
        if np.any(self.rho < 0) or np.any(self.rho > 1):
            raise InvalidInputError("rho must be in [0, 1] componentwise")
        if np.any(self.r < 0):
            raise InvalidInputError("radiance must be non-negative")

    @property
    def frame(self) -> Frame:
        return frame_from_quaternion(self.q)


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def frame_from_quaternion(q) -> Frame:
    """In-plane axes and normal from an orientation quaternion.

    The axes are the first two columns of the rotation matrix; the normal is
    their cross product (equal to the third column).
    """
    q = _as_vec(q, 4, "q")
    norm = float(np.linalg.norm(q))
    if norm < QUAT_MIN_NORM:
        raise InvalidInputError("quaternion norm too small")
    rot = quat_to_rotation(q / norm)
    t_u = rot[:, 0].copy()
    t_v = rot[:, 1].copy()
    return Frame(t_u=t_u, t_v=t_v, n=np.cross(t_u, t_v))


def response(g: Gaussian2D, x) -> float:
    """Gaussian falloff at a point on the surfel plane, in (0, 1]."""
    x = _as_vec(x, 3, "x")
    fr = g.frame
    d = x - g.p
    u = float(d @ fr.t_u) / g.s_u
    v = float(d @ fr.t_v) / g.s_v
    return float(np.exp(-0.5 * (u * u + v * v)))


def intersect(g: Gaussian2D, ray: Ray, r_cut: float = DEFAULT_R_CUT):
    """Ray/surfel intersection.

    Returns (t, gval, n_signed) or None. n_signed opposes the ray direction
    (oriented toward the ray origin). Misses: plane parallel to the ray,
    t <= t_min, or Mahalanobis radius beyond r_cut.
    """
    if r_cut <= 0:
        raise InvalidInputError("r_cut must be positive")
    fr = g.frame
    den = float(ray.dir @ fr.n)
    if abs(den) < 1e-9:
        return None
    t = float((g.p - ray.origin) @ fr.n) / den
    if t <= ray.t_min:
        return None
    x = ray.origin + t * ray.dir
    d = x - g.p
    u = float(d @ fr.t_u) / g.s_u
    v = float(d @ fr.t_v) / g.s_v
    m2 = u * u + v * v
    if m2 > r_cut * r_cut:
        return None
    gval = float(np.exp(-0.5 * m2))
    n_signed = fr.n if den < 0 else -fr.n
    return t, gval, n_signed


def quats_to_frames(quats: np.ndarray):
    """Vectorized frames for an (n, 4) quaternion array (assumed unit)."""
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    t_u = np.stack(
        [1 - 2 * (y * y + z * z), 2 * (x * y + w * z), 2 * (x * z - w * y)], axis=1
    )
    t_v = np.stack(
        [2 * (x * y - w * z), 1 - 2 * (x * x + z * z), 2 * (y * z + w * x)], axis=1
    )
    n = np.stack(
        [2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)], axis=1
    )
    return t_u, t_v, n


class GaussianCloud:
    """Struct-of-arrays surfel collection consumed by the tracing kernels."""

    __slots__ = ("pos", "scale", "quat", "opacity", "radiance", "emission", "albedo",
                 "_t_u", "_t_v", "_normal")

    def __init__(self, pos, scale, quat, opacity, radiance, emission, albedo,
                 validate: bool = True):
        self.pos = np.ascontiguousarray(pos, dtype=np.float64)
        self.scale = np.ascontiguousarray(scale, dtype=np.float64)
        self.quat = np.ascontiguousarray(quat, dtype=np.float64)
        self.opacity = np.ascontiguousarray(opacity, dtype=np.float64)
        self.radiance = np.ascontiguousarray(radiance, dtype=np.float64)
        self.emission = np.ascontiguousarray(emission, dtype=np.float64)
        self.albedo = np.ascontiguousarray(albedo, dtype=np.float64)
        self._t_u = None
        self._t_v = None
        self._normal = None
        if validate:
            self.validate()

    def __len__(self):
        return self.pos.shape[0]

    def validate(self):
        n = len(self)
        shapes = {
            "pos": (n, 3), "scale": (n, 2), "quat": (n, 4), "opacity": (n,),
            "radiance": (n, 3), "emission": (n,), "albedo": (n, 3),
        }
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise InvalidInputError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"{name} contains non-finite values")
        if np.any(self.scale <= 0):
            raise InvalidInputError("scales must be positive")
        if np.any(self.opacity <= 0) or np.any(self.opacity > 1):
            raise InvalidInputError("opacity must be in (0, 1]")
        if np.any(self.emission < 0) or np.any(self.emission > 1):
            raise InvalidInputError("emission must be in [0, 1]")
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise InvalidInputError("albedo must be in [0, 1]")
        if np.any(self.radiance < 0):
            raise InvalidInputError("radiance must be non-negative")
        norms = np.linalg.norm(self.quat, axis=1)
        if np.any(norms < QUAT_MIN_NORM):
            raise InvalidInputError("degenerate quaternion in cloud")

    def normalize_quats(self):
        """Project quaternions back to unit norm; rejects degenerate rows."""
        norms = np.linalg.norm(self.quat, axis=1, keepdims=True)
        if np.any(norms < QUAT_MIN_NORM):
            raise InvalidInputError("degenerate quaternion update rejected")
        self.quat /= norms
        self.invalidate_frames()

    def invalidate_frames(self):
        self._t_u = None
        self._t_v = None
        self._normal = None

    def _ensure_frames(self):
        if self._t_u is None:
            norms = np.linalg.norm(self.quat, axis=1, keepdims=True)
            t_u, t_v, n = quats_to_frames(self.quat / norms)
            self._t_u = np.ascontiguousarray(t_u)
            self._t_v = np.ascontiguousarray(t_v)
            self._normal = np.ascontiguousarray(n)

    @property
    def t_u(self):
        self._ensure_frames()
        return self._t_u

    @property
    def t_v(self):
        self._ensure_frames()
        return self._t_v

    @property
    def normal(self):
        self._ensure_frames()
        return self._normal

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.pos.copy(), self.scale.copy(), self.quat.copy(), self.opacity.copy(),
            self.radiance.copy(), self.emission.copy(), self.albedo.copy(),
            validate=False,
        )

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian2D]) -> "GaussianCloud":
        if len(gaussians) == 0:
            raise InvalidInputError("empty gaussian list")
        return cls(
            pos=np.array([g.p for g in gaussians]),
            scale=np.array([[g.s_u, g.s_v] for g in gaussians]),
            quat=np.array([g.q for g in gaussians]),
            opacity=np.array([g.sigma for g in gaussians]),
            radiance=np.array([g.r for g in gaussians]),
            emission=np.array([g.e for g in gaussians]),
            albedo=np.array([g.rho for g in gaussians]),
        )

    def gaussian(self, i: int) -> Gaussian2D:
        return Gaussian2D(
            p=self.pos[i], s_u=float(self.scale[i, 0]), s_v=float(self.scale[i, 1]),
            q=self.quat[i], sigma=float(self.opacity[i]), r=self.radiance[i],
            e=float(self.emission[i]), rho=self.albedo[i],
        )

    def support_aabbs(self, r_cut: float = DEFAULT_R_CUT):
        """Axis-aligned bounds of each truncated elliptical support."""
        t_u, t_v = self.t_u, self.t_v
        s_u = self.scale[:, 0:1]
        s_v = self.scale[:, 1:2]
        half = r_cut * np.sqrt((s_u * t_u) ** 2 + (s_v * t_v) ** 2)
        return self.pos - half, self.pos + half
