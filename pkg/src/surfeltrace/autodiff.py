"""Reverse-mode differentiation of the composited ray aggregates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .bvh import Scene
from .errors import InvalidInputError
from .tracer import DEFAULT_MAX_HITS, DEFAULT_TAU_T


@dataclass
class GradientSet:
    """Per-primitive parameter gradients, matching GaussianCloud layout."""

    pos: np.ndarray
    scale: np.ndarray
    quat: np.ndarray
    opacity: np.ndarray
    radiance: np.ndarray
    emission: np.ndarray
    albedo: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradientSet":
        return cls(
            pos=np.zeros((n, 3)), scale=np.zeros((n, 2)), quat=np.zeros((n, 4)),
            opacity=np.zeros(n), radiance=np.zeros((n, 3)),
            emission=np.zeros(n), albedo=np.zeros((n, 3)),
        )

    def arrays(self):
        return (self.pos, self.scale, self.quat, self.opacity,
                self.radiance, self.emission, self.albedo)

    def add_scaled(self, other: "GradientSet", scale: float):
        for a, b in zip(self.arrays(), other.arrays()):
            a += scale * b

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(a))) if a.size else 0.0
                   for a in self.arrays())


def backward_trace(scene: Scene, ray_array: np.ndarray, adjoints: np.ndarray,
                   tau_T: float = DEFAULT_TAU_T,
                   max_hits: int = DEFAULT_MAX_HITS,
                   out: GradientSet = None) -> GradientSet:
    """Accumulate d(sum_r adj_r . aggregates_r) / d(params) into a GradientSet.

    `adjoints` holds one 12-wide row [gA, gN(3), gD, gR(3), gE, gP(3)] per
    ray, i.e. sensitivities with respect to the *raw* composited aggregates.
    Use raw_adjoints_from_normalized to convert gradients taken against
    normalized outputs first.
    """
    ray_array = np.ascontiguousarray(ray_array, dtype=np.float64)
    adjoints = np.ascontiguousarray(adjoints, dtype=np.float64)
    if adjoints.shape != (ray_array.shape[0], kernels.ADJ_WIDTH):
        raise InvalidInputError("adjoint array must be (n_rays, 12)")
    g = scene.gaussians
    if out is None:
        out = GradientSet.zeros(len(g))
    kernels.backward_kernel(
        ray_array, adjoints, g.pos, g.t_u, g.t_v, g.normal, g.scale,
        g.opacity, g.radiance, g.emission, g.albedo, g.quat,
        scene.tables()[1],
        scene.r_cut, tau_T, max_hits,
        *scene.bvh_args(),
        out.pos, out.scale, out.quat, out.opacity,
        out.radiance, out.emission, out.albedo)
    return out


def raw_adjoints_from_normalized(raw_rows: np.ndarray, g_n_hat: np.ndarray,
                                 g_depth: np.ndarray, a_min: float) -> np.ndarray:
    """Chain normalized-output adjoints back to raw aggregate adjoints.

    For D_tilde = D / A the adjoint splits into gD = g/A and an extra
    gA term; for N_hat = N / |N| the radial component is projected out.
    Pixels with invalid normals or insufficient coverage contribute nothing
    through the respective channel.
    """
    n_rays = raw_rows.shape[0]
    adj = np.zeros((n_rays, kernels.ADJ_WIDTH))
    A = raw_rows[:, 0]
    N = raw_rows[:, 2:5]
    D = raw_rows[:, 5]
    norm = np.linalg.norm(N, axis=1)
    valid_n = norm > 1e-9
    covered = A > a_min
    if np.any(valid_n):
        n_hat = N[valid_n] / norm[valid_n, None]
        gn = g_n_hat[valid_n]
        gn_tan = (gn - n_hat * np.sum(gn * n_hat, axis=1, keepdims=True))
        adj[valid_n, 1:4] = gn_tan / norm[valid_n, None]
    if np.any(covered):
        gd = g_depth[covered]
        adj[covered, 4] = gd / A[covered]
        adj[covered, 0] = -gd * D[covered] / (A[covered] ** 2)
    return adj
