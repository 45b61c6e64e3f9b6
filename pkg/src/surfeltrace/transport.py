"""Forward rendering: radiant (0-bounce), single-bounce, and path tracing."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import kernels
from .bvh import Scene
from .camera import Camera, cosine_direction, pixel_ray
from .errors import InvalidInputError
from .gaussians import Ray
from .rng import RngStream, py_key_uniform
from .tracer import (DEFAULT_A_MIN, DEFAULT_MAX_HITS, DEFAULT_TAU_T,
                     TraceResult, normalize_aggregates, rays_to_array, trace_rows)

DEFAULT_TAU_E = 0.1
DEFAULT_TAU_B = 7
DEFAULT_T_MIN_FRAC = 1e-3


@dataclass
class RenderConfig:
    spp: int = 1
    tau_B: int = DEFAULT_TAU_B
    tau_E: float = DEFAULT_TAU_E
    tau_T: float = DEFAULT_TAU_T
    a_min: float = DEFAULT_A_MIN
    t_min: Optional[float] = None  # default: t_min_frac * scene diagonal
    t_min_frac: float = DEFAULT_T_MIN_FRAC
    max_hits: int = DEFAULT_MAX_HITS
    denoise: bool = False
    deterministic: bool = True
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.spp < 1:
            raise InvalidInputError("spp must be >= 1")
        if self.tau_B < 1:
            raise InvalidInputError("bounce limit must be >= 1")
        if not (0.0 < self.tau_E < 1.0):
            raise InvalidInputError("tau_E must be in (0, 1)")
        if not (0.0 < self.tau_T < 1.0):
            raise InvalidInputError("tau_T must be in (0, 1)")

    def resolve_t_min(self, scene: Scene) -> float:
        if self.t_min is not None:
            return float(self.t_min)
        return self.t_min_frac * scene.diagonal

    def with_(self, **kw) -> "RenderConfig":
        return replace(self, **kw)


@dataclass
class ImageBuffer:
    """Per-pixel linear radiance plus optional auxiliary channels."""

    rgb: np.ndarray
    aux: dict = field(default_factory=dict)

    @property
    def width(self):
        return self.rgb.shape[1]

    @property
    def height(self):
        return self.rgb.shape[0]

    def validate(self):
        if not np.all(np.isfinite(self.rgb)):
            raise InvalidInputError("image contains non-finite radiance")
        if np.any(self.rgb < 0):
            raise InvalidInputError("image contains negative radiance")


def _aux_from_raw(raw: np.ndarray, a_min: float) -> dict:
    """Normalized auxiliary channels from averaged raw aggregate maps."""
    A = raw[..., 0]
    N = raw[..., 2:5]
    norm = np.linalg.norm(N, axis=-1, keepdims=True)
    n_hat = np.where(norm > 1e-9, N / np.maximum(norm, 1e-30), 0.0)
    covered = A > a_min
    depth = np.where(covered, raw[..., 5] / np.maximum(A, 1e-30), 0.0)
    return {
        "alpha": A.copy(),
        "normal": n_hat,
        "depth": depth,
        "emission": raw[..., 9].copy(),
        "albedo": raw[..., 10:13].copy(),
        "n_hits": raw[..., 13].copy(),
    }


def _cam_args(cam: Camera):
    return (cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy,
            np.ascontiguousarray(cam.rotation),
            float(cam.center[0]), float(cam.center[1]), float(cam.center[2]))


def render_radiant(scene: Scene, cam: Camera, cfg: RenderConfig) -> ImageBuffer:
    """0-bounce render: per-pixel average of composited radiance R."""
    t_min = cfg.resolve_t_min(scene)
    rgb = np.zeros((cam.height, cam.width, 3), dtype=np.float64)
    raw = np.zeros((cam.height, cam.width, kernels.OUT_WIDTH), dtype=np.float64)
    kernels.radiant_kernel(
        *_cam_args(cam), cfg.spp, np.uint64(cfg.seed), t_min,
        *scene.kernel_args(), scene.r_cut, cfg.tau_T, cfg.max_hits,
        *scene.bvh_args(), rgb, raw)
    return ImageBuffer(rgb=rgb, aux=_aux_from_raw(raw, cfg.a_min))


def shade_single_bounce(scene: Scene, x, n, P, cfg: RenderConfig,
                        rng: Optional[RngStream] = None) -> np.ndarray:
    """Diffuse single-bounce shading against the composited radiance cache.

    With cosine sampling the cos/pdf estimator weight is pi, so the Eq-7
    sum collapses to P (elementwise) times the mean cache radiance.
    """
    n = np.asarray(n, dtype=np.float64).reshape(3)
    if np.linalg.norm(n) < 1e-9:
        return np.zeros(3)
    if rng is None:
        rng = RngStream(seed=cfg.seed, bounce=1)
    origins = np.asarray(x, dtype=np.float64).reshape(1, 3)
    normals = n.reshape(1, 3)
    valid = np.ones(1, dtype=np.uint8)
    out = np.zeros((1, 3), dtype=np.float64)
    kernels.secondary_mean_kernel(
        origins, normals, valid, cfg.spp, np.uint64(rng.seed),
        np.array([rng.pixel], dtype=np.int64), rng.bounce,
        cfg.resolve_t_min(scene), cfg.tau_E,
        *scene.kernel_args(), scene.r_cut, cfg.tau_T, cfg.max_hits,
        *scene.bvh_args(), out)
    return np.asarray(P, dtype=np.float64) * out[0]


def primary_maps(scene: Scene, cam: Camera, cfg: RenderConfig):
    """Center-ray primary trace of every pixel, as raw aggregate maps."""
    t_min = cfg.resolve_t_min(scene)
    xs, ys = np.meshgrid(np.arange(cam.width) + 0.5, np.arange(cam.height) + 0.5)
    d_cam = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy,
                      np.ones_like(xs)], axis=-1)
    d_world = d_cam @ cam.rotation.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    rays = np.empty((cam.height * cam.width, 7), dtype=np.float64)
    rays[:, 0:3] = cam.center
    rays[:, 3:6] = d_world.reshape(-1, 3)
    rays[:, 6] = t_min
    raw = trace_rows(scene, rays, cfg.tau_T, cfg.max_hits)
    return rays, raw.reshape(cam.height, cam.width, kernels.OUT_WIDTH)


def single_bounce_maps(scene: Scene, cam: Camera, cfg: RenderConfig):
    """Primary maps plus the per-pixel mean secondary cache radiance."""
    rays, raw = primary_maps(scene, cam, cfg)
    h, w = cam.height, cam.width
    flat = raw.reshape(-1, kernels.OUT_WIDTH)
    A = flat[:, 0]
    N = flat[:, 2:5]
    norm = np.linalg.norm(N, axis=1)
    is_emitter = flat[:, 9] > cfg.tau_E
    valid = (A > cfg.a_min) & (norm > 1e-9) & ~is_emitter
    n_hat = np.zeros_like(N)
    n_hat[valid] = N[valid] / norm[valid, None]
    d_tilde = np.zeros(h * w)
    d_tilde[valid] = flat[valid, 5] / A[valid]
    origins = rays[:, 0:3] + d_tilde[:, None] * rays[:, 3:6]
    mean_r = np.zeros((h * w, 3), dtype=np.float64)
    kernels.secondary_mean_kernel(
        np.ascontiguousarray(origins), np.ascontiguousarray(n_hat),
        valid.astype(np.uint8), cfg.spp, np.uint64(cfg.seed),
        np.arange(h * w, dtype=np.int64), 1,
        cfg.resolve_t_min(scene), cfg.tau_E,
        *scene.kernel_args(), scene.r_cut, cfg.tau_T, cfg.max_hits,
        *scene.bvh_args(), mean_r)
    return raw, is_emitter.reshape(h, w), valid.reshape(h, w), \
        mean_r.reshape(h, w, 3)


def render_single_bounce(scene: Scene, cam: Camera, cfg: RenderConfig) -> ImageBuffer:
    """Emitter pixels show their composited radiance; the rest reflect the cache."""
    raw, is_emitter, valid, mean_r = single_bounce_maps(scene, cam, cfg)
    P = raw[..., 10:13]
    R = raw[..., 6:9]
    rgb = np.where(is_emitter[..., None], R, np.where(valid[..., None], P * mean_r, 0.0))
    return ImageBuffer(rgb=rgb, aux=_aux_from_raw(raw, cfg.a_min))


def path_trace_pixel(scene: Scene, primary: Ray, cfg: RenderConfig,
                     rng: RngStream) -> np.ndarray:
    """Reference per-pixel path tracer (python twin of the image kernel).

    Walks up to tau_B traces; an emissive composited hit terminates the path
    and contributes throughput * R, escapes and bounce-limit overruns
    contribute zero. Throughput under cosine sampling and the diffuse BRDF
    is the running elementwise product of composited albedos.
    """
    t_min = cfg.resolve_t_min(scene)
    total = np.zeros(3)
    for s in range(cfg.spp):
        origin = primary.origin.copy()
        direction = primary.dir.copy()
        tmin_cur = primary.t_min
        throughput = np.ones(3)
        for b in range(1, cfg.tau_B + 1):
            row = trace_rows(scene, np.array(
                [[*origin, *direction, tmin_cur]]), cfg.tau_T, cfg.max_hits)[0]
            tr = TraceResult.from_row(row)
            if tr.A < cfg.a_min:
                break
            if tr.E > cfg.tau_E:
                total += throughput * tr.R
                break
            if b == cfg.tau_B:
                break
            agg = normalize_aggregates(tr, cfg.a_min)
            if not agg.valid_normal:
                break
            origin = origin + agg.D_tilde * direction
            u1 = py_key_uniform(rng.seed, rng.pixel, s, b, 0)
            u2 = py_key_uniform(rng.seed, rng.pixel, s, b, 1)
            direction, _ = cosine_direction(agg.N_hat, u1, u2)
            throughput = throughput * tr.P
            tmin_cur = t_min
    return total / cfg.spp


def render_path_traced(scene: Scene, cam: Camera, cfg: RenderConfig) -> ImageBuffer:
    """Multi-bounce Monte Carlo render; optional cross-bilateral denoise."""
    t_min = cfg.resolve_t_min(scene)
    rgb = np.zeros((cam.height, cam.width, 3), dtype=np.float64)
    raw = np.zeros((cam.height, cam.width, kernels.OUT_WIDTH), dtype=np.float64)
    stats = np.zeros(3, dtype=np.int64)
    kernels.path_trace_kernel(
        *_cam_args(cam), cfg.spp, np.uint64(cfg.seed), t_min,
        cfg.tau_B, cfg.tau_E, cfg.a_min,
        *scene.kernel_args(), scene.r_cut, cfg.tau_T, cfg.max_hits,
        *scene.bvh_args(), rgb, raw, stats)
    img = ImageBuffer(rgb=rgb, aux=_aux_from_raw(raw, cfg.a_min))
    img.aux["path_stats"] = {
        "escaped": int(stats[0]), "bounce_limit": int(stats[1]),
        "invalid_normal": int(stats[2]),
    }
    if cfg.denoise:
        img = denoise(img)
    return img


def denoise(img: ImageBuffer, radius: int = 2, sigma_spatial: float = 1.5,
            sigma_normal: float = 0.25, sigma_albedo: float = 0.1,
            sigma_depth: float = 0.05) -> ImageBuffer:
    """Cross-bilateral filter guided by normal, albedo, and depth channels."""
    if "normal" not in img.aux or "albedo" not in img.aux:
        raise InvalidInputError("denoise requires normal and albedo auxiliaries")
    if radius == 0:
        return ImageBuffer(rgb=img.rgb.copy(), aux=dict(img.aux))
    rgb = img.rgb
    normal = img.aux["normal"]
    albedo = img.aux["albedo"]
    depth = img.aux.get("depth")
    h, w = rgb.shape[:2]
    acc = np.zeros_like(rgb)
    wsum = np.zeros((h, w, 1))
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            ys = slice(max(0, dy), h + min(0, dy))
            xs = slice(max(0, dx), w + min(0, dx))
            ys2 = slice(max(0, -dy), h + min(0, -dy))
            xs2 = slice(max(0, -dx), w + min(0, -dx))
            wgt = np.exp(-(dx * dx + dy * dy) / (2 * sigma_spatial ** 2))
            dn = np.sum((normal[ys, xs] - normal[ys2, xs2]) ** 2, axis=-1)
            da = np.sum((albedo[ys, xs] - albedo[ys2, xs2]) ** 2, axis=-1)
            wmap = wgt * np.exp(-dn / (2 * sigma_normal ** 2)
                                - da / (2 * sigma_albedo ** 2))
            if depth is not None:
                dd = (depth[ys, xs] - depth[ys2, xs2]) / np.maximum(
                    depth[ys, xs], 1e-6)
                wmap = wmap * np.exp(-dd * dd / (2 * sigma_depth ** 2))
            acc[ys, xs] += wmap[..., None] * rgb[ys2, xs2]
            wsum[ys, xs, 0] += wmap
    out = acc / np.maximum(wsum, 1e-30)
    return ImageBuffer(rgb=np.maximum(out, 0.0), aux=dict(img.aux))
