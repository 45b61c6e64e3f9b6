"""Optimization stages: radiant reconstruction, albedo recovery, light baking."""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
import torch

from . import kernels
from .autodiff import GradientSet, backward_trace
from .bvh import Scene, build_accel
from .camera import Camera
from .errors import InvalidInputError, NumericFailure
from .gaussians import GaussianCloud
from .losses import (DEFAULT_PQ_PEAK, LossWeights, loss_color,
                     loss_distance_normal, loss_emission, loss_normal,
                     pq_encode_torch)
from .transport import RenderConfig, primary_maps

_LOGIT_EPS = 1e-6


def _logit(x):
    x = np.clip(x, _LOGIT_EPS, 1.0 - _LOGIT_EPS)
    return np.log(x / (1.0 - x))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class TrainView:
    """One supervision view: camera plus ground-truth maps (linear radiance)."""

    camera: Camera
    image: np.ndarray
    normal: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    split: str = "train"

    def __post_init__(self):
        h, w = self.camera.height, self.camera.width
        if self.image.shape != (h, w, 3):
            raise InvalidInputError("view image does not match camera size")


@dataclass
class TrainConfig:
    iters: int = 1000
    lr_position_frac: float = 1.6e-4  # times scene extent
    lr_scale: float = 5e-3
    lr_rotation: float = 5e-3
    lr_opacity: float = 5e-2
    lr_radiance: float = 2.5e-3
    lr_emission: float = 2.5e-3
    lr_albedo: float = 2.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-15
    weights: LossWeights = field(default_factory=LossWeights)
    pq_peak: float = DEFAULT_PQ_PEAK
    rebuild_every: int = 1
    log_every: int = 50
    log_stream: object = None

    def log(self, msg: str):
        stream = self.log_stream if self.log_stream is not None else sys.stderr
        print(msg, file=stream)


class Adam:
    """Plain per-array Adam with a fixed learning rate."""

    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-15):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0

    def step(self, param, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mh = self.m / (1.0 - self.beta1 ** self.t)
        vh = self.v / (1.0 - self.beta2 ** self.t)
        return param - self.lr * mh / (np.sqrt(vh) + self.eps)


@dataclass
class ParamState:
    """Unconstrained parameterization of the optimizable primitive fields."""

    pos: np.ndarray
    log_scale: np.ndarray
    quat: np.ndarray
    opa_logit: np.ndarray
    rad_raw: np.ndarray
    emis_logit: np.ndarray
    alb_logit: np.ndarray

    @classmethod
    def from_cloud(cls, g: GaussianCloud) -> "ParamState":
        return cls(
            pos=g.pos.copy(), log_scale=np.log(g.scale),
            quat=g.quat.copy(), opa_logit=_logit(g.opacity),
            rad_raw=g.radiance.copy(), emis_logit=_logit(g.emission),
            alb_logit=_logit(g.albedo),
        )

    def to_cloud(self) -> GaussianCloud:
        return GaussianCloud(
            pos=self.pos.copy(), scale=np.exp(self.log_scale),
            quat=self.quat.copy(), opacity=_sigmoid(self.opa_logit),
            radiance=np.maximum(self.rad_raw, 0.0),
            emission=_sigmoid(self.emis_logit),
            albedo=_sigmoid(self.alb_logit),
        )

    def raw_gradients(self, g: GradientSet) -> "ParamState":
        """Chain cloud-space gradients through the reparameterization."""
        scale = np.exp(self.log_scale)
        opa = _sigmoid(self.opa_logit)
        emis = _sigmoid(self.emis_logit)
        alb = _sigmoid(self.alb_logit)
        grad_rad = np.where(self.rad_raw >= 0.0, g.radiance, 0.0)
        return ParamState(
            pos=g.pos, log_scale=g.scale * scale, quat=g.quat,
            opa_logit=g.opacity * opa * (1.0 - opa),
            rad_raw=grad_rad,
            emis_logit=g.emission * emis * (1.0 - emis),
            alb_logit=g.albedo * alb * (1.0 - alb),
        )


def init_cloud_from_points(points: np.ndarray, colors: np.ndarray,
                           seed: int = 0) -> GaussianCloud:
    """Coarse surfel initialization from an RGB point cloud.

    Scales come from the mean 3-nearest-neighbour distance, orientations are
    random, opacity starts at sigmoid(0.5), radiance at the (linear) point
    colors, emission low, albedo mid-grey.
    """
    from scipy.spatial import cKDTree

    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if n < 4:
        raise InvalidInputError("need at least 4 points to initialize")
    if colors.shape[0] != n:
        raise InvalidInputError("points and colors must pair up")
    tree = cKDTree(points)
    dists, _ = tree.query(points, k=4)  # self + 3 neighbours
    s = dists[:, 1:4].mean(axis=1)
    s = np.maximum(s, 1e-6)
    rng = np.random.default_rng(seed)
    quat = rng.normal(size=(n, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    return GaussianCloud(
        pos=points.copy(), scale=np.stack([s, s], axis=1), quat=quat,
        opacity=np.full(n, _sigmoid(0.5)),
        radiance=np.maximum(colors, 0.0),
        emission=np.full(n, 0.01),
        albedo=np.full((n, 3), 0.5),
    )


def _view_dirs(cam: Camera) -> np.ndarray:
    xs, ys = np.meshgrid(np.arange(cam.width) + 0.5, np.arange(cam.height) + 0.5)
    d = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy,
                  np.ones_like(xs)], axis=-1)
    d = d @ cam.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def _stage0_view_pass(scene: Scene, view: TrainView, cfg: TrainConfig,
                      rcfg: RenderConfig):
    """Forward + image-space backward for one view.

    The raw composited aggregate maps become autograd leaves; the loss graph
    runs entirely in torch, and the resulting leaf gradients are the adjoint
    rows consumed by the ray-level backward kernel.
    """
    cam = view.camera
    rays, raw = primary_maps(scene, cam, rcfg)
    h, w = cam.height, cam.width

    leaf = torch.tensor(raw, dtype=torch.float64, requires_grad=True)
    A = leaf[..., 0]
    N = leaf[..., 2:5]
    D = leaf[..., 5]
    R = leaf[..., 6:9]
    E = leaf[..., 9]

    gt_img = torch.tensor(view.image, dtype=torch.float64)
    lc = loss_color(R, gt_img, cfg.pq_peak)

    covered = raw[..., 0] > rcfg.a_min
    n_norm_np = np.linalg.norm(raw[..., 2:5], axis=-1)
    valid = torch.tensor(covered & (n_norm_np > 1e-9))
    zero = torch.zeros((), dtype=torch.float64)

    ln = zero
    ld = zero
    le = zero
    if view.normal is not None and bool(valid.any()):
        n_hat = N / N.norm(dim=-1, keepdim=True).clamp(min=1e-12)
        gt_n = torch.tensor(view.normal, dtype=torch.float64)
        ln = loss_normal(n_hat, gt_n, valid)
        depth = D / A.clamp(min=1e-12)
        dirs = torch.tensor(_view_dirs(cam), dtype=torch.float64)
        origin = torch.tensor(cam.center, dtype=torch.float64)
        ld = loss_distance_normal(depth, dirs, origin, n_hat, valid)
    if view.mask is not None:
        le = loss_emission(E, torch.tensor(view.mask, dtype=torch.float64))

    wts = cfg.weights
    total = wts.color * lc + wts.normal * ln + wts.distance * ld + wts.emission * le
    total.backward()

    lg = leaf.grad.numpy().reshape(h * w, kernels.OUT_WIDTH)
    adj = np.zeros((h * w, kernels.ADJ_WIDTH))
    adj[:, 0] = lg[:, 0]
    adj[:, 1:12] = lg[:, 2:13]
    grads = backward_trace(scene, rays, adj, rcfg.tau_T, rcfg.max_hits)
    parts = tuple(float(x.detach()) for x in (lc, ln, ld, le))
    return float(total.detach()), parts, grads


def stage0_train(init: GaussianCloud, views: List[TrainView], cfg: TrainConfig,
                 rcfg: RenderConfig = None,
                 callback: Callable = None):
    """Fit positions, shapes, opacity, radiance, and emission to the views.

    Cycles through the views one whole image per iteration. Returns the
    trained cloud and the per-iteration loss history.
    """
    if not views:
        raise InvalidInputError("stage 0 needs at least one view")
    if rcfg is None:
        rcfg = RenderConfig()
    state = ParamState.from_cloud(init)
    scene = build_accel(state.to_cloud())
    extent = scene.diagonal

    opts = {
        "pos": Adam(state.pos.shape, cfg.lr_position_frac * extent,
                    cfg.beta1, cfg.beta2, cfg.adam_eps),
        "log_scale": Adam(state.log_scale.shape, cfg.lr_scale,
                          cfg.beta1, cfg.beta2, cfg.adam_eps),
        "quat": Adam(state.quat.shape, cfg.lr_rotation,
                     cfg.beta1, cfg.beta2, cfg.adam_eps),
        "opa_logit": Adam(state.opa_logit.shape, cfg.lr_opacity,
                          cfg.beta1, cfg.beta2, cfg.adam_eps),
        "rad_raw": Adam(state.rad_raw.shape, cfg.lr_radiance,
                        cfg.beta1, cfg.beta2, cfg.adam_eps),
        "emis_logit": Adam(state.emis_logit.shape, cfg.lr_emission,
                           cfg.beta1, cfg.beta2, cfg.adam_eps),
        "alb_logit": Adam(state.alb_logit.shape, cfg.lr_albedo,
                          cfg.beta1, cfg.beta2, cfg.adam_eps),
    }

    history = []
    t0 = time.perf_counter()
    for it in range(cfg.iters):
        view = views[it % len(views)]
        total, parts, grads = _stage0_view_pass(scene, view, cfg, rcfg)
        if not np.isfinite(total) or not np.isfinite(grads.max_abs()):
            raise NumericFailure(
                f"stage 0 diverged at iteration {it}: loss={total}")
        raw = state.raw_gradients(grads)
        for name in opts:
            p = getattr(state, name)
            setattr(state, name, opts[name].step(p, getattr(raw, name)))
        state.quat /= np.linalg.norm(state.quat, axis=1, keepdims=True)
        state.rad_raw = np.maximum(state.rad_raw, 0.0)

        if (it + 1) % cfg.rebuild_every == 0 or it + 1 == cfg.iters:
            scene = build_accel(state.to_cloud(), scene.r_cut)
        else:
            scene = Scene(gaussians=state.to_cloud(), r_cut=scene.r_cut,
                          bvh=scene.bvh, bounds_min=scene.bounds_min,
                          bounds_max=scene.bounds_max)
        wall = time.perf_counter() - t0
        history.append((it, total, *parts, wall))
        if cfg.log_every and (it % cfg.log_every == 0 or it + 1 == cfg.iters):
            cfg.log(f"iter {it} total {total:.6f} Lc {parts[0]:.6f} "
                    f"Ln {parts[1]:.6f} Ld {parts[2]:.6f} Le {parts[3]:.6f} "
                    f"wall {wall:.1f}s")
        if callback is not None:
            callback(it, state, total)
    return state.to_cloud(), history


# ---------------------------------------------------------------------------
# frozen-geometry pixel caches for Stage 1 and baking


@dataclass
class PixelCache:
    """Primary-hit weight lists and classification for one view's pixels.

    With geometry, opacity, and (for Stage 1) radiance frozen, the composited
    weight of each primitive along each center ray is constant, so the
    per-pixel forward reduces to a sparse weighted sum.
    """

    camera: Camera
    rays: np.ndarray
    offsets: np.ndarray
    counts: np.ndarray
    prim: np.ndarray
    w: np.ndarray
    raw: np.ndarray          # (h*w, OUT_WIDTH) primary aggregates
    is_emitter: np.ndarray   # (h*w,) bool
    valid: np.ndarray        # (h*w,) bool: covered, oriented, non-emissive
    mean_r: Optional[np.ndarray] = None  # (h*w, 3) cached cache-radiance mean

    @property
    def n_pixels(self):
        return self.rays.shape[0]


def build_pixel_cache(scene: Scene, cam: Camera, rcfg: RenderConfig,
                      with_secondary: bool = False) -> PixelCache:
    rays, raw_img = primary_maps(scene, cam, rcfg)
    raw = raw_img.reshape(-1, kernels.OUT_WIDTH)
    g = scene.gaussians

    counts = np.zeros(rays.shape[0], dtype=np.int64)
    kernels.count_hits_kernel(
        rays, scene.tables()[1],
        scene.r_cut, rcfg.tau_T, rcfg.max_hits, *scene.bvh_args(), counts)
    offsets = np.zeros(rays.shape[0], dtype=np.int64)
    np.cumsum(counts[:-1], out=offsets[1:])
    total = int(counts.sum())
    prim = np.zeros(total, dtype=np.int64)
    w = np.zeros(total, dtype=np.float64)
    kernels.fill_hits_kernel(
        rays, scene.tables()[1],
        scene.r_cut, rcfg.tau_T, rcfg.max_hits, *scene.bvh_args(),
        offsets, prim, w)

    A = raw[:, 0]
    norm = np.linalg.norm(raw[:, 2:5], axis=1)
    is_emitter = raw[:, 9] > rcfg.tau_E
    valid = (A > rcfg.a_min) & (norm > 1e-9) & ~is_emitter

    cache = PixelCache(camera=cam, rays=rays, offsets=offsets, counts=counts,
                       prim=prim, w=w, raw=raw, is_emitter=is_emitter,
                       valid=valid)
    if with_secondary:
        n_hat = np.zeros((rays.shape[0], 3))
        n_hat[valid] = raw[valid, 2:5] / norm[valid, None]
        d_tilde = np.zeros(rays.shape[0])
        d_tilde[valid] = raw[valid, 5] / A[valid]
        origins = rays[:, 0:3] + d_tilde[:, None] * rays[:, 3:6]
        mean_r = np.zeros((rays.shape[0], 3))
        kernels.secondary_mean_kernel(
            np.ascontiguousarray(origins), np.ascontiguousarray(n_hat),
            valid.astype(np.uint8), rcfg.spp, np.uint64(rcfg.seed),
            np.arange(rays.shape[0], dtype=np.int64), 1,
            rcfg.resolve_t_min(scene), rcfg.tau_E,
            *scene.kernel_args(), scene.r_cut, rcfg.tau_T, rcfg.max_hits,
            *scene.bvh_args(), mean_r)
        cache.mean_r = mean_r
    return cache


def _sparse_forward(cache: PixelCache, values: np.ndarray) -> np.ndarray:
    out = np.zeros((cache.n_pixels, 3))
    kernels.weights_forward_kernel(cache.offsets, cache.counts, cache.prim,
                                   cache.w, np.ascontiguousarray(values), out)
    return out


def _sparse_backward(cache: PixelCache, adj: np.ndarray, g_values: np.ndarray):
    kernels.weights_backward_kernel(cache.offsets, cache.counts, cache.prim,
                                    cache.w, np.ascontiguousarray(adj), g_values)


def stage1_predict(cache: PixelCache, albedo: np.ndarray) -> np.ndarray:
    """Single-bounce prediction for one cached view, flat (h*w, 3)."""
    p_comp = _sparse_forward(cache, albedo)
    pred = np.zeros((cache.n_pixels, 3))
    pred[cache.is_emitter] = cache.raw[cache.is_emitter, 6:9]
    v = cache.valid
    pred[v] = p_comp[v] * cache.mean_r[v]
    return pred


def stage1_loss_and_grad(cache: PixelCache, albedo: np.ndarray,
                         gt_image: np.ndarray, pq_peak: float):
    """Color loss of the cached single-bounce prediction plus d/d(albedo)."""
    h, w = cache.camera.height, cache.camera.width
    p_comp = _sparse_forward(cache, albedo)
    leaf = torch.tensor(p_comp, dtype=torch.float64, requires_grad=True)
    mean_r = torch.tensor(cache.mean_r, dtype=torch.float64)
    base = torch.tensor(stage1_predict(cache, albedo), dtype=torch.float64)
    v = torch.tensor(cache.valid)
    pred = torch.where(v.unsqueeze(-1), leaf * mean_r, base)
    loss = loss_color(pred.reshape(h, w, 3),
                      torch.tensor(gt_image, dtype=torch.float64), pq_peak)
    loss.backward()
    g_albedo = np.zeros_like(albedo)
    _sparse_backward(cache, leaf.grad.numpy(), g_albedo)
    return float(loss.detach()), g_albedo


DEFAULT_STAGE1_ITERS = 400


def stage1_recover_albedo(scene: Scene, views: List[TrainView],
                          cfg: TrainConfig = None, rcfg: RenderConfig = None,
                          iters: int = DEFAULT_STAGE1_ITERS):
    """Recover per-primitive diffuse albedo against the frozen radiance cache.

    Geometry, opacity, and the cache are fixed, so both the primary weights
    and the per-pixel mean incident cache radiance are precomputed once per
    view; each iteration is a sparse forward/backward over albedo only.
    Albedo is optimized directly with projection onto [0, 1]: the constraint
    set is a box, and a plain projected step can cross the whole unit range
    within the default iteration budget.
    """
    if cfg is None:
        cfg = TrainConfig()
    if rcfg is None:
        rcfg = RenderConfig(spp=256)
    caches = []
    for view in views:
        cfg.log(f"stage1: caching view {len(caches)} "
                f"({view.camera.width}x{view.camera.height}, spp {rcfg.spp})")
        caches.append(build_pixel_cache(scene, view.camera, rcfg,
                                        with_secondary=True))

    albedo = scene.gaussians.albedo.copy()
    opt = Adam(albedo.shape, cfg.lr_albedo, cfg.beta1, cfg.beta2,
               cfg.adam_eps)
    history = []
    t0 = time.perf_counter()
    for it in range(iters):
        vi = it % len(views)
        loss, g_albedo = stage1_loss_and_grad(
            caches[vi], albedo, views[vi].image, cfg.pq_peak)
        if not np.isfinite(loss):
            raise NumericFailure(f"stage 1 diverged at iteration {it}")
        albedo = np.clip(opt.step(albedo, g_albedo), 0.0, 1.0)
        history.append((it, loss, time.perf_counter() - t0))
        if cfg.log_every and (it % cfg.log_every == 0 or it + 1 == iters):
            cfg.log(f"stage1 iter {it} loss {loss:.6f} "
                    f"wall {history[-1][2]:.1f}s")
    out = scene.gaussians.copy()
    out.albedo = albedo
    return out, history


DEFAULT_BAKE_ITERS = 3000


def bake_radiance(scene: Scene, views: List[TrainView],
                  cfg: TrainConfig = None, rcfg: RenderConfig = None,
                  iters: int = DEFAULT_BAKE_ITERS):
    """Re-fit per-primitive radiance so 0-bounce renders match the targets.

    Targets are typically path-traced frames of the (possibly edited) scene;
    after baking, a radiant render reproduces global illumination at a
    fraction of the path-tracing cost.
    """
    if cfg is None:
        cfg = TrainConfig()
    if rcfg is None:
        rcfg = RenderConfig()
    caches = [build_pixel_cache(scene, v.camera, rcfg) for v in views]
    rad = scene.gaussians.radiance.copy()
    opt = Adam(rad.shape, cfg.lr_radiance, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history = []
    t0 = time.perf_counter()
    for it in range(iters):
        vi = it % len(views)
        cache = caches[vi]
        view = views[vi]
        h, w = view.camera.height, view.camera.width
        pred = _sparse_forward(cache, rad)
        leaf = torch.tensor(pred, dtype=torch.float64, requires_grad=True)
        loss = loss_color(leaf.reshape(h, w, 3),
                          torch.tensor(view.image, dtype=torch.float64),
                          cfg.pq_peak)
        loss.backward()
        loss_val = float(loss.detach())
        if not np.isfinite(loss_val):
            raise NumericFailure(f"bake diverged at iteration {it}")
        g_rad = np.zeros_like(rad)
        _sparse_backward(cache, leaf.grad.numpy(), g_rad)
        rad = np.maximum(opt.step(rad, g_rad), 0.0)
        history.append((it, loss_val, time.perf_counter() - t0))
        if cfg.log_every and (it % cfg.log_every == 0 or it + 1 == iters):
            cfg.log(f"bake iter {it} loss {loss_val:.6f} "
                    f"wall {history[-1][2]:.1f}s")
    out = scene.gaussians.copy()
    out.radiance = rad
    return out, history
