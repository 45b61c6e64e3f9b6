"""Synthetic scenes, dataset generation, and analytic transport oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import kernels
from .bvh import Scene, build_accel
from .camera import Camera
from .editing import threshold_emission_mask
from .errors import GenerationError, InvalidInputError
from .formats import (DatasetManifest, ViewRecord, image_write, mask_write,
                      preview_write, scene_write, snap_to_storage)
from .gaussians import GaussianCloud
from .training import TrainView
from .transport import RenderConfig, render_path_traced
from .tracer import trace_rows

SQ2 = math.sqrt(0.5)

# wall order: floor z=0, ceiling z=size, x=0, x=size, y=0, y=size
WALL_NORMALS = np.array([
    [0, 0, 1], [0, 0, -1], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0],
], dtype=np.float64)
# quaternion rotating +z onto each inward normal
WALL_QUATS = np.array([
    [1, 0, 0, 0],
    [0, 1, 0, 0],
    [SQ2, 0, SQ2, 0],
    [SQ2, 0, -SQ2, 0],
    [SQ2, -SQ2, 0, 0],
    [SQ2, SQ2, 0, 0],
], dtype=np.float64)


@dataclass
class BoxSpec:
    size: float = 2.0
    budget: int = 20000
    wall_albedos: Sequence = (0.5, 0.5, 0.5, 0.5, 0.5, 0.5)
    emitter_center: Sequence = (0.5, 0.5)  # fractional (x, y) on the ceiling
    emitter_half: float = 0.15             # fractional half-width
    emitter_radiance: Sequence = (4.0, 4.0, 4.0)
    overlap: float = 0.9                   # scale as a fraction of grid spacing
    jitter: float = 0.2                    # in-plane jitter, fraction of spacing
    seed: int = 0
    coverage_probes: int = 256
    min_coverage: float = 0.99


@dataclass
class BoxTruth:
    """Exact per-primitive ground truth returned by the generator."""

    wall: np.ndarray              # (n,) wall index 0..5
    is_emitter: np.ndarray        # (n,) bool
    wall_albedos: np.ndarray      # (6, 3)
    emitter_radiance: np.ndarray  # (3,)
    size: float


def _wall_point(wall: int, u: float, v: float, size: float) -> np.ndarray:
    if wall == 0:
        return np.array([u, v, 0.0])
    if wall == 1:
        return np.array([u, v, size])
    if wall == 2:
        return np.array([0.0, u, v])
    if wall == 3:
        return np.array([size, u, v])
    if wall == 4:
        return np.array([u, 0.0, v])
    return np.array([u, size, v])


def gen_box_scene(spec: BoxSpec = None):
    """Closed cube tiled with inward-facing surfels plus a ceiling emitter.

    Returns (scene, truth). Raises a generation error if the primitive budget
    leaves coverage holes (interior rays with accumulated opacity < 0.99).
    """
    if spec is None:
        spec = BoxSpec()
    if spec.size <= 0:
        raise InvalidInputError("box size must be positive")
    albedos = np.asarray(spec.wall_albedos, dtype=np.float64)
    if albedos.ndim == 1:
        albedos = np.repeat(albedos[:, None], 3, axis=1)
    if albedos.shape != (6, 3):
        raise InvalidInputError("wall_albedos must give 6 walls")
    l_e = np.asarray(spec.emitter_radiance, dtype=np.float64).reshape(3)

    per_wall = max(spec.budget // 6, 4)
    n_grid = max(int(round(math.sqrt(per_wall))), 2)
    h = spec.size / n_grid
    s = spec.overlap * h
    rng = np.random.default_rng(spec.seed)

    pos = []
    quat = []
    wall_id = []
    for wall in range(6):
        base = (np.arange(n_grid) + 0.5) * h
        uu, vv = np.meshgrid(base, base)
        uu = uu.reshape(-1) + rng.uniform(-spec.jitter * h, spec.jitter * h,
                                          n_grid * n_grid)
        vv = vv.reshape(-1) + rng.uniform(-spec.jitter * h, spec.jitter * h,
                                          n_grid * n_grid)
        uu = np.clip(uu, 0.0, spec.size)
        vv = np.clip(vv, 0.0, spec.size)
        for u, v in zip(uu, vv):
            pos.append(_wall_point(wall, u, v, spec.size))
        quat.append(np.tile(WALL_QUATS[wall], (n_grid * n_grid, 1)))
        wall_id.append(np.full(n_grid * n_grid, wall, dtype=np.int64))
    pos = np.array(pos)
    quat = np.concatenate(quat)
    wall_id = np.concatenate(wall_id)
    n = pos.shape[0]

    albedo = albedos[wall_id]
    radiance = np.zeros((n, 3))
    emission = np.zeros(n)

    # emitter panel: a rectangle of ceiling primitives becomes emissive
    cx = spec.emitter_center[0] * spec.size
    cy = spec.emitter_center[1] * spec.size
    half = spec.emitter_half * spec.size
    on_ceiling = wall_id == 1
    in_panel = on_ceiling & (np.abs(pos[:, 0] - cx) <= half) \
        & (np.abs(pos[:, 1] - cy) <= half)
    if not in_panel.any():
        raise GenerationError("emitter panel captured no ceiling primitives")
    emission[in_panel] = 1.0
    radiance[in_panel] = l_e
    albedo[in_panel] = 0.0

    cloud = snap_to_storage(GaussianCloud(
        pos=pos, scale=np.full((n, 2), s), quat=quat, opacity=np.ones(n),
        radiance=radiance, emission=emission, albedo=albedo))
    scene = build_accel(cloud)
    truth = BoxTruth(wall=wall_id, is_emitter=in_panel,
                     wall_albedos=albedos, emitter_radiance=l_e,
                     size=spec.size)

    # coverage probe: rays from well inside the box in random directions
    probe_rng = np.random.default_rng(spec.seed + 1)
    origins = probe_rng.uniform(0.2 * spec.size, 0.8 * spec.size,
                                (spec.coverage_probes, 3))
    dirs = probe_rng.normal(size=(spec.coverage_probes, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rays = np.concatenate([origins, dirs,
                           np.full((spec.coverage_probes, 1), 1e-4)], axis=1)
    rows = trace_rows(scene, rays)
    worst = float(rows[:, 0].min())
    if worst < spec.min_coverage:
        raise GenerationError(
            f"primitive budget {spec.budget} leaves coverage holes "
            f"(min probe A = {worst:.4f} < {spec.min_coverage})")
    return scene, truth


def compute_radiance_cache(scene: Scene, iters: int = 6, dirs: int = 64,
                           seed: int = 0, tau_E: float = 0.1) -> GaussianCloud:
    """Ground-truth radiance cache via fixed-point iteration on the surfels.

    Emitters keep their radiance; each non-emitter repeatedly takes
    rho * mean incident radiance over cosine-sampled directions from a point
    just off its front face. Converges geometrically (contraction rho < 1).
    """
    g = scene.gaussians.copy()
    emitter = g.emission > tau_E
    eps = 1e-3 * scene.diagonal
    origins = np.ascontiguousarray(g.pos + eps * g.normal)
    normals = np.ascontiguousarray(g.normal)
    valid = (~emitter).astype(np.uint8)
    t_min = 1e-3 * scene.diagonal
    for it in range(iters):
        work = Scene(gaussians=g, r_cut=scene.r_cut, bvh=scene.bvh,
                     bounds_min=scene.bounds_min, bounds_max=scene.bounds_max)
        mean_r = np.zeros((len(g), 3))
        kernels.secondary_mean_kernel(
            origins, normals, valid, dirs, np.uint64(seed),
            np.arange(len(g), dtype=np.int64), 100 + it,
            t_min, tau_E,
            *work.kernel_args(), work.r_cut, 1e-3, 1024,
            *work.bvh_args(), mean_r)
        new_r = g.radiance.copy()
        new_r[~emitter] = g.albedo[~emitter] * mean_r[~emitter]
        g = g.copy()
        g.radiance = new_r
    return g


# ---------------------------------------------------------------------------
# dataset generation


def orbit_cameras(size: float, n_views: int, width: int, height: int,
                  seed: int = 0, radius_frac: float = 0.3,
                  fov_deg: float = 70.0) -> List[Camera]:
    """Interior orbit with jitter; every camera looks across the room."""
    rng = np.random.default_rng(seed)
    center = np.full(3, 0.5 * size)
    radius = radius_frac * size
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
    cams = []
    for i in range(n_views):
        ang = 2.0 * math.pi * i / n_views + rng.uniform(-0.05, 0.05)
        height_off = rng.uniform(-0.1, 0.1) * size
        c = center + np.array([radius * math.cos(ang), radius * math.sin(ang),
                               height_off])
        pitch = math.radians(-25.0 + 50.0 * (i % 5) / 4.0)
        fwd = np.array([-math.cos(ang) * math.cos(pitch),
                        -math.sin(ang) * math.cos(pitch),
                        math.sin(pitch)])
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd], axis=1)
        cams.append(Camera(width=width, height=height, fx=f, fy=f,
                           cx=width / 2.0, cy=height / 2.0,
                           rotation=rot, center=c))
    return cams


def analytic_box_maps(cam: Camera, size: float):
    """Exact per-pixel inward normal and depth of the empty box interior."""
    xs, ys = np.meshgrid(np.arange(cam.width) + 0.5, np.arange(cam.height) + 0.5)
    d = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy,
                  np.ones_like(xs)], axis=-1) @ cam.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = cam.center
    best_t = np.full(d.shape[:2], np.inf)
    normal = np.zeros_like(d)
    wall = np.full(d.shape[:2], -1, dtype=np.int64)
    planes = [  # (axis, plane offset, wall index)
        (2, 0.0, 0), (2, size, 1), (0, 0.0, 2), (0, size, 3),
        (1, 0.0, 4), (1, size, 5),
    ]
    for axis, off, widx in planes:
        da = d[..., axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (off - o[axis]) / da
        hit = (np.abs(da) > 1e-12) & (t > 1e-9) & (t < best_t)
        if not hit.any():
            continue
        p = o + t[..., None] * d
        axes = [a for a in range(3) if a != axis]
        inside = hit & (p[..., axes[0]] >= 0) & (p[..., axes[0]] <= size) \
            & (p[..., axes[1]] >= 0) & (p[..., axes[1]] <= size)
        best_t = np.where(inside, t, best_t)
        normal[inside] = WALL_NORMALS[widx]
        wall[inside] = widx
    return normal, best_t, wall


def gen_views(scene: Scene, size: float, n_views: int, spp: int,
              seed: int = 0, width: int = 64, height: int = 64,
              tau_R: float = 2.0, rcfg: RenderConfig = None,
              max_escaped_frac: float = 0.05) -> List[TrainView]:
    """Path-traced supervision views with analytic normals and emission masks.

    Every eighth view is tagged as a held-out test view.
    """
    if rcfg is None:
        rcfg = RenderConfig()
    cams = orbit_cameras(size, n_views, width, height, seed)
    views = []
    for i, cam in enumerate(cams):
        cfg_i = rcfg.with_(spp=spp, seed=seed * 1000 + i)
        img = render_path_traced(scene, cam, cfg_i)
        escaped = float(np.mean(img.aux["alpha"] <= cfg_i.a_min))
        if escaped > max_escaped_frac:
            raise GenerationError(
                f"view {i}: {escaped:.1%} of pixels escape the scene "
                "(camera outside the box?)")
        normal, _, _ = analytic_box_maps(cam, size)
        mask = threshold_emission_mask(img.rgb, tau_R)
        views.append(TrainView(
            camera=cam, image=img.rgb, normal=normal, mask=mask,
            split="test" if i % 8 == 7 else "train"))
    return views


def sample_init_points(views: List[TrainView], size: float, stride: int = 4,
                       seed: int = 0):
    """Coarse RGB point cloud: unprojected analytic depth plus view colors."""
    pts = []
    cols = []
    for view in views:
        if view.split != "train":
            continue
        cam = view.camera
        _, depth, _ = analytic_box_maps(cam, size)
        xs, ys = np.meshgrid(np.arange(cam.width) + 0.5,
                             np.arange(cam.height) + 0.5)
        d = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy,
                      np.ones_like(xs)], axis=-1) @ cam.rotation.T
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        p = cam.center + depth[..., None] * d
        sl = (slice(None, None, stride), slice(None, None, stride))
        good = np.isfinite(depth[sl])
        pts.append(p[sl][good])
        cols.append(view.image[sl][good])
    pts = np.concatenate(pts)
    cols = np.concatenate(cols)
    rng = np.random.default_rng(seed)
    order = rng.permutation(pts.shape[0])
    return pts[order], cols[order]


def gen_dataset(scene: Scene, out_dir, size: float, n_views: int = 16,
                spp: int = 256, seed: int = 0, width: int = 64,
                height: int = 64, tau_R: float = 2.0,
                write_previews: bool = False) -> DatasetManifest:
    """Generate and write a full dataset (scene, images, normals, masks)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    views = gen_views(scene, size, n_views, spp, seed, width, height, tau_R)
    scene_write(out_dir / "scene.sgs", scene.gaussians)
    manifest = DatasetManifest(scene="scene.sgs",
                               meta={"size": size, "seed": seed, "spp": spp,
                                     "tau_R": tau_R})
    for i, view in enumerate(views):
        img_name = f"view_{i:03d}.pfm"
        nrm_name = f"normal_{i:03d}.pfm"
        msk_name = f"mask_{i:03d}.png"
        image_write(out_dir / img_name, view.image)
        image_write(out_dir / nrm_name, view.normal)
        mask_write(out_dir / msk_name, view.mask)
        if write_previews:
            preview_write(out_dir / f"preview_{i:03d}.png", view.image)
        manifest.views.append(ViewRecord(
            camera=view.camera, image=img_name, normal=nrm_name,
            mask=msk_name, split=view.split))
    manifest.save(out_dir / "manifest.json")
    return manifest


def load_views(manifest: DatasetManifest, base) -> List[TrainView]:
    """Materialize TrainViews from a written dataset."""
    from .formats import image_read, mask_read

    resolved = manifest.resolve(base)
    views = []
    for rec in resolved.views:
        views.append(TrainView(
            camera=rec.camera, image=image_read(rec.image),
            normal=image_read(rec.normal) if rec.normal else None,
            mask=mask_read(rec.mask) if rec.mask else None,
            split=rec.split))
    return views


# ---------------------------------------------------------------------------
# analytic transport oracle


def make_parallel_planes(rho, l_e, separation: float = 1.0,
                         extent: float = 16.0, spacing: float = 0.5,
                         overlap: float = 0.9) -> Scene:
    """Emissive plane at z = separation facing a diffuse plane at z = 0.

    Both planes are tiled with overlapping surfels so accumulated opacity is
    ~1 out to `extent`, which covers all but a ~1/(1+(extent/separation)^2)
    tail of the cosine-weighted hemisphere.
    """
    rho = np.broadcast_to(np.asarray(rho, dtype=np.float64), (3,))
    l_e = np.broadcast_to(np.asarray(l_e, dtype=np.float64), (3,))
    base = np.arange(-extent, extent + 1e-9, spacing)
    uu, vv = np.meshgrid(base, base)
    m = uu.size
    s = overlap * spacing

    floor_pos = np.stack([uu.reshape(-1), vv.reshape(-1), np.zeros(m)], axis=1)
    ceil_pos = np.stack([uu.reshape(-1), vv.reshape(-1),
                         np.full(m, separation)], axis=1)
    pos = np.concatenate([floor_pos, ceil_pos])
    quat = np.concatenate([
        np.tile(WALL_QUATS[0], (m, 1)),   # +z (toward emitter)
        np.tile(WALL_QUATS[1], (m, 1)),   # -z (toward diffuse plane)
    ])
    radiance = np.concatenate([np.zeros((m, 3)), np.tile(l_e, (m, 1))])
    emission = np.concatenate([np.zeros(m), np.ones(m)])
    albedo = np.concatenate([np.tile(rho, (m, 1)), np.zeros((m, 3))])
    cloud = GaussianCloud(
        pos=pos, scale=np.full((2 * m, 2), s), quat=quat,
        opacity=np.ones(2 * m), radiance=radiance, emission=emission,
        albedo=albedo)
    return build_accel(cloud)


def oracle_parallel_planes(rho, l_e, spp: int = 4096, tau_B: int = 2,
                           seed: int = 0):
    """Analytic single-bounce answer rho * L_e vs the path-traced estimate.

    The hemisphere integral of a diffuse surface under an enclosing uniform
    emitter is exactly rho (elementwise) times the emitter radiance.
    """
    from .gaussians import Ray
    from .rng import RngStream
    from .transport import path_trace_pixel

    rho = np.broadcast_to(np.asarray(rho, dtype=np.float64), (3,))
    l_e = np.broadcast_to(np.asarray(l_e, dtype=np.float64), (3,))
    if np.any(rho < 0) or np.any(rho >= 1):
        raise InvalidInputError("rho must lie in [0, 1)")
    scene = make_parallel_planes(rho, l_e)
    analytic = rho * l_e
    ray = Ray(origin=(0.0, 0.0, 0.5), dir=(0.0, 0.0, -1.0), t_min=1e-4)
    cfg = RenderConfig(spp=spp, tau_B=tau_B, seed=seed, t_min=1e-3)
    estimate = path_trace_pixel(scene, ray, cfg, RngStream(seed=seed))
    return analytic, estimate
