import numpy as np
import pytest

from surfeltrace.bvh import build_accel
from surfeltrace.gaussians import GaussianCloud, Ray
from surfeltrace.tracer import trace
from surfeltrace.transport import RenderConfig, render_radiant
from surfeltrace.camera import Camera


def random_cloud(rng, n, extent=1.0, emissive=True):
    quat = rng.normal(size=(n, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    return GaussianCloud(
        pos=rng.uniform(-extent, extent, (n, 3)),
        scale=rng.uniform(0.2, 0.8, (n, 2)),
        quat=quat,
        opacity=rng.uniform(0.2, 0.95, n),
        radiance=rng.uniform(0.0, 2.0, (n, 3)),
        emission=rng.uniform(0.0, 1.0 if emissive else 0.05, n),
        albedo=rng.uniform(0.05, 0.95, (n, 3)),
    )


def random_rays(rng, count, extent=1.0, t_min=1e-4):
    origins = rng.uniform(-2 * extent, 2 * extent, (count, 3))
    dirs = rng.normal(size=(count, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rays = np.concatenate([origins, dirs, np.full((count, 1), t_min)], axis=1)
    return rays


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Compile every numba kernel once so timed tests measure runtime only."""
    rng = np.random.default_rng(0)
    scene = build_accel(random_cloud(rng, 8))
    trace(scene, Ray(origin=(0, 0, -3), dir=(0, 0, 1), t_min=1e-4))
    cam = Camera(width=4, height=4, fx=4, fy=4, cx=2, cy=2,
                 rotation=np.eye(3), center=np.array([0.0, 0.0, -3.0]))
    from surfeltrace.transport import render_path_traced, render_single_bounce
    from surfeltrace.autodiff import backward_trace
    from surfeltrace.training import build_pixel_cache, _sparse_forward

    cfg = RenderConfig(spp=2, tau_B=2, seed=0, t_min=1e-4)
    render_radiant(scene, cam, cfg)
    render_path_traced(scene, cam, cfg)
    render_single_bounce(scene, cam, cfg)
    rays = random_rays(rng, 2)
    backward_trace(scene, rays, np.zeros((2, 12)))
    cache = build_pixel_cache(scene, cam, cfg, with_secondary=True)
    _sparse_forward(cache, scene.gaussians.albedo)
