import numpy as np
import pytest

from surfeltrace import (DEFAULT_R_CUT, Gaussian2D, GaussianCloud,
                         InvalidInputError, Ray, frame_from_quaternion,
                         intersect, response)


def test_frame_is_orthonormal():
    rng = np.random.default_rng(1)
    for _ in range(50):
        q = rng.normal(size=4)
        fr = frame_from_quaternion(q)
        assert np.allclose(fr.t_u @ fr.t_v, 0.0, atol=1e-12)
        assert np.allclose(np.linalg.norm(fr.t_u), 1.0)
        assert np.allclose(np.linalg.norm(fr.t_v), 1.0)
        assert np.allclose(np.cross(fr.t_u, fr.t_v), fr.n, atol=1e-12)


def test_response_center_is_one():
    g = Gaussian2D(p=(1, 2, 3), s_u=0.5, s_v=0.3, q=(1, 0, 0, 0), sigma=0.8)
    assert response(g, (1, 2, 3)) == pytest.approx(1.0)


def test_response_falls_off_anisotropically():
    g = Gaussian2D(p=(0, 0, 0), s_u=1.0, s_v=0.5, q=(1, 0, 0, 0), sigma=1.0)
    # one standard deviation along each axis
    assert response(g, (1, 0, 0)) == pytest.approx(np.exp(-0.5))
    assert response(g, (0, 0.5, 0)) == pytest.approx(np.exp(-0.5))


def test_intersect_head_on():
    g = Gaussian2D(p=(0, 0, 5), s_u=1, s_v=1, q=(1, 0, 0, 0), sigma=1.0)
    hit = intersect(g, Ray(origin=(0, 0, 0), dir=(0, 0, 1)))
    t, gval, n = hit
    assert t == pytest.approx(5.0)
    assert gval == pytest.approx(1.0)
    # normal faces the ray origin
    assert np.allclose(n, (0, 0, -1))


def test_intersect_normal_sign_flips_with_approach_side():
    g = Gaussian2D(p=(0, 0, 0), s_u=1, s_v=1, q=(1, 0, 0, 0), sigma=1.0)
    _, _, n_above = intersect(g, Ray(origin=(0, 0, 3), dir=(0, 0, -1)))
    _, _, n_below = intersect(g, Ray(origin=(0, 0, -3), dir=(0, 0, 1)))
    assert np.allclose(n_above, (0, 0, 1))
    assert np.allclose(n_below, (0, 0, -1))


def test_intersect_misses():
    g = Gaussian2D(p=(0, 0, 5), s_u=0.5, s_v=0.5, q=(1, 0, 0, 0), sigma=1.0)
    # parallel ray
    assert intersect(g, Ray(origin=(0, 0, 0), dir=(1, 0, 0))) is None
    # behind the origin
    assert intersect(g, Ray(origin=(0, 0, 10), dir=(0, 0, 1))) is None
    # outside the truncated support
    far = DEFAULT_R_CUT * 0.5 + 0.1
    assert intersect(g, Ray(origin=(far, 0, 0), dir=(0, 0, 1))) is None
    # just inside the cutoff still hits
    near = DEFAULT_R_CUT * 0.5 - 1e-3
    assert intersect(g, Ray(origin=(near, 0, 0), dir=(0, 0, 1))) is not None


def test_t_min_excludes_near_hits():
    g = Gaussian2D(p=(0, 0, 1), s_u=1, s_v=1, q=(1, 0, 0, 0), sigma=1.0)
    assert intersect(g, Ray(origin=(0, 0, 0), dir=(0, 0, 1), t_min=2.0)) is None


def test_gaussian_validation():
    with pytest.raises(InvalidInputError):
        Gaussian2D(p=(0, 0, 0), s_u=-1, s_v=1, q=(1, 0, 0, 0), sigma=1.0)
    with pytest.raises(InvalidInputError):
        Gaussian2D(p=(0, 0, 0), s_u=1, s_v=1, q=(0, 0, 0, 0), sigma=1.0)
    with pytest.raises(InvalidInputError):
        Gaussian2D(p=(0, 0, 0), s_u=1, s_v=1, q=(1, 0, 0, 0), sigma=1.5)
    with pytest.raises(InvalidInputError):
        Gaussian2D(p=(0, 0, 0), s_u=1, s_v=1, q=(1, 0, 0, 0), sigma=1.0, e=2.0)
    with pytest.raises(InvalidInputError):
        Gaussian2D(p=(0, 0, 0), s_u=1, s_v=1, q=(1, 0, 0, 0), sigma=1.0,
                   r=(-1, 0, 0))


def test_cloud_roundtrip_and_frames():
    gs = [
        Gaussian2D(p=(0, 0, 0), s_u=1, s_v=0.5, q=(1, 0, 0, 0), sigma=0.9,
                   r=(1, 2, 3), e=0.2, rho=(0.1, 0.2, 0.3)),
        Gaussian2D(p=(1, 1, 1), s_u=0.3, s_v=0.3, q=(0.5, 0.5, 0.5, 0.5),
                   sigma=0.5),
    ]
    cloud = GaussianCloud.from_gaussians(gs)
    assert len(cloud) == 2
    for i, g in enumerate(gs):
        back = cloud.gaussian(i)
        assert np.allclose(back.p, g.p)
        fr = g.frame
        assert np.allclose(cloud.normal[i], fr.n, atol=1e-12)
        assert np.allclose(cloud.t_u[i], fr.t_u, atol=1e-12)


def test_support_aabbs_contain_hits():
    rng = np.random.default_rng(7)
    from conftest import random_cloud
    cloud = random_cloud(rng, 20)
    amin, amax = cloud.support_aabbs(DEFAULT_R_CUT)
    for _ in range(200):
        i = rng.integers(0, 20)
        g = cloud.gaussian(i)
        o = rng.uniform(-3, 3, 3)
        d = rng.normal(size=3)
        hit = intersect(g, Ray(origin=o, dir=d, t_min=1e-6))
        if hit is None:
            continue
        t = hit[0]
        x = o + t * d / np.linalg.norm(d)
        assert np.all(x >= amin[i] - 1e-9) and np.all(x <= amax[i] + 1e-9)


def test_cloud_validation_rejects_bad_shapes():
    with pytest.raises(InvalidInputError):
        GaussianCloud(pos=np.zeros((2, 3)), scale=np.ones((3, 2)),
                      quat=np.tile([1.0, 0, 0, 0], (2, 1)),
                      opacity=np.ones(2), radiance=np.zeros((2, 3)),
                      emission=np.zeros(2), albedo=np.zeros((2, 3)))
