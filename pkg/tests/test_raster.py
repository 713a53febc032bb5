import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geosplat.raster import (T_MIN, TILE, RenderError, project_gaussian, project_scene, render, render_backward,
                             render_oracle)
from geosplat.scene import Camera, Gaussian3D, GaussianScene

from scenes import PARAMS, central_difference, front_camera, random_scene, rel_error

AXIS_CAM = Camera(100.0, 100.0, 32.0, 32.0, 64, 64, np.eye(4))


def _g(mu, log_scale=(0.0, 0.0, 0.0), logit=0.0, color=(1.0, 0.0, 0.0)):
    return Gaussian3D(np.asarray(mu, float), np.asarray(log_scale, float), np.array([1.0, 0, 0, 0]), logit,
                      np.asarray(color, float))


def test_projection_on_axis():
    sp = project_gaussian(_g([0, 0, 5]), AXIS_CAM)
    np.testing.assert_allclose(sp.mean2d, [32, 32])
    # J = diag(fx/z, fy/z) on the axis, so J I J^T = 400 I before the 0.3 dilation
    np.testing.assert_allclose(sp.cov2d - 0.3 * np.eye(2), 400 * np.eye(2), atol=1e-9)
    assert sp.depth == 5.0 and sp.source_index == 0


def test_projection_matches_explicit_jacobian():
    cam = front_camera()
    g = _g([0.3, -0.2, 0.4], log_scale=(-1.0, -2.0, -1.5))
    sp = project_gaussian(g, cam)
    t = cam.rotation @ g.mu + cam.translation
    J = np.array([[cam.fx / t[2], 0, -cam.fx * t[0] / t[2] ** 2], [0, cam.fy / t[2], -cam.fy * t[1] / t[2] ** 2]])
    expected = J @ cam.rotation @ g.covariance @ cam.rotation.T @ J.T + 0.3 * np.eye(2)
    np.testing.assert_allclose(sp.cov2d, expected, rtol=1e-12)
    np.testing.assert_allclose(sp.mean2d, [cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy])
    np.linalg.cholesky(sp.cov2d)


def test_culling_rules():
    assert project_gaussian(_g([0, 0, AXIS_CAM.near_clip / 2]), AXIS_CAM) is None
    assert project_gaussian(_g([0, 0, -3]), AXIS_CAM) is None
    # far to the side: more than 3 sigma outside the frame
    assert project_gaussian(_g([50, 0, 5], log_scale=(-3, -3, -3)), AXIS_CAM) is None
    assert project_gaussian(_g([1.6, 0, 5], log_scale=(-3, -3, -3)), AXIS_CAM) is not None


def test_empty_scene_renders_background():
    empty = GaussianScene.from_gaussians([])
    out = render(empty, AXIS_CAM, background=[0.2, 0.3, 0.4])
    np.testing.assert_array_equal(out.image, np.broadcast_to([0.2, 0.3, 0.4], (64, 64, 3)))
    np.testing.assert_array_equal(out.transmittance, 1.0)
    assert np.all(out.front_index == -1)


def test_single_opaque_splat():
    scene = GaussianScene.from_gaussians([_g([0, 0, 5], log_scale=(-1, -1, -1), logit=30.0)])
    bg = np.array([0.0, 0.0, 1.0])
    out = render(scene, AXIS_CAM, background=bg)
    pix = out.image[32, 32]
    np.testing.assert_allclose(pix, np.array([1.0, 0, 0]) + bg * out.transmittance[32, 32], atol=1e-12)
    assert out.transmittance[32, 32] < 1e-12
    assert out.front_index[32, 32] == 0


def test_nonfinite_parameter_names_splat():
    scene = random_scene(4)
    scene.log_scale[2, 1] = np.inf
    with pytest.raises(RenderError, match="splat 2"):
        render(scene, front_camera())
    with pytest.raises(RenderError, match="splat 2"):
        render_oracle(scene, front_camera())


@pytest.mark.parametrize("seed", range(8))
def test_oracle_equivalence(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 201))
    scene = random_scene(n, seed=seed)
    size = int(rng.choice([17, 32, 64]))
    cam = front_camera(size=size, fx=size)
    a, b = render(scene, cam), render_oracle(scene, cam)
    assert np.max(np.abs(a.image - b.image)) <= 1e-6
    assert np.max(np.abs(a.transmittance - b.transmittance)) <= 1e-6


def test_render_invariants():
    scene = random_scene(120, seed=5, logit_sd=3.0)
    out = render(scene, front_camera())
    assert np.all(out.transmittance >= 0) and np.all(out.transmittance <= 1)
    # colors are in [0, 1], so each channel is bounded by the total weight 1 - T
    assert np.all(out.image <= (1.0 - out.transmittance)[..., None] + 1e-12)
    fi = out.front_index
    assert fi.min() >= -1 and fi.max() < len(scene)


def test_render_deterministic_across_threads():
    scene = random_scene(150, seed=9)
    cam = front_camera()
    base = render(scene, cam)
    for threads in (1, 3, 8):
        out = render(scene, cam, threads=threads)
        assert out.image.tobytes() == base.image.tobytes()
        assert out.front_index.tobytes() == base.front_index.tobytes()
    d = np.random.default_rng(0).normal(size=(64, 64, 3))
    g1 = render_backward(scene, cam, d, base, threads=1, accumulate=False)
    g4 = render_backward(scene, cam, d, base, threads=4, accumulate=False)
    for name in PARAMS:
        assert getattr(g1, name).tobytes() == getattr(g4, name).tobytes()


def test_stable_depth_tie_break():
    g = [_g([0, 0, 5], color=(1, 0, 0), logit=0.0), _g([0, 0, 5], color=(0, 1, 0), logit=0.0)]
    proj = project_scene(GaussianScene.from_gaussians(g), AXIS_CAM)
    assert proj.order.tolist() == [0, 1]
    out = render(GaussianScene.from_gaussians(g), AXIS_CAM)
    assert out.image[32, 32, 0] > out.image[32, 32, 1]


def test_tiles_are_16():
    assert TILE == 16 and T_MIN == 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 3.0))
def test_monotone_occlusion(seed, bump):
    scene = random_scene(12, seed=seed)
    cam = front_camera(size=32, fx=30)
    proj = project_scene(scene, cam)
    if not len(proj.order):
        return
    front = proj.order[0]
    u, v = np.clip(np.round(proj.mean2d[front]).astype(int), 0, 31)
    before = render(scene, cam).transmittance[v, u]
    scene.opacity_logit[front] += bump
    after = render(scene, cam).transmittance[v, u]
    assert after <= before + 1e-15


def test_backward_zero_upstream():
    scene = random_scene(20, seed=1)
    g = render_backward(scene, front_camera(), np.zeros((64, 64, 3)))
    for name in PARAMS:
        assert not np.any(getattr(g, name))


def test_backward_single_splat_color_is_weight_sum():
    scene = GaussianScene.from_gaussians([_g([0.1, 0, 5], log_scale=(-1.5, -1.2, -1), logit=0.5)])
    out = render_oracle(scene, AXIS_CAM)
    d = np.zeros((64, 64, 3))
    d[..., 0] = 1.0
    g = render_backward(scene, AXIS_CAM, d)
    # with one splat the weight at each pixel is 1 - T
    np.testing.assert_allclose(g.color[0], [np.sum(1.0 - out.transmittance), 0, 0], rtol=1e-12)


def test_backward_rejects_wrong_shape():
    with pytest.raises(ValueError, match="shape"):
        render_backward(random_scene(3), front_camera(), np.zeros((10, 10, 3)))


def test_backward_culled_get_zero_and_accumulator_counts_visible():
    scene = random_scene(10, seed=2)
    scene.mu[3] = [0.0, -10.0, 1.0]  # behind the camera at (0, -4, 1)
    cam = front_camera()
    d = np.random.default_rng(1).normal(size=(64, 64, 3))
    g = render_backward(scene, cam, d)
    assert not np.any(g.mu[3]) and not np.any(g.color[3])
    vis = project_scene(scene, cam).visible
    np.testing.assert_array_equal(scene.grad_count, vis.astype(int))
    np.testing.assert_allclose(scene.grad_sum, g.mean2d_norm)


@pytest.mark.parametrize("name", PARAMS)
def test_backward_matches_finite_differences(name):
    scene = random_scene(20, seed=0)
    cam = front_camera()
    target = np.random.default_rng(1).uniform(0, 1, (64, 64, 3))
    out = render(scene, cam)
    g = render_backward(scene, cam, out.image - target, out, accumulate=False)
    f = lambda: 0.5 * np.sum((render_oracle(scene, cam).image - target) ** 2)  # noqa: E731
    fd = central_difference(f, getattr(scene, name), 1e-5)
    assert rel_error(getattr(g, name), fd) < 1e-3
