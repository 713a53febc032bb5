import numpy as np
import pytest

from geosplat.raster import project_gaussian, render_oracle
from geosplat.synth import cube_mesh, icosphere, random_init_scene, synth_scene, two_planes_mesh


def test_sphere_counts():
    s = synth_scene("sphere", 100, 8, seed=0)
    assert len(s.gt) == 100 and len(s.cloud.points) == 100
    assert len(s.cameras) == len(s.images) == 8
    assert all(img.shape == (64, 64, 3) for img in s.images)
    # the cloud sits near the unit sphere
    assert np.max(np.abs(np.linalg.norm(s.cloud.points, axis=1) - 1.0)) < 0.06


@pytest.mark.parametrize("kind", ["sphere", "cube", "two-planes"])
def test_same_seed_is_bit_identical(kind):
    a, b = synth_scene(kind, 40, 3, seed=5, image_size=24), synth_scene(kind, 40, 3, seed=5, image_size=24)
    assert a.gt.mu.tobytes() == b.gt.mu.tobytes() and a.cloud.points.tobytes() == b.cloud.points.tobytes()
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.images, b.images))
    c = synth_scene(kind, 40, 3, seed=6, image_size=24)
    assert c.gt.mu.tobytes() != a.gt.mu.tobytes()


@pytest.mark.parametrize("kind", ["sphere", "cube", "two-planes"])
def test_every_center_projects_inside_frame(kind):
    s = synth_scene(kind, 60, 6, seed=1, image_size=32)
    for cam in s.cameras:
        np.testing.assert_allclose(np.linalg.norm(cam.center), 3.5)
        for i in range(len(s.gt)):
            sp = project_gaussian(s.gt[i], cam)
            assert sp is not None
            assert 0 <= sp.mean2d[0] < cam.width and 0 <= sp.mean2d[1] < cam.height


def test_targets_are_oracle_renders():
    s = synth_scene("cube", 30, 2, seed=2, image_size=24)
    for cam, img in s.views:
        assert render_oracle(s.gt, cam).image.tobytes() == img.tobytes()


def test_held_out_views_are_disjoint_and_interleaved():
    s = synth_scene("sphere", 20, 8, seed=0, n_test_views=2, image_size=16)
    assert len(s.cameras) == 8 and len(s.test_cameras) == 2
    train = {c.center.tobytes() for c in s.cameras}
    assert not train & {c.center.tobytes() for c in s.test_cameras}


def test_meshes_are_closed_or_planar():
    for mesh, expected_area in [(icosphere(3), 4 * np.pi), (cube_mesh(), 6 * 1.4**2), (two_planes_mesh(), 2 * 1.4**2)]:
        v = mesh.vertices[mesh.triangles]
        area = 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1).sum()
        assert area == pytest.approx(expected_area, rel=0.01)


def test_random_init_inside_bounding_box():
    s = synth_scene("sphere", 50, 2, seed=0, image_size=16)
    init = random_init_scene(s.cloud, 200, seed=3)
    lo, hi = s.cloud.points.min(0), s.cloud.points.max(0)
    assert np.all(init.mu >= lo) and np.all(init.mu <= hi)
    init.validate()


def test_unknown_kind():
    with pytest.raises(ValueError, match="torus"):
        synth_scene("torus", 10, 1)
