import json

import numpy as np
import pytest

from geosplat.formats import (FormatError, ProjectConfig, colmap_points, colmap_to_cameras, load_cameras,
                              load_config, load_gaussians, load_image, load_mesh, load_points, read_ply,
                              save_cameras, save_gaussians, save_image, save_mesh, save_points, write_config,
                              write_ply)
from geosplat.scene import Camera, SparsePointCloud, quat_to_rotmat
from geosplat.synth import icosphere

from scenes import PARAMS, front_camera, random_scene


def test_gaussian_roundtrip_is_bit_exact(tmp_path):
    scene = random_scene(37, seed=3)
    scene.rot = scene.rot * (1 + 1e-10)  # slightly off-unit rows must survive untouched too
    save_gaussians(tmp_path / "g.ply", scene)
    back = load_gaussians(tmp_path / "g.ply")
    for name in PARAMS:
        assert getattr(back, name).tobytes() == getattr(scene, name).tobytes()


def test_gaussian_load_rejects_missing_and_nonfinite(tmp_path):
    write_ply(tmp_path / "bad.ply", {"x": np.zeros(2), "y": np.zeros(2), "z": np.zeros(2)})
    with pytest.raises(FormatError, match="missing"):
        load_gaussians(tmp_path / "bad.ply")
    scene = random_scene(3)
    scene.mu[1, 0] = np.nan
    save_gaussians(tmp_path / "nan.ply", scene)
    with pytest.raises(FormatError, match="non-finite"):
        load_gaussians(tmp_path / "nan.ply")


@pytest.mark.parametrize("binary", [True, False])
def test_points_count_and_colors(tmp_path, binary):
    rng = np.random.default_rng(0)
    cloud = SparsePointCloud(rng.normal(size=(123, 3)), rng.uniform(size=(123, 3)))
    save_points(tmp_path / "p.ply", cloud, binary=binary)
    back = load_points(tmp_path / "p.ply")
    assert len(back.points) == 123
    np.testing.assert_allclose(back.points, cloud.points, rtol=1e-15)
    np.testing.assert_allclose(back.colors, cloud.colors, atol=0.5 / 255 + 1e-12)


def test_read_big_endian_and_float_colors(tmp_path):
    pts = np.array([[1.0, 2.0, 3.0], [-1.5, 0.25, 8.0]], dtype=">f4")
    header = ("ply\nformat binary_big_endian 1.0\ncomment made by hand\nelement vertex 2\n"
              "property float x\nproperty float y\nproperty float z\nend_header\n")
    (tmp_path / "be.ply").write_bytes(header.encode() + pts.tobytes())
    np.testing.assert_array_equal(load_points(tmp_path / "be.ply").points, pts.astype(np.float64))


def test_malformed_ply(tmp_path):
    (tmp_path / "x.ply").write_text("not a ply\n")
    with pytest.raises(FormatError, match="magic"):
        read_ply(tmp_path / "x.ply")
    (tmp_path / "y.ply").write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n")
    with pytest.raises(FormatError, match="end_header"):
        read_ply(tmp_path / "y.ply")


def test_mesh_ply_roundtrip(tmp_path):
    mesh = icosphere(2)
    save_mesh(tmp_path / "m.ply", mesh)
    back = load_mesh(tmp_path / "m.ply")
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    np.testing.assert_array_equal(back.vertices, mesh.vertices)


def test_obj_quad_is_triangulated_and_normals_computed(tmp_path):
    (tmp_path / "q.obj").write_text("# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    mesh = load_mesh(tmp_path / "q.obj")
    assert mesh.triangles.tolist() == [[0, 1, 2], [0, 2, 3]]
    np.testing.assert_allclose(mesh.normals, np.tile([0, 0, 1.0], (4, 1)))
    (tmp_path / "bad.obj").write_text("v 0 0 zero\n")
    with pytest.raises(FormatError, match="bad.obj:1"):
        load_mesh(tmp_path / "bad.obj")


def test_camera_roundtrip(tmp_path):
    cams = [front_camera(), Camera.look_at([3.0, 1, 2], np.zeros(3), fx=40, width=30, height=20)]
    save_cameras(tmp_path / "c.json", cams)
    back = load_cameras(tmp_path / "c.json")
    for a, b in zip(cams, back):
        np.testing.assert_array_equal(a.world_to_cam, b.world_to_cam)
        assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height, a.near_clip) == (
            b.fx, b.fy, b.cx, b.cy, b.width, b.height, b.near_clip)


def test_camera_errors(tmp_path):
    good = json.loads(json.dumps([{"fx": 50, "fy": 50, "cx": 16, "cy": 16, "width": 32, "height": 32,
                                    "world_to_cam": np.eye(4).ravel().tolist()}]))
    bad = json.loads(json.dumps(good))
    bad[0]["world_to_cam"][0] = 2.0
    (tmp_path / "skew.json").write_text(json.dumps(bad))
    with pytest.raises(FormatError, match="skew.json: camera 0") as info:
        load_cameras(tmp_path / "skew.json")
    assert "world_to_cam" in str(info.value) or "rotation" in str(info.value)
    del good[0]["fx"]
    (tmp_path / "nofx.json").write_text(json.dumps(good))
    with pytest.raises(FormatError, match="missing field 'fx'"):
        load_cameras(tmp_path / "nofx.json")
    (tmp_path / "junk.json").write_text("{")
    with pytest.raises(FormatError, match="invalid JSON"):
        load_cameras(tmp_path / "junk.json")


@pytest.mark.parametrize("ext", ["png", "ppm"])
def test_image_roundtrip_8bit(tmp_path, ext):
    img = np.random.default_rng(1).integers(0, 256, (9, 7, 3)) / 255.0
    save_image(tmp_path / f"i.{ext}", img)
    np.testing.assert_allclose(load_image(tmp_path / f"i.{ext}"), img, atol=1e-12)


def test_binary_ppm(tmp_path):
    data = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3) * 10
    (tmp_path / "b.ppm").write_bytes(b"P6\n# c\n3 2\n255\n" + data.tobytes())
    np.testing.assert_allclose(load_image(tmp_path / "b.ppm"), data / 255.0)


def test_missing_image():
    with pytest.raises(FileNotFoundError, match="nope.png"):
        load_image("nope.png")


def test_colmap_conversion(tmp_path):
    R = quat_to_rotmat(np.array([0.9, 0.1, -0.2, 0.3]) / np.linalg.norm([0.9, 0.1, -0.2, 0.3]))
    (tmp_path / "cameras.txt").write_text("# comment\n1 PINHOLE 64 48 50.0 51.0 32.0 24.0\n"
                                          "2 SIMPLE_RADIAL 20 20 30.0 10.0 10.0 0.01\n")
    q = np.array([0.9, 0.1, -0.2, 0.3]) / np.linalg.norm([0.9, 0.1, -0.2, 0.3])
    (tmp_path / "images.txt").write_text(
        "# header\n"
        f"2 1 0 0 0 0 0 1 2 b.png\n\n"
        f"1 {' '.join(map(str, q))} 0.5 -0.5 2 1 a.png\n10.0 20.0 -1\n")
    pairs = colmap_to_cameras(tmp_path / "cameras.txt", tmp_path / "images.txt")
    assert [n for n, _ in pairs] == ["a.png", "b.png"]
    a, b = pairs[0][1], pairs[1][1]
    assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == (50.0, 51.0, 32.0, 24.0, 64, 48)
    np.testing.assert_allclose(a.rotation, R, atol=1e-12)
    np.testing.assert_allclose(a.translation, [0.5, -0.5, 2])
    assert b.fx == b.fy == 30.0
    (tmp_path / "points3D.txt").write_text("# pts\n1 0.5 1.5 2.5 255 0 51 0.1 1 2\n")
    pc = colmap_points(tmp_path / "points3D.txt")
    np.testing.assert_allclose(pc.points, [[0.5, 1.5, 2.5]])
    np.testing.assert_allclose(pc.colors, [[1.0, 0.0, 0.2]])


def test_config_file_overrides_and_relative_paths(tmp_path):
    (tmp_path / "pts.ply").write_text("")
    (tmp_path / "proj.ini").write_text("[paths]\npoints = pts.ply\n[run]\nseed = 4\n"
                                       "[adc]\ndelta_u = 2.5\n[init]\nhidden = 16, 8\n"
                                       "[surface]\neta_per_gaussian = yes\n")
    cfg = load_config(tmp_path / "proj.ini", {"adc.lambda_top20": "0", "schedule.total_iters": "300"})
    assert cfg.points == str(tmp_path / "pts.ply") and cfg.seed == 4
    cfg.check_paths()
    adc = cfg.module_config("adc")
    assert adc.delta_u == 2.5 and adc.lambda_top20 == 0.0
    assert cfg.module_config("init").hidden == (16, 8)
    assert cfg.module_config("surface").eta_per_gaussian is True
    assert cfg.module_config("schedule").total_iters == 300
    write_config(tmp_path / "again.ini", cfg)
    again = load_config(tmp_path / "again.ini")
    assert again.sections == cfg.sections and again.seed == 4


def test_config_errors(tmp_path):
    (tmp_path / "a.ini").write_text("[bogus]\nx = 1\n")
    with pytest.raises(FormatError, match="bogus"):
        load_config(tmp_path / "a.ini")
    with pytest.raises(FormatError, match="delta_q"):
        load_config(None, {"adc.delta_q": "1"})
    with pytest.raises(FileNotFoundError, match="missing.ini"):
        load_config(tmp_path / "missing.ini")
    with pytest.raises(FileNotFoundError, match="cameras.*nope.json"):
        ProjectConfig(cameras="nope.json").check_paths()
