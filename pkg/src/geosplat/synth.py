"""Synthetic scenes with exact ground truth for desk-scale experiments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import render_oracle
from .scene import Camera, GaussianScene, SparsePointCloud, TriangleMesh, logit, quat_from_rotmat

KINDS = ("sphere", "cube", "two-planes")


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriangleMesh:
    t = (1.0 + 5**0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    V = np.array(verts)
    return TriangleMesh(V * radius, np.array(faces), normals=V)


def grid_plane(origin, u, v, n: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Vertices and triangles of an ``n x n`` quad grid spanning ``origin + [0,1]u + [0,1]v``."""
    origin, u, v = (np.asarray(a, dtype=np.float64) for a in (origin, u, v))
    s = np.linspace(0.0, 1.0, n + 1)
    uu, vv = np.meshgrid(s, s, indexing="ij")
    V = origin + uu.reshape(-1, 1) * u + vv.reshape(-1, 1) * v
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a, b, c, d = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    F = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return V, F


def _merge(parts) -> TriangleMesh:
    verts, faces, normals, offset = [], [], [], 0
    for V, F, nrm in parts:
        verts.append(V)
        faces.append(F + offset)
        normals.append(np.repeat(np.asarray(nrm, dtype=np.float64)[None], len(V), axis=0))
        offset += len(V)
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces), np.concatenate(normals))


def _oriented(origin, u, v, n_cells):
    """Grid plane whose triangle winding matches ``u x v``."""
    V, F = grid_plane(origin, u, v, n_cells)
    return V, F, np.cross(u, v) / np.linalg.norm(np.cross(u, v))


def cube_mesh(half: float = 0.7, n: int = 4) -> TriangleMesh:
    """Cube with per-face vertices so interpolated normals stay face normals."""
    h = half
    parts = []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            normal = np.zeros(3)
            normal[axis] = sign
            a, b = [k for k in range(3) if k != axis]
            u, v = np.zeros(3), np.zeros(3)
            u[a], v[b] = 2 * h, 2 * h
            if np.dot(np.cross(u, v), normal) < 0:
                u, v = v, u
            origin = -h * np.ones(3)
            origin[axis] = sign * h
            parts.append(_oriented(origin, u, v, n))
    return _merge(parts)


def two_planes_mesh(size: float = 1.4, n: int = 8) -> TriangleMesh:
    """An L-shaped pair: floor at z = -size/2 and wall at x = -size/2."""
    h = size / 2.0
    floor = _oriented([-h, -h, -h], [size, 0, 0], [0, size, 0], n)
    wall = _oriented([-h, -h, -h], [0, size, 0], [0, 0, size], n)
    return _merge([floor, wall])


def color_field(p: np.ndarray, phase: np.ndarray) -> np.ndarray:
    """Smooth RGB pattern in [0.1, 0.9] over world positions."""
    c = 0.5 + 0.4 * np.sin(2.0 * p[:, [0, 1, 2]] + p[:, [1, 2, 0]] + phase)
    return np.clip(c, 0.0, 1.0)


def _frame_from_normals(normals: np.ndarray) -> np.ndarray:
    """Quaternions whose third rotation column is the given normal."""
    quats = np.empty((len(normals), 4))
    for i, nrm in enumerate(normals):
        helper = np.array([1.0, 0.0, 0.0]) if abs(nrm[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        t1 = np.cross(helper, nrm)
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(nrm, t1)
        quats[i] = quat_from_rotmat(np.stack([t1, t2, nrm], axis=1))
    return quats


def _surface_samples(kind: str, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    if kind == "sphere":
        p = rng.normal(size=(n, 3))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        return p, p.copy()
    if kind == "cube":
        h = 0.7
        axis = rng.integers(0, 3, n)
        sign = rng.choice([-1.0, 1.0], n)
        p = rng.uniform(-h, h, (n, 3))
        p[np.arange(n), axis] = sign * h
        nrm = np.zeros((n, 3))
        nrm[np.arange(n), axis] = sign
        return p, nrm
    if kind == "two-planes":
        h = 0.7
        wall = rng.random(n) < 0.5
        p = rng.uniform(-h, h, (n, 3))
        p[~wall, 2] = -h
        p[wall, 0] = -h
        nrm = np.where(wall[:, None], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0])
        return p, nrm
    raise ValueError(f"unknown scene kind {kind!r}; choose from {KINDS}")


def spread_samples(kind: str, n: int, rng, oversample: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Roughly even surface samples by farthest-point selection from a dense draw."""
    cand, cn = _surface_samples(kind, max(n * oversample, n), rng)
    chosen = [0]
    d = np.linalg.norm(cand - cand[0], axis=1)
    for _ in range(n - 1):
        j = int(np.argmax(d))
        chosen.append(j)
        d = np.minimum(d, np.linalg.norm(cand - cand[j], axis=1))
    idx = np.array(chosen)
    return cand[idx], cn[idx]


def view_directions(kind: str, n: int, rng) -> np.ndarray:
    """Fibonacci directions, restricted to the front octant for ``two-planes``."""
    k = np.arange(n) + 0.5
    golden = np.pi * (3.0 - 5**0.5)
    if kind == "two-planes":
        z = 0.25 + 0.6 * k / n
        theta = golden * k * 0.25 + rng.uniform(0, 0.1)
        r = np.sqrt(1 - z * z)
        d = np.stack([np.abs(np.cos(theta)) * r + 0.3, np.sin(theta) * r, z], axis=1)
    else:
        z = 0.8 - 1.6 * k / n
        theta = golden * k + rng.uniform(0, 2 * np.pi)
        r = np.sqrt(1 - z * z)
        d = np.stack([np.cos(theta) * r, np.sin(theta) * r, z], axis=1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def make_cameras(directions: np.ndarray, radius: float, image_size: int, fov_deg: float) -> list[Camera]:
    fx = 0.5 * image_size / np.tan(np.radians(fov_deg) / 2.0)
    return [Camera.look_at(radius * d, np.zeros(3), up=(0.0, 0.0, 1.0), fx=fx, width=image_size,
                           height=image_size, near_clip=0.05) for d in directions]


@dataclass
class SynthScene:
    kind: str
    gt: GaussianScene
    mesh: TriangleMesh
    cameras: list
    images: list
    cloud: SparsePointCloud
    test_cameras: list
    test_images: list

    @property
    def views(self) -> list:
        return list(zip(self.cameras, self.images))

    @property
    def test_views(self) -> list:
        return list(zip(self.test_cameras, self.test_images))


def synth_scene(kind: str, n_gaussians: int, n_views: int, seed: int = 0, n_test_views: int = 0,
                image_size: int = 64, cloud_noise: float = 0.01, n_cloud=None, radius: float = 3.5,
                fov_deg: float = 40.0) -> SynthScene:
    """Ground truth Gaussians on a known surface, its mesh, cameras and oracle renders.

    The sparse cloud is an independent set of surface samples (``n_gaussians``
    of them unless ``n_cloud`` is given) perturbed by ``cloud_noise``, with
    colors taken from the same smooth color field as the ground truth.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown scene kind {kind!r}; choose from {KINDS}")
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi, 3)
    mu, normals = spread_samples(kind, n_gaussians, rng)
    area = {"sphere": 4 * np.pi, "cube": 6 * 1.4**2, "two-planes": 2 * 1.4**2}[kind]
    spacing = np.sqrt(area / n_gaussians)
    tangential = 0.45 * spacing
    log_scale = np.tile(np.log([tangential, tangential, 0.08 * tangential]), (n_gaussians, 1))
    gt = GaussianScene(mu, log_scale, _frame_from_normals(normals), np.full(n_gaussians, float(logit(0.9))),
                       color_field(mu, phase))
    mesh = {"sphere": lambda: icosphere(3), "cube": cube_mesh, "two-planes": two_planes_mesh}[kind]()
    dirs = view_directions(kind, n_views + n_test_views, rng)
    cams = make_cameras(dirs, radius, image_size, fov_deg)
    images = [render_oracle(gt, c).image for c in cams]
    n_cloud = n_gaussians if n_cloud is None else n_cloud
    clean, _ = _surface_samples(kind, n_cloud, rng)
    noisy = clean + rng.normal(0.0, cloud_noise, clean.shape)
    cloud = SparsePointCloud(noisy, color_field(clean, phase))
    # held-out views are interleaved with the training views so both cover the whole surface
    total = n_views + n_test_views
    test = set(np.round((np.arange(n_test_views) + 0.5) * total / max(n_test_views, 1)).astype(int).tolist())
    test = set(sorted(test)[:n_test_views])
    train = [i for i in range(total) if i not in test]
    return SynthScene(kind, gt, mesh, [cams[i] for i in train], [images[i] for i in train], cloud,
                      [cams[i] for i in sorted(test)], [images[i] for i in sorted(test)])


def random_init_scene(cloud: SparsePointCloud, n: int, seed: int = 0, opacity: float = 0.1) -> GaussianScene:
    """Uniform random centers in the cloud's bounding box, random colors, isotropic scale."""
    rng = np.random.default_rng(seed)
    lo, hi = cloud.points.min(0), cloud.points.max(0)
    mu = rng.uniform(lo, hi, (n, 3))
    diag = float(np.linalg.norm(hi - lo))
    scale = 0.5 * diag / max(n, 1) ** (1 / 3)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianScene(mu, np.full((n, 3), np.log(scale)), rot, np.full(n, float(logit(opacity))),
                         rng.uniform(0, 1, (n, 3)))
