"""Surface-aligned refinement of Gaussian centers and orientations.

Each Gaussian is pulled toward ``mu_mesh + d * N`` (its nearest mesh
point pushed out along the interpolated normal), its shortest axis is
rotated onto ``N``, and a k-nearest-vertex term keeps it close to the
mesh. The three terms are combined with non-negative weights and
minimized by plain gradient descent over centers and quaternions.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .scene import GaussianScene, TriangleMesh, quat_to_rotmat, rotmat_grad_to_quat, smallest_axis_index

log = logging.getLogger(__name__)


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles ``(a, b, c)`` to ``p``; all arrays ``(M, 3)``.

    Returns the points and their barycentric coordinates ``(M, 3)``.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        w_ac = d2 / (d2 - d6)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
        v_in, w_in = vb * denom, vc * denom
    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
    ]
    zero, one = np.zeros_like(d1), np.ones_like(d1)
    v = np.select(conds, [zero, one, v_ab, zero, zero, 1 - w_bc], v_in)
    w = np.select(conds, [zero, zero, zero, one, w_ac, w_bc], w_in)
    u = 1.0 - v - w
    q = a + v[:, None] * ab + w[:, None] * ac
    return q, np.stack([u, v, w], axis=1)


@dataclass
class SurfaceTarget:
    mu_mesh: np.ndarray
    normal: np.ndarray
    mu_target: np.ndarray
    d: float


class MeshQuery:
    """Nearest-surface and nearest-vertex queries against a fixed mesh.

    Triangles are indexed by a kd-tree over their centroids. For a query
    point, the exact distance ``d0`` to the triangle of the nearest centroid
    bounds the answer, so only triangles whose centroid lies within
    ``d0 + max_radius`` need an exact test.
    """

    def __init__(self, mesh: TriangleMesh):
        if len(mesh.triangles) == 0:
            raise ValueError("mesh has no triangles")
        self.mesh = mesh
        self.tri_v = mesh.vertices[mesh.triangles]  # (T, 3, 3)
        self.centroids = self.tri_v.mean(axis=1)
        self.max_radius = float(np.max(np.linalg.norm(self.tri_v - self.centroids[:, None], axis=2)))
        self.tri_tree = cKDTree(self.centroids)
        self.vert_tree = cKDTree(mesh.vertices)

    def _exact(self, p, tri):
        tv = self.tri_v[tri]
        q, bary = closest_point_on_triangles(p, tv[:, 0], tv[:, 1], tv[:, 2])
        return q, bary, np.sum((q - p) ** 2, axis=1)

    def nearest(self, points):
        """Closest surface point, interpolated unit normal and triangle index per query."""
        P = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if not np.all(np.isfinite(P)):
            raise ValueError("surface query points must be finite")
        _, first = self.tri_tree.query(P)
        _, _, d0 = self._exact(P, first)
        cands = self.tri_tree.query_ball_point(P, np.sqrt(d0) + self.max_radius + 1e-12)
        counts = np.array([len(c) for c in cands])
        owner = np.repeat(np.arange(len(P)), counts)
        tri = np.concatenate([np.sort(np.asarray(c, dtype=np.int64)) for c in cands])
        q, bary, dist2 = self._exact(P[owner], tri)
        # per query: smallest distance, lowest triangle index on ties
        order = np.lexsort((tri, dist2, owner))
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        best = order[starts]
        tri_best, q_best, bary_best = tri[best], q[best], bary[best]
        vn = self.mesh.normals[self.mesh.triangles[tri_best]]
        n = np.einsum("ij,ijk->ik", bary_best, vn)
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        return q_best, n, tri_best

    def knn_vertices(self, points, k: int):
        k = min(k, len(self.mesh.vertices))
        _, idx = self.vert_tree.query(np.atleast_2d(points), k=k)
        return idx.reshape(len(np.atleast_2d(points)), k)


def nearest_surface_point(mesh, p, d: Optional[float] = None) -> SurfaceTarget:
    """Nearest point on ``mesh`` (a :class:`TriangleMesh` or :class:`MeshQuery`) to ``p``.

    ``p`` may be one point ``(3,)`` or a batch ``(N, 3)``; the fields of the
    result have the same leading shape.
    """
    query = mesh if isinstance(mesh, MeshQuery) else MeshQuery(mesh)
    P = np.asarray(p, dtype=np.float64)
    q, n, _ = query.nearest(P.reshape(-1, 3))
    if P.ndim == 1:
        q, n = q[0], n[0]
    target = q if d is None else target_position(q, n, d)
    return SurfaceTarget(q, n, target, 0.0 if d is None else float(d))


def target_position(mu_mesh, normal, d: float) -> np.ndarray:
    if not d > 0:
        raise ValueError(f"surface offset must be positive, got {d}")
    return np.asarray(mu_mesh, dtype=np.float64) + d * np.asarray(normal, dtype=np.float64)


def dist_loss(scene: GaussianScene, targets) -> float:
    diff = scene.mu - np.asarray(targets)
    return float(np.mean(np.sum(diff * diff, axis=1)))


def orientation_vectors(scene: GaussianScene) -> np.ndarray:
    R = quat_to_rotmat(scene.rot)
    return R[np.arange(len(scene)), :, smallest_axis_index(scene.log_scale)]


def align_loss(scene: GaussianScene, normals) -> float:
    """Mean ``1 - cos`` between each Gaussian's shortest axis and its normal."""
    U = orientation_vectors(scene)
    N = np.asarray(normals, dtype=np.float64)
    nu, nn = np.linalg.norm(U, axis=1), np.linalg.norm(N, axis=1)
    if np.any(nu == 0) or np.any(nn == 0):
        raise ValueError("orientation and normal vectors must be nonzero")
    cos = np.sum(U * N, axis=1) / (nu * nn)
    return float(np.mean(1.0 - cos))


def _clamp_k(k: int, mesh: TriangleMesh) -> int:
    if k > len(mesh.vertices):
        warnings.warn(f"k={k} exceeds the {len(mesh.vertices)} mesh vertices; clamped", RuntimeWarning, stacklevel=3)
        return len(mesh.vertices)
    return k


def surface_loss(scene: GaussianScene, mesh, k: int = 4, neighbors=None) -> float:
    """Mean over Gaussians of summed squared distance to the ``k`` nearest mesh vertices."""
    query = mesh if isinstance(mesh, MeshQuery) else MeshQuery(mesh)
    if neighbors is None:
        neighbors = query.knn_vertices(scene.mu, _clamp_k(k, query.mesh))
    V = query.mesh.vertices[neighbors]
    return float(np.mean(np.sum((scene.mu[:, None, :] - V) ** 2, axis=(1, 2))))


@dataclass
class SurfaceOptConfig:
    lambda_d: float = 1.0
    lambda_a: float = 0.1
    lambda_s: float = 0.01
    d: Optional[float] = None  # None -> 0.5% of the mesh bounding-box diagonal
    eta: float = 1e-2
    k_neighbors: int = 4
    loss_threshold: float = 1e-5
    max_iters: int = 2000
    patience: int = 10
    # the losses are means over Gaussians, so a fixed eta moves each Gaussian by ~eta/N;
    # with this set the applied step is eta * N and per-Gaussian motion no longer shrinks with N
    eta_per_gaussian: bool = False

    def __post_init__(self):
        weights = (self.lambda_d, self.lambda_a, self.lambda_s)
        if min(weights) < 0 or max(weights) == 0:
            raise ValueError("loss weights must be non-negative and not all zero")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be at least 1")
        if self.d is not None and not self.d > 0:
            raise ValueError("offset d must be positive")

    def offset(self, mesh: TriangleMesh) -> float:
        return self.d if self.d is not None else 0.005 * mesh.bbox_diagonal

    def step_size(self, eta: float, n: int) -> float:
        return eta * max(n, 1) if self.eta_per_gaussian else eta


@dataclass
class SurfaceState:
    """Targets and neighbours frozen for one loss/gradient evaluation."""

    targets: np.ndarray
    normals: np.ndarray
    neighbors: np.ndarray


def surface_state(scene: GaussianScene, query: MeshQuery, cfg: SurfaceOptConfig) -> SurfaceState:
    q, n, _ = query.nearest(scene.mu)
    d = cfg.offset(query.mesh)
    k = _clamp_k(cfg.k_neighbors, query.mesh)
    return SurfaceState(q + d * n, n, query.knn_vertices(scene.mu, k))


def composite_loss_and_grad(scene: GaussianScene, query: MeshQuery, cfg: SurfaceOptConfig,
                            state: SurfaceState):
    """Weighted total, per-term values, and gradients w.r.t. ``mu`` and ``rot``."""
    n = len(scene)
    diff = scene.mu - state.targets
    l_dist = float(np.mean(np.sum(diff * diff, axis=1)))
    g_mu = cfg.lambda_d * 2.0 * diff / n

    R = quat_to_rotmat(scene.rot)
    axis = smallest_axis_index(scene.log_scale)
    U = R[np.arange(n), :, axis]
    Nn = state.normals / np.linalg.norm(state.normals, axis=1, keepdims=True)
    l_align = float(np.mean(1.0 - np.sum(U * Nn, axis=1)))
    # U is a column of a rotation matrix, so it is unit for every quaternion
    dR = np.zeros((n, 3, 3))
    dR[np.arange(n), :, axis] = -cfg.lambda_a * Nn / n
    g_rot = rotmat_grad_to_quat(scene.rot, dR)

    V = query.mesh.vertices[state.neighbors]
    off = scene.mu[:, None, :] - V
    l_surf = float(np.mean(np.sum(off * off, axis=(1, 2))))
    g_mu = g_mu + cfg.lambda_s * 2.0 * off.sum(axis=1) / n

    total = cfg.lambda_d * l_dist + cfg.lambda_a * l_align + cfg.lambda_s * l_surf
    return total, {"dist": l_dist, "align": l_align, "surface": l_surf}, g_mu, g_rot


def composite_loss(scene: GaussianScene, mesh, cfg: SurfaceOptConfig):
    query = mesh if isinstance(mesh, MeshQuery) else MeshQuery(mesh)
    total, comps, _, _ = composite_loss_and_grad(scene, query, cfg, surface_state(scene, query, cfg))
    return total, comps


def surface_step(scene: GaussianScene, query: MeshQuery, cfg: SurfaceOptConfig, eta: Optional[float] = None):
    """One in-place descent step; returns the loss evaluated before the step."""
    state = surface_state(scene, query, cfg)
    total, comps, g_mu, g_rot = composite_loss_and_grad(scene, query, cfg, state)
    if np.isfinite(total):
        step = cfg.step_size(cfg.eta if eta is None else eta, len(scene))
        scene.mu -= step * g_mu
        scene.rot -= step * g_rot
        scene.normalize_rotations()
    return total, comps


@dataclass
class OptReport:
    iters: int = 0
    final_loss: float = np.inf
    converged: bool = False
    message: str = ""
    history: list = field(default_factory=list)  # (iteration, total, components, eta)

    def log_lines(self) -> list[str]:
        return [f"{it}\t{total:.9e}\t{c['dist']:.9e}\t{c['align']:.9e}\t{c['surface']:.9e}\t{eta:.6e}"
                for it, total, c, eta in self.history]


def optimize_surface(scene: GaussianScene, mesh, cfg: Optional[SurfaceOptConfig] = None):
    """Descend the composite loss until it drops below the threshold or ``max_iters``.

    Targets are re-queried every iteration. The step size halves whenever
    the loss has not improved on its best value for ``cfg.patience``
    consecutive iterations. The best scene seen is returned.
    """
    cfg = cfg or SurfaceOptConfig()
    query = mesh if isinstance(mesh, MeshQuery) else MeshQuery(mesh)
    work = scene.copy()
    best, best_loss = work.copy(), np.inf
    report = OptReport()
    eta, stall = cfg.eta, 0
    for it in range(cfg.max_iters + 1):
        # squared distances overflow long before the coordinates themselves do
        with np.errstate(over="ignore", invalid="ignore"):
            finite = np.isfinite(np.sum(work.mu**2)) and np.all(np.isfinite(work.rot))
        if finite:
            state = surface_state(work, query, cfg)
            total, comps, g_mu, g_rot = composite_loss_and_grad(work, query, cfg, state)
        if not finite or not np.isfinite(total):
            report.message = f"non-finite loss at iteration {it}; returning last good scene"
            log.warning(report.message)
            break
        report.history.append((it, total, comps, eta))
        report.iters = it
        if total < best_loss:
            best, best_loss, stall = work.copy(), total, 0
        else:
            stall += 1
            if stall >= cfg.patience:
                eta *= 0.5
                stall = 0
        if total < cfg.loss_threshold:
            report.converged = True
            break
        if it == cfg.max_iters:
            break
        step = cfg.step_size(eta, len(work))
        work.mu -= step * g_mu
        work.rot -= step * g_rot
        work.normalize_rotations()
    report.final_loss = best_loss
    return best, report


def estimate_normals(points, k: int = 8) -> np.ndarray:
    """PCA normals from ``k`` nearest neighbours, flipped to point away from the centroid.

    A fallback for scenes without a mesh; orientation is only reliable for
    roughly star-shaped clouds.
    """
    pts = np.asarray(points, dtype=np.float64)
    k = min(k, len(pts))
    _, idx = cKDTree(pts).query(pts, k=k)
    nb = pts[idx.reshape(len(pts), k)]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    outward = pts - pts.mean(axis=0)
    flip = np.sum(normals * outward, axis=1) < 0
    normals[flip] *= -1
    return normals
