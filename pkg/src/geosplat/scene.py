"""Core scene types: Gaussians, cameras, point clouds and triangle meshes.

A Gaussian stores its covariance implicitly as a per-axis log standard
deviation plus a unit quaternion ``(w, x, y, z)``; ``Sigma = R S S^T R^T``.
:class:`GaussianScene` keeps all Gaussians as parallel numpy arrays so the
renderer and the optimizers can work on whole columns at once.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class ParameterError(ValueError):
    """Raised when a Gaussian or camera parameter is invalid."""


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for quaternions ``(..., 4)`` in ``(w, x, y, z)`` order.

    The quaternion is normalized first, so any nonzero input is accepted.
    """
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_grad_to_quat(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``quat_to_rotmat(q)`` back onto the raw quaternion.

    Includes the normalization step, so the result is the gradient w.r.t.
    the unnormalized components of ``q``.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    G = dR
    g = lambda i, j: G[..., i, j]  # noqa: E731
    dw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    dx = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2)
              + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2))
    dy = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
              - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2))
    dz = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1)
              + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    radial = np.sum(dqn * qn, axis=-1, keepdims=True)
    return (dqn - qn * radial) / norm


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def quat_from_rotmat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with non-negative ``w`` for a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def covariance_from_params(log_scale, rot) -> np.ndarray:
    """World-space covariance ``R diag(exp(2 log_scale)) R^T``.

    Works on single Gaussians (``(3,)``, ``(4,)``) or batches
    (``(N, 3)``, ``(N, 4)``).
    """
    log_scale = np.asarray(log_scale, dtype=np.float64)
    rot = np.asarray(rot, dtype=np.float64)
    if not (np.all(np.isfinite(log_scale)) and np.all(np.isfinite(rot))):
        raise ParameterError("covariance parameters must be finite")
    if np.any(np.linalg.norm(rot, axis=-1) == 0):
        raise ParameterError("rotation quaternion has zero length")
    M = quat_to_rotmat(rot) * np.exp(log_scale)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def smallest_axis_index(log_scale) -> np.ndarray:
    # argmin returns the first minimum, which is the lowest-index tie-break
    return np.argmin(np.asarray(log_scale), axis=-1)


def smallest_axis_direction_params(log_scale, rot) -> np.ndarray:
    R = quat_to_rotmat(rot)
    idx = smallest_axis_index(log_scale)
    if R.ndim == 2:
        return R[:, idx]
    return R[np.arange(len(R)), :, idx]


@dataclass(frozen=True)
class Gaussian3D:
    mu: np.ndarray
    log_scale: np.ndarray
    rot: np.ndarray
    opacity_logit: float
    color: np.ndarray

    def __post_init__(self):
        for name in ("mu", "log_scale", "rot", "color"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=np.float64))
        rot = self.rot / np.linalg.norm(self.rot)
        object.__setattr__(self, "rot", rot)
        object.__setattr__(self, "opacity_logit", float(self.opacity_logit))

    @property
    def covariance(self) -> np.ndarray:
        return covariance_from_params(self.log_scale, self.rot)


def opacity(g: Gaussian3D) -> float:
    return float(sigmoid(g.opacity_logit))


def smallest_axis_direction(g: Gaussian3D) -> np.ndarray:
    """Unit rotation column belonging to the smallest scale (first index on ties)."""
    return smallest_axis_direction_params(g.log_scale, g.rot)


@dataclass
class GaussianScene:
    """Mutable set of Gaussians stored column-wise.

    ``grad_sum`` and ``grad_count`` accumulate the screen-space positional
    gradient norm per Gaussian; their mean is the densification signal.
    """

    mu: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    log_scale: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    rot: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    opacity_logit: np.ndarray = field(default_factory=lambda: np.zeros(0))
    color: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    grad_sum: Optional[np.ndarray] = None
    grad_count: Optional[np.ndarray] = None

    def __post_init__(self):
        self.mu = np.array(self.mu, dtype=np.float64).reshape(-1, 3)
        n = len(self.mu)
        self.log_scale = np.array(self.log_scale, dtype=np.float64).reshape(n, 3)
        self.rot = np.array(self.rot, dtype=np.float64).reshape(n, 4)
        self.opacity_logit = np.array(self.opacity_logit, dtype=np.float64).reshape(n)
        self.color = np.array(self.color, dtype=np.float64).reshape(n, 3)
        self.grad_sum = np.zeros(n) if self.grad_sum is None else np.array(self.grad_sum, dtype=np.float64)
        self.grad_count = (np.zeros(n, dtype=np.int64) if self.grad_count is None
                           else np.array(self.grad_count, dtype=np.int64))
        self.normalize_rotations()

    @classmethod
    def from_gaussians(cls, gaussians) -> "GaussianScene":
        gaussians = list(gaussians)
        if not gaussians:
            return cls()
        return cls(
            mu=np.stack([g.mu for g in gaussians]),
            log_scale=np.stack([g.log_scale for g in gaussians]),
            rot=np.stack([g.rot for g in gaussians]),
            opacity_logit=np.array([g.opacity_logit for g in gaussians]),
            color=np.stack([g.color for g in gaussians]),
        )

    def __len__(self) -> int:
        return len(self.mu)

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.mu[i], self.log_scale[i], self.rot[i], self.opacity_logit[i], self.color[i])

    @property
    def gaussians(self) -> list[Gaussian3D]:
        return [self[i] for i in range(len(self))]

    def copy(self) -> "GaussianScene":
        return dataclasses.replace(self, **{f.name: np.copy(getattr(self, f.name))
                                            for f in dataclasses.fields(self)})

    def normalize_rotations(self) -> None:
        norms = np.linalg.norm(self.rot, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ParameterError("zero-length rotation quaternion")
        # rows already unit to rounding are left alone so repeated calls are bit-stable
        off = np.abs(norms[:, 0] - 1.0) > 4 * np.finfo(np.float64).eps
        if np.any(off):
            self.rot = self.rot.copy()
            self.rot[off] /= norms[off]

    def covariances(self) -> np.ndarray:
        return covariance_from_params(self.log_scale, self.rot)

    def opacities(self) -> np.ndarray:
        return np.atleast_1d(sigmoid(self.opacity_logit))

    def mean_grad(self) -> np.ndarray:
        """Mean accumulated screen-space gradient norm (0 where never observed)."""
        return np.divide(self.grad_sum, self.grad_count,
                         out=np.zeros(len(self)), where=self.grad_count > 0)

    def reset_grad_accum(self, idx=None) -> None:
        if idx is None:
            self.grad_sum[:] = 0.0
            self.grad_count[:] = 0
        else:
            self.grad_sum[idx] = 0.0
            self.grad_count[idx] = 0

    def select(self, idx) -> "GaussianScene":
        """New scene holding the Gaussians at ``idx`` (index array or boolean mask)."""
        return GaussianScene(self.mu[idx], self.log_scale[idx], self.rot[idx],
                             self.opacity_logit[idx], self.color[idx],
                             self.grad_sum[idx], self.grad_count[idx])

    def extend(self, other: "GaussianScene") -> None:
        for name in ("mu", "log_scale", "rot", "opacity_logit", "color", "grad_sum", "grad_count"):
            setattr(self, name, np.concatenate([getattr(self, name), getattr(other, name)]))

    def validate(self) -> None:
        n = len(self)
        for name in ("log_scale", "rot", "opacity_logit", "color", "grad_sum", "grad_count"):
            if len(getattr(self, name)) != n:
                raise ParameterError(f"{name} has length {len(getattr(self, name))}, expected {n}")
        for name in ("mu", "log_scale", "rot", "opacity_logit", "color"):
            arr = getattr(self, name)
            bad = ~np.all(np.isfinite(arr.reshape(n, -1)), axis=1)
            if np.any(bad):
                raise ParameterError(f"non-finite {name} at Gaussian {int(np.flatnonzero(bad)[0])}")
        if not np.all(np.isfinite(np.exp(self.log_scale))):
            raise ParameterError("scale overflows")
        if n and np.max(np.abs(np.linalg.norm(self.rot, axis=1) - 1)) > 1e-6:
            raise ParameterError("rotation quaternions are not unit length")


@dataclass
class Camera:
    """Pinhole camera; ``world_to_cam`` maps world points into a +z-forward frame."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: np.ndarray
    near_clip: float = 0.01

    def __post_init__(self):
        self.world_to_cam = np.array(self.world_to_cam, dtype=np.float64).reshape(4, 4)
        self.width, self.height = int(self.width), int(self.height)
        if not (self.fx > 0 and self.fy > 0):
            raise ParameterError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ParameterError("image size must be positive")
        R = self.world_to_cam[:3, :3]
        err = np.max(np.abs(R @ R.T - np.eye(3)))
        if not np.isfinite(err) or err > 1e-6 or np.linalg.det(R) < 0:
            raise ParameterError(f"world_to_cam rotation block is not orthonormal: {R.tolist()}")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, fx, fy=None, width, height,
                cx=None, cy=None, near_clip=0.01) -> "Camera":
        """Camera at ``eye`` looking at ``target`` (x right, y down, z forward)."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        if abs(np.dot(up, forward)) > 0.999:
            up = np.array([0.0, 1.0, 0.0]) if abs(forward[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        M = np.eye(4)
        M[:3, :3] = R
        M[:3, 3] = -R @ eye
        fy = fx if fy is None else fy
        cx = (width - 1) / 2 if cx is None else cx
        cy = (height - 1) / 2 if cy is None else cy
        return cls(fx, fy, cx, cy, width, height, M, near_clip)


@dataclass
class SparsePointCloud:
    points: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ParameterError("point cloud contains non-finite coordinates")
        if self.colors is not None:
            self.colors = np.array(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ParameterError("colors and points differ in length")

    def __len__(self) -> int:
        return len(self.points)


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals (unnormalized cross products are area-weighted)."""
    v0, v1, v2 = (vertices[triangles[:, k]] for k in range(3))
    fn = np.cross(v1 - v0, v2 - v0)
    normals = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(normals, triangles[:, k], fn)
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ParameterError("vertex with zero accumulated normal (isolated or degenerate)")
    return normals / norms


@dataclass
class TriangleMesh:
    """Indexed triangle mesh with unit vertex normals.

    Zero-area triangles are dropped on construction; missing normals are
    computed by area-weighted averaging.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(self.vertices)):
            raise ParameterError("mesh has non-finite vertices")
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ParameterError("triangle index out of range")
        if len(self.triangles):
            v0, v1, v2 = (self.vertices[self.triangles[:, k]] for k in range(3))
            area2 = np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
            self.triangles = self.triangles[area2 > 1e-14]
        if self.normals is None:
            self.normals = vertex_normals(self.vertices, self.triangles)
        else:
            self.normals = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
            norms = np.linalg.norm(self.normals, axis=1, keepdims=True)
            if np.any(norms == 0) or not np.all(np.isfinite(norms)):
                raise ParameterError("mesh normals must be nonzero and finite")
            self.normals = self.normals / norms

    @property
    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))
