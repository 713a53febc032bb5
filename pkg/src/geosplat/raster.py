"""Tile-based CPU rasterizer for 3D Gaussians with an analytic backward pass.

Rendering model, shared by :func:`render` and :func:`render_oracle`:

* each Gaussian is projected with the first-order (EWA) approximation
  ``cov2d = J W Sigma W^T J^T + 0.3 I``;
* its footprint ``G(p) = exp(-0.5 d^T cov2d^-1 d)`` has peak 1;
* splats are composited front to back in a stable global depth order,
  ``a_i = alpha_i G_i(p)``, ``w_i = a_i prod_{j<i} (1 - a_j)``;
* a splat only contributes while the transmittance in front of it is at
  least :data:`T_MIN`.

Pixel centers sit at integer coordinates ``(col, row)``. The tiled path
only visits splats whose footprint exceeds :data:`SUPPORT_EPS` somewhere
inside the tile, so it agrees with the oracle to far below 1e-6.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .scene import Camera, GaussianScene, covariance_from_params, quat_to_rotmat, rotmat_grad_to_quat, sigmoid

TILE = 16
T_MIN = 1e-4
DILATION = 0.3
SUPPORT_EPS = 1e-12
# Mahalanobis radius where the footprint drops below SUPPORT_EPS
SUPPORT_SIGMAS = float(np.sqrt(-2.0 * np.log(SUPPORT_EPS)))
# footprint values below this do not count as "contributing" for attribution
CONTRIB_MIN = 1.0 / 255.0


class RenderError(ValueError):
    pass


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray
    source_index: int


@dataclass
class Projection:
    """Batched projection of a whole scene; culled rows are flagged in ``visible``."""

    visible: np.ndarray
    t_cam: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray  # (N, 3): A, B, C of the inverse covariance
    J: np.ndarray
    sigma3d: np.ndarray
    radius: np.ndarray  # support radius in pixels
    alpha: np.ndarray
    order: np.ndarray  # visible indices sorted by (depth, index)

    def splat(self, i: int, scene: GaussianScene) -> Splat2D:
        return Splat2D(self.mean2d[i], self.cov2d[i], float(self.t_cam[i, 2]), float(self.alpha[i]),
                       scene.color[i].copy(), int(i))


@dataclass
class TileBatch:
    """All tiles of one frame, padded to a common splat count.

    Row ``t`` holds tile ``t`` in raster order; ``idx`` is -1 past the end
    of a tile's depth-sorted splat list and ``pix_ok`` is false for pixels
    of partial edge tiles that fall outside the image.
    """

    bounds: np.ndarray  # (NT, 4): x0, y0, x1, y1
    idx: np.ndarray  # (NT, n)
    px: np.ndarray  # (NT, P)
    py: np.ndarray
    pix_ok: np.ndarray
    G: np.ndarray  # (NT, n, P) footprint values
    dx: np.ndarray
    dy: np.ndarray
    a: np.ndarray  # gated alpha
    T: np.ndarray  # transmittance in front of each splat


@dataclass
class RenderOutput:
    image: np.ndarray
    transmittance: np.ndarray
    front_index: np.ndarray
    background: np.ndarray
    projection: Projection
    tiles: Optional[TileBatch] = None


def _check_finite(scene: GaussianScene) -> None:
    n = len(scene)
    if n == 0:
        return
    stacked = np.concatenate([scene.mu, scene.log_scale, scene.rot, scene.opacity_logit[:, None], scene.color], axis=1)
    bad = ~np.all(np.isfinite(stacked), axis=1)
    bad |= ~np.all(np.isfinite(np.exp(scene.log_scale)), axis=1)
    if np.any(bad):
        raise RenderError(f"non-finite parameter in splat {int(np.flatnonzero(bad)[0])}")


def project_scene(scene: GaussianScene, cam: Camera) -> Projection:
    _check_finite(scene)
    n = len(scene)
    W = cam.rotation
    t = scene.mu @ W.T + cam.translation
    z = t[:, 2]
    in_front = z > cam.near_clip
    zs = np.where(in_front, z, 1.0)
    x, y = t[:, 0], t[:, 1]
    mean2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x / zs**2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * y / zs**2
    sigma3d = covariance_from_params(scene.log_scale, scene.rot) if n else np.zeros((0, 3, 3))
    TW = J @ W
    cov2d = TW @ sigma3d @ np.swapaxes(TW, 1, 2) + DILATION * np.eye(2)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    lam_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    sd = np.sqrt(lam_max)
    r3 = 3.0 * sd
    on_frame = ((mean2d[:, 0] + r3 >= -0.5) & (mean2d[:, 0] - r3 <= cam.width - 0.5)
                & (mean2d[:, 1] + r3 >= -0.5) & (mean2d[:, 1] - r3 <= cam.height - 0.5))
    visible = in_front & on_frame
    vis_idx = np.flatnonzero(visible)
    order = vis_idx[np.lexsort((vis_idx, z[vis_idx]))]
    return Projection(visible, t, mean2d, cov2d, conic, J, sigma3d, SUPPORT_SIGMAS * sd,
                      np.atleast_1d(sigmoid(scene.opacity_logit)), order)


def project_gaussian(g, cam: Camera) -> Optional[Splat2D]:
    """Project one Gaussian; ``None`` means it was culled."""
    scene = GaussianScene.from_gaussians([g])
    proj = project_scene(scene, cam)
    if not proj.visible[0]:
        return None
    return proj.splat(0, scene)


def _tile_bounds(cam: Camera) -> np.ndarray:
    return np.array([(x0, y0, min(x0 + TILE, cam.width), min(y0 + TILE, cam.height))
                     for y0 in range(0, cam.height, TILE) for x0 in range(0, cam.width, TILE)],
                    dtype=np.int64).reshape(-1, 4)


def _assign_tiles(proj: Projection, bounds: np.ndarray) -> np.ndarray:
    """Depth-ordered splat lists per tile, padded with -1 to a common length."""
    order = proj.order
    m, r = proj.mean2d[order], proj.radius[order]
    x0, y0, x1, y1 = (bounds[:, k:k + 1] for k in range(4))
    hit = ((m[None, :, 0] + r >= x0) & (m[None, :, 0] - r <= x1 - 1)
           & (m[None, :, 1] + r >= y0) & (m[None, :, 1] - r <= y1 - 1))
    counts = hit.sum(axis=1)
    idx = np.full((len(bounds), int(counts.max(initial=0))), -1, dtype=np.int64)
    for t in range(len(bounds)):
        idx[t, :counts[t]] = order[hit[t]]
    return idx


def _tile_pixels(bounds: np.ndarray):
    off = np.arange(TILE * TILE)
    px = bounds[:, 0:1] + off % TILE
    py = bounds[:, 1:2] + off // TILE
    ok = (px < bounds[:, 2:3]) & (py < bounds[:, 3:4])
    return px.astype(np.float64), py.astype(np.float64), ok


def _composite(proj: Projection, colors, bg, bounds, idx, px, py, pix_ok):
    """Forward pass for a block of tiles; all arrays carry a leading tile axis."""
    safe = np.maximum(idx, 0)
    pad = idx < 0
    mx, my = proj.mean2d[safe, 0][..., None], proj.mean2d[safe, 1][..., None]
    A, B, C = (proj.conic[safe, k][..., None] for k in range(3))
    dx = px[:, None, :] - mx
    dy = py[:, None, :] - my
    G = np.exp(-0.5 * (A * dx * dx + 2.0 * B * dx * dy + C * dy * dy))
    G[pad] = 0.0
    a = proj.alpha[safe][..., None] * G
    NT, n, P = a.shape
    T = np.ones_like(a)
    if n > 1:
        np.cumprod(1.0 - a[:, :-1], axis=1, out=T[:, 1:])
    a = np.where(T >= T_MIN, a, 0.0)
    if n > 1:
        np.cumprod(1.0 - a[:, :-1], axis=1, out=T[:, 1:])
    T_final = T[:, -1] * (1.0 - a[:, -1]) if n else np.ones((NT, P))
    w = a * T
    cols = np.where(pad[..., None], 0.0, colors[safe])
    img = (w[..., None] * cols[:, :, None, :]).sum(axis=1) + T_final[..., None] * bg
    contrib = a >= CONTRIB_MIN
    if n:
        first = np.argmax(contrib, axis=1)
        front = np.where(contrib.any(axis=1), np.take_along_axis(idx, first, axis=1), -1)
    else:
        front = np.full((NT, P), -1, dtype=np.int64)
    return G, dx, dy, a, T, img, T_final, front


def _chunks(n: int, threads: int) -> list:
    k = max(1, min(threads, n))
    edges = np.linspace(0, n, k + 1).astype(int)
    return [slice(edges[i], edges[i + 1]) for i in range(k)]


def _run(job, n: int, threads: int) -> list:
    parts = _chunks(n, threads)
    if len(parts) > 1:
        with ThreadPoolExecutor(len(parts)) as pool:
            return list(pool.map(job, parts))
    return [job(p) for p in parts]


def _scatter_image(values: np.ndarray, bounds, px, py, ok, shape) -> np.ndarray:
    out = np.empty(shape + values.shape[2:], dtype=values.dtype)
    out[py[ok].astype(np.int64), px[ok].astype(np.int64)] = values[ok]
    return out


def render(scene: GaussianScene, cam: Camera, background=None, threads: int = 1) -> RenderOutput:
    """Render ``scene`` tile by tile.

    Tiles are split into contiguous blocks, one per thread, and reassembled
    in tile order; per-pixel arithmetic does not depend on the blocking, so
    the output is identical for any thread count.
    """
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    proj = project_scene(scene, cam)
    bounds = _tile_bounds(cam)
    idx = _assign_tiles(proj, bounds)
    px, py, ok = _tile_pixels(bounds)
    job = lambda s: _composite(proj, scene.color, bg, bounds[s], idx[s], px[s], py[s], ok[s])  # noqa: E731
    parts = _run(job, len(bounds), threads)
    G, dx, dy, a, T, img, T_final, front = (np.concatenate(x, axis=0) for x in zip(*parts))
    shape = (cam.height, cam.width)
    batch = TileBatch(bounds, idx, px, py, ok, G, dx, dy, a, T)
    return RenderOutput(_scatter_image(img, bounds, px, py, ok, shape),
                        _scatter_image(T_final, bounds, px, py, ok, shape),
                        _scatter_image(front, bounds, px, py, ok, shape), bg, proj, batch)


def render_oracle(scene: GaussianScene, cam: Camera, background=None) -> RenderOutput:
    """Reference renderer: every visible splat against every pixel, no tiling.

    Walks the depth-sorted splats one at a time over the full image and
    never truncates footprints; the :data:`T_MIN` gate is applied per pixel.
    """
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    proj = project_scene(scene, cam)
    H, Wd = cam.height, cam.width
    py, px = np.mgrid[0:H, 0:Wd].astype(np.float64)
    color = np.zeros((H, Wd, 3))
    T = np.ones((H, Wd))
    front = np.full((H, Wd), -1, dtype=np.int64)
    for i in proj.order:
        dx = px - proj.mean2d[i, 0]
        dy = py - proj.mean2d[i, 1]
        A, B, C = proj.conic[i]
        g = np.exp(-0.5 * (A * dx * dx + 2.0 * B * dx * dy + C * dy * dy))
        a = np.where(T >= T_MIN, proj.alpha[i] * g, 0.0)
        color += (a * T)[..., None] * scene.color[i]
        front[(front < 0) & (a >= CONTRIB_MIN)] = i
        T = T * (1.0 - a)
    color += T[..., None] * bg
    return RenderOutput(color, T, front, bg, proj)


@dataclass
class Gradients:
    mu: np.ndarray
    log_scale: np.ndarray
    rot: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    mean2d_norm: np.ndarray

    def as_dict(self) -> dict:
        return {"mu": self.mu, "log_scale": self.log_scale, "rot": self.rot,
                "opacity_logit": self.opacity_logit, "color": self.color}


def _backward_tiles(proj: Projection, colors, bg, tb: TileBatch, dimg: np.ndarray, s: slice):
    idx, a, T, G, dx, dy = tb.idx[s], tb.a[s], tb.T[s], tb.G[s], tb.dx[s], tb.dy[s]
    NT, n, P = a.shape
    safe = np.maximum(idx, 0)
    pad = idx < 0
    ok = tb.pix_ok[s]
    dC = np.zeros((NT, P, 3))
    dC[ok] = dimg[tb.py[s][ok].astype(np.int64), tb.px[s][ok].astype(np.int64)]
    cols = np.where(pad[..., None], 0.0, colors[safe])
    w = a * T
    dcolor = (w[..., None] * dC[:, None]).sum(axis=2)
    # back-to-front sweep: R holds the color composited behind splat k
    R = np.broadcast_to(bg, dC.shape).copy()
    da = np.empty_like(a)
    for k in range(n - 1, -1, -1):
        ck = cols[:, k, None, :]
        ak = a[:, k, :, None]
        da[:, k] = T[:, k] * ((ck - R) * dC).sum(axis=2)
        R = ck * ak + (1.0 - ak) * R
    da = np.where(a > 0, da, 0.0)  # gated-off and padded slots receive nothing
    alpha = proj.alpha[safe]
    dalpha = (da * G).sum(axis=2)
    dpow = da * alpha[..., None] * G
    A, B, C = (proj.conic[safe, k][..., None] for k in range(3))
    dmean = np.stack([(dpow * (A * dx + B * dy)).sum(2), (dpow * (B * dx + C * dy)).sum(2)], axis=-1)
    dconic = np.stack([(-0.5 * dpow * dx * dx).sum(2), (-dpow * dx * dy).sum(2),
                       (-0.5 * dpow * dy * dy).sum(2)], axis=-1)
    return dcolor, dalpha, dmean, dconic


def render_backward(scene: GaussianScene, cam: Camera, dL_dimage, forward: Optional[RenderOutput] = None,
                    background=None, threads: int = 1, accumulate: bool = True) -> Gradients:
    """Gradients of a scalar loss w.r.t. every Gaussian parameter.

    ``dL_dimage`` is the loss gradient w.r.t. the rendered image. When
    ``accumulate`` is true, the norm of the screen-space mean gradient is
    added to ``scene.grad_sum`` and ``grad_count`` is bumped for every
    visible Gaussian.
    """
    dimg = np.asarray(dL_dimage, dtype=np.float64)
    if dimg.shape != (cam.height, cam.width, 3):
        raise ValueError(f"dL_dimage has shape {dimg.shape}, expected {(cam.height, cam.width, 3)}")
    if forward is None:
        forward = render(scene, cam, background, threads)
    proj = forward.projection
    tb = forward.tiles
    n = len(scene)
    job = lambda s: _backward_tiles(proj, scene.color, forward.background, tb, dimg, s)  # noqa: E731
    parts = _run(job, len(tb.bounds), threads)
    pc, pa, pm, pq = (np.concatenate(x, axis=0) for x in zip(*parts))
    # per-tile partials are added in tile order, independent of the thread split
    flat = tb.idx.ravel()
    keep = flat >= 0
    tgt = flat[keep]
    dcolor = np.zeros((n, 3))
    dalpha = np.zeros(n)
    dmean = np.zeros((n, 2))
    dconic = np.zeros((n, 3))
    np.add.at(dcolor, tgt, pc.reshape(-1, 3)[keep])
    np.add.at(dalpha, tgt, pa.ravel()[keep])
    np.add.at(dmean, tgt, pm.reshape(-1, 2)[keep])
    np.add.at(dconic, tgt, pq.reshape(-1, 3)[keep])

    vis = proj.visible
    # conic -> cov2d: dCov = -Q dQ Q, where B sits twice in the symmetric Q
    conic = proj.conic
    Q = np.empty((n, 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = conic[:, 0], conic[:, 1], conic[:, 1], conic[:, 2]
    dQ = np.empty((n, 2, 2))
    dQ[:, 0, 0], dQ[:, 1, 1] = dconic[:, 0], dconic[:, 2]
    dQ[:, 0, 1] = dQ[:, 1, 0] = 0.5 * dconic[:, 1]
    dcov = -Q @ dQ @ Q

    W = cam.rotation
    J = proj.J
    TW = J @ W
    Sig = proj.sigma3d
    dSigma = np.swapaxes(TW, 1, 2) @ dcov @ TW
    dTW = 2.0 * dcov @ TW @ Sig
    dJ = dTW @ W.T

    t = proj.t_cam
    z = np.where(vis, t[:, 2], 1.0)
    x, y = t[:, 0], t[:, 1]
    fx, fy = cam.fx, cam.fy
    dt = np.zeros((n, 3))
    dt[:, 0] = dmean[:, 0] * fx / z + dJ[:, 0, 2] * (-fx / z**2)
    dt[:, 1] = dmean[:, 1] * fy / z + dJ[:, 1, 2] * (-fy / z**2)
    dt[:, 2] = (-dmean[:, 0] * fx * x / z**2 - dmean[:, 1] * fy * y / z**2
                - dJ[:, 0, 0] * fx / z**2 + dJ[:, 0, 2] * 2 * fx * x / z**3
                - dJ[:, 1, 1] * fy / z**2 + dJ[:, 1, 2] * 2 * fy * y / z**3)
    dmu = dt @ W

    Rm = quat_to_rotmat(scene.rot) if n else np.zeros((0, 3, 3))
    s = np.exp(scene.log_scale)
    M = Rm * s[:, None, :]
    dM = 2.0 * dSigma @ M
    dR = dM * s[:, None, :]
    dls = np.einsum("nij,nij->nj", Rm, dM) * s
    drot = rotmat_grad_to_quat(scene.rot, dR) if n else np.zeros((0, 4))
    alpha = proj.alpha
    dlogit = dalpha * alpha * (1.0 - alpha)

    keep = vis[:, None]
    grads = Gradients(np.where(keep, dmu, 0.0), np.where(keep, dls, 0.0), np.where(keep, drot, 0.0),
                      np.where(vis, dlogit, 0.0), np.where(keep, dcolor, 0.0),
                      np.where(vis, np.linalg.norm(dmean, axis=1), 0.0))
    if accumulate:
        scene.grad_sum += grads.mean2d_norm
        scene.grad_count += vis.astype(np.int64)
    return grads
