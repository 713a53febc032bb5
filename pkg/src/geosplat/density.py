"""Adaptive density control: global prune/clone rules and region-aware cloning.

The scene is partitioned into a fixed axis-aligned grid of cubic regions.
Each region's non-uniformity is the variance of the Gaussian counts in its
eight half-size sub-cells. Non-uniform regions get one jittered clone per
high-gradient member; uniform regions are left to the dispersion loss
computed over the densest ``top_fraction`` of occupied regions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .scene import Camera, GaussianScene


@dataclass
class AdcConfig:
    delta_alpha: float = 0.005
    delta_dist: float = 0.2
    delta_g: float = 2e-4
    delta_s: float = 0.01
    delta_u: float = 1.0
    lambda_top20: float = -0.01
    region_cell: float = 0.5
    clone_perturb_sigma: float = 0.01
    top_fraction: float = 0.2

    def __post_init__(self):
        for name in ("delta_alpha", "delta_dist", "delta_g", "delta_s", "delta_u", "region_cell"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.clone_perturb_sigma < 0:
            raise ValueError("clone_perturb_sigma must be non-negative")
        if not 0 < self.top_fraction <= 0.5:
            raise ValueError("top_fraction must lie in (0, 0.5]")


def prune_mask(scene: GaussianScene, cam: Camera, cfg: AdcConfig) -> np.ndarray:
    """True for Gaussians that are both nearly transparent and close to ``cam``."""
    dist = np.linalg.norm(scene.mu - cam.center, axis=1)
    return (scene.opacities() < cfg.delta_alpha) & (dist < cfg.delta_dist)


def _require_grads(scene: GaussianScene) -> None:
    if len(scene) and not np.any(scene.grad_count > 0):
        raise ValueError("no accumulated gradients; render and backpropagate before density control")


def clone_candidates(scene: GaussianScene, cfg: AdcConfig) -> np.ndarray:
    """Indices with mean screen gradient above ``delta_g`` and largest scale above ``delta_s``."""
    _require_grads(scene)
    size = np.exp(scene.log_scale).max(axis=1)
    return np.flatnonzero((scene.mean_grad() > cfg.delta_g) & (size > cfg.delta_s))


@dataclass
class RegionGrid:
    origin: np.ndarray
    cell: float
    keys: np.ndarray  # (K, 3) integer cell coordinates of occupied regions
    region_of: np.ndarray  # (N,) region row for every Gaussian
    members: list
    counts: np.ndarray
    variance: np.ndarray
    nonuniform: np.ndarray
    high_grad: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.keys)


def region_cells(mu: np.ndarray, origin: np.ndarray, cell: float) -> np.ndarray:
    return np.floor((mu - origin) / cell).astype(np.int64)


def build_region_grid(scene: GaussianScene, cfg: AdcConfig, origin=None) -> RegionGrid:
    """Partition ``scene`` into occupied cubic regions and classify each.

    ``origin`` defaults to the minimum corner of the centers; pass the
    origin of an earlier grid to keep regions fixed across rebuilds.
    """
    mu = scene.mu
    if origin is None:
        origin = mu.min(axis=0) if len(mu) else np.zeros(3)
    origin = np.asarray(origin, dtype=np.float64)
    cells = region_cells(mu, origin, cfg.region_cell)
    if len(mu):
        keys, region_of = np.unique(cells, axis=0, return_inverse=True)
        region_of = region_of.ravel()
    else:
        keys, region_of = np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64)
    K = len(keys)
    order = np.argsort(region_of, kind="stable")
    counts = np.bincount(region_of, minlength=K)
    members = np.split(order, np.cumsum(counts)[:-1]) if K else []
    # each in {0, 1}; the clip guards points that round across a cell face
    sub = np.clip(region_cells(mu, origin, cfg.region_cell / 2.0) - 2 * cells, 0, 1)
    sub_id = sub[:, 0] * 4 + sub[:, 1] * 2 + sub[:, 2]
    sub_counts = np.zeros((K, 8))
    np.add.at(sub_counts, (region_of, sub_id), 1.0)
    variance = sub_counts.var(axis=1)
    grid = RegionGrid(origin, float(cfg.region_cell), keys, region_of, members, counts, variance,
                      variance > cfg.delta_u)
    grid.high_grad = high_gradient_set(grid, scene, cfg)
    return grid


def high_gradient_set(grid: RegionGrid, scene: GaussianScene, cfg: AdcConfig) -> list:
    """Per region, the members whose mean screen gradient exceeds ``delta_g``."""
    g = scene.mean_grad()
    return [m[g[m] > cfg.delta_g] for m in grid.members]


def clone_in_regions(scene: GaussianScene, grid: RegionGrid, cfg: AdcConfig, rng_seed=None):
    """Clone every high-gradient member of every non-uniform region once.

    Returns the grown scene and, for each appended clone, the index of its
    parent. Both parent and clone restart gradient accumulation.
    """
    rng = np.random.default_rng(rng_seed)
    parents = [grid.high_grad[k] for k in range(len(grid)) if grid.nonuniform[k]]
    parents = np.concatenate(parents).astype(np.int64) if parents else np.zeros(0, dtype=np.int64)
    out = scene.copy()
    if parents.size == 0:
        return out, parents
    clones = scene.select(parents)
    clones.mu = clones.mu + rng.normal(0.0, cfg.clone_perturb_sigma, size=clones.mu.shape)
    out.reset_grad_accum(parents)
    clones.reset_grad_accum()
    out.extend(clones)
    return out, parents


def top_bottom_sectors(grid: RegionGrid, cfg: AdcConfig):
    """Densest and sparsest ``ceil(top_fraction * K)`` occupied regions and their count ratio.

    Ties in count are broken by region order. Regions already in the top
    set are excluded from the bottom set; with a single region both sets
    are that region.
    """
    K = len(grid)
    if K == 0:
        raise ValueError("no occupied regions")
    m = math.ceil(cfg.top_fraction * K)
    idx = np.arange(K)
    desc = np.lexsort((idx, -grid.counts))
    top = desc[:m]
    asc = np.lexsort((idx, grid.counts))
    bottom = np.array([k for k in asc if k not in set(top.tolist())][:m], dtype=np.int64)
    if bottom.size == 0:
        bottom = top.copy()
    ratio = float(grid.counts[top].mean() / grid.counts[bottom].mean())
    return top, bottom, ratio


def top_members(grid: RegionGrid, top_regions) -> np.ndarray:
    parts = [grid.members[k] for k in top_regions]
    return np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)


def top20_dispersion_loss(points, members=None):
    """Pairwise spread ``(1/n) sum_{i<j} ||x_i - x_j||^2`` of the selected centers.

    Uses the identity ``sum_{i<j} ||x_i - x_j||^2 = n sum_i ||x_i - mean||^2``.
    Returns the loss and its gradient w.r.t. every row of ``points``
    (zero outside ``members``).
    """
    pts = np.asarray(points, dtype=np.float64)
    members = np.arange(len(pts)) if members is None else np.asarray(members, dtype=np.int64)
    grad = np.zeros_like(pts)
    if members.size < 2:
        return 0.0, grad
    x = pts[members]
    c = x - x.mean(axis=0)
    grad[members] = 2.0 * c
    return float(np.sum(c * c)), grad


def adc_loss(recon_loss_per_region: Sequence[float], cfg: AdcConfig, top20_loss: float = 0.0) -> float:
    return float(np.sum(recon_loss_per_region)) + cfg.lambda_top20 * top20_loss


def region_recon_losses(loss_map: np.ndarray, front_index: np.ndarray, grid: RegionGrid) -> np.ndarray:
    """Split a per-pixel loss map over regions by each pixel's front-most contributor.

    The returned vector has ``len(grid) + 1`` entries; the last collects
    pixels no Gaussian contributes to. It sums to ``loss_map.sum()``.
    """
    K = len(grid)
    region = np.full(front_index.shape, K, dtype=np.int64)
    hit = front_index >= 0
    region[hit] = grid.region_of[front_index[hit]]
    return np.bincount(region.ravel(), weights=loss_map.ravel(), minlength=K + 1)


@dataclass
class AdcReport:
    pruned: int
    cloned: int
    uniform_regions: int
    nonuniform_regions: int
    density_ratio: float
    size_before: int
    size_after: int
    source_index: np.ndarray  # new Gaussian -> index in the scene before the step

    def as_dict(self) -> dict:
        return {"pruned": self.pruned, "cloned": self.cloned, "uniform": self.uniform_regions,
                "nonuniform": self.nonuniform_regions, "density_ratio": self.density_ratio,
                "size_before": self.size_before, "size_after": self.size_after}


def run_adc_step(scene: GaussianScene, grid: Optional[RegionGrid], cams: Sequence[Camera], cfg: AdcConfig,
                 rng_seed=None):
    """Prune (a Gaussian goes if any camera flags it), rebuild the grid, clone.

    ``grid`` only supplies the fixed region origin; pass ``None`` to derive
    one from the scene. Returns the new scene, the rebuilt grid and a report.
    """
    n0 = len(scene)
    mask = np.zeros(n0, dtype=bool)
    for cam in cams:
        mask |= prune_mask(scene, cam, cfg)
    kept = np.flatnonzero(~mask)
    pruned = scene.select(kept)
    origin = None if grid is None else grid.origin
    new_grid = build_region_grid(pruned, cfg, origin)
    grown, parents = clone_in_regions(pruned, new_grid, cfg, rng_seed)
    if len(new_grid):
        _, _, ratio = top_bottom_sectors(new_grid, cfg)
    else:
        ratio = float("nan")
    report = AdcReport(int(mask.sum()), int(parents.size), int((~new_grid.nonuniform).sum()),
                       int(new_grid.nonuniform.sum()), ratio, n0, len(grown),
                       np.concatenate([kept, kept[parents]]))
    return grown, new_grid, report
