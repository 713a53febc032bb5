"""
Region grid and one density-control step
========================================

Clusters some Gaussians into one corner of a region, fakes accumulated
screen-space gradients, and runs a prune + clone step.
"""

import numpy as np

from geosplat import Camera, GaussianScene
from geosplat.density import AdcConfig, build_region_grid, run_adc_step, top_bottom_sectors, top20_dispersion_loss

rng = np.random.default_rng(1)

# 40 spread-out Gaussians plus 20 packed into one sub-cell
spread = rng.uniform(0, 2, (40, 3))
packed = rng.uniform(0, 0.2, (20, 3))
mu = np.vstack([spread, packed])
n = len(mu)
opacity = np.where(rng.uniform(size=n) < 0.1, -6.0, 2.0)  # a few nearly transparent ones
scene = GaussianScene(mu, np.full((n, 3), -3.0), np.tile([1.0, 0, 0, 0], (n, 1)), opacity, rng.uniform(size=(n, 3)))
scene.grad_sum = rng.exponential(4e-4, n)
scene.grad_count = np.ones(n, dtype=np.int64)

cfg = AdcConfig(region_cell=1.0, delta_u=2.0, delta_dist=10.0)
grid = build_region_grid(scene, cfg)
print("regions:", len(grid), "counts:", grid.counts.tolist())
print("sub-cell variance:", np.round(grid.variance, 2).tolist())
print("non-uniform regions:", np.flatnonzero(grid.nonuniform).tolist())

top, bottom, ratio = top_bottom_sectors(grid, cfg)
print("densest regions", top.tolist(), "sparsest", bottom.tolist(), "count ratio", ratio)

cam = Camera.look_at([1.0, -3.0, 1.0], [1.0, 1.0, 1.0], fx=50, width=48, height=48)
new_scene, _, report = run_adc_step(scene, None, [cam], cfg, rng_seed=0)
print(report.as_dict())
assert len(new_scene) == n - report.pruned + report.cloned

# the dispersion term over the densest regions, and what its sign does
pts = packed[:10]
loss, grad = top20_dispersion_loss(pts)
for lam in (-0.01, 0.01):
    moved = pts - 0.5 * lam * grad
    print(f"lambda {lam:+}: dispersion {loss:.4f} -> {top20_dispersion_loss(moved)[0]:.4f}")
