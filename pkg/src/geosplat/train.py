"""Three-phase scene fitting.

1. photometric only, until ``reg_start``;
2. from ``reg_start``, a surface-alignment step every ``reg_every`` iterations;
3. from ``adc_start``, a density-control step every ``reg_every``
   iterations, and the objective gains the signed dispersion term over the
   densest regions.

Every iteration appends one record to :class:`TrainLog`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .density import (AdcConfig, RegionGrid, adc_loss, build_region_grid, region_recon_losses, run_adc_step,
                      top20_dispersion_loss, top_bottom_sectors, top_members)
from .metrics import photometric_loss_and_grad, photometric_loss_map, psnr
from .raster import render, render_backward
from .scene import Camera, GaussianScene, TriangleMesh
from .surface import MeshQuery, SurfaceOptConfig, surface_step

log = logging.getLogger(__name__)

PARAM_GROUPS = ("mu", "log_scale", "rot", "opacity_logit", "color")


@dataclass
class TrainSchedule:
    total_iters: int = 30000
    reg_start_frac: float = 5000 / 30000
    adc_start_frac: float = 10000 / 30000
    reg_every: int = 100
    lambda_ssim: float = 0.2
    lr_mu: float = 1.6e-4  # times scene extent
    lr_mu_final: float = 1.6e-6
    lr_log_scale: float = 5e-3
    lr_rot: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    probe_every: int = 100
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.total_iters < 0 or self.reg_every < 1:
            raise ValueError("total_iters must be >= 0 and reg_every >= 1")
        if self.total_iters and not 0 < self.reg_start <= self.adc_start < self.total_iters:
            raise ValueError(f"need 0 < reg_start ({self.reg_start}) <= adc_start ({self.adc_start}) "
                             f"< total_iters ({self.total_iters})")

    @property
    def reg_start(self) -> int:
        return int(round(self.reg_start_frac * self.total_iters))

    @property
    def adc_start(self) -> int:
        return int(round(self.adc_start_frac * self.total_iters))

    def phase(self, it: int) -> int:
        return 3 if it >= self.adc_start else 2 if it >= self.reg_start else 1

    def lr(self, group: str, it: int, extent: float) -> float:
        if group == "mu":
            t = it / max(self.total_iters, 1)
            return extent * self.lr_mu * (self.lr_mu_final / self.lr_mu) ** t
        return {"log_scale": self.lr_log_scale, "rot": self.lr_rot,
                "opacity_logit": self.lr_opacity, "color": self.lr_color}[group]


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    message: str = ""

    def append(self, rec: dict) -> None:
        self.records.append(rec)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "TrainLog":
        return cls([json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()])


class SceneAdam:
    """Adam over the parameter columns of a :class:`GaussianScene`."""

    def __init__(self, scene: GaussianScene, beta1=0.9, beta2=0.999, eps=1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {g: np.zeros_like(getattr(scene, g)) for g in PARAM_GROUPS}
        self.v = {g: np.zeros_like(getattr(scene, g)) for g in PARAM_GROUPS}
        self.t = 0

    def step(self, scene: GaussianScene, grads: dict, lrs: dict) -> None:
        self.t += 1
        c1, c2 = 1.0 - self.beta1**self.t, 1.0 - self.beta2**self.t
        for g in PARAM_GROUPS:
            m, v = self.m[g], self.v[g]
            m *= self.beta1
            m += (1.0 - self.beta1) * grads[g]
            v *= self.beta2
            v += (1.0 - self.beta2) * grads[g] ** 2
            setattr(scene, g, getattr(scene, g) - lrs[g] * (m / c1) / (np.sqrt(v / c2) + self.eps))

    def remap(self, source_index: np.ndarray, n_kept: int) -> None:
        """Follow a prune/clone step; clones start from zero moments."""
        for state in (self.m, self.v):
            for g in PARAM_GROUPS:
                new = state[g][source_index]
                new[n_kept:] = 0.0
                state[g] = new


def scene_extent(cams: Sequence[Camera]) -> float:
    centers = np.stack([c.center for c in cams])
    return float(1.1 * np.max(np.linalg.norm(centers - centers.mean(0), axis=1))) or 1.0


def fit(scene0: GaussianScene, views: Sequence, mesh: Optional[TriangleMesh] = None,
        schedule: Optional[TrainSchedule] = None, adc_cfg: Optional[AdcConfig] = None,
        surf_cfg: Optional[SurfaceOptConfig] = None, probe=None, background=None,
        stop_after: Optional[int] = None):
    """Optimize ``scene0`` against ``views`` (a list of ``(Camera, image)`` pairs).

    ``adc_cfg=None`` disables density control and the dispersion term; the
    surface steps need both ``mesh`` and ``surf_cfg`` (a default config is
    used when only the mesh is given). ``probe`` is an optional held-out
    ``(Camera, image)`` whose PSNR is logged every ``probe_every``
    iterations. ``stop_after`` ends the run early while keeping the full
    schedule's phase boundaries and learning-rate decay. Returns the fitted
    scene and its :class:`TrainLog`.
    """
    sched = schedule or TrainSchedule()
    if not views:
        raise ValueError("fit needs at least one view")
    scene = scene0.copy()
    tlog = TrainLog()
    if sched.total_iters == 0:
        return scene, tlog
    if mesh is not None and surf_cfg is None:
        surf_cfg = SurfaceOptConfig()
    query = MeshQuery(mesh) if mesh is not None else None
    cams = [c for c, _ in views]
    extent = scene_extent(cams) if len(cams) > 1 else 1.0
    probe = probe or views[0]
    rng = np.random.default_rng(sched.seed)
    opt = SceneAdam(scene)
    grid: Optional[RegionGrid] = None
    origin = scene.mu.min(axis=0) if len(scene) else np.zeros(3)
    top_idx = np.zeros(0, dtype=np.int64)
    warned_mesh = False
    last_good = scene.copy()
    order: list = []

    n_iters = sched.total_iters if stop_after is None else min(stop_after, sched.total_iters)
    for it in range(n_iters):
        phase = sched.phase(it)
        rec = {"iter": it, "phase": phase}
        if not order:
            order = list(rng.permutation(len(views)))
        cam, target = views[order.pop()]

        out = render(scene, cam, background, sched.threads)
        loss, dimg = photometric_loss_and_grad(out.image, target, sched.lambda_ssim)
        rec["photometric"] = loss
        grads = render_backward(scene, cam, dimg, out, threads=sched.threads).as_dict()
        if phase == 3 and adc_cfg is not None:
            l_top, g_top = top20_dispersion_loss(scene.mu, top_idx)
            if grid is not None and len(grid.region_of) == len(scene):
                regions = region_recon_losses(photometric_loss_map(out.image, target, sched.lambda_ssim),
                                              out.front_index, grid)
            else:
                regions = [loss]
            loss = adc_loss(regions, adc_cfg, l_top)
            rec["top20"] = l_top
            grads["mu"] = grads["mu"] + adc_cfg.lambda_top20 * g_top
        rec["loss"] = loss
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            tlog.message = f"non-finite loss at iteration {it}; returned last good scene"
            log.warning(tlog.message)
            rec["halted"] = True
            tlog.append(rec)
            return last_good, tlog
        last_good = scene.copy()

        opt.step(scene, grads, {g: sched.lr(g, it, extent) for g in PARAM_GROUPS})
        np.clip(scene.color, 0.0, 1.0, out=scene.color)
        scene.normalize_rotations()

        if phase >= 2 and it % sched.reg_every == 0:
            if query is None:
                if not warned_mesh:
                    log.warning("no mesh given; skipping surface-alignment steps")
                    warned_mesh = True
                rec["composite_skipped"] = True
            else:
                total, comps = surface_step(scene, query, surf_cfg)
                rec["composite"] = {"total": total, **comps}

        if phase == 3 and adc_cfg is not None and it % sched.reg_every == 0:
            n_before = len(scene)
            scene, _, report = run_adc_step(scene, grid if grid is not None else _origin_grid(origin, adc_cfg),
                                            cams, adc_cfg, rng.integers(2**63))
            opt.remap(report.source_index, n_before - report.pruned)
            grid = build_region_grid(scene, adc_cfg, origin)
            if len(grid):
                top, _, _ = top_bottom_sectors(grid, adc_cfg)
                top_idx = top_members(grid, top)
            else:
                top_idx = np.zeros(0, dtype=np.int64)
            rec["adc"] = {**report.as_dict(), "region_classes": [report.uniform_regions, report.nonuniform_regions]}
            scene.reset_grad_accum()

        if sched.probe_every and (it % sched.probe_every == 0 or it == n_iters - 1):
            rec["probe_psnr"] = psnr(render(scene, probe[0], background, sched.threads).image, probe[1])
        rec["n_gaussians"] = len(scene)
        tlog.append(rec)
    return scene, tlog


def _origin_grid(origin, cfg: AdcConfig) -> RegionGrid:
    empty = np.zeros(0, dtype=np.int64)
    return RegionGrid(np.asarray(origin), cfg.region_cell, np.zeros((0, 3), dtype=np.int64), empty, [],
                      empty, np.zeros(0), np.zeros(0, dtype=bool))


def evaluate(scene: GaussianScene, views: Sequence, background=None) -> list[dict]:
    from .metrics import ssim

    rows = []
    for cam, target in views:
        img = render(scene, cam, background).image
        rows.append({"psnr": psnr(img, target), "ssim": ssim(img, target)})
    return rows
