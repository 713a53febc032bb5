import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geosplat.density import (AdcConfig, adc_loss, build_region_grid, clone_candidates, clone_in_regions,
                              high_gradient_set, prune_mask, region_recon_losses, run_adc_step, top20_dispersion_loss,
                              top_bottom_sectors, top_members)
from geosplat.scene import Camera, GaussianScene, logit

from scenes import central_difference, rel_error

CAM = Camera.look_at([0.0, -3.0, 0.0], np.zeros(3), fx=50, width=32, height=32)


def _scene(mu, alpha=0.5, log_scale=-2.0):
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    n = len(mu)
    return GaussianScene(mu, np.full((n, 3), log_scale), np.tile([1.0, 0, 0, 0], (n, 1)),
                         np.broadcast_to(logit(alpha), (n,)).astype(float), np.full((n, 3), 0.5))


def _with_grads(scene, grads):
    scene.grad_sum = np.asarray(grads, dtype=np.float64).copy()
    scene.grad_count = np.ones(len(scene), dtype=np.int64)
    return scene


def _random_scene(n, seed, spread=1.0):
    rng = np.random.default_rng(seed)
    s = GaussianScene(rng.uniform(-spread, spread, (n, 3)), rng.uniform(-5, -1, (n, 3)), rng.normal(size=(n, 4)),
                      rng.normal(0, 3, n), rng.uniform(size=(n, 3)))
    s.grad_sum = rng.exponential(2e-4, n) * 3
    s.grad_count = rng.integers(0, 4, n)
    s.grad_count[0] = 1
    return s


def test_prune_examples():
    cfg = AdcConfig(delta_alpha=0.1, delta_dist=1.0)
    near = _scene(CAM.center + [0.1, 0, 0], alpha=0.05)
    far = _scene(CAM.center + [5.0, 0, 0], alpha=0.05)
    assert prune_mask(near, CAM, cfg).tolist() == [True]
    assert prune_mask(far, CAM, cfg).tolist() == [False]


def test_prune_matches_elementwise_predicate():
    s = _random_scene(200, 0, spread=3.0)
    cfg = AdcConfig(delta_alpha=0.3, delta_dist=2.5)
    expected = [(1 / (1 + math.exp(-s.opacity_logit[i])) < 0.3) and
                (math.dist(s.mu[i], CAM.center) < 2.5) for i in range(len(s))]
    assert prune_mask(s, CAM, cfg).tolist() == expected


def test_clone_candidates():
    cfg = AdcConfig(delta_g=1e-3, delta_s=0.05)
    s = _with_grads(_scene([[0, 0, 0], [1, 1, 1]], log_scale=np.log(0.1)), [0.0, 0.0])
    assert clone_candidates(s, cfg).size == 0
    s = _with_grads(_scene([[0, 0, 0]], log_scale=np.log(0.1)), [2e-3])
    assert clone_candidates(s, cfg).tolist() == [0]
    with pytest.raises(ValueError, match="render"):
        clone_candidates(_scene([[0, 0, 0]]), cfg)


def test_clone_candidates_match_scan():
    s = _random_scene(300, 1)
    cfg = AdcConfig(delta_g=2e-4, delta_s=0.05)
    expected = [i for i in range(len(s)) if s.grad_count[i] > 0 and s.grad_sum[i] / s.grad_count[i] > 2e-4
                and max(math.exp(v) for v in s.log_scale[i]) > 0.05]
    assert clone_candidates(s, cfg).tolist() == expected


def _subcell_points(pattern, cell=1.0):
    """One point per listed sub-cell of the unit region at the origin."""
    pts = []
    for (i, j, k), count in pattern.items():
        pts += [[(i + 0.5) * cell / 2, (j + 0.5) * cell / 2, (k + 0.5) * cell / 2]] * count
    return np.array(pts)


def test_grid_variance_examples():
    cfg = AdcConfig(region_cell=1.0, delta_u=1.0)
    even = _subcell_points({(i, j, k): 1 for i in (0, 1) for j in (0, 1) for k in (0, 1)})
    g = build_region_grid(_with_grads(_scene(even), np.zeros(8)), cfg, origin=np.zeros(3))
    assert len(g) == 1 and g.variance[0] == 0.0 and not g.nonuniform[0]
    packed = _subcell_points({(0, 0, 0): 8})
    g = build_region_grid(_with_grads(_scene(packed), np.zeros(8)), cfg, origin=np.zeros(3))
    assert g.variance[0] == pytest.approx(np.var([8, 0, 0, 0, 0, 0, 0, 0])) == pytest.approx(7.0)
    assert g.nonuniform[0]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.1, 1.5))
def test_grid_partition_matches_brute_force(seed, cell):
    s = _random_scene(150, seed)
    cfg = AdcConfig(region_cell=cell)
    g = build_region_grid(s, cfg)
    origin = s.mu.min(axis=0)
    assert g.counts.sum() == len(s)
    seen = np.concatenate(g.members)
    assert sorted(seen.tolist()) == list(range(len(s)))
    for i in range(len(s)):
        key = tuple(math.floor((s.mu[i, a] - origin[a]) / cell) for a in range(3))
        assert tuple(g.keys[g.region_of[i]]) == key
        assert i in g.members[g.region_of[i]]
    assert np.all(g.variance >= 0)


def test_high_gradient_set():
    s = _random_scene(100, 2)
    g = build_region_grid(s, AdcConfig(delta_g=1e9))
    assert all(m.size == 0 for m in high_gradient_set(g, s, AdcConfig(delta_g=1e9)))
    s.grad_sum, s.grad_count = np.full(100, 1.0), np.ones(100, dtype=np.int64)
    hg = high_gradient_set(g, s, AdcConfig(delta_g=1e-12))
    assert all(np.array_equal(a, m) for a, m in zip(hg, g.members))
    s = _random_scene(100, 3)
    cfg = AdcConfig(delta_g=3e-4)
    g = build_region_grid(s, cfg)
    mg = s.mean_grad()
    for k, m in enumerate(g.members):
        assert g.high_grad[k].tolist() == [i for i in m if mg[i] > 3e-4]


def test_clone_uniform_regions_unchanged():
    s = _random_scene(60, 4)
    g = build_region_grid(s, AdcConfig(delta_u=1e9))
    out, parents = clone_in_regions(s, g, AdcConfig(delta_u=1e9), 0)
    assert parents.size == 0 and len(out) == len(s)
    np.testing.assert_array_equal(out.mu, s.mu)


def test_clone_count_law_and_reset():
    cfg = AdcConfig(region_cell=1.0, delta_u=1.0, delta_g=1e-3, clone_perturb_sigma=0.01)
    packed = _subcell_points({(0, 0, 0): 8})
    s = _with_grads(_scene(packed), [5e-3, 5e-3, 5e-3, 0, 0, 0, 0, 0])
    g = build_region_grid(s, cfg, origin=np.zeros(3))
    out, parents = clone_in_regions(s, g, cfg, 7)
    assert len(out) == 11 and parents.tolist() == [0, 1, 2]
    assert np.all(out.grad_count[[0, 1, 2, 8, 9, 10]] == 0) and np.all(out.grad_count[3:8] == 1)
    np.testing.assert_array_equal(out.log_scale[8:], s.log_scale[:3])
    np.testing.assert_array_equal(out.color[8:], s.color[:3])


def test_clone_perturbation_tail():
    cfg = AdcConfig(region_cell=1.0, delta_u=1.0, delta_g=1e-3, clone_perturb_sigma=0.02)
    packed = _subcell_points({(0, 0, 0): 8})
    offsets = []
    for seed in range(500):
        s = _with_grads(_scene(packed), np.full(8, 1.0))
        out, parents = clone_in_regions(s, build_region_grid(s, cfg, origin=np.zeros(3)), cfg, seed)
        offsets.append((out.mu[8:] - s.mu[parents]) / 0.02)
    z = np.abs(np.concatenate(offsets))
    # per coordinate, P(|z| > 4) = 6.3e-5
    assert np.mean(z <= 4.0) >= 0.9999 - 3e-4
    assert np.std(np.concatenate(offsets)) == pytest.approx(1.0, rel=0.05)


def test_top_bottom_examples():
    cfg = AdcConfig(region_cell=1.0)
    # place counts in distinct unit cells along x
    def grid_with(counts):
        pts = [[k + 0.5, 0.5, 0.5] for k, c in enumerate(counts) for _ in range(c)]
        return build_region_grid(_with_grads(_scene(pts), np.zeros(len(pts))), cfg, origin=np.zeros(3))

    top, bottom, ratio = top_bottom_sectors(grid_with([3] * 10), cfg)
    assert len(top) == len(bottom) == 2 and ratio == 1.0 and not set(top) & set(bottom)
    top, bottom, ratio = top_bottom_sectors(grid_with([10, 1, 1, 1, 1]), cfg)
    assert top.tolist() == [0] and len(bottom) == 1 and ratio == 10.0
    top, bottom, ratio = top_bottom_sectors(grid_with([4]), cfg)
    assert top.tolist() == bottom.tolist() == [0] and ratio == 1.0
    with pytest.raises(ValueError):
        top_bottom_sectors(build_region_grid(_scene(np.zeros((0, 3))), cfg), cfg)


def test_dispersion_examples():
    assert top20_dispersion_loss(np.ones((5, 3)))[0] == 0.0
    assert top20_dispersion_loss([[0, 0, 0], [2, 0, 0]])[0] == pytest.approx(2.0)
    assert top20_dispersion_loss([[0, 0, 0]])[0] == 0.0


def test_dispersion_equals_pairwise_definition():
    x = np.random.default_rng(0).normal(size=(9, 3))
    n = len(x)
    pairs = sum(np.sum((x[i] - x[j]) ** 2) for i in range(n) for j in range(i + 1, n)) / n
    assert top20_dispersion_loss(x)[0] == pytest.approx(pairs, rel=1e-12)


def test_dispersion_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(12, 3))
    members = np.array([0, 2, 3, 7, 11])
    _, g = top20_dispersion_loss(x, members)
    fd = central_difference(lambda: top20_dispersion_loss(x, members)[0], x, 1e-5)
    assert rel_error(g, fd) < 1e-6
    assert not np.any(g[[1, 4, 5, 6, 8, 9, 10]])


@given(st.integers(0, 10**6), st.floats(0.1, 10.0))
def test_dispersion_translation_and_scaling(seed, s):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(7, 3))
    base = top20_dispersion_loss(x)[0]
    assert top20_dispersion_loss(x + rng.normal(size=3) * 5)[0] == pytest.approx(base, rel=1e-9)
    assert top20_dispersion_loss(s * x)[0] == pytest.approx(s * s * base, rel=1e-9)


def _mean_pairwise(x):
    n = len(x)
    return np.mean([np.linalg.norm(x[i] - x[j]) for i in range(n) for j in range(i + 1, n)])


@pytest.mark.parametrize("lam, sign", [(-0.01, 1), (0.01, -1)])
def test_dispersion_step_direction(lam, sign):
    x = np.random.default_rng(5).normal(size=(10, 3))
    _, g = top20_dispersion_loss(x)
    stepped = x - 0.1 * lam * g
    assert sign * (_mean_pairwise(stepped) - _mean_pairwise(x)) > 0


def test_adc_loss_examples():
    assert adc_loss([0.1, 0.3], AdcConfig(lambda_top20=0.0), 5.0) == pytest.approx(0.4)
    assert adc_loss([0.1, 0.3], AdcConfig(lambda_top20=0.05), 0.0) == pytest.approx(0.4)
    assert adc_loss([0.1, 0.3], AdcConfig(lambda_top20=0.05), 2.0) == pytest.approx(0.5)


def test_region_recon_losses_conserve_total():
    s = _random_scene(40, 6)
    g = build_region_grid(s, AdcConfig())
    rng = np.random.default_rng(0)
    front = rng.integers(-1, 40, (16, 16))
    lmap = rng.uniform(size=(16, 16))
    per = region_recon_losses(lmap, front, g)
    assert len(per) == len(g) + 1
    assert per.sum() == pytest.approx(lmap.sum(), rel=1e-12)
    k = g.region_of[front[3, 4]] if front[3, 4] >= 0 else len(g)
    assert per[k] >= lmap[3, 4]


def test_run_adc_unreachable_thresholds_unchanged():
    s = _random_scene(50, 7)
    cfg = AdcConfig(delta_alpha=1e-12, delta_u=1e12, delta_g=1e12)
    out, _, rep = run_adc_step(s, None, [CAM], cfg, 0)
    assert rep.pruned == rep.cloned == 0 and len(out) == 50
    np.testing.assert_array_equal(out.mu, s.mu)


def test_run_adc_prune_all():
    s = _random_scene(30, 8)
    cfg = AdcConfig(delta_alpha=1.0, delta_dist=1e6, delta_g=1e12)
    out, _, rep = run_adc_step(s, None, [CAM], cfg, 0)
    assert rep.pruned == 30 and len(out) == 0 and rep.size_after == 0


def test_run_adc_matches_scripted_oracle():
    s = _random_scene(120, 9, spread=1.0)
    cams = [CAM, Camera.look_at([2.0, 0, 0], np.zeros(3), fx=50, width=32, height=32)]
    cfg = AdcConfig(delta_alpha=0.2, delta_dist=3.0, delta_u=0.3, delta_g=2e-4, region_cell=0.8)
    out, grid, rep = run_adc_step(s, None, cams, cfg, 11)
    # oracle: any-camera prune, then rebuild from the pruned scene, then clone
    mask = prune_mask(s, cams[0], cfg) | prune_mask(s, cams[1], cfg)
    kept = s.select(np.flatnonzero(~mask))
    g = build_region_grid(kept, cfg)
    oracle, parents = clone_in_regions(kept, g, cfg, 11)
    np.testing.assert_array_equal(out.mu, oracle.mu)
    assert rep.pruned == int(mask.sum()) and rep.cloned == parents.size
    assert len(out) == len(s) - rep.pruned + rep.cloned
    assert rep.uniform_regions + rep.nonuniform_regions == len(g)
    for k in range(len(g)):
        if not g.nonuniform[k]:
            assert not np.isin(parents, g.members[k]).any()
    np.testing.assert_array_equal(rep.source_index[:len(kept)], np.flatnonzero(~mask))


def test_config_validation():
    with pytest.raises(ValueError):
        AdcConfig(delta_alpha=0)
    with pytest.raises(ValueError):
        AdcConfig(top_fraction=0.6)
    with pytest.raises(ValueError):
        AdcConfig(region_cell=-1)
