"""Simulated annotator: error map, DBSCAN vs brute force, KDE vs brute force."""

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ipcs import simulate
from ipcs.simulate import (SimConfig, cluster_errors, error_map,
                           kde_density, next_clicks)
from ipcs.tensor import DimensionError

CFG = SimConfig(dbscan_eps=0.12, dbscan_min_pts=3, kde_bandwidth=0.12,
                min_region_size=3)


# ---------------------------------------------------------------------------
# brute-force oracles


def brute_force_dbscan(points, eps, min_pts):
    """Connected components of the eps graph restricted to core points;
    border points join the cluster of their lowest-index core neighbor."""
    n = len(points)
    d = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2))
    neigh = [np.nonzero(d[i] <= eps)[0] for i in range(n)]  # includes self
    core = np.array([len(nb) >= min_pts for nb in neigh])
    label = np.full(n, -1)
    cid = 0
    for s in range(n):
        if not core[s] or label[s] != -1:
            continue
        stack = [s]
        label[s] = cid
        while stack:
            i = stack.pop()
            for j in neigh[i]:
                if core[j] and label[j] == -1:
                    label[j] = cid
                    stack.append(j)
        cid += 1
    for i in range(n):
        if not core[i] and label[i] == -1:
            cores = [j for j in neigh[i] if core[j]]
            if cores:
                label[i] = label[min(cores)]
    return label, core


def brute_force_kde(points, h):
    n, dim = points.shape
    out = np.zeros(n)
    for i in range(n):
        for j in range(n):
            d2 = float(((points[i] - points[j]) ** 2).sum())
            out[i] += math.exp(-d2 / (2 * h * h))
    return out / (n * (2 * math.pi * h * h) ** (dim / 2))


def regions_as_sets(regions):
    return {frozenset(int(i) for i in r.indices) for r in regions}


def oracle_regions(points, mask, cfg):
    idx = np.nonzero(mask)[0]
    label, _ = brute_force_dbscan(points[idx].astype(np.float64),
                                  cfg.dbscan_eps, cfg.dbscan_min_pts)
    out = set()
    for cid in range(label.max() + 1 if label.size else 0):
        members = idx[label == cid]
        if len(members) >= cfg.min_region_size:
            out.add(frozenset(int(i) for i in members))
    return out


# ---------------------------------------------------------------------------
# error map


def test_error_map_identical():
    a = np.array([1, 2, 3])
    assert not error_map(a, a.copy()).any()


def test_error_map_disjoint():
    assert error_map(np.zeros(4, int), np.ones(4, int)).all()


def test_error_map_popcount_is_error_rate():
    rng = np.random.default_rng(0)
    pred = rng.integers(0, 4, 200)
    gt = rng.integers(0, 4, 200)
    mask = error_map(pred, gt)
    assert mask.sum() == np.sum(pred != gt)


def test_error_map_length_mismatch():
    with pytest.raises(DimensionError):
        error_map(np.zeros(3, int), np.zeros(4, int))


# ---------------------------------------------------------------------------
# clustering


def blob(center, n, rng, spread=0.03):
    return center + rng.normal(0, spread, size=(n, 3))


def test_two_separated_blobs_two_regions():
    rng = np.random.default_rng(1)
    pts = np.concatenate([blob([0, 0, 0], 20, rng),
                          blob([10 * CFG.dbscan_eps, 0, 0], 15, rng)])
    mask = np.ones(len(pts), dtype=bool)
    regions = cluster_errors(pts, mask, CFG)
    assert len(regions) == 2
    assert regions[0].size == 20 and regions[1].size == 15
    assert regions_as_sets(regions) == oracle_regions(pts, mask, CFG)


def test_single_point_is_noise():
    pts = np.zeros((1, 3))
    cfg = dataclasses.replace(CFG, dbscan_min_pts=2, min_region_size=1)
    assert cluster_errors(pts, np.ones(1, bool), cfg) == []


def test_all_points_within_eps_one_region():
    rng = np.random.default_rng(2)
    pts = rng.normal(0, 0.01, size=(12, 3))
    regions = cluster_errors(pts, np.ones(12, bool), CFG)
    assert len(regions) == 1 and regions[0].size == 12


def test_empty_mask_no_regions():
    assert cluster_errors(np.zeros((5, 3)), np.zeros(5, bool), CFG) == []


def test_min_region_size_filters():
    rng = np.random.default_rng(3)
    pts = np.concatenate([blob([0, 0, 0], 30, rng),
                          blob([5, 0, 0], 4, rng)])
    cfg = dataclasses.replace(CFG, min_region_size=10)
    regions = cluster_errors(pts, np.ones(len(pts), bool), cfg)
    assert len(regions) == 1 and regions[0].size == 30


def test_cluster_matches_oracle_on_random_instances():
    for seed in range(30):
        rng = np.random.default_rng(200 + seed)
        n = int(rng.integers(10, 120))
        pts = rng.random((n, 3)) * rng.uniform(0.3, 1.5)
        mask = rng.random(n) < 0.7
        if not mask.any():
            mask[0] = True
        cfg = SimConfig(dbscan_eps=float(rng.uniform(0.08, 0.3)),
                        dbscan_min_pts=int(rng.integers(2, 6)),
                        kde_bandwidth=0.1,
                        min_region_size=int(rng.integers(1, 5)))
        got = regions_as_sets(cluster_errors(pts, mask, cfg))
        want = oracle_regions(pts, mask, cfg)
        assert got == want, f"seed {seed}"


def test_cluster_order_invariant_to_input_order():
    rng = np.random.default_rng(9)
    pts = np.concatenate([blob([0, 0, 0], 18, rng), blob([3, 0, 0], 12, rng)])
    mask = np.ones(len(pts), bool)
    base = cluster_errors(pts, mask, CFG)
    perm = rng.permutation(len(pts))
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(len(perm))
    permuted = cluster_errors(pts[perm], mask[perm], CFG)
    remapped = {frozenset(int(perm[i]) for i in r.indices) for r in permuted}
    assert remapped == regions_as_sets(base)


def test_cluster_ordering_rule():
    rng = np.random.default_rng(10)
    pts = np.concatenate([blob([0, 0, 0], 10, rng), blob([4, 0, 0], 25, rng)])
    regions = cluster_errors(pts, np.ones(len(pts), bool), CFG)
    assert [r.size for r in regions] == [25, 10]  # size-descending


# ---------------------------------------------------------------------------
# kde


def test_kde_single_member_self_contribution():
    h = 0.2
    dens = kde_density(np.zeros((1, 3)), h)
    assert np.isclose(dens[0], 1.0 / (2 * math.pi * h * h) ** 1.5, rtol=1e-6)


def test_kde_symmetric_chain_peaks_in_middle():
    pts = np.stack([np.linspace(0, 0.4, 5), np.zeros(5), np.zeros(5)], axis=1)
    dens = kde_density(pts, 0.15)
    assert np.argmax(dens) == 2


def test_kde_matches_brute_force():
    for seed in range(10):
        rng = np.random.default_rng(300 + seed)
        pts = rng.normal(0, 0.2, size=(int(rng.integers(2, 60)), 3))
        h = float(rng.uniform(0.05, 0.3))
        got = kde_density(pts, h)
        want = brute_force_kde(pts, h)
        assert np.allclose(got, want, rtol=1e-6)
        assert int(np.argmax(got)) == int(np.argmax(want))
    assert np.all(kde_density(rng.normal(size=(5, 3)), 0.1) > 0)


# ---------------------------------------------------------------------------
# click selection


def grid_scene(rng, n=150):
    pts = rng.random((n, 3)).astype(np.float32) * 0.8
    gt = rng.integers(0, 4, size=n)
    return pts, gt


def test_perfect_prediction_no_clicks():
    rng = np.random.default_rng(0)
    pts, gt = grid_scene(rng)
    assert next_clicks(gt.copy(), gt, pts, CFG) == []


def test_single_blob_clicked_with_gt_label():
    rng = np.random.default_rng(1)
    pts = np.concatenate([blob([0, 0, 0], 25, rng), blob([5, 0, 0], 60, rng)])
    gt = np.zeros(85, dtype=np.int64)
    pred = gt.copy()
    pred[:25] = 3  # first blob mislabeled
    recs = next_clicks(pred, gt, pts, CFG)
    assert len(recs) == 1
    rec = recs[0]
    assert rec.point_index < 25
    assert rec.corrected_label == 0
    assert rec.source == "simulator"


def test_click_targets_largest_region_max_density():
    rng = np.random.default_rng(2)
    pts = np.concatenate([blob([0, 0, 0], 40, rng), blob([5, 0, 0], 12, rng),
                          blob([9, 0, 0], 100, rng)])
    n = len(pts)
    gt = np.zeros(n, dtype=np.int64)
    pred = gt.copy()
    pred[:52] = 1  # both small blobs wrong; big blob correct
    recs = next_clicks(pred, gt, pts, CFG)
    assert len(recs) == 1
    assert recs[0].point_index < 40  # largest error region
    dens = brute_force_kde(pts[:40].astype(np.float64), CFG.kde_bandwidth)
    assert recs[0].point_index == int(np.argmax(dens))


def test_click_density_above_70th_percentile():
    for seed in range(12):
        rng = np.random.default_rng(400 + seed)
        pts = blob([0, 0, 0], int(rng.integers(25, 90)), rng, spread=0.05)
        n = len(pts)
        gt = np.zeros(n, dtype=np.int64)
        pred = np.ones(n, dtype=np.int64)
        recs = next_clicks(pred, gt, pts.astype(np.float32), CFG)
        dens = brute_force_kde(pts, CFG.kde_bandwidth)
        rank = (dens < dens[recs[0].point_index]).mean()
        assert rank >= 0.70


def test_clicks_are_core_points():
    rng = np.random.default_rng(5)
    pts = np.concatenate([blob([0, 0, 0], 30, rng), blob([2, 0, 0], 10, rng)])
    n = len(pts)
    gt = np.zeros(n, dtype=np.int64)
    pred = np.ones(n, dtype=np.int64)
    recs = next_clicks(pred, gt, pts, CFG)
    label, core = brute_force_dbscan(pts, CFG.dbscan_eps, CFG.dbscan_min_pts)
    assert core[recs[0].point_index]


def test_every_click_is_currently_wrong():
    rng = np.random.default_rng(6)
    pts, gt = grid_scene(rng, n=200)
    pred = gt.copy()
    bad = rng.permutation(200)[:70]
    pred[bad] = (gt[bad] + 1) % 4
    cfg = dataclasses.replace(CFG, clicks_per_round=3, dbscan_eps=0.25,
                              dbscan_min_pts=2, min_region_size=2)
    recs = next_clicks(pred, gt, pts, cfg)
    assert 1 <= len(recs) <= 3
    for r in recs:
        assert pred[r.point_index] != gt[r.point_index]
        assert r.corrected_label == gt[r.point_index]
    assert len({r.point_index for r in recs}) == len(recs)


def test_excluded_points_not_reclicked():
    rng = np.random.default_rng(7)
    pts = blob([0, 0, 0], 30, rng)
    gt = np.zeros(30, dtype=np.int64)
    pred = np.ones(30, dtype=np.int64)
    first = next_clicks(pred, gt, pts, CFG)
    second = next_clicks(pred, gt, pts, CFG,
                         already_clicked=[first[0].point_index])
    assert second[0].point_index != first[0].point_index


def test_fallback_when_all_errors_are_noise():
    rng = np.random.default_rng(8)
    pts = rng.random((40, 3)) * 10  # far sparser than eps
    gt = np.zeros(40, dtype=np.int64)
    pred = gt.copy()
    pred[17] = 2
    recs = next_clicks(pred, gt, pts, CFG)
    assert len(recs) == 1 and recs[0].point_index == 17


def test_deterministic_under_seed():
    rng = np.random.default_rng(9)
    pts, gt = grid_scene(rng, 120)
    pred = (gt + 1) % 4
    cfg = dataclasses.replace(CFG, weighted_sampling=True, rng_seed=77,
                              clicks_per_round=2)
    a = next_clicks(pred, gt, pts, cfg)
    b = next_clicks(pred, gt, pts, cfg)
    assert [(r.point_index, r.corrected_label) for r in a] == \
           [(r.point_index, r.corrected_label) for r in b]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_region_members_pairwise_connected_under_relation(seed):
    # every member of a region reaches every other via eps hops within the mask
    rng = np.random.default_rng(seed)
    n = int(rng.integers(8, 60))
    pts = rng.random((n, 3)) * 0.5
    mask = rng.random(n) < 0.8
    if not mask.any():
        mask[0] = True
    regions = cluster_errors(pts, mask, CFG)
    for region in regions:
        sub = pts[region.indices]
        d = np.sqrt(((sub[:, None] - sub[None, :]) ** 2).sum(axis=2))
        adj = d <= CFG.dbscan_eps
        reach = np.zeros(len(sub), dtype=bool)
        reach[0] = True
        for _ in range(len(sub)):
            new = adj[reach].any(axis=0) & ~reach
            if not new.any():
                break
            reach |= new
        assert reach.all()
