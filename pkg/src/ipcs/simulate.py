"""Simulated annotator: cluster the error map, click inside the biggest blob.

Mis-segmented points are grouped with DBSCAN; within the chosen region the
click lands on the member with the highest Gaussian kernel density, which
biases clicks toward the interior rather than the boundary. Ground truth
supplies the corrected label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .refine import InteractionRecord
from .tensor import DimensionError


@dataclass
class SimConfig:
    dbscan_eps: float = 0.09        # 3x the default 3 cm sampling grid
    dbscan_min_pts: int = 8
    kde_bandwidth: float = 0.09
    clicks_per_round: int = 1
    min_region_size: int = 15
    rng_seed: int = 0
    weighted_sampling: bool = False  # sample clicks by density instead of argmax

    def __post_init__(self):
        if self.dbscan_eps <= 0 or self.kde_bandwidth <= 0:
            raise ValueError("dbscan_eps and kde_bandwidth must be positive")
        if self.clicks_per_round < 1:
            raise ValueError("clicks_per_round must be >= 1")


@dataclass
class ErrorRegion:
    indices: np.ndarray              # original point indices, sorted ascending
    core_mask: np.ndarray            # parallel to indices
    densities: Optional[np.ndarray] = None

    @property
    def size(self):
        return len(self.indices)


def error_map(predicted: np.ndarray, ground_truth: np.ndarray) -> np.ndarray:
    if len(predicted) != len(ground_truth):
        raise DimensionError("predicted and ground truth lengths disagree")
    return np.asarray(predicted) != np.asarray(ground_truth)


def cluster_errors(positions: np.ndarray, mask: np.ndarray,
                   config: SimConfig) -> List[ErrorRegion]:
    """DBSCAN over the masked points only; regions ordered by (size desc, min index).

    A neighborhood includes the point itself. Core points connect into
    components; a border point joins the component of the lowest-indexed
    core point within eps. Noise points and regions smaller than
    min_region_size are dropped.
    """
    mask = np.asarray(mask, dtype=bool)
    if len(mask) != len(positions):
        raise DimensionError("mask and positions lengths disagree")
    orig_idx = np.nonzero(mask)[0]
    if len(orig_idx) == 0:
        return []
    pts = np.asarray(positions, dtype=np.float64)[orig_idx]
    tree = cKDTree(pts)
    neigh = tree.query_ball_point(pts, config.dbscan_eps)
    n = len(pts)
    core = np.array([len(nb) >= config.dbscan_min_pts for nb in neigh])

    label = np.full(n, -1, dtype=np.int64)
    n_clusters = 0
    for seed in range(n):
        if not core[seed] or label[seed] != -1:
            continue
        cid = n_clusters
        n_clusters += 1
        stack = [seed]
        label[seed] = cid
        while stack:
            i = stack.pop()
            for j in neigh[i]:
                if core[j] and label[j] == -1:
                    label[j] = cid
                    stack.append(j)
    # border points: lowest-index core neighbor decides the cluster
    for i in range(n):
        if core[i] or label[i] != -1:
            continue
        core_nb = sorted(j for j in neigh[i] if core[j])
        if core_nb:
            label[i] = label[core_nb[0]]

    regions = []
    for cid in range(n_clusters):
        pick = np.nonzero(label == cid)[0]
        if len(pick) < config.min_region_size:
            continue
        regions.append(ErrorRegion(indices=orig_idx[pick], core_mask=core[pick]))
    regions.sort(key=lambda r: (-r.size, int(r.indices.min())))
    return regions


def kde_density(positions: np.ndarray, bandwidth: float) -> np.ndarray:
    """Gaussian kernel density of each member over its own region."""
    pts = np.asarray(positions, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0:
        raise DimensionError("kde_density expects a non-empty N x D array")
    n, d = pts.shape
    norm = 1.0 / (n * (2 * math.pi * bandwidth ** 2) ** (d / 2))
    dens = np.empty(n)
    block = max(1, int(4e6) // max(n, 1))
    for start in range(0, n, block):
        stop = min(start + block, n)
        diff = pts[start:stop, None, :] - pts[None, :, :]
        d2 = (diff ** 2).sum(axis=2)
        dens[start:stop] = np.exp(-d2 / (2 * bandwidth ** 2)).sum(axis=1)
    return dens * norm


def _pick_in_region(region: ErrorRegion, positions, config,
                    excluded: set, rng) -> Optional[int]:
    dens = kde_density(positions[region.indices], config.kde_bandwidth)
    region.densities = dens
    # clicks land on core points; border members only when nothing else is left
    candidates = [(i, dens[k]) for k, i in enumerate(region.indices)
                  if i not in excluded and region.core_mask[k]]
    if not candidates:
        candidates = [(i, dens[k]) for k, i in enumerate(region.indices)
                      if i not in excluded]
    if not candidates:
        return None
    if config.weighted_sampling:
        idxs = np.array([c[0] for c in candidates])
        weights = np.array([c[1] for c in candidates])
        weights = weights / weights.sum()
        return int(rng.choice(idxs, p=weights))
    # argmax density, ties toward the lower point index
    best = max(candidates, key=lambda c: (c[1], -c[0]))
    return int(best[0])


def next_clicks(predicted: np.ndarray, ground_truth: np.ndarray,
                positions: np.ndarray, config: SimConfig,
                already_clicked: Sequence[int] = ()) -> List[InteractionRecord]:
    """Corrective clicks for the current prediction; empty when nothing is wrong.

    Falls back to a permissive clustering (min_pts=1, no size floor) when no
    region passes the configured thresholds, so progress never stalls while
    mis-segmented points remain.
    """
    mask = error_map(predicted, ground_truth)
    excluded = set(int(i) for i in already_clicked)
    if not np.any(mask):
        return []
    regions = cluster_errors(positions, mask, config)
    if not regions:
        relaxed = replace(config, dbscan_min_pts=1, min_region_size=1)
        regions = cluster_errors(positions, mask, relaxed)
    if not regions:
        return []
    rng = np.random.default_rng(config.rng_seed)
    records: list[InteractionRecord] = []
    chosen: set = set(excluded)
    for region in regions:
        if len(records) >= config.clicks_per_round:
            break
        pick = _pick_in_region(region, positions, config, chosen, rng)
        if pick is None:
            continue
        chosen.add(pick)
        records.append(InteractionRecord(point_index=pick,
                                         corrected_label=int(ground_truth[pick]),
                                         source="simulator"))
    # not enough distinct regions: take extra picks from the largest region
    while len(records) < config.clicks_per_round and regions:
        pick = _pick_in_region(regions[0], positions, config, chosen, rng)
        if pick is None:
            break
        chosen.add(pick)
        records.append(InteractionRecord(point_index=pick,
                                         corrected_label=int(ground_truth[pick]),
                                         source="simulator"))
    return records
