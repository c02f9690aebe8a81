"""Attention-map keypoints: threshold each head, merge, cluster, emit crops.

Pipeline per garment image: take the class token's per-head attention over
the patch grid, keep the minimal top set covering a mass fraction theta per
head ("high-attention points"), merge heads as a weighted multiset, run
weighted k-means (k-means++ seeding) down to K centroids, and center one
local CropBox on each centroid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .augment import ASPECT_RANGE, CropBox, crop_box_from_center
from .errors import ConfigurationError
from .vit import AttentionMap

DEFAULT_MASS_FRACTION = 0.6


def threshold_head(att_row: np.ndarray, mass_fraction: float) -> np.ndarray:
    """Indices of the minimal prefix of patches, sorted by attention
    descending (ties broken by patch index ascending), whose cumulative
    mass reaches mass_fraction. Degenerate all-zero rows yield an empty
    set, signalling an upstream renormalization failure."""
    row = np.asarray(att_row, dtype=np.float64)
    if not (0.0 < mass_fraction < 1.0):
        raise ConfigurationError(f"mass_fraction {mass_fraction} outside (0, 1)")
    total = row.sum()
    if total <= 0.0:
        return np.empty(0, dtype=int)
    if abs(total - 1.0) > 1e-6:
        raise ConfigurationError(f"attention row sums to {total}, expected 1")
    order = np.lexsort((np.arange(len(row)), -row))
    cum = np.cumsum(row[order])
    count = int(np.searchsorted(cum, mass_fraction - 1e-12) + 1)
    return np.sort(order[:count])


@dataclass
class HighAttentionPoints:
    """Merged high-attention points on one patch grid, with provenance."""

    points: np.ndarray       # (n, 2) int (row, col)
    source_head: np.ndarray  # (n,) int
    weight: np.ndarray       # (n,) float in (0, 1]
    grid_shape: tuple

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=int).reshape(-1, 2)
        gh, gw = self.grid_shape
        if pts.size and (pts[:, 0].min() < 0 or pts[:, 0].max() >= gh
                         or pts[:, 1].min() < 0 or pts[:, 1].max() >= gw):
            raise ConfigurationError("points fall outside the grid")
        w = np.asarray(self.weight, dtype=np.float64)
        if w.size and (w.min() <= 0.0 or w.max() > 1.0 + 1e-9):
            raise ConfigurationError("weights must lie in (0, 1]")
        self.points = pts
        self.source_head = np.asarray(self.source_head, dtype=int)
        self.weight = w

    def __len__(self):
        return len(self.points)


def merge_heads(attention: AttentionMap,
                mass_fraction: float = DEFAULT_MASS_FRACTION) -> HighAttentionPoints:
    """Threshold every head and union the results as a multiset; duplicates
    across heads are kept so dense regions weigh more in clustering."""
    gh, gw = attention.grid_shape
    points, heads, weights = [], [], []
    for h in range(attention.num_heads):
        row = attention.head_rows[h]
        for idx in threshold_head(row, mass_fraction):
            points.append((idx // gw, idx % gw))
            heads.append(h)
            weights.append(row[idx])
    return HighAttentionPoints(np.array(points, dtype=int).reshape(-1, 2),
                               np.array(heads, dtype=int),
                               np.array(weights, dtype=np.float64),
                               attention.grid_shape)


def merge_point_sets(sets: list) -> HighAttentionPoints:
    """Multiset union of per-head point sets (all on the same grid)."""
    grids = {s.grid_shape for s in sets}
    if len(grids) != 1:
        raise ConfigurationError(f"point sets disagree on grid shape: {grids}")
    return HighAttentionPoints(
        np.concatenate([s.points for s in sets]) if sets else np.empty((0, 2), int),
        np.concatenate([s.source_head for s in sets]),
        np.concatenate([s.weight for s in sets]),
        sets[0].grid_shape)


@dataclass
class KeypointSet:
    """K cluster centroids on the patch grid (real-valued coordinates)."""

    centroids: np.ndarray   # (K, 2) float (row, col)
    K: int
    assignment: np.ndarray  # point index -> centroid index
    grid_shape: tuple
    sse: float
    reduced: bool = False   # distinct points < requested K; centroids reused round-robin


def _weighted_sse(points, weights, centroids, assignment):
    diffs = points - centroids[assignment]
    return float(np.sum(weights * np.einsum("ij,ij->i", diffs, diffs)))


def _kmeans_pp_seeds(points, weights, k, rng):
    n = len(points)
    probs = weights / weights.sum()
    seeds = [int(rng.choice(n, p=probs))]
    d2 = np.einsum("ij,ij->i", points - points[seeds[0]], points - points[seeds[0]])
    for _ in range(k - 1):
        scores = weights * d2
        if scores.sum() <= 0:  # all remaining mass sits on chosen seeds
            remaining = [i for i in range(n) if i not in seeds]
            seeds.append(int(rng.choice(remaining)))
        else:
            seeds.append(int(rng.choice(n, p=scores / scores.sum())))
        nd2 = np.einsum("ij,ij->i", points - points[seeds[-1]], points - points[seeds[-1]])
        d2 = np.minimum(d2, nd2)
    return points[seeds].astype(np.float64)


def cluster_keypoints(points: HighAttentionPoints, K: int,
                      rng: np.random.Generator, max_iter: int = 100) -> KeypointSet:
    """Weighted k-means over (row, col) with k-means++ seeding and Lloyd
    iterations to an assignment fixed point (or max_iter).

    If the points contain fewer than K distinct locations, k is reduced to
    the distinct count and the centroid list is padded round-robin back to
    K so downstream crop counts stay fixed; `reduced` flags this.
    """
    if len(points) == 0:
        raise ConfigurationError(
            "no high-attention points; lower the mass threshold theta")
    pts = points.points.astype(np.float64)
    w = points.weight
    distinct = np.unique(pts, axis=0)
    k_eff = min(K, len(distinct))
    reduced = k_eff < K

    centroids = _kmeans_pp_seeds(pts, w, k_eff, rng)
    assignment = None
    prev_sse = np.inf
    for _ in range(max_iter):
        d2 = np.einsum("nkd,nkd->nk", pts[:, None, :] - centroids[None, :, :],
                       pts[:, None, :] - centroids[None, :, :])
        new_assignment = np.argmin(d2, axis=1)
        reseeded = False
        for c in range(k_eff):
            mask = new_assignment == c
            if mask.any():
                centroids[c] = np.average(pts[mask], axis=0, weights=w[mask])
            else:
                # re-seed an emptied cluster at the worst-served point
                worst = int(np.argmax(w * d2[np.arange(len(pts)), new_assignment]))
                centroids[c] = pts[worst]
                reseeded = True
        sse = _weighted_sse(pts, w, centroids, new_assignment)
        if not reseeded and sse > prev_sse + 1e-9:
            raise AssertionError(
                f"Lloyd iteration increased SSE: {prev_sse} -> {sse}")
        if assignment is not None and not reseeded \
                and np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        prev_sse = sse if not reseeded else np.inf

    if reduced:
        pad = [centroids[i % k_eff] for i in range(K)]
        centroids = np.stack(pad)
    return KeypointSet(centroids=centroids, K=K, assignment=assignment,
                       grid_shape=points.grid_shape,
                       sse=_weighted_sse(pts, w, centroids[:k_eff], assignment),
                       reduced=reduced)


def keypoint_crop_boxes(keys: KeypointSet, image_size: tuple,
                        rng: np.random.Generator,
                        scale_range=(0.05, 0.25),
                        aspect_range=ASPECT_RANGE) -> list:
    """One CropBox per centroid: the centroid's patch-grid position maps to
    its pixel-center, the area ratio is drawn per crop from scale_range,
    and out-of-bounds rects are clamped by shifting (size preserved)."""
    h, w = image_size
    gh, gw = keys.grid_shape
    boxes = []
    for row, col in keys.centroids:
        cx = (col + 0.5) * (w / gw)
        cy = (row + 0.5) * (h / gh)
        area = rng.uniform(*scale_range) * h * w
        aspect = float(np.exp(rng.uniform(np.log(aspect_range[0]),
                                          np.log(aspect_range[1]))))
        boxes.append(crop_box_from_center((cx, cy), area, aspect, image_size))
    return boxes
