import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tryonlab.errors import ConfigurationError
from tryonlab.keypoints import (HighAttentionPoints, KeypointSet, cluster_keypoints,
                                keypoint_crop_boxes, merge_heads, merge_point_sets,
                                threshold_head)
from tryonlab.vit import AttentionMap

from oracles import kmeans_optimum_oracle


def points_from_cols(cols, grid=(1, 16), weights=None, heads=None):
    cols = np.asarray(cols)
    pts = np.stack([np.zeros_like(cols), cols], axis=1)
    n = len(cols)
    return HighAttentionPoints(
        pts, np.zeros(n, int) if heads is None else np.asarray(heads),
        np.full(n, 0.5) if weights is None else np.asarray(weights), grid)


class TestThresholdHead:
    def test_one_hot_gives_single_point(self):
        row = np.zeros(12)
        row[5] = 1.0
        assert list(threshold_head(row, 0.6)) == [5]

    def test_uniform_row_takes_ceil_theta_p(self):
        row = np.full(12, 1.0 / 12.0)
        assert len(threshold_head(row, 0.6)) == 8  # ceil(0.6 * 12)

    def test_matches_brute_force_prefix_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            row = rng.uniform(size=16)
            row /= row.sum()
            got = set(threshold_head(row, 0.6))
            # oracle: enumerate prefixes of the (desc value, asc index) order
            order = sorted(range(16), key=lambda i: (-row[i], i))
            mass = 0.0
            expect = []
            for idx in order:
                expect.append(idx)
                mass += row[idx]
                if mass >= 0.6 - 1e-12:
                    break
            assert got == set(expect)

    def test_minimality_property(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            row = rng.dirichlet(np.ones(20))
            idx = threshold_head(row, 0.6)
            total = row[idx].sum()
            assert total >= 0.6 - 1e-9
            # dropping the least-attended selected patch goes below theta
            drop = idx[np.argmin(row[idx])]
            assert total - row[drop] < 0.6

    def test_all_zero_row_returns_empty(self):
        assert len(threshold_head(np.zeros(10), 0.6)) == 0

    def test_bad_theta(self):
        with pytest.raises(ConfigurationError):
            threshold_head(np.full(4, 0.25), 1.0)


class TestMerge:
    def test_single_head_identity(self):
        s = points_from_cols([1, 4, 9])
        merged = merge_point_sets([s])
        assert np.array_equal(merged.points, s.points)
        assert np.array_equal(merged.weight, s.weight)

    def test_disjoint_union_cardinality(self):
        a = points_from_cols([0, 1, 2], heads=[0, 0, 0])
        b = points_from_cols([5, 6, 7, 8, 9], heads=[1, 1, 1, 1, 1])
        assert len(merge_point_sets([a, b])) == 8

    def test_overlap_keeps_multiset(self):
        a = points_from_cols([0, 1, 2])
        b = points_from_cols([1, 2, 3])
        assert len(merge_point_sets([a, b])) == 6

    def test_grid_mismatch_rejected(self):
        a = points_from_cols([0], grid=(1, 16))
        b = points_from_cols([0], grid=(2, 8))
        with pytest.raises(ConfigurationError):
            merge_point_sets([a, b])

    def test_merge_heads_from_attention(self):
        rows = np.array([[0.7, 0.1, 0.1, 0.1],
                         [0.25, 0.25, 0.25, 0.25]])
        att = AttentionMap(rows, (2, 2))
        merged = merge_heads(att, 0.6)
        # head 0 needs 1 point, head 1 needs 3 -> multiset of 4
        assert len(merged) == 4
        assert set(merged.source_head.tolist()) == {0, 1}


class TestCluster:
    def test_k_distinct_points_give_point_centroids(self):
        pts = points_from_cols([2, 7, 13])
        keys = cluster_keypoints(pts, 3, np.random.default_rng(0))
        assert sorted(keys.centroids[:, 1].tolist()) == [2.0, 7.0, 13.0]
        assert not keys.reduced

    def test_colinear_two_cluster_optimum(self):
        # {0,1,2,10,11,12} with K=2 -> centers {1, 11} by exhaustive enumeration
        pts = points_from_cols([0, 1, 2, 10, 11, 12], weights=np.ones(6))
        keys = cluster_keypoints(pts, 2, np.random.default_rng(1))
        got = sorted(keys.centroids[:, 1].tolist())
        best_sse, best_cents = kmeans_optimum_oracle(pts.points, pts.weight, 2)
        expect = sorted(c[1] for c in best_cents if c is not None)
        assert got == pytest.approx(expect)
        assert got == pytest.approx([1.0, 11.0])
        assert keys.sse == pytest.approx(best_sse, abs=1e-9)

    def test_identical_points_reduce_k(self):
        pts = points_from_cols([4, 4, 4])
        keys = cluster_keypoints(pts, 3, np.random.default_rng(2))
        assert keys.reduced
        assert keys.centroids.shape == (3, 2)      # padded round-robin
        assert np.all(keys.centroids[:, 1] == 4.0)

    def test_empty_points_error_mentions_theta(self):
        empty = HighAttentionPoints(np.empty((0, 2), int), np.empty(0, int),
                                    np.empty(0), (4, 4))
        with pytest.raises(ConfigurationError, match="theta"):
            cluster_keypoints(empty, 2, np.random.default_rng(0))

    def test_weighted_centroid_pull(self):
        pts = points_from_cols([0, 10], weights=np.array([0.9, 0.1]))
        keys = cluster_keypoints(pts, 1, np.random.default_rng(3))
        assert keys.centroids[0, 1] == pytest.approx(1.0)  # 0*0.9 + 10*0.1

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 1_000_000),
           n=st.integers(2, 8), k=st.integers(1, 3))
    def test_restarts_reach_exhaustive_optimum(self, seed, n, k):
        rng = np.random.default_rng(seed)
        pts = HighAttentionPoints(rng.integers(0, 6, size=(n, 2)),
                                  np.zeros(n, int),
                                  rng.uniform(0.1, 1.0, size=n), (6, 6))
        k = min(k, len(np.unique(pts.points, axis=0)))
        best = min(cluster_keypoints(pts, k, np.random.default_rng(r)).sse
                   for r in range(20))
        opt, _ = kmeans_optimum_oracle(pts.points, pts.weight, k)
        assert best <= opt + 1e-9


class TestKeypointCropBoxes:
    def make_keys(self, centroids, grid):
        n = len(centroids)
        return KeypointSet(centroids=np.asarray(centroids, dtype=float), K=n,
                           assignment=np.zeros(n, int), grid_shape=grid, sse=0.0)

    def test_center_mapping_and_area(self):
        # centroid at grid center of an H=384 x W=512 image, forced area 0.25,
        # aspect 1 -> square side sqrt(0.25*512*384) ~ 221.7 centered (256, 192)
        keys = self.make_keys([[11.5, 15.5]], grid=(24, 32))
        rng = np.random.default_rng(0)
        boxes = keypoint_crop_boxes(keys, (384, 512), rng,
                                    scale_range=(0.25, 0.25), aspect_range=(1, 1))
        box = boxes[0]
        side = round(np.sqrt(0.25 * 512 * 384))
        assert (box.width, box.height) == (side, side)
        assert abs((box.left + box.width / 2) - 256) <= 1
        assert abs((box.top + box.height / 2) - 192) <= 1

    def test_corner_centroid_clamped_in_bounds(self):
        keys = self.make_keys([[0.0, 0.0]], grid=(4, 3))
        boxes = keypoint_crop_boxes(keys, (64, 48), np.random.default_rng(1),
                                    scale_range=(0.25, 0.25), aspect_range=(1, 1))
        box = boxes[0]
        box.validate((64, 48))
        assert box.left == 0 and box.top == 0  # shifted, size preserved
        assert box.width * box.height == round(np.sqrt(0.25 * 64 * 48)) ** 2

    def test_ten_centroids_ten_boxes(self):
        rng = np.random.default_rng(2)
        cents = rng.uniform(0, 3.9, size=(10, 2))
        keys = self.make_keys(cents, grid=(4, 4))
        boxes = keypoint_crop_boxes(keys, (64, 64), rng)
        assert len(boxes) == 10
        for box in boxes:
            box.validate((64, 64))
            assert 0.05 * 0.8 <= box.area_ratio <= 0.25 * 1.2


class TestLloydMonotonicity:
    def test_sse_never_increases(self):
        # cluster_keypoints asserts monotonicity internally; hammer it
        rng = np.random.default_rng(4)
        for trial in range(200):
            n = int(rng.integers(2, 30))
            pts = HighAttentionPoints(rng.integers(0, 8, size=(n, 2)),
                                      np.zeros(n, int),
                                      rng.uniform(0.05, 1.0, size=n), (8, 8))
            k = int(rng.integers(1, 6))
            cluster_keypoints(pts, k, np.random.default_rng(trial))
