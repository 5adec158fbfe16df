"""Voxel-hashed point map: exact k-NN and plane fitting."""

import numpy as np
import pytest

from splatslam.lidar_map import INSERT_VOXEL, LidarPointMap, fit_plane, fit_planes_batch


def linear_knn(points, query, k):
    d = np.linalg.norm(points - query, axis=1)
    order = np.argsort(d, kind="stable")[:k]
    return points[order], d[order]


class TestKnn:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_linear_scan(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-8.0, 8.0, size=(4000, 3))
        m = LidarPointMap()
        m.insert(pts)
        stored = m.points
        queries = rng.uniform(-9.0, 9.0, size=(100, 3))
        for q in queries:
            got = m.knn(q, k=5)
            _, want_d = linear_knn(stored, q, 5)
            got_d = np.linalg.norm(got - q, axis=1)
            assert np.allclose(np.sort(got_d), want_d, atol=1e-12)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(7)
        pts = rng.uniform(-5.0, 5.0, size=(3000, 3))
        m = LidarPointMap()
        m.insert(pts)
        queries = rng.uniform(-5.5, 5.5, size=(200, 3))
        nbrs, counts = m.knn_batch(queries, k=5)
        stored = m.points
        for i, q in enumerate(queries):
            assert counts[i] == 5
            got_d = np.sort(np.linalg.norm(nbrs[i, : counts[i]] - q, axis=1))
            _, want_d = linear_knn(stored, q, 5)
            assert np.allclose(got_d, want_d, atol=1e-12)

    def test_fewer_points_than_k(self):
        m = LidarPointMap()
        m.insert(np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]))
        got = m.knn(np.zeros(3), k=5)
        assert len(got) == 2
        nbrs, counts = m.knn_batch(np.zeros((1, 3)), k=5)
        assert counts[0] == 2

    def test_empty_map(self):
        m = LidarPointMap()
        assert len(m) == 0
        assert m.knn(np.zeros(3), k=5).shape == (0, 3)


class TestInsert:
    def test_duplicate_single_occupant(self):
        m = LidarPointMap()
        p = np.array([[0.33, 0.44, 0.55]])
        added = m.insert(p)
        assert added == 1
        # Same voxel (0.1 m lattice) gets no second occupant.
        added = m.insert(p + 0.2 * INSERT_VOXEL)
        assert added == 0
        assert len(m) == 1

    def test_monotone_size(self):
        rng = np.random.default_rng(3)
        m = LidarPointMap()
        prev = 0
        for _ in range(10):
            m.insert(rng.uniform(-2, 2, size=(200, 3)))
            assert len(m) >= prev
            prev = len(m)

    def test_batch_dedupe_within_call(self):
        m = LidarPointMap()
        pts = np.tile(np.array([[1.0, 2.0, 3.0]]), (5, 1))
        assert m.insert(pts) == 1


class TestFitPlane:
    def test_axis_plane(self):
        pts = np.array([[0.0, 0.0, 2.0], [1.0, 0.0, 2.0], [0.0, 1.0, 2.0],
                        [1.0, 1.0, 2.0], [0.5, 0.3, 2.0]])
        res = fit_plane(pts)
        assert res is not None
        n, d = res
        assert np.allclose(np.abs(n), [0, 0, 1], atol=1e-12)
        # n.p + d = 0 on the plane, either normal sign.
        assert abs(n[2] * 2.0 + d) < 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_coplanar_random(self, seed):
        rng = np.random.default_rng(seed)
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        basis = np.linalg.svd(n[None])[2][1:]
        pts = rng.uniform(-1, 1, size=(5, 2)) @ basis + 3.0 * n
        res = fit_plane(pts)
        assert res is not None
        nn, d = res
        dist = np.abs(pts @ nn + d)
        assert np.all(dist < 1e-10)

    def test_outlier_degenerate(self):
        pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0],
                        [1.0, 1.0, 0.0], [0.5, 0.5, 0.2]])
        assert fit_plane(pts) is None

    def test_collinear_degenerate(self):
        t = np.linspace(0, 1, 5)
        pts = np.stack([t, 2 * t, -t], axis=1)
        assert fit_plane(pts) is None

    def test_batch_matches_single(self):
        rng = np.random.default_rng(11)
        nbrs = rng.uniform(-1, 1, size=(40, 5, 3))
        # Flatten some into planes so both branches appear.
        for i in range(0, 40, 2):
            nbrs[i, :, 2] = 0.01 * rng.normal()
        counts = np.full(40, 5)
        counts[3] = 4  # short neighborhoods are invalid
        normals, ds, valid = fit_planes_batch(nbrs, counts)
        assert not valid[3]
        for i in range(40):
            if i == 3:
                continue
            single = fit_plane(nbrs[i])
            if single is None:
                assert not valid[i]
            else:
                assert valid[i]
                n1, d1 = single
                sign = np.sign(n1 @ normals[i]) or 1.0
                assert np.allclose(normals[i], sign * n1, atol=1e-9)
                assert np.isclose(ds[i], sign * d1, atol=1e-9)
