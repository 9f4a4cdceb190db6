import itertools

import numpy as np
import pytest

from wholebody import perception as P
from wholebody.errors import EmptyCloud, NotFound
from wholebody.kinematics import FrameTransform, rotation_about


def make_cloud(xyz, frame="cam"):
    xyz = np.asarray(xyz, dtype=float)
    pts = np.hstack([xyz, np.full((len(xyz), 3), 128.0)])
    return P.CameraCloud(pts, frame)


def rand_transform(rng):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return FrameTransform(rotation_about(axis, rng.uniform(-3, 3)),
                          rng.standard_normal(3))


class TestFuse:
    def test_identity(self):
        c = make_cloud([[0.1, 0.2, 0.3]])
        out = P.fuse_clouds([c], {"cam": FrameTransform.identity()})
        np.testing.assert_array_equal(out.points, c.points)

    def test_translation(self):
        c = make_cloud([[0.0, 0.0, 0.0]])
        t = FrameTransform(np.eye(3), np.array([1.0, 0, 0]))
        out = P.fuse_clouds([c], {"cam": t})
        np.testing.assert_allclose(out.points[0, :3], [1.0, 0, 0])

    def test_union_cardinality(self):
        rng = np.random.default_rng(0)
        a = make_cloud(rng.standard_normal((10, 3)), "a")
        b = make_cloud(rng.standard_normal((20, 3)), "b")
        out = P.fuse_clouds([a, b], {"a": FrameTransform.identity(),
                                     "b": FrameTransform.identity()})
        assert len(out) == 30
        assert out.source_counts == {"a": 10, "b": 20}

    def test_missing_transform(self):
        with pytest.raises(NotFound):
            P.fuse_clouds([make_cloud([[0, 0, 0]])], {})

    def test_equivariance(self):
        rng = np.random.default_rng(4)
        clouds = [make_cloud(rng.standard_normal((15, 3)), f"c{i}") for i in range(3)]
        transforms = {f"c{i}": rand_transform(rng) for i in range(3)}
        g = rand_transform(rng)
        fused = P.fuse_clouds(clouds, transforms)
        moved_after = g.apply(fused.points[:, :3])
        pre = {k: g.compose(t) for k, t in transforms.items()}
        moved_before = P.fuse_clouds(clouds, pre).points[:, :3]
        assert np.abs(moved_after - moved_before).max() < 1e-9

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            make_cloud([[np.nan, 0, 0]])


class TestCrop:
    BOX = P.SpatialLimits((-1, 1), (-1, 1), (-1, 1))

    def test_all_inside_identity(self):
        rng = np.random.default_rng(1)
        c = P.EgoPointCloud(np.hstack([rng.uniform(-1, 1, (50, 3)),
                                       rng.uniform(0, 255, (50, 3))]))
        out = P.crop(c, self.BOX)
        np.testing.assert_array_equal(out.points, c.points)

    def test_outside_removed(self):
        c = P.EgoPointCloud(np.array([[0, 0, 0, 1, 2, 3], [2, 0, 0, 4, 5, 6.0]]))
        out = P.crop(c, self.BOX)
        assert len(out) == 1
        np.testing.assert_array_equal(out.points[0, :3], [0, 0, 0])

    def test_partition_count(self):
        rng = np.random.default_rng(2)
        pts = np.hstack([rng.uniform(-2, 2, (500, 3)), rng.uniform(0, 255, (500, 3))])
        c = P.EgoPointCloud(pts)
        inside = P.crop(c, self.BOX)
        outside_mask = ~np.all((pts[:, :3] >= -1) & (pts[:, :3] <= 1), axis=1)
        assert len(inside) + int(outside_mask.sum()) == len(c)


def brute_force_greedy(xyz, n, seed):
    """Reference greedy FPS by exhaustive min-distance evaluation."""
    chosen = [seed]
    while len(chosen) < n:
        best, best_d = None, -1.0
        for i in range(len(xyz)):
            d = min(np.linalg.norm(xyz[i] - xyz[j]) for j in chosen)
            if d > best_d + 1e-15:
                best, best_d = i, d
        chosen.append(best)
    return chosen


class TestFps:
    def test_square_corners_beat_center(self):
        # after two opposite corners, remaining corners (min dist 1) beat the
        # center (min dist sqrt(2)/2)
        pts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0.5, 0.5, 0.0]])
        idx = P.fps_indices(pts, 4, seed_index=0)
        assert set(idx) == {0, 1, 2, 3}

    def test_n_at_least_cloud_returns_all_in_order(self):
        rng = np.random.default_rng(3)
        c = P.EgoPointCloud(np.hstack([rng.standard_normal((7, 3)),
                                       rng.uniform(0, 255, (7, 3))]))
        out = P.fps_downsample(c, 7)
        np.testing.assert_array_equal(out.points, c.points)
        out2 = P.fps_downsample(c, 20)
        np.testing.assert_array_equal(out2.points, c.points)

    def test_n_one_returns_seed(self):
        rng = np.random.default_rng(5)
        c = P.EgoPointCloud(np.hstack([rng.standard_normal((9, 3)),
                                       rng.uniform(0, 255, (9, 3))]))
        out = P.fps_downsample(c, 1, seed_index=4)
        np.testing.assert_array_equal(out.points[0], c.points[4])

    def test_matches_brute_force_greedy(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            m = rng.integers(2, 13)
            n = int(rng.integers(1, m))  # n == m is original-order passthrough
            xyz = rng.standard_normal((m, 3))
            seed = int(rng.integers(0, m))
            got = list(P.fps_indices(xyz, n, seed))
            want = brute_force_greedy(xyz, n, seed)
            assert got == want

    def test_subset_of_input(self):
        rng = np.random.default_rng(7)
        pts = np.hstack([rng.standard_normal((40, 3)), rng.uniform(0, 255, (40, 3))])
        c = P.EgoPointCloud(pts)
        out = P.fps_downsample(c, 12)
        rows = {tuple(r) for r in pts}
        assert all(tuple(r) in rows for r in out.points)


class TestNormalize:
    BOX = P.SpatialLimits((-2, 2), (0, 1), (-1, 3))

    def test_rgb_scaling(self):
        pts = np.array([[0, 0.5, 1, 255, 0, 128.0]])
        out = P.normalize_for_policy(P.EgoPointCloud(pts), self.BOX, n_points=4)
        assert out[0, 3] == 1.0
        assert out[0, 4] == 0.0

    def test_midpoint_maps_to_zero(self):
        pts = np.array([[0.0, 0.5, 1.0, 10, 10, 10]])
        out = P.normalize_for_policy(P.EgoPointCloud(pts), self.BOX, n_points=1)
        np.testing.assert_allclose(out[0, :3], 0.0, atol=1e-12)

    def test_hi_corner_maps_to_one(self):
        pts = np.array([[2.0, 1.0, 3.0, 10, 10, 10]])
        out = P.normalize_for_policy(P.EgoPointCloud(pts), self.BOX, n_points=1)
        np.testing.assert_allclose(out[0, :3], 1.0)

    def test_padding_round_robin(self):
        pts = np.array([[0, 0.5, 1, 1, 2, 3.0], [1, 0.5, 1, 4, 5, 6.0]])
        with pytest.warns(UserWarning):
            out = P.normalize_for_policy(P.EgoPointCloud(pts), self.BOX, n_points=5)
        assert out.shape == (5, 6)
        np.testing.assert_array_equal(out[0], out[2])
        np.testing.assert_array_equal(out[1], out[3])

    def test_empty_cloud(self):
        with pytest.raises(EmptyCloud):
            P.normalize_for_policy(P.EgoPointCloud(np.zeros((0, 6))), self.BOX)

    def test_uncropped_rejected(self):
        pts = np.array([[5.0, 0.5, 1.0, 1, 1, 1]])
        with pytest.raises(ValueError):
            P.normalize_for_policy(P.EgoPointCloud(pts), self.BOX, n_points=1)

    def test_symmetric_division_mode(self):
        box = P.SpatialLimits((-2, 2), (-2, 2), (-4, 4))
        pts = np.array([[1.0, -2.0, 2.0, 0, 0, 0]])
        out = P.normalize_for_policy(P.EgoPointCloud(pts), box, n_points=1,
                                     symmetric_division=True)
        np.testing.assert_allclose(out[0, :3], [0.5, -1.0, 0.5])

    def test_range_contract(self):
        rng = np.random.default_rng(8)
        box = P.SpatialLimits((-1, 1), (-1, 1), (-1, 1))
        pts = np.hstack([rng.uniform(-1, 1, (64, 3)), rng.uniform(0, 255, (64, 3))])
        out = P.normalize_for_policy(P.EgoPointCloud(pts), box, n_points=64)
        P.assert_policy_cloud(out, 64)


class TestSnapshot:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        pts = np.hstack([rng.standard_normal((17, 3)).round(6),
                         rng.integers(0, 256, (17, 3)).astype(float)])
        c = P.EgoPointCloud(pts, {"head": 10, "left": 7})
        p = tmp_path / "cloud.txt"
        P.save_snapshot(p, c)
        c2 = P.load_snapshot(p)
        np.testing.assert_allclose(c2.points, c.points, atol=1e-9)
        assert c2.source_counts == c.source_counts

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.txt"
        p.write_text("nope\n")
        with pytest.raises(ValueError):
            P.load_snapshot(p)
