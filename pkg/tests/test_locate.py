"""Tests for board location: normals, DoN filtering, clustering, ranking,
vertical trimming."""

import numpy as np
import pytest

from sslcal.geometry import CheckerboardSpec, PointCloud
from sslcal.locate import (
    SegmentationParams,
    crop_to_roi,
    difference_of_normals_filter,
    estimate_normals,
    euclidean_cluster,
    locate_target,
    rank_candidates,
    trim_vertical_bounds,
)

DARK, BRIGHT = 0.12, 0.78


def _grid_cloud(x0, x1, y0, y1, z, nx, ny, intensity=0.5):
    """Planar z=const grid with slightly irrational spacing so no pair sits
    exactly on a radius boundary."""
    xs = np.linspace(x0, x1, nx) + 1e-7
    ys = np.linspace(y0, y1, ny) + 2e-7
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    xyz = np.column_stack([gx.ravel(), gy.ravel(),
                           np.full(gx.size, float(z))])
    return PointCloud(xyz, np.full(len(xyz), intensity))


def _checkerboard_cloud(spec, rng, n=3000, distance=4.0):
    """Vertical checkered board, first corner at the physically lower end.

    Board frame x spans width, y spans height; placed so world z carries the
    board height (the trim stage assumes gravity along -z).
    """
    w = (spec.n_w + 1) * spec.g_s
    h = (spec.n_h + 1) * spec.g_s
    xy = np.column_stack([rng.uniform(0, w, n), rng.uniform(0, h, n)])
    parity = (np.floor(xy[:, 0] / spec.g_s) +
              np.floor(xy[:, 1] / spec.g_s)) % 2
    intensity = np.where(parity == 0, DARK, BRIGHT)
    rot = np.array([[0.0, 0.0, -1.0],
                    [-1.0, 0.0, 0.0],
                    [0.0, 1.0, 0.0]])
    t = np.array([distance, 0.5, -0.3])
    lifted = np.column_stack([xy, np.zeros(n)])
    xyz = lifted @ rot.T + t
    return PointCloud(xyz, intensity)


def _brute_normals(xyz, radius):
    """Independent per-point covariance normals (O(n^2), test only)."""
    n = len(xyz)
    out = np.full((n, 3), np.nan)
    d = np.linalg.norm(xyz[:, None, :] - xyz[None, :, :], axis=2)
    for i in range(n):
        nb = xyz[d[i] <= radius]
        if len(nb) < 3:
            continue
        cov = np.cov(nb.T)
        _, vecs = np.linalg.eigh(cov)
        normal = vecs[:, 0]
        if normal @ xyz[i] > 0:
            normal = -normal
        out[i] = normal
    return out


class TestSegmentationParams:
    def test_defaults_valid(self):
        params = SegmentationParams()
        assert params.r_small < params.r_large
        assert params.z_bins >= 8

    @pytest.mark.parametrize("kwargs", [
        {"r_small": 0.2, "r_large": 0.2},
        {"r_small": 0.3, "r_large": 0.2},
        {"r_small": 0.0},
        {"don_threshold": 0.0},
        {"don_threshold": 1.0},
        {"min_cluster": 500, "max_cluster": 500},
        {"min_cluster": 0},
        {"w": -0.1},
        {"z_bins": 7},
        {"cluster_tolerance": 0.0},
    ])
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(ValueError):
            SegmentationParams(**kwargs)


class TestEstimateNormals:
    def test_plane_normal_faces_sensor(self):
        cloud = _grid_cloud(-0.4, 0.4, -0.4, 0.4, 1.0, 41, 41)
        normals = estimate_normals(cloud, 0.05)
        interior = (np.abs(cloud.xyz[:, 0]) < 0.3) & \
                   (np.abs(cloud.xyz[:, 1]) < 0.3)
        assert np.all(np.isfinite(normals[interior]))
        # Sensor at the origin is below z=1, so the flipped normal is -z.
        assert np.allclose(normals[interior], [0.0, 0.0, -1.0], atol=1e-3)

    def test_two_perpendicular_planes(self):
        floor = _grid_cloud(-2.0, -1.001, -0.5, 0.5, 1.0, 50, 50)
        wall_y = np.linspace(-0.5, 0.5, 50) + 3e-7
        wall_z = np.linspace(1.001, 2.0, 50) + 5e-7
        gy, gz = np.meshgrid(wall_y, wall_z, indexing="ij")
        wall_xyz = np.column_stack([np.full(gy.size, -1.0), gy.ravel(),
                                    gz.ravel()])
        wall = PointCloud(wall_xyz, np.full(gy.size, 0.5))
        scene = PointCloud.concatenate([floor, wall])
        normals = estimate_normals(scene, 0.2)
        # Crease runs along the y axis at (x=-1, z=1).
        crease_dist = np.hypot(scene.xyz[:, 0] + 1.0, scene.xyz[:, 2] - 1.0)
        away = crease_dist > 0.25
        on_floor = np.arange(len(scene)) < len(floor)
        floor_n = normals[away & on_floor]
        wall_n = normals[away & ~on_floor]
        two_deg = np.cos(np.radians(2.0))
        # Sensor at the origin: below the floor, on the +x side of the wall.
        assert np.all(floor_n @ np.array([0.0, 0.0, -1.0]) > two_deg)
        assert np.all(wall_n @ np.array([1.0, 0.0, 0.0]) > two_deg)

    def test_isolated_points_flagged(self):
        xyz = np.array([[0.0, 0.0, 1.0], [10.0, 0.0, 1.0],
                        [0.0, 10.0, 1.0]])
        cloud = PointCloud(xyz, np.full(3, 0.5))
        normals = estimate_normals(cloud, 0.05)
        assert np.all(np.isnan(normals))

    def test_tiny_cloud_all_invalid(self):
        cloud = PointCloud(np.array([[1.0, 0.0, 0.0]]), np.array([0.5]))
        assert np.all(np.isnan(estimate_normals(cloud, 1.0)))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        xyz = np.column_stack([rng.uniform(0, 0.5, 300),
                               rng.uniform(0, 0.5, 300),
                               rng.normal(1.0, 0.002, 300)])
        cloud = PointCloud(xyz, np.full(300, 0.5))
        got = estimate_normals(cloud, 0.08)
        want = _brute_normals(xyz, 0.08)
        valid = np.isfinite(want[:, 0])
        assert np.array_equal(valid, np.isfinite(got[:, 0]))
        dots = np.einsum("ij,ij->i", got[valid], want[valid])
        assert np.all(dots > 1.0 - 1e-9)


class TestDifferenceOfNormals:
    def test_single_plane_retained(self):
        cloud = _grid_cloud(-0.5, 0.5, -0.5, 0.5, 1.0, 51, 51)
        params = SegmentationParams(min_cluster=5, max_cluster=10_000)
        kept = difference_of_normals_filter(cloud, params)
        assert len(kept) >= 0.99 * len(cloud)

    def test_crease_removed(self):
        # The wall is scanned at twice the floor's linear density, as when
        # the sensor faces it head-on; its pull on the large-scale normal is
        # what the filter keys on.
        floor = _grid_cloud(-2.0, -1.001, -0.4, 0.4, 1.0, 60, 40)
        wall_y = np.linspace(-0.4, 0.4, 80) + 3e-7
        wall_z = np.linspace(1.001, 1.8, 120) + 5e-7
        gy, gz = np.meshgrid(wall_y, wall_z, indexing="ij")
        wall = PointCloud(
            np.column_stack([np.full(gy.size, -1.0), gy.ravel(),
                             gz.ravel()]),
            np.full(gy.size, 0.5))
        scene = PointCloud.concatenate([floor, wall])
        params = SegmentationParams(min_cluster=5, max_cluster=100_000)
        kept = difference_of_normals_filter(scene, params)
        kept_rows = {tuple(p) for p in kept.xyz}
        crease_dist = np.hypot(scene.xyz[:, 0] + 1.0,
                               scene.xyz[:, 2] - 1.0)
        on_floor = np.arange(len(scene)) < len(floor)
        # Far points all survive; crease-adjacent floor points do not.
        far = crease_dist > 0.25
        far_kept = sum(tuple(p) in kept_rows for p in scene.xyz[far])
        assert far_kept >= 0.99 * far.sum()
        band = on_floor & (crease_dist > 0.03) & (crease_dist < 0.10)
        assert band.sum() > 0
        assert not any(tuple(p) in kept_rows for p in scene.xyz[band])

    def test_matches_brute_force_oracle(self):
        floor = _grid_cloud(-0.6, -0.001, -0.25, 0.25, 1.0, 30, 15)
        wall_y = np.linspace(-0.25, 0.25, 15) + 3e-7
        wall_z = np.linspace(1.001, 1.6, 30) + 5e-7
        gy, gz = np.meshgrid(wall_y, wall_z, indexing="ij")
        wall = PointCloud(
            np.column_stack([np.zeros(gy.size), gy.ravel(), gz.ravel()]),
            np.full(gy.size, 0.5))
        scene = PointCloud.concatenate([floor, wall])
        params = SegmentationParams(min_cluster=5, max_cluster=10_000)
        kept = difference_of_normals_filter(scene, params)
        n_s = _brute_normals(scene.xyz, params.r_small)
        n_l = _brute_normals(scene.xyz, params.r_large)
        don = np.linalg.norm(n_s - n_l, axis=1) / 2.0
        want = np.isfinite(don) & (don <= params.don_threshold)
        np.testing.assert_array_equal(
            kept.xyz, scene.xyz[want])

    def test_empty_cloud(self):
        empty = PointCloud(np.empty((0, 3)), np.empty(0))
        params = SegmentationParams()
        assert len(difference_of_normals_filter(empty, params)) == 0

    def test_subset_of_input(self):
        cloud = _grid_cloud(-0.3, 0.3, -0.3, 0.3, 1.0, 25, 25)
        params = SegmentationParams(min_cluster=5, max_cluster=10_000)
        kept = difference_of_normals_filter(cloud, params)
        rows = {tuple(p) for p in cloud.xyz}
        assert all(tuple(p) in rows for p in kept.xyz)


class TestEuclideanCluster:
    def test_two_patches(self):
        a = _grid_cloud(0.0, 0.2, 0.0, 0.2, 1.0, 10, 10)
        b = _grid_cloud(1.2, 1.4, 0.0, 0.2, 1.0, 8, 8)
        scene = PointCloud.concatenate([a, b])
        params = SegmentationParams(min_cluster=5, max_cluster=10_000)
        clusters = euclidean_cluster(scene, params)
        assert [len(c) for c in clusters] == [100, 64]

    def test_single_cluster_when_tolerance_spans(self):
        cloud = _grid_cloud(0.0, 0.5, 0.0, 0.5, 1.0, 12, 12)
        params = SegmentationParams(cluster_tolerance=2.0, min_cluster=5,
                                    max_cluster=10_000)
        clusters = euclidean_cluster(cloud, params)
        assert len(clusters) == 1
        assert len(clusters[0]) == len(cloud)

    def test_size_filter(self):
        a = _grid_cloud(0.0, 0.2, 0.0, 0.2, 1.0, 10, 10)
        b = _grid_cloud(1.2, 1.3, 0.0, 0.1, 1.0, 3, 3)
        scene = PointCloud.concatenate([a, b])
        params = SegmentationParams(min_cluster=20, max_cluster=10_000)
        clusters = euclidean_cluster(scene, params)
        assert len(clusters) == 1
        assert len(clusters[0]) == 100

    def test_partition(self):
        rng = np.random.default_rng(3)
        xyz = rng.uniform(0, 1, (200, 3))
        cloud = PointCloud(xyz, np.full(200, 0.5))
        params = SegmentationParams(cluster_tolerance=0.15, min_cluster=1,
                                    max_cluster=10_000)
        clusters = euclidean_cluster(cloud, params)
        rows = np.concatenate([c.xyz for c in clusters])
        assert rows.shape == xyz.shape
        seen = {tuple(p) for p in rows}
        assert len(seen) == 200
        assert seen == {tuple(p) for p in xyz}

    def test_empty(self):
        empty = PointCloud(np.empty((0, 3)), np.empty(0))
        assert euclidean_cluster(empty, SegmentationParams()) == []


class TestRankCandidates:
    SPEC = CheckerboardSpec(n_w=7, n_h=5, g_s=0.08)

    def test_single_cluster_returned(self):
        cloud = _grid_cloud(0.0, 0.2, 0.0, 0.2, 1.0, 10, 10)
        assert rank_candidates([cloud], self.SPEC) is cloud

    def test_board_beats_blank_wall(self):
        rng = np.random.default_rng(7)
        board = _checkerboard_cloud(self.SPEC, rng, n=2500)
        wall = _grid_cloud(0.0, 0.64, 0.0, 0.48, 2.5, 50, 50)
        assert rank_candidates([wall, board], self.SPEC) is board
        assert rank_candidates([board, wall], self.SPEC) is board

    def test_empty_list(self):
        with pytest.raises(ValueError, match="no candidates"):
            rank_candidates([], self.SPEC)


class TestTrimVerticalBounds:
    SPEC = CheckerboardSpec(n_w=7, n_h=5, g_s=0.08)  # height 0.48 m

    def _board_slab(self, rng, n=2000, z0=0.0):
        """Vertical slab with the physical height of SPEC's board."""
        h = (self.SPEC.n_h + 1) * self.SPEC.g_s
        w = (self.SPEC.n_w + 1) * self.SPEC.g_s
        xyz = np.column_stack([rng.uniform(-w / 2, w / 2, n),
                               np.full(n, 4.0),
                               rng.uniform(z0, z0 + h, n)])
        return PointCloud(xyz, np.full(n, 0.5))

    def test_floating_board_untouched(self):
        rng = np.random.default_rng(5)
        board = self._board_slab(rng)
        params = SegmentationParams()
        kept = trim_vertical_bounds(board, self.SPEC, params)
        assert len(kept) >= 0.99 * len(board)

    def test_pole_removed(self):
        rng = np.random.default_rng(6)
        board = self._board_slab(rng, n=2000, z0=0.0)
        n_pole = 300
        pole_xyz = np.column_stack([rng.uniform(-0.02, 0.02, n_pole),
                                    np.full(n_pole, 4.0),
                                    rng.uniform(-0.30, 0.0, n_pole)])
        pole = PointCloud(pole_xyz, np.full(n_pole, 0.5),
                          labels={"is_pole": np.ones(n_pole)})
        board = PointCloud(board.xyz, board.intensity,
                           labels={"is_pole": np.zeros(len(board))})
        cluster = PointCloud.concatenate([pole, board])
        params = SegmentationParams()
        kept = trim_vertical_bounds(cluster, self.SPEC, params)
        # Bin width for this span; the cut may keep at most one bin of pole.
        dz = (cluster.xyz[:, 2].max() - cluster.xyz[:, 2].min()) / \
            params.z_bins
        pole_kept = kept.labels["is_pole"] == 1
        assert kept.labels["is_pole"].sum() <= (pole_xyz[:, 2] >
                                                -1.5 * dz).sum()
        assert np.all(kept.xyz[pole_kept, 2] > -1.5 * dz)
        board_kept = (kept.labels["is_pole"] == 0).sum()
        assert board_kept == len(board)

    def test_w_zero_pure_derivative(self):
        rng = np.random.default_rng(8)
        # Narrow column below a wide slab; only one width jump exists, so
        # with w=0 the cut lands exactly there.
        n_col, n_slab = 500, 1500
        col = np.column_stack([rng.uniform(-0.01, 0.01, n_col),
                               rng.uniform(-0.01, 0.01, n_col),
                               rng.uniform(0.0, 1.0, n_col)])
        slab = np.column_stack([rng.uniform(-0.5, 0.5, n_slab),
                                rng.uniform(-0.5, 0.5, n_slab),
                                rng.uniform(1.0, 1.5, n_slab)])
        cluster = PointCloud(np.vstack([col, slab]),
                             np.full(n_col + n_slab, 0.5))
        params = SegmentationParams(w=0.0, z_bins=30)
        kept = trim_vertical_bounds(cluster, self.SPEC, params)
        dz = 1.5 / 30
        assert np.all(kept.xyz[:, 2] > 1.0 - 1.5 * dz)
        assert (kept.xyz[:, 2] >= 1.0).sum() == n_slab

    def test_small_cluster_warns_untrimmed(self):
        xyz = np.random.default_rng(0).uniform(0, 1, (10, 3))
        cluster = PointCloud(xyz, np.full(10, 0.5))
        params = SegmentationParams(z_bins=32)
        with pytest.warns(RuntimeWarning, match="untrimmed"):
            kept = trim_vertical_bounds(cluster, self.SPEC, params)
        assert len(kept) == 10

    def test_subset_of_input(self):
        rng = np.random.default_rng(9)
        board = self._board_slab(rng, n=800)
        kept = trim_vertical_bounds(board, self.SPEC, SegmentationParams())
        rows = {tuple(p) for p in board.xyz}
        assert all(tuple(p) in rows for p in kept.xyz)


class TestLocateTarget:
    SPEC = CheckerboardSpec(n_w=7, n_h=5, g_s=0.08)

    def _scene(self, rng):
        board = _checkerboard_cloud(self.SPEC, rng, n=3000)
        ground = _grid_cloud(2.0, 6.0, -1.5, 2.5, -1.6, 90, 90)
        board = PointCloud(board.xyz, board.intensity,
                           labels={"is_board": np.ones(len(board))})
        ground = PointCloud(ground.xyz, ground.intensity,
                            labels={"is_board": np.zeros(len(ground))})
        return PointCloud.concatenate([board, ground])

    def test_finds_board(self):
        scene = self._scene(np.random.default_rng(12))
        params = SegmentationParams(min_cluster=100, max_cluster=50_000)
        picked = locate_target(scene, self.SPEC, params)
        frac = picked.labels["is_board"].mean()
        assert frac >= 0.95
        assert picked.labels["is_board"].sum() >= \
            0.9 * scene.labels["is_board"].sum()

    def test_roi_bypass(self):
        scene = self._scene(np.random.default_rng(13))
        roi = np.array([3.0, -0.3, -0.5, 5.0, 0.7, 0.5])
        picked = locate_target(scene, self.SPEC, SegmentationParams(),
                               roi=roi)
        assert np.all(picked.labels["is_board"] == 1)
        inside = np.all((scene.xyz >= roi[:3]) & (scene.xyz <= roi[3:]),
                        axis=1)
        assert len(picked) == inside.sum()

    def test_empty_roi_raises(self):
        scene = self._scene(np.random.default_rng(14))
        roi = np.array([100.0, 100.0, 100.0, 101.0, 101.0, 101.0])
        with pytest.raises(ValueError, match="no candidates"):
            locate_target(scene, self.SPEC, SegmentationParams(), roi=roi)

    def test_crop_to_roi_box(self):
        xyz = np.array([[0.5, 0.5, 0.5], [2.0, 0.5, 0.5], [0.5, 0.9, 0.1]])
        cloud = PointCloud(xyz, np.full(3, 0.5))
        out = crop_to_roi(cloud, np.array([0, 0, 0, 1, 1, 1]))
        assert len(out) == 2

    def test_no_smooth_points_raises(self):
        # A cloud too sparse for normal support yields no candidates.
        rng = np.random.default_rng(15)
        xyz = rng.uniform(0, 50, (300, 3))
        cloud = PointCloud(xyz, np.full(300, 0.5))
        params = SegmentationParams(min_cluster=10, max_cluster=1000)
        with pytest.raises(ValueError, match="no candidates"):
            locate_target(cloud, self.SPEC, params)
