"""Plane refinement tests: RANSAC fit, band shrinking, ray flattening,
density capping.

Flattening math checked by hand: a ray through the origin hits plane
(a,b,c,d) at t = -d / (a*x + b*y + c*z), so scaling the point by t puts it
exactly on the plane while keeping its bearing.
"""

from __future__ import annotations

import warnings

import numpy as np
import pytest

from sslcal.geometry import CheckerboardSpec, Plane, PointCloud
from sslcal.refine import (
    RefinementParams,
    flatten_to_plane,
    grid_uniform_downsample,
    iterative_plane_refine,
    plane_basis,
    ransac_plane_fit,
    refine_board_cloud,
)


def _plane_cloud(rng: np.random.Generator, n: int, noise: float = 0.0,
                 z0: float = 3.0) -> PointCloud:
    """Points on z = z0 (x forward is irrelevant here), optional z noise."""
    xyz = np.column_stack([rng.uniform(-1, 1, n), rng.uniform(-1, 1, n),
                           np.full(n, z0) + rng.normal(0, noise, n) if noise
                           else np.full(n, z0)])
    return PointCloud(xyz, rng.uniform(0, 1, n))


def test_ransac_exact_plane_all_inliers():
    rng = np.random.default_rng(0)
    cloud = _plane_cloud(rng, 200)
    plane, mask = ransac_plane_fit(cloud, iterations=50, inlier_gate=0.01, seed=1)
    assert mask.all()
    # z = 3 plane, d < 0 convention: (0, 0, 1, -3)
    np.testing.assert_allclose([plane.a, plane.b, plane.c, plane.d],
                               [0, 0, 1, -3], atol=1e-9)


def test_ransac_excludes_gross_outliers():
    rng = np.random.default_rng(2)
    cloud = _plane_cloud(rng, 200)
    n_out = 50
    stray = np.column_stack([rng.uniform(-1, 1, n_out),
                             rng.uniform(-1, 1, n_out),
                             3.0 + rng.uniform(0.2, 1.5, n_out) * rng.choice([-1, 1], n_out)])
    noisy = PointCloud(np.vstack([cloud.xyz, stray]), np.zeros(250))
    plane, mask = ransac_plane_fit(noisy, iterations=200, inlier_gate=0.02, seed=3)
    assert mask[:200].all()
    assert not mask[200:].any()


def test_ransac_three_points_unique_plane():
    cloud = PointCloud(np.array([[0.0, 0, 1], [1.0, 0, 1], [0.0, 1, 1]]),
                       np.zeros(3))
    plane, mask = ransac_plane_fit(cloud, iterations=10, inlier_gate=0.01, seed=0)
    assert mask.all()
    np.testing.assert_allclose([abs(plane.c), plane.d], [1.0, -1.0], atol=1e-12)


def test_ransac_degenerate_cloud():
    cloud = PointCloud(np.zeros((2, 3)), np.zeros(2))
    with pytest.raises(ValueError, match="degenerate cloud"):
        ransac_plane_fit(cloud, iterations=10, inlier_gate=0.01, seed=0)


def test_ransac_collinear_cloud():
    xyz = np.column_stack([np.linspace(0, 1, 10), np.zeros(10), np.ones(10)])
    cloud = PointCloud(xyz, np.zeros(10))
    with pytest.raises(ValueError, match="degenerate cloud"):
        ransac_plane_fit(cloud, iterations=20, inlier_gate=0.01, seed=0)


def test_ransac_deterministic_given_seed():
    rng = np.random.default_rng(4)
    cloud = _plane_cloud(rng, 300, noise=0.02)
    a = ransac_plane_fit(cloud, iterations=100, inlier_gate=0.03, seed=7)
    b = ransac_plane_fit(cloud, iterations=100, inlier_gate=0.03, seed=7)
    assert (a[0].a, a[0].b, a[0].c, a[0].d) == (b[0].a, b[0].b, b[0].c, b[0].d)
    np.testing.assert_array_equal(a[1], b[1])


def test_refine_noiseless_keeps_everything():
    rng = np.random.default_rng(5)
    cloud = _plane_cloud(rng, 150)
    plane, survivors = iterative_plane_refine(cloud, RefinementParams(), seed=0)
    assert len(survivors) == 150
    assert np.abs(plane.signed_distance(survivors.xyz)).max() < 1e-9


def test_refine_rms_decreases_and_masks_nest():
    rng = np.random.default_rng(6)
    cloud = _plane_cloud(rng, 4000, noise=0.02)
    plane, survivors, trace = iterative_plane_refine(
        cloud, RefinementParams(), seed=1, return_trace=True)
    assert len(trace) > 2
    counts = [m.sum() for m in trace]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    for earlier, later in zip(trace, trace[1:]):
        assert not np.any(later & ~earlier)  # strictly nested
    rms = []
    for mask in trace:
        pts = cloud.xyz[mask]
        centered = pts - pts.mean(axis=0)
        normal = np.linalg.eigh(np.cov(centered.T))[1][:, 0]
        rms.append(np.sqrt(np.mean((centered @ normal) ** 2)))
    assert all(a > b for a, b in zip(rms, rms[1:]))


def test_refine_two_parallel_planes_converges_to_one():
    rng = np.random.default_rng(8)
    near = _plane_cloud(rng, 400, z0=3.0)
    far = _plane_cloud(rng, 300, z0=3.5)
    both = PointCloud(np.vstack([near.xyz, far.xyz]), np.zeros(700))
    plane, survivors = iterative_plane_refine(
        both, RefinementParams(sigma0=0.05), seed=2)
    assert len(survivors) == 400
    assert abs(plane.d + 3.0) < 1e-6


def test_refine_collapse_error():
    # Six scattered non-coplanar points: a band cut strands fewer than 3
    # survivors, which must surface as an error, not a silent partial fit.
    xyz = np.array([[0.19008335, 0.58894504, 0.07159923],
                    [0.1175476, 0.8052666, 0.1195042],
                    [0.69893563, 0.79184304, 0.07941293],
                    [0.0852519, 0.86127204, 0.02362187],
                    [0.90114602, 0.90289573, 0.04650613],
                    [0.4181627, 0.46327559, 0.07585139]])
    cloud = PointCloud(xyz, np.zeros(6))
    with pytest.raises(ValueError, match="refinement collapsed"):
        iterative_plane_refine(
            cloud, RefinementParams(sigma0=0.05, shrink=0.3,
                                    max_iterations=8, ransac_iterations=20),
            seed=0)


def test_flatten_hand_example():
    # plane x = 2, point (1, 0.5, 0.5): t = 2 -> (2, 1, 1)
    plane = Plane(1, 0, 0, -2)
    cloud = PointCloud(np.array([[1.0, 0.5, 0.5]]), np.array([0.3]))
    out = flatten_to_plane(cloud, plane)
    np.testing.assert_allclose(out.xyz[0], [2.0, 1.0, 1.0], atol=1e-12)
    assert out.intensity[0] == 0.3


def test_flatten_on_plane_is_fixed_point():
    plane = Plane(0, 0, 1, -3)
    cloud = PointCloud(np.array([[0.4, -0.2, 3.0]]), np.array([0.5]))
    out = flatten_to_plane(cloud, plane)
    np.testing.assert_allclose(out.xyz, cloud.xyz, atol=1e-12)


def test_flatten_residual_and_idempotence():
    rng = np.random.default_rng(9)
    cloud = _plane_cloud(rng, 500, noise=0.03)
    plane = Plane(0, 0, 1, -3)
    once = flatten_to_plane(cloud, plane)
    assert np.abs(plane.signed_distance(once.xyz)).max() < 1e-9
    twice = flatten_to_plane(once, plane)
    np.testing.assert_allclose(twice.xyz, once.xyz, atol=1e-12)


def test_flatten_preserves_ray_direction():
    rng = np.random.default_rng(10)
    cloud = _plane_cloud(rng, 100, noise=0.05, z0=2.0)
    plane = Plane(0, 0, 1, -2)
    out = flatten_to_plane(cloud, plane)
    t = out.xyz[:, 2] / cloud.xyz[:, 2]
    assert (t > 0).all()
    np.testing.assert_allclose(out.xyz, cloud.xyz * t[:, None], atol=1e-12)


def test_flatten_drops_parallel_and_backward_rays():
    plane = Plane(1, 0, 0, -2)
    xyz = np.array([[1.0, 0.5, 0.5],   # fine
                    [0.0, 1.0, 0.0],   # ray parallel to plane
                    [-1.0, 0.0, 0.0]])  # flattens behind the sensor
    cloud = PointCloud(xyz, np.zeros(3))
    with pytest.warns(RuntimeWarning, match="dropped 2"):
        out = flatten_to_plane(cloud, plane)
    assert len(out) == 1


def test_downsample_under_cap_unchanged():
    rng = np.random.default_rng(11)
    cloud = _plane_cloud(rng, 50)
    plane = Plane(0, 0, 1, -3)
    params = RefinementParams(grid_cell=0.5, delta_rho=30)
    out = grid_uniform_downsample(cloud, plane, params, seed=0)
    assert len(out) == 50
    np.testing.assert_array_equal(out.xyz, cloud.xyz)


def test_downsample_caps_single_cell():
    rng = np.random.default_rng(12)
    xyz = np.column_stack([rng.uniform(0, 0.01, 100),
                           rng.uniform(0, 0.01, 100), np.full(100, 3.0)])
    cloud = PointCloud(xyz, np.zeros(100))
    plane = Plane(0, 0, 1, -3)
    params = RefinementParams(grid_cell=0.02, delta_rho=10)
    out = grid_uniform_downsample(cloud, plane, params, seed=1)
    assert len(out) == 10
    # Survivors are a subset of the originals, order preserved.
    orig = {tuple(p) for p in cloud.xyz}
    assert all(tuple(p) in orig for p in out.xyz)


def test_downsample_never_moves_points():
    rng = np.random.default_rng(13)
    cloud = _plane_cloud(rng, 400)
    plane = Plane(0, 0, 1, -3)
    params = RefinementParams(grid_cell=0.25, delta_rho=5)
    out = grid_uniform_downsample(cloud, plane, params, seed=2)
    orig = {tuple(p) for p in cloud.xyz}
    assert all(tuple(p) in orig for p in out.xyz)
    assert len(out) < 400


def test_downsample_deterministic():
    rng = np.random.default_rng(14)
    cloud = _plane_cloud(rng, 400)
    plane = Plane(0, 0, 1, -3)
    params = RefinementParams(grid_cell=0.25, delta_rho=5)
    a = grid_uniform_downsample(cloud, plane, params, seed=3)
    b = grid_uniform_downsample(cloud, plane, params, seed=3)
    np.testing.assert_array_equal(a.xyz, b.xyz)


def test_downsample_requires_resolved_cell():
    cloud = PointCloud(np.zeros((1, 3)), np.zeros(1))
    with pytest.raises(ValueError, match="grid_cell"):
        grid_uniform_downsample(cloud, Plane(0, 0, 1, 0),
                                RefinementParams(), seed=0)


def test_plane_basis_orthonormal():
    for plane in (Plane(0, 0, 1, -3), Plane(1, 0, 0, -2),
                  Plane.from_coefficients(1, 1, 1, -3)):
        e1, e2 = plane_basis(plane)
        assert np.linalg.norm(e1) == pytest.approx(1.0)
        assert np.linalg.norm(e2) == pytest.approx(1.0)
        assert abs(e1 @ e2) < 1e-12
        assert abs(e1 @ plane.normal) < 1e-12
        assert abs(e2 @ plane.normal) < 1e-12


def test_refine_board_cloud_chain():
    """Full chain on a noisy synthetic board: flat output, capped density."""
    rng = np.random.default_rng(15)
    spec = CheckerboardSpec(7, 5, 0.08)
    n = 6000
    y = rng.uniform(0, spec.board_width, n)
    z = rng.uniform(0, spec.board_height, n)
    xyz = np.column_stack([np.full(n, 4.0), y, z])
    # Axial (along-ray) noise like a real range error.
    rays = xyz / np.linalg.norm(xyz, axis=1, keepdims=True)
    xyz = xyz + rays * rng.normal(0, 0.02, n)[:, None]
    cloud = PointCloud(xyz, rng.uniform(0, 1, n))
    plane, refined = refine_board_cloud(cloud, spec, RefinementParams(), seed=0)
    assert np.abs(plane.signed_distance(refined.xyz)).max() < 1e-9
    assert 0 < len(refined) < n
    assert plane.d < 0
