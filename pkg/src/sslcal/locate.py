"""Locating the checkerboard cluster inside the integrated cloud.

Stage order: difference-of-normals filtering strips creases, edges and
clutter; euclidean clustering splits the smooth remainder into candidate
patches; candidates are ranked by how well an (optimized) checker-pattern
alignment explains them; finally the winning cluster is trimmed along z to
cut away whatever holds the board up.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .corners3d import AlignmentBudget, build_standard_model, estimate_alignment
from .geometry import CheckerboardSpec, Plane, PointCloud
from .refine import least_squares_plane


@dataclass(frozen=True)
class SegmentationParams:
    r_small: float = 0.05
    r_large: float = 0.2
    don_threshold: float = 0.25
    cluster_tolerance: float = 0.1
    min_cluster: int = 200
    max_cluster: int = 200_000
    w: float = 0.5
    z_bins: int = 32

    def __post_init__(self) -> None:
        if not (0.0 < self.r_small < self.r_large):
            raise ValueError("need 0 < r_small < r_large")
        if not (0.0 < self.don_threshold < 1.0):
            raise ValueError("don_threshold must be in (0, 1)")
        if self.cluster_tolerance <= 0:
            raise ValueError("cluster_tolerance must be positive")
        if not (0 < self.min_cluster < self.max_cluster):
            raise ValueError("need 0 < min_cluster < max_cluster")
        if self.w < 0:
            raise ValueError("w must be >= 0")
        if self.z_bins < 8:
            raise ValueError("z_bins must be >= 8")


def estimate_normals(cloud: PointCloud, radius: float) -> np.ndarray:
    """Per-point unit normals from neighborhood covariance within radius.

    Normals are flipped to face the sensor origin (n . p < 0). Points with
    fewer than 3 neighborhood members get NaN rows as the invalid marker.
    """
    n = len(cloud)
    out = np.full((n, 3), np.nan)
    if n < 3:
        return out
    xyz = cloud.xyz
    tree = cKDTree(xyz)
    # Chunked so the flat neighbor gather stays bounded on dense clouds.
    chunk = 4096
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        lists = tree.query_ball_point(xyz[lo:hi], radius, workers=-1)
        counts = np.fromiter((len(lst) for lst in lists), dtype=np.int64,
                             count=hi - lo)
        valid = counts >= 3
        if not np.any(valid):
            continue
        flat = np.concatenate([lists[i] for i in np.flatnonzero(valid)])
        seg_counts = counts[valid]
        offsets = np.concatenate([[0], np.cumsum(seg_counts)[:-1]])
        pts = xyz[flat]
        sums = np.add.reduceat(pts, offsets, axis=0)
        means = sums / seg_counts[:, None]
        # Six unique second moments, segmented via reduceat: much faster
        # than a per-point loop on integrated clouds.
        sq = pts[:, (0, 1, 2, 0, 0, 1)] * pts[:, (0, 1, 2, 1, 2, 2)]
        second = np.add.reduceat(sq, offsets, axis=0) / seg_counts[:, None]
        msq = means[:, (0, 1, 2, 0, 0, 1)] * means[:, (0, 1, 2, 1, 2, 2)]
        m = second - msq
        cov = np.empty((len(m), 3, 3))
        cov[:, 0, 0], cov[:, 1, 1], cov[:, 2, 2] = m[:, 0], m[:, 1], m[:, 2]
        cov[:, 0, 1] = cov[:, 1, 0] = m[:, 3]
        cov[:, 0, 2] = cov[:, 2, 0] = m[:, 4]
        cov[:, 1, 2] = cov[:, 2, 1] = m[:, 5]
        _, eigvecs = np.linalg.eigh(cov)
        normals = eigvecs[:, :, 0]
        query = xyz[lo:hi][valid]
        flip = np.einsum("ij,ij->i", normals, query) > 0
        normals[flip] *= -1
        rows = np.arange(lo, hi)[valid]
        out[rows] = normals
    return out


def difference_of_normals_filter(cloud: PointCloud,
                                 params: SegmentationParams) -> PointCloud:
    """Keep points whose normals agree across the two support radii."""
    if len(cloud) == 0:
        return cloud
    n_small = estimate_normals(cloud, params.r_small)
    n_large = estimate_normals(cloud, params.r_large)
    don = np.linalg.norm(n_small - n_large, axis=1) / 2.0
    keep = np.isfinite(don) & (don <= params.don_threshold)
    return cloud.select(keep)


def euclidean_cluster(cloud: PointCloud,
                      params: SegmentationParams) -> list[PointCloud]:
    """Connected components under the cluster_tolerance adjacency relation,
    size-filtered and sorted by size descending (ties by first point index)."""
    n = len(cloud)
    if n == 0:
        return []
    tree = cKDTree(cloud.xyz)
    pairs = tree.query_pairs(params.cluster_tolerance, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])),
                       shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    clusters = []
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        if params.min_cluster <= len(idx) <= params.max_cluster:
            clusters.append((len(idx), idx[0], cloud.select(idx)))
    clusters.sort(key=lambda item: (-item[0], item[1]))
    return [c for _, _, c in clusters]


_RANK_BUDGET = AlignmentBudget(max_iterations=40, n_theta=2,
                               both_parities=True, polish=False)


def _alignment_cost_per_point(cluster: PointCloud,
                              spec: CheckerboardSpec) -> float:
    plane = least_squares_plane(cluster.xyz)
    model = build_standard_model(spec)
    try:
        alignment = estimate_alignment(cluster, plane, model,
                                       budget=_RANK_BUDGET)
    except ValueError:
        return np.inf
    return alignment.cost / len(cluster)


def rank_candidates(clusters: list[PointCloud],
                    spec: CheckerboardSpec) -> PointCloud:
    """Pick the cluster a checker-pattern alignment explains best.

    Cost is the optimized pattern-similarity sum divided by point count so
    clusters of different sizes are comparable; exact ties go to the larger
    cluster (the input order, which is size descending).
    """
    if not clusters:
        raise ValueError("no candidates")
    if len(clusters) == 1:
        return clusters[0]
    costs = np.array([_alignment_cost_per_point(c, spec) for c in clusters])
    if not np.any(np.isfinite(costs)):
        return clusters[0]
    return clusters[int(np.argmin(costs))]


def trim_vertical_bounds(cluster: PointCloud, spec: CheckerboardSpec,
                         params: SegmentationParams) -> PointCloud:
    """Cut away the upholder below the board via the width-profile jump.

    The per-bin width H(z) is the 90th-percentile radial extent about the
    xy-centroid. The score at each bin center is the forward finite
    difference of H minus w * the relative mismatch between the span above
    the center and the physical board height; the best center becomes
    Z_down. A virtual zero-width bin below the lowest point lets a clean
    floating board place Z_down beneath itself and lose nothing.
    """
    n = len(cluster)
    if n < params.z_bins:
        warnings.warn("cluster smaller than z_bins; returned untrimmed",
                      RuntimeWarning, stacklevel=2)
        return cluster
    z = cluster.xyz[:, 2]
    z_top = float(z.max())
    z_min = float(z.min())
    if z_top - z_min < 1e-12:
        return cluster
    centroid = cluster.xyz[:, :2].mean(axis=0)
    radial = np.linalg.norm(cluster.xyz[:, :2] - centroid, axis=1)
    edges = np.linspace(z_min, z_top, params.z_bins + 1)
    which = np.clip(np.digitize(z, edges) - 1, 0, params.z_bins - 1)
    width = np.zeros(params.z_bins)
    for b in range(params.z_bins):
        members = radial[which == b]
        if len(members):
            width[b] = np.percentile(members, 90)
    dz = edges[1] - edges[0]
    l_board = (spec.n_h + 1) * spec.g_s
    # Candidate centers: the virtual empty bin below the cluster plus every
    # real bin that has a bin above it for the forward difference.
    padded = np.concatenate([[0.0], width])
    centers = np.concatenate([[z_min - 0.5 * dz],
                              0.5 * (edges[:-2] + edges[1:-1])])
    jumps = (padded[1:] - padded[:-1]) / dz
    mismatch = np.abs((z_top - centers) - l_board) / l_board
    scores = jumps - params.w * mismatch
    z_down = float(centers[int(np.argmax(scores))])
    keep = (z > z_down) & (z <= z_top)
    if not np.any(keep):
        return cluster
    return cluster.select(keep)


def crop_to_roi(cloud: PointCloud, roi: np.ndarray) -> PointCloud:
    """Axis-aligned box crop: roi = (x0, y0, z0, x1, y1, z1)."""
    roi = np.asarray(roi, dtype=np.float64).reshape(6)
    lo = np.minimum(roi[:3], roi[3:])
    hi = np.maximum(roi[:3], roi[3:])
    inside = np.all((cloud.xyz >= lo) & (cloud.xyz <= hi), axis=1)
    return cloud.select(inside)


_LOCATE_THIN_ABOVE = 60_000
_LOCATE_VOXEL = 0.02


def _voxel_thin(cloud: PointCloud, cell: float) -> np.ndarray:
    """Indices of one representative (lowest index) per occupied voxel."""
    keys = np.floor(cloud.xyz / cell).astype(np.int64)
    order = np.lexsort((np.arange(len(cloud)), keys[:, 2], keys[:, 1],
                        keys[:, 0]))
    sorted_keys = keys[order]
    first = np.ones(len(cloud), dtype=bool)
    first[1:] = np.any(sorted_keys[1:] != sorted_keys[:-1], axis=1)
    return np.sort(order[first])


def locate_target(cloud: PointCloud, spec: CheckerboardSpec,
                  params: SegmentationParams,
                  roi: np.ndarray | None = None) -> PointCloud:
    """Full location chain, or a plain box crop when an ROI is given.

    Segmentation runs on a voxel-thinned working cloud when the integrated
    cloud is large (normal estimation cost grows with neighborhood size);
    membership is transferred back to the full cloud by proximity.
    """
    if roi is not None:
        picked = crop_to_roi(cloud, roi)
        if len(picked) == 0:
            raise ValueError("no candidates: ROI selects no points")
        return picked
    work = cloud
    thinned = len(cloud) > _LOCATE_THIN_ABOVE
    if thinned:
        work = cloud.select(_voxel_thin(cloud, _LOCATE_VOXEL))
    ratio = len(work) / max(len(cloud), 1)
    scaled = params if not thinned else SegmentationParams(
        r_small=params.r_small, r_large=params.r_large,
        don_threshold=params.don_threshold,
        cluster_tolerance=params.cluster_tolerance,
        min_cluster=max(8, int(params.min_cluster * ratio)),
        max_cluster=max(9, int(params.max_cluster * ratio) + 1),
        w=params.w, z_bins=params.z_bins)
    smooth = difference_of_normals_filter(work, scaled)
    clusters = euclidean_cluster(smooth, scaled)
    if not clusters:
        raise ValueError("no candidates")
    board = rank_candidates(clusters, spec)
    board = trim_vertical_bounds(board, spec, scaled)
    if thinned:
        # Pull in the full-resolution points near the thinned cluster.
        tree = cKDTree(board.xyz)
        dist, _ = tree.query(cloud.xyz, k=1, workers=-1)
        board = cloud.select(dist <= params.cluster_tolerance)
        board = trim_vertical_bounds(board, spec, params)
    return board
