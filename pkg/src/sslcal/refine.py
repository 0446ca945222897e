"""Board cloud refinement: plane fit, inlier shrinking, flattening, thinning.

The located board cluster is noisy in depth. A RANSAC plane anchors an
iterative inlier filter whose band shrinks geometrically; survivors are then
projected along their own sensor rays onto the plane (which preserves the
lateral position each ray actually sampled, unlike an orthogonal projection)
and thinned to a uniform density so the pattern alignment sees an unbiased
point distribution.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .geometry import CheckerboardSpec, Plane, PointCloud


@dataclass(frozen=True)
class RefinementParams:
    sigma0: float = 0.05
    shrink: float = 0.7
    max_iterations: int = 10
    ransac_iterations: int = 100
    grid_cell: float | None = None  # None -> g_s / 4
    delta_rho: int = 12

    def __post_init__(self) -> None:
        if self.sigma0 <= 0:
            raise ValueError("sigma0 must be positive")
        if not (0.0 < self.shrink < 1.0):
            raise ValueError("shrink must be in (0, 1)")
        if self.max_iterations < 1 or self.ransac_iterations < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.grid_cell is not None and self.grid_cell <= 0:
            raise ValueError("grid_cell must be positive")
        if self.delta_rho < 1:
            raise ValueError("delta_rho must be >= 1")


def least_squares_plane(xyz: np.ndarray) -> Plane:
    """Total-least-squares plane with the d < 0 sign convention."""
    centroid = xyz.mean(axis=0)
    cov = np.cov((xyz - centroid).T)
    _, vecs = np.linalg.eigh(cov)
    normal = vecs[:, 0]
    plane = Plane.from_point_normal(centroid, normal)
    return plane.flipped() if plane.d > 0 else plane


def ransac_plane_fit(cloud: PointCloud, iterations: int, inlier_gate: float,
                     seed: int) -> tuple[Plane, np.ndarray]:
    """Seeded RANSAC plane, returned as a least-squares refit of the widest
    consensus set (ties broken by lower inlier RMS, then hypothesis index).

    The plane is normalized so its d coefficient is negative, which makes the
    ray-flattening scalar positive for points in front of the sensor.
    """
    n = len(cloud)
    if n < 3:
        raise ValueError(f"degenerate cloud: need >= 3 points, got {n}")
    xyz = cloud.xyz
    rng = np.random.default_rng(seed)
    best: tuple[int, float, int] | None = None  # (-count, rms, index)
    best_mask: np.ndarray | None = None
    for it in range(iterations):
        i, j, k = rng.choice(n, size=3, replace=False)
        v1 = xyz[j] - xyz[i]
        v2 = xyz[k] - xyz[i]
        normal = np.cross(v1, v2)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal /= norm
        dist = np.abs((xyz - xyz[i]) @ normal)
        mask = dist < inlier_gate
        count = int(mask.sum())
        if count < 3:
            continue
        rms = float(np.sqrt(np.mean(dist[mask] ** 2)))
        key = (-count, rms, it)
        if best is None or key < best:
            best = key
            best_mask = mask
    if best_mask is None:
        raise ValueError("degenerate cloud: no non-collinear sample found")
    plane = least_squares_plane(xyz[best_mask])
    return plane, best_mask


def iterative_plane_refine(cloud: PointCloud, params: RefinementParams,
                           seed: int = 0,
                           return_trace: bool = False):
    """Shrink the inlier band geometrically around a re-fit plane.

    Starts from the RANSAC consensus, then repeats: keep survivors within
    the current sigma, least-squares refit, sigma *= shrink. Stops early
    once every survivor already sits inside the band (nothing left to cut).
    Survivor sets are nested by construction. Returns (plane, survivors)
    and optionally the per-iteration list of masks over the input cloud.
    """
    plane, mask = ransac_plane_fit(cloud, params.ransac_iterations,
                                   params.sigma0, seed)
    trace = [mask.copy()]
    sigma = params.sigma0
    for _ in range(params.max_iterations):
        dist = np.abs(plane.signed_distance(cloud.xyz))
        inside = mask & (dist <= sigma)
        if inside.sum() == mask.sum():
            break
        if inside.sum() < 3:
            raise ValueError("refinement collapsed: sigma0 too small or "
                             "cloud not planar")
        mask = inside
        plane = least_squares_plane(cloud.xyz[mask])
        trace.append(mask.copy())
        sigma *= params.shrink
    survivors = cloud.select(mask)
    if return_trace:
        return plane, survivors, trace
    return plane, survivors


def flatten_to_plane(cloud: PointCloud, plane: Plane) -> PointCloud:
    """Slide each point along its own sensor ray onto the plane.

    For a ray through the origin hitting p0, the intersection parameter is
    t = -d / (n . p0); the flattened point is t * p0. Points whose rays are
    parallel to the plane or that flatten behind the sensor are dropped with
    a warning.
    """
    denom = cloud.xyz @ plane.normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -plane.d / denom
    good = np.isfinite(t) & (t > 0.0) & (np.abs(denom) > 1e-12)
    dropped = int(len(cloud) - good.sum())
    if dropped:
        warnings.warn(f"flatten_to_plane dropped {dropped} point(s) with "
                      "non-positive ray-plane intersection", RuntimeWarning,
                      stacklevel=2)
    kept = cloud.select(good)
    return PointCloud(kept.xyz * t[good][:, None], kept.intensity,
                      frame_id=kept.frame_id, labels=kept.labels)


def plane_basis(plane: Plane) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal in-plane axes for a given plane."""
    n = plane.normal
    ref = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(ref, n)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return e1, e2


def grid_uniform_downsample(cloud: PointCloud, plane: Plane,
                            params: RefinementParams, seed: int) -> PointCloud:
    """Cap in-plane density at delta_rho points per grid_cell x grid_cell bin.

    Selection within an over-full bin is a seeded uniform draw; surviving
    points keep their original order, so the output is reproducible.
    """
    if params.grid_cell is None:
        raise ValueError("grid_cell unresolved; set RefinementParams.grid_cell "
                         "or go through refine_board_cloud")
    grid_cell = params.grid_cell
    delta_rho = params.delta_rho
    n = len(cloud)
    if n == 0:
        return cloud
    e1, e2 = plane_basis(plane)
    u = cloud.xyz @ e1
    v = cloud.xyz @ e2
    iu = np.floor(u / grid_cell).astype(np.int64)
    iv = np.floor(v / grid_cell).astype(np.int64)
    cells = iu * 2_000_003 + iv  # collision-free for any physical board size
    order = np.argsort(cells, kind="stable")
    sorted_cells = cells[order]
    boundaries = np.flatnonzero(np.diff(sorted_cells)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [n]])
    rng = np.random.default_rng(seed)
    keep_idx = []
    for s, e in zip(starts, ends):
        members = order[s:e]
        if len(members) <= delta_rho:
            keep_idx.append(members)
        else:
            pick = rng.choice(len(members), size=delta_rho, replace=False)
            keep_idx.append(members[np.sort(pick)])
    keep = np.sort(np.concatenate(keep_idx))
    return cloud.select(keep)


def refine_board_cloud(cloud: PointCloud, spec: CheckerboardSpec,
                       params: RefinementParams,
                       seed: int) -> tuple[Plane, PointCloud]:
    """Full refinement chain: shrink-fit, flatten, thin. Returns the board
    plane and the flattened, density-capped cloud."""
    plane, survivors = iterative_plane_refine(cloud, params, seed)
    flat = flatten_to_plane(survivors, plane)
    cell = params.grid_cell if params.grid_cell is not None else spec.g_s / 4.0
    resolved = replace(params, grid_cell=cell)
    return plane, grid_uniform_downsample(flat, plane, resolved, seed + 1)
