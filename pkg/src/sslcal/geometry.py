"""Core geometric types shared by every stage of the calibration pipeline.

Conventions used throughout the package:

* LiDAR/sensor frame: X forward, Y left, Z up, origin at the optical center.
* Camera frame: X right, Y down, Z forward (standard computer-vision axes).
* All coordinates are float64 meters, all image coordinates are pixels with
  (0, 0) at the top-left pixel center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

_ORTHO_TOL = 1e-9


class Point3(NamedTuple):
    """A single return: position plus normalized reflectance."""

    x: float
    y: float
    z: float
    intensity: float


def _as_xyz(array: np.ndarray) -> np.ndarray:
    out = np.asarray(array, dtype=np.float64)
    if out.ndim != 2 or out.shape[1] != 3:
        raise ValueError(f"expected (N, 3) coordinates, got shape {out.shape}")
    return out


@dataclass
class PointCloud:
    """Ordered points with reflectance in [0, 1].

    ``labels`` optionally carries aligned per-point ground-truth arrays
    (surface id, cell color, outlier flags) produced by the simulator; every
    selection keeps them aligned, and the dataset writer strips them.
    """

    xyz: np.ndarray
    intensity: np.ndarray
    frame_id: int | None = None
    labels: dict[str, np.ndarray] | None = None

    def __post_init__(self) -> None:
        self.xyz = _as_xyz(self.xyz)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        n = self.xyz.shape[0]
        if self.intensity.shape[0] != n:
            raise ValueError("intensity length does not match point count")
        if n and not np.all(np.isfinite(self.xyz)):
            raise ValueError("non-finite coordinates")
        if n:
            lo = float(self.intensity.min())
            hi = float(self.intensity.max())
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ValueError("non-finite intensity")
            if lo < -1e-9 or hi > 1.0 + 1e-9:
                raise ValueError("intensity outside [0, 1]; normalize at ingestion")
            np.clip(self.intensity, 0.0, 1.0, out=self.intensity)
        if self.labels is not None:
            for key, arr in self.labels.items():
                if np.asarray(arr).shape[0] != n:
                    raise ValueError(f"label {key!r} length does not match point count")

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def point(self, i: int) -> Point3:
        return Point3(*self.xyz[i], self.intensity[i])

    def select(self, index: np.ndarray) -> "PointCloud":
        """Subset by boolean mask or integer index array; labels follow."""
        labels = None
        if self.labels is not None:
            labels = {k: np.asarray(v)[index] for k, v in self.labels.items()}
        return PointCloud(self.xyz[index], self.intensity[index],
                          frame_id=self.frame_id, labels=labels)

    @staticmethod
    def empty() -> "PointCloud":
        return PointCloud(np.zeros((0, 3)), np.zeros(0))

    @staticmethod
    def concatenate(clouds: Sequence["PointCloud"]) -> "PointCloud":
        """Stack clouds in order. Labels survive only if every cloud has the
        same label keys."""
        if not clouds:
            return PointCloud.empty()
        xyz = np.concatenate([c.xyz for c in clouds])
        inten = np.concatenate([c.intensity for c in clouds])
        labels = None
        keysets = [set(c.labels) for c in clouds if c.labels is not None]
        if len(keysets) == len(clouds) and keysets and all(k == keysets[0] for k in keysets):
            labels = {k: np.concatenate([np.asarray(c.labels[k]) for c in clouds])
                      for k in keysets[0]}
        return PointCloud(xyz, inten, labels=labels)


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) transform: apply(p) = rotation @ p + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=np.float64)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(tr)):
            raise ValueError("non-finite transform")
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        if err > _ORTHO_TOL or abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal with det +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_axis_angle(axis: np.ndarray, angle: float,
                        translation: np.ndarray | None = None) -> "RigidTransform":
        return RigidTransform(
            rotation_from_axis_angle(np.asarray(axis, dtype=np.float64) * float(angle)),
            np.zeros(3) if translation is None else translation)

    @staticmethod
    def from_matrix(mat: np.ndarray) -> "RigidTransform":
        mat = np.asarray(mat, dtype=np.float64)
        if mat.shape != (4, 4):
            raise ValueError("expected 4x4 matrix")
        return RigidTransform(mat[:3, :3], mat[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self.compose(other)).apply(p) == self.apply(other.apply(p))."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            return self.rotation @ pts + self.translation
        return pts @ self.rotation.T + self.translation


def rotation_from_axis_angle(rvec: np.ndarray) -> np.ndarray:
    """Rodrigues formula; rvec = axis * angle (radians)."""
    rvec = np.asarray(rvec, dtype=np.float64).reshape(3)
    angle = float(np.linalg.norm(rvec))
    if angle < 1e-14:
        return np.eye(3)
    axis = rvec / angle
    k = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def rotation_angle_between(a: "RigidTransform | np.ndarray",
                           b: "RigidTransform | np.ndarray") -> float:
    """Geodesic angle between the rotation parts, in degrees.

    Accepts RigidTransforms or bare 3x3 rotation matrices.
    """
    ra = a.rotation if isinstance(a, RigidTransform) else np.asarray(a, dtype=np.float64)
    rb = b.rotation if isinstance(b, RigidTransform) else np.asarray(b, dtype=np.float64)
    cos = (np.trace(ra.T @ rb) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


def transform_cloud(cloud: PointCloud, transform: RigidTransform) -> PointCloud:
    return PointCloud(transform.apply(cloud.xyz), cloud.intensity.copy(),
                      frame_id=cloud.frame_id,
                      labels=None if cloud.labels is None else dict(cloud.labels))


@dataclass(frozen=True)
class Plane:
    """Plane a*x + b*y + c*z + d = 0 with unit normal (a, b, c)."""

    a: float
    b: float
    c: float
    d: float

    def __post_init__(self) -> None:
        norm = math.sqrt(self.a ** 2 + self.b ** 2 + self.c ** 2)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")

    @staticmethod
    def from_coefficients(a: float, b: float, c: float, d: float) -> "Plane":
        norm = math.sqrt(a * a + b * b + c * c)
        if norm < 1e-12:
            raise ValueError("degenerate plane coefficients")
        return Plane(a / norm, b / norm, c / norm, d / norm)

    @staticmethod
    def from_point_normal(point: np.ndarray, normal: np.ndarray) -> "Plane":
        normal = np.asarray(normal, dtype=np.float64)
        norm = float(np.linalg.norm(normal))
        if norm < 1e-12:
            raise ValueError("degenerate normal")
        n = normal / norm
        d = -float(np.dot(n, np.asarray(point, dtype=np.float64)))
        return Plane(n[0], n[1], n[2], d)

    @property
    def normal(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.normal + self.d

    def flipped(self) -> "Plane":
        return Plane(-self.a, -self.b, -self.c, -self.d)


def plane_point_distance(point: np.ndarray, plane: Plane) -> float:
    return float(abs(plane.signed_distance(np.asarray(point, dtype=np.float64).reshape(1, 3))[0]))


@dataclass(frozen=True)
class CheckerboardSpec:
    """Inner-corner grid (n_w x n_h) and cell pitch g_s in meters.

    The physical board carries one extra cell ring around the inner corners,
    so the full extent is (n_w+1) x (n_h+1) cells. n_w != n_h is required so
    a 90-degree in-plane rotation is never ambiguous.
    """

    n_w: int
    n_h: int
    g_s: float

    def __post_init__(self) -> None:
        if self.n_w < 2 or self.n_h < 2:
            raise ValueError("need at least a 2x2 inner-corner grid")
        if self.n_w == self.n_h:
            raise ValueError("n_w must differ from n_h")
        if not (self.g_s > 0.0 and math.isfinite(self.g_s)):
            raise ValueError("g_s must be positive")

    @property
    def corner_count(self) -> int:
        return self.n_w * self.n_h

    @property
    def board_width(self) -> float:
        return (self.n_w + 1) * self.g_s

    @property
    def board_height(self) -> float:
        return (self.n_h + 1) * self.g_s


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole + radial (k1, k2) + tangential (p1, p2) distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    width: int = 0
    height: int = 0

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 0 or self.height < 0:
            raise ValueError("image size must be non-negative")


def distort_normalized(xy: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Apply the distortion polynomial to normalized coordinates (N, 2)."""
    xy = np.asarray(xy, dtype=np.float64)
    x = xy[..., 0]
    y = xy[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2
    xd = x * radial + 2.0 * intr.p1 * x * y + intr.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + intr.p1 * (r2 + 2.0 * y * y) + 2.0 * intr.p2 * x * y
    return np.stack([xd, yd], axis=-1)


def undistort_normalized(xy: np.ndarray, intr: CameraIntrinsics,
                         iterations: int = 10) -> np.ndarray:
    """Invert distort_normalized by fixed-point iteration."""
    xy = np.asarray(xy, dtype=np.float64)
    xd = xy[..., 0]
    yd = xy[..., 1]
    x = xd.copy()
    y = yd.copy()
    for _ in range(iterations):
        r2 = x * x + y * y
        radial = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2
        dx = 2.0 * intr.p1 * x * y + intr.p2 * (r2 + 2.0 * x * x)
        dy = intr.p1 * (r2 + 2.0 * y * y) + 2.0 * intr.p2 * x * y
        x = (xd - dx) / radial
        y = (yd - dy) / radial
    return np.stack([x, y], axis=-1)


def project_points(points: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points (N, 3) -> pixel coordinates (N, 2).

    Raises when any point sits at or behind the camera plane.
    """
    points = np.asarray(points, dtype=np.float64)
    single = points.ndim == 1
    pts = points.reshape(-1, 3)
    z = pts[:, 2]
    if np.any(z <= 0.0):
        raise ValueError("behind camera")
    norm = pts[:, :2] / z[:, None]
    dist = distort_normalized(norm, intr)
    uv = np.empty_like(dist)
    uv[:, 0] = intr.fx * dist[:, 0] + intr.cx
    uv[:, 1] = intr.fy * dist[:, 1] + intr.cy
    return uv[0] if single else uv


def project_points_masked(points: np.ndarray,
                          intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Like project_points but skips non-projectable points via a validity mask."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    valid = pts[:, 2] > 1e-9
    uv = np.full((pts.shape[0], 2), np.nan)
    if np.any(valid):
        uv[valid] = project_points(pts[valid], intr)
    return uv, valid


def project_point(point: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    return project_points(np.asarray(point, dtype=np.float64).reshape(3), intr)


def undistort_pixels(pixels: np.ndarray, intr: CameraIntrinsics,
                     iterations: int = 10) -> np.ndarray:
    """Raw pixel coordinates -> undistorted normalized coordinates (N, 2)."""
    px = np.asarray(pixels, dtype=np.float64)
    norm = np.empty_like(px)
    norm[..., 0] = (px[..., 0] - intr.cx) / intr.fx
    norm[..., 1] = (px[..., 1] - intr.cy) / intr.fy
    return undistort_normalized(norm, intr, iterations=iterations)


def nearest_neighbor_indices(cloud: PointCloud, k: int,
                             query_index: int | None = None) -> np.ndarray:
    """k nearest neighbors (self excluded), ordered by (distance, index).

    Equidistant neighbors are broken by ascending point index so the result
    is independent of tree layout. With query_index=None the result is an
    (N, k) array covering every point.
    """
    n = len(cloud)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k + 1:
        raise ValueError(f"insufficient points: need at least {k + 1}, got {n}")
    tree = cKDTree(cloud.xyz)
    # Query extra candidates so ties straddling the k-th slot can be re-ranked
    # deterministically.
    m = min(n, k + 9)
    if query_index is None:
        dist, idx = tree.query(cloud.xyz, k=m, workers=-1)
        rows = np.arange(n)[:, None]
        not_self = idx != rows
        # Keep exactly m-1 non-self candidates per row (duplicates at distance
        # zero can displace self from slot 0).
        order_self_last = np.argsort(~not_self, axis=1, kind="stable")
        first = order_self_last[:, : m - 1]
        dist = np.take_along_axis(dist, first, axis=1)
        idx = np.take_along_axis(idx, first, axis=1)
        rank = np.lexsort((idx, dist), axis=1)
        dist = np.take_along_axis(dist, rank, axis=1)
        idx = np.take_along_axis(idx, rank, axis=1)
        boundary_tied = (m - 1 > k) & (dist[:, k - 1] == dist[:, min(m - 2, dist.shape[1] - 1)])
        if np.any(boundary_tied):
            for i in np.flatnonzero(boundary_tied):
                idx[i, :k] = _knn_bruteforce_row(cloud.xyz, int(i), k)
        return idx[:, :k]
    dist, idx = tree.query(cloud.xyz[query_index], k=m)
    dist = np.atleast_1d(dist)
    idx = np.atleast_1d(idx)
    keep = idx != query_index
    dist, idx = dist[keep][: m - 1], idx[keep][: m - 1]
    rank = np.lexsort((idx, dist))
    dist, idx = dist[rank], idx[rank]
    if len(dist) > k and dist[k - 1] == dist[-1]:
        return _knn_bruteforce_row(cloud.xyz, query_index, k)
    return idx[:k]


def _knn_bruteforce_row(xyz: np.ndarray, i: int, k: int) -> np.ndarray:
    d = np.linalg.norm(xyz - xyz[i], axis=1)
    d[i] = np.inf
    order = np.lexsort((np.arange(len(xyz)), d))
    return order[:k]


def knn_mean_distance(cloud: PointCloud, query_index: int, k: int) -> float:
    """Mean Euclidean distance from one point to its k nearest neighbors."""
    idx = nearest_neighbor_indices(cloud, k, query_index=query_index)
    return float(np.linalg.norm(cloud.xyz[idx] - cloud.xyz[query_index], axis=1).mean())


def knn_mean_distances(cloud: PointCloud, k: int) -> np.ndarray:
    """Vectorized knn_mean_distance for every point at once."""
    idx = nearest_neighbor_indices(cloud, k)
    diff = cloud.xyz[idx] - cloud.xyz[:, None, :]
    return np.linalg.norm(diff, axis=2).mean(axis=1)
