"""Inner-corner recovery from the refined board cloud.

The board is modeled in its own plane as a checker pattern of
(n_w+1) x (n_h+1) cells whose inner corners sit at (i*g_s, j*g_s),
i in 1..n_w, j in 1..n_h, counted row-major from the lower-left. The
flattened cloud is intensity-binarized and aligned to that model with a
3-DOF in-plane pose (theta, tx, ty) minimizing a label/position similarity
cost; corners are the model corners mapped back through the inverse pose.

Orientation convention shared with the 2D detector: the first corner is the
one whose lower-left-adjacent cell is dark. When the pattern is 180-degree
symmetric (n_w + n_h even) that rule cannot decide, and the physically lower
corner in the sensor frame is chosen instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .geometry import (CheckerboardSpec, Plane, PointCloud, RigidTransform,
                       transform_cloud)


@dataclass(frozen=True)
class StandardBoardModel:
    spec: CheckerboardSpec
    lower_left_color: int  # 0 dark, 1 bright
    std_corners: np.ndarray  # (n_w * n_h, 2), row-major from lower-left

    @property
    def extent(self) -> tuple[float, float]:
        return self.spec.board_width, self.spec.board_height


def build_standard_model(spec: CheckerboardSpec,
                         lower_left_color: int = 0) -> StandardBoardModel:
    if lower_left_color not in (0, 1):
        raise ValueError("lower_left_color must be 0 or 1")
    g = spec.g_s
    corners = np.array([[i * g, j * g]
                        for j in range(1, spec.n_h + 1)
                        for i in range(1, spec.n_w + 1)])
    return StandardBoardModel(spec, lower_left_color, corners)


def pattern_color(model: StandardBoardModel, x: np.ndarray,
                  y: np.ndarray) -> np.ndarray:
    """Cell color (0/1) of the model pattern at in-extent positions."""
    g = model.spec.g_s
    ix = np.clip(np.floor(np.asarray(x) / g).astype(np.int64), 0, model.spec.n_w)
    iy = np.clip(np.floor(np.asarray(y) / g).astype(np.int64), 0, model.spec.n_h)
    return (model.lower_left_color + ix + iy) % 2


def binarize_intensity(cloud: "PointCloud | np.ndarray") -> np.ndarray:
    """Label each point 0 (dark) or 1 (bright) by the reflectance split that
    maximizes between-class variance (Otsu)."""
    return otsu_split(cloud)[0]


def otsu_split(cloud: "PointCloud | np.ndarray") -> tuple[np.ndarray, float]:
    """binarize_intensity plus the threshold that produced the labels."""
    intensity = cloud.intensity if isinstance(cloud, PointCloud) else cloud
    inten = np.asarray(intensity, dtype=np.float64).reshape(-1)
    if inten.size == 0 or float(inten.max() - inten.min()) < 1e-9:
        raise ValueError("no reflectance contrast")
    hist, edges = np.histogram(inten, bins=256, range=(0.0, 1.0))
    hist = hist.astype(np.float64)
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    total = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m0 / w0
        mu1 = (total - m0) / w1
        bcv = w0 * w1 * (mu0 - mu1) ** 2
    bcv[~np.isfinite(bcv)] = -1.0
    if bcv.max() <= 0.0:
        raise ValueError("no reflectance contrast")
    # The split is inclusive of the argmax bin, so the threshold separating
    # the classes is that bin's upper edge.
    threshold = float(edges[int(np.argmax(bcv)) + 1])
    return (inten > threshold).astype(np.int64), threshold


def canonical_plane_frame(cloud: PointCloud,
                          plane: Plane) -> tuple[RigidTransform, PointCloud]:
    """Transform taking the cloud into a frame where its plane is z = 0 and
    its centroid is the origin (minimal rotation aligning the normal to +z).
    Returns the transform together with the transformed cloud.

    The normal is re-oriented toward the sensor origin first, so looking
    down +z in the flattened frame always shows the pattern as the sensor
    sees it. Without that, a fit handing in the away-facing normal would
    mirror the in-plane coordinates, and a mirrored checkerboard with
    flipped parity costs exactly the same as the true alignment, breaking
    the cross-modal corner order.
    """
    centroid_dir = cloud.xyz.mean(axis=0)
    n = plane.normal
    if float(n @ centroid_dir) > 0.0:
        n = -n
    z = np.array([0.0, 0.0, 1.0])
    v = np.cross(n, z)
    s = float(np.linalg.norm(v))
    c = float(np.dot(n, z))
    if s < 1e-12:
        rot = np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    else:
        k = np.array([[0.0, -v[2], v[1]],
                      [v[2], 0.0, -v[0]],
                      [-v[1], v[0], 0.0]])
        rot = np.eye(3) + k + k @ k * ((1.0 - c) / (s * s))
    centroid = cloud.xyz.mean(axis=0)
    frame = RigidTransform(rot, -rot @ centroid)
    return frame, transform_cloud(cloud, frame)


def similarity_cost(theta: float, tx: float, ty: float, xy: np.ndarray,
                    labels: np.ndarray, model: StandardBoardModel) -> float:
    """Pattern/position agreement of labeled plane points with the model.

    Each point transformed into model coordinates contributes its Manhattan
    distance to the nearest inner corner, weighted by the label/pattern
    mismatch when inside the board extent and unconditionally when outside.
    """
    c = math.cos(theta)
    s = math.sin(theta)
    px = xy[:, 0]
    py = xy[:, 1]
    x = c * px - s * py + tx
    y = s * px + c * py + ty
    g = model.spec.g_s
    w, h = model.extent
    inside = (x >= 0.0) & (x <= w) & (y >= 0.0) & (y <= h)
    gx = np.clip(np.round(x / g), 1, model.spec.n_w) * g
    gy = np.clip(np.round(y / g), 1, model.spec.n_h) * g
    d = np.abs(gx - x) + np.abs(gy - y)
    pattern = pattern_color(model, x, y)
    mismatch = (pattern != labels).astype(np.float64)
    return float(np.sum(np.where(inside, mismatch * d, d)))


def cost_gradient(theta: float, tx: float, ty: float, xy: np.ndarray,
                  labels: np.ndarray, model: StandardBoardModel,
                  step: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of similarity_cost."""
    params = np.array([theta, tx, ty])
    grad = np.empty(3)
    for i in range(3):
        hi = params.copy()
        lo = params.copy()
        hi[i] += step
        lo[i] -= step
        grad[i] = (similarity_cost(hi[0], hi[1], hi[2], xy, labels, model)
                   - similarity_cost(lo[0], lo[1], lo[2], xy, labels, model)) / (2 * step)
    return grad


@dataclass(frozen=True)
class AlignmentBudget:
    max_iterations: int = 200
    cost_tolerance: float = 1e-8
    fd_step: float = 1e-6
    n_theta: int = 4
    both_parities: bool = True
    polish: bool = True
    polish_maxfev: int = 400


@dataclass(frozen=True)
class BoardAlignment:
    """In-plane board pose: transform maps sensor-frame points into model
    coordinates (z = 0 on the board plane)."""

    transform: RigidTransform
    cost: float
    start_index: int
    lower_left_color: int


def _lift_inplane(theta: float, tx: float, ty: float) -> RigidTransform:
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return RigidTransform(rot, np.array([tx, ty, 0.0]))


def _principal_angle(xy: np.ndarray) -> float:
    centered = xy - xy.mean(axis=0)
    cov = centered.T @ centered
    _, vecs = np.linalg.eigh(cov)
    major = vecs[:, -1]
    return math.atan2(major[1], major[0])


def estimate_alignment(cloud: PointCloud, plane: Plane,
                       model: StandardBoardModel,
                       budget: AlignmentBudget | None = None) -> BoardAlignment:
    """Multi-start quasi-Newton fit of the 3-DOF in-plane pose.

    Starts combine centroid-aligned translation with four right-angle theta
    seeds (offset by the cloud's principal-axis angle) and both pattern
    parities; gradients are central finite differences with the configured
    step. The winning pose is reported against the dark-lower-left model,
    flipping 180 degrees when needed by the shared orientation convention.
    """
    if budget is None:
        budget = AlignmentBudget()
    if len(cloud) < 8:
        raise ValueError(f"insufficient points: got {len(cloud)}")
    canonical, flat = canonical_plane_frame(cloud, plane)
    xy = np.ascontiguousarray(flat.xyz[:, :2])
    labels = binarize_intensity(cloud)
    spec = model.spec
    w, h = model.extent
    center = np.array([w / 2.0, h / 2.0])
    theta0 = _principal_angle(xy)
    parities = (model.lower_left_color, 1 - model.lower_left_color) \
        if budget.both_parities else (model.lower_left_color,)
    models = {p: build_standard_model(spec, p) for p in set(parities)}

    baseline = similarity_cost(0.0, center[0], center[1], xy, labels,
                               models[parities[0]])
    best: tuple[float, int, np.ndarray, int] | None = None  # cost, start, params, parity
    start_index = 0
    for parity in parities:
        mdl = models[parity]

        def fun(p: np.ndarray, _m=mdl) -> float:
            return similarity_cost(p[0], p[1], p[2], xy, labels, _m)

        def jac(p: np.ndarray, _m=mdl) -> np.ndarray:
            return cost_gradient(p[0], p[1], p[2], xy, labels, _m,
                                 step=budget.fd_step)

        for k in range(budget.n_theta):
            theta = theta0 + k * (2.0 * math.pi / budget.n_theta)
            x0 = np.array([theta, center[0], center[1]])
            res = optimize.minimize(
                fun, x0, jac=jac, method="L-BFGS-B",
                options={"maxiter": budget.max_iterations,
                         "ftol": budget.cost_tolerance, "gtol": 1e-14})
            cost = float(res.fun)
            if best is None or cost < best[0]:
                best = (cost, start_index, np.asarray(res.x, dtype=np.float64),
                        parity)
            start_index += 1
    assert best is not None
    cost, win_start, params, parity = best
    if budget.polish:
        mdl = models[parity]
        g = spec.g_s
        bounds = [(params[0] - 0.02, params[0] + 0.02),
                  (params[1] - g / 2.0, params[1] + g / 2.0),
                  (params[2] - g / 2.0, params[2] + g / 2.0)]
        res = optimize.minimize(
            lambda p: similarity_cost(p[0], p[1], p[2], xy, labels, mdl),
            params, method="Powell", bounds=bounds,
            options={"xtol": 1e-7, "ftol": 1e-12,
                     "maxfev": budget.polish_maxfev})
        if float(res.fun) <= cost:
            cost = float(res.fun)
            params = np.asarray(res.x, dtype=np.float64)
    if cost >= baseline and cost > 0.01 * spec.g_s * len(cloud):
        raise ValueError("alignment failed: no start improved on the "
                         "unaligned baseline")

    transform = _lift_inplane(*params).compose(canonical)
    transform, parity = _apply_orientation_convention(transform, parity, spec)
    return BoardAlignment(transform=transform, cost=cost,
                          start_index=win_start, lower_left_color=parity)


def _flip_about_center(spec: CheckerboardSpec) -> RigidTransform:
    w = spec.board_width
    h = spec.board_height
    return RigidTransform(np.diag([-1.0, -1.0, 1.0]), np.array([w, h, 0.0]))


def _apply_orientation_convention(transform: RigidTransform, parity: int,
                                  spec: CheckerboardSpec
                                  ) -> tuple[RigidTransform, int]:
    """Resolve the 180-degree twin. Flipping the pose about the model center
    and toggling the parity when n_w + n_h is odd leaves the cost unchanged,
    so the choice is conventional: dark lower-left cell when the pattern can
    express it, the physically lower first corner otherwise."""
    s = (spec.n_w + spec.n_h) % 2
    flipped = _flip_about_center(spec).compose(transform)
    if s == 1:
        if parity == 1:
            return flipped, 0
        return transform, parity
    # 180-degree symmetric pattern: compare first-corner positions in the
    # sensor frame.
    first = np.array([spec.g_s, spec.g_s, 0.0])
    last = np.array([spec.n_w * spec.g_s, spec.n_h * spec.g_s, 0.0])
    p_first = transform.inverse().apply(first)
    p_last = transform.inverse().apply(last)  # == flipped first corner
    if p_first[2] < p_last[2] - 1e-9:
        return transform, parity
    if p_last[2] < p_first[2] - 1e-9:
        return flipped, parity
    if p_first[1] >= p_last[1]:
        return transform, parity
    return flipped, parity


def corners_from_alignment(alignment: BoardAlignment,
                           model: StandardBoardModel) -> np.ndarray:
    """Inner corners in the sensor frame, (n_w * n_h, 3), canonical order."""
    corners = np.hstack([model.std_corners,
                         np.zeros((model.std_corners.shape[0], 1))])
    return alignment.transform.inverse().apply(corners)
