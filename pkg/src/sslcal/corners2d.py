"""Checkerboard inner-corner extraction from camera images.

Detection scores saddle points of the smoothed image, keeps local maxima,
then explains them with a projective corner grid: the four extreme corners
are hypothesized from the candidate hull's maximum-area quadrilateral, a
homography per hypothesis predicts every inner corner, and the hypothesis
that accounts for the whole grid wins. Sub-pixel positions come from a
quadratic fit of the response surface.

Ordering convention (shared with the 3D side): row-major from the board's
lower-left corner, rows along the n_w direction; the 180-degree ambiguity is
resolved by requiring the cell diagonally below-left of the first corner to
be dark, falling back to the image-lower-left corner when the pattern is
180-degree symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter
from scipy.spatial import ConvexHull, cKDTree

from .geometry import CheckerboardSpec

_RANGE_TOL = 1e-9


@dataclass(frozen=True)
class GrayImage:
    """Row-major grayscale raster with intensities in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.size == 0:
            raise ValueError("pixels must be a non-empty 2D array")
        if px.min() < -_RANGE_TOL or px.max() > 1.0 + _RANGE_TOL:
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", np.clip(px, 0.0, 1.0))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class CornerSet2D:
    corners: np.ndarray
    canonical: bool = False

    def __post_init__(self) -> None:
        pts = np.asarray(self.corners, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "corners", pts)

    def __len__(self) -> int:
        return len(self.corners)


def _saddle_response(pixels: np.ndarray, sigma: float) -> np.ndarray:
    ixx = gaussian_filter(pixels, sigma, order=(0, 2))
    iyy = gaussian_filter(pixels, sigma, order=(2, 0))
    ixy = gaussian_filter(pixels, sigma, order=(1, 1))
    # Negated Hessian determinant: positive exactly where the principal
    # curvatures have opposite signs.
    return np.maximum(ixy * ixy - ixx * iyy, 0.0)


def _local_maxima(response: np.ndarray, radius: int,
                  cap: int) -> np.ndarray:
    footprint = 2 * radius + 1
    peaks = (response == maximum_filter(response, size=footprint)) & \
        (response > 1e-9)
    rows, cols = np.nonzero(peaks)
    if len(rows) == 0:
        return np.empty((0, 2))
    strength = response[rows, cols]
    order = np.lexsort((cols, rows, -strength))[:cap]
    return np.column_stack([cols[order], rows[order]]).astype(np.float64)


def _homography_dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    """Normalized DLT homography mapping src -> dst (both (n, 2), n >= 4)."""

    def normalizer(pts):
        mean = pts.mean(axis=0)
        scale = np.sqrt(2.0) / max(np.linalg.norm(pts - mean, axis=1).mean(),
                                   1e-12)
        t = np.array([[scale, 0.0, -scale * mean[0]],
                      [0.0, scale, -scale * mean[1]],
                      [0.0, 0.0, 1.0]])
        return t

    ts, td = normalizer(src), normalizer(dst)
    s = (np.column_stack([src, np.ones(len(src))]) @ ts.T)[:, :2]
    d = (np.column_stack([dst, np.ones(len(dst))]) @ td.T)[:, :2]
    rows = []
    for (x, y), (u, v) in zip(s, d):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, sv, vt = np.linalg.svd(np.asarray(rows))
    if sv[-2] < 1e-12:
        return None
    h = vt[-1].reshape(3, 3)
    if abs(h[2, 2]) < 1e-12:
        return None
    h = np.linalg.inv(td) @ h @ ts
    return h / h[2, 2]


def _apply_h(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    hom = np.column_stack([pts, np.ones(len(pts))]) @ h.T
    return hom[:, :2] / hom[:, 2:3]


def _max_area_quad(points: np.ndarray) -> np.ndarray | None:
    """Indices (into points) of the maximum-area hull quadrilateral, in
    hull (convex positional) order."""
    if len(points) < 4:
        return None
    try:
        hull = ConvexHull(points)
    except Exception:
        return None
    verts = hull.vertices
    if len(verts) < 4:
        return None
    pts = points[verts]
    best, best_area = None, -1.0
    for quad in combinations(range(len(verts)), 4):
        q = pts[list(quad)]
        area = 0.5 * abs(
            np.dot(q[:, 0], np.roll(q[:, 1], -1)) -
            np.dot(q[:, 1], np.roll(q[:, 0], -1)))
        if area > best_area:
            best_area = area
            best = quad
    if best is None or best_area <= 0.0:
        return None
    return verts[list(best)]


def _grid_nodes(n_w: int, n_h: int) -> np.ndarray:
    gi, gj = np.meshgrid(np.arange(n_w), np.arange(n_h), indexing="xy")
    return np.column_stack([gi.ravel(), gj.ravel()]).astype(np.float64)


def _match_grid(points: np.ndarray, h: np.ndarray, n_w: int,
                n_h: int, gate_frac: float) -> np.ndarray | None:
    pred = _apply_h(h, _grid_nodes(n_w, n_h))
    if not np.all(np.isfinite(pred)):
        return None
    grid = pred.reshape(n_h, n_w, 2)
    spacing = min(np.linalg.norm(np.diff(grid, axis=1), axis=2).min(),
                  np.linalg.norm(np.diff(grid, axis=0), axis=2).min())
    if spacing <= 0:
        return None
    dist, idx = cKDTree(points).query(pred, k=1)
    if np.any(dist > gate_frac * spacing) or \
            len(np.unique(idx)) != len(idx):
        return None
    return idx.reshape(n_h, n_w)


def _fit_grid(points: np.ndarray, n_w: int, n_h: int,
              gate_frac: float) -> tuple[np.ndarray, np.ndarray] | None:
    """Explain `points` with an n_w x n_h projective grid.

    Returns (assignment, homography): point index per grid node, shaped
    (n_h, n_w), with a consistent front-view orientation (+i cross +j
    negative in image coordinates, v down), and the full-grid homography
    from corner-index coordinates to pixels. None when no quadrilateral
    hypothesis accounts for every node.

    `points` must be sorted strongest-response-first: the bootstrap quad is
    taken from an escalating prefix, because the full candidate hull sits
    on weaker off-grid responses (board-edge junctions) whenever any are
    present, never on the true corner extremes.
    """
    n = n_w * n_h
    extremes = np.array([[0, 0], [n_w - 1, 0], [n_w - 1, n_h - 1],
                         [0, n_h - 1]], dtype=np.float64)
    nodes = _grid_nodes(n_w, n_h)
    prefixes = sorted({min(len(points), m) for m in
                       (n + n // 8 + 2, n + n // 2, 2 * n, len(points))})
    best = None
    for m in prefixes:
        quad = _max_area_quad(points[:m])
        if quad is None:
            continue
        for reverse in (False, True):
            cycle = quad[::-1] if reverse else quad
            for shift in range(4):
                corners_px = points[np.roll(cycle, -shift)]
                h = _homography_dlt(extremes, corners_px)
                if h is None:
                    continue
                assign = _match_grid(points, h, n_w, n_h, gate_frac)
                if assign is None:
                    continue
                matched = points[assign.ravel()]
                h_full = _homography_dlt(nodes, matched)
                if h_full is None:
                    continue
                rms = float(np.sqrt(np.mean(
                    np.sum((_apply_h(h_full, nodes) - matched) ** 2,
                           axis=1))))
                if best is None or rms < best[0]:
                    best = (rms, assign, h_full)
        if best is not None:
            break
    if best is None:
        return None
    _, assign, h_full = best
    # Normalize to a front view: +i cross +j must be negative with v down.
    origin = _apply_h(h_full, np.array([[0.0, 0.0]]))[0]
    du = _apply_h(h_full, np.array([[1.0, 0.0]]))[0] - origin
    dv = _apply_h(h_full, np.array([[0.0, 1.0]]))[0] - origin
    cross = du[0] * dv[1] - du[1] * dv[0]
    if cross == 0.0:
        return None
    if cross > 0.0:
        assign = assign[:, ::-1]
        h_full = _homography_dlt(nodes, points[assign.ravel()])
        if h_full is None:
            return None
    return assign, h_full


def _subpixel_refine(response: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """Quadratic peak fit of the response in a 5x5 window per corner."""
    h, w = response.shape
    out = corners.copy()
    offs = np.arange(-2, 3, dtype=np.float64)
    ox, oy = np.meshgrid(offs, offs, indexing="xy")
    design = np.column_stack([np.ones(25), ox.ravel(), oy.ravel(),
                              ox.ravel() ** 2, (ox * oy).ravel(),
                              oy.ravel() ** 2])
    for k, (u, v) in enumerate(corners):
        c, r = int(round(u)), int(round(v))
        if not (2 <= r < h - 2 and 2 <= c < w - 2):
            continue
        window = response[r - 2:r + 3, c - 2:c + 3].ravel()
        coef, *_ = np.linalg.lstsq(design, window, rcond=None)
        _, b, cc, d, e, f = coef
        hess = np.array([[2.0 * d, e], [e, 2.0 * f]])
        if abs(np.linalg.det(hess)) < 1e-12:
            continue
        step = np.linalg.solve(hess, [-b, -cc])
        if np.max(np.abs(step)) > 2.0:
            continue
        out[k] = [c + step[0], r + step[1]]
    return out


_BASE_SIGMA = 2.0
_CANDIDATE_FACTOR = 4
_DETECT_GATE_FRAC = 0.35


def _detect_at_scale(image: GrayImage, spec: CheckerboardSpec,
                     sigma: float) -> tuple[np.ndarray, float] | None:
    response = _saddle_response(image.pixels, sigma)
    n = spec.corner_count
    # suppression window ~2 sigma: wide enough to kill plateau duplicates,
    # still far below the >= 10 px cell-pitch precondition
    radius = max(2, int(round(2.0 * sigma)))
    candidates = _local_maxima(response, radius, _CANDIDATE_FACTOR * n)
    if len(candidates) < n:
        return None
    fit = _fit_grid(candidates, spec.n_w, spec.n_h, _DETECT_GATE_FRAC)
    if fit is None:
        return None
    assign, _ = fit
    node_points = candidates[assign.ravel()]
    grid_pts = node_points.reshape(spec.n_h, spec.n_w, 2)
    spacings = [np.linalg.norm(np.diff(grid_pts, axis=1), axis=2),
                np.linalg.norm(np.diff(grid_pts, axis=0), axis=2)]
    cell_px = float(np.median(np.concatenate([s.ravel() for s in spacings])))
    refined = _subpixel_refine(response, node_points)
    return refined, cell_px


def detect_corners(image: GrayImage,
                   spec: CheckerboardSpec) -> CornerSet2D:
    """Find the board's inner corners; the returned order is grid-consistent
    but not canonical.

    Runs once at a conservative smoothing scale, then again at the
    scale-adaptive sigma = max(1.5, cell_px / 10) once the first pass has
    measured the projected cell size.
    """
    first = _detect_at_scale(image, spec, _BASE_SIGMA)
    if first is None:
        raise ValueError("board not found")
    corners, cell_px = first
    sigma = max(1.5, cell_px / 10.0)
    if abs(sigma - _BASE_SIGMA) > 0.75:
        second = _detect_at_scale(image, spec, sigma)
        if second is not None:
            corners = second[0]
    return CornerSet2D(corners, canonical=False)


def _bilinear(pixels: np.ndarray, pts: np.ndarray) -> np.ndarray:
    h, w = pixels.shape
    u = np.clip(pts[:, 0], 0.0, w - 1.0)
    v = np.clip(pts[:, 1], 0.0, h - 1.0)
    c0 = np.clip(np.floor(u).astype(int), 0, w - 2) if w > 1 else \
        np.zeros(len(pts), dtype=int)
    r0 = np.clip(np.floor(v).astype(int), 0, h - 2) if h > 1 else \
        np.zeros(len(pts), dtype=int)
    fu = u - c0
    fv = v - r0
    c1 = np.minimum(c0 + 1, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    return (pixels[r0, c0] * (1 - fu) * (1 - fv) +
            pixels[r0, c1] * fu * (1 - fv) +
            pixels[r1, c0] * (1 - fu) * fv +
            pixels[r1, c1] * fu * fv)


_CANON_GATE_FRAC = 0.45


def canonicalize_order(corners: CornerSet2D, spec: CheckerboardSpec,
                       image: GrayImage) -> CornerSet2D:
    """Reorder a full corner set into the shared canonical convention."""
    if len(corners) != spec.corner_count:
        raise ValueError("dimension mismatch")
    fit = _fit_grid(corners.corners, spec.n_w, spec.n_h, _CANON_GATE_FRAC)
    if fit is None:
        raise ValueError("dimension mismatch")
    assign, homography = fit
    grid = corners.corners[assign.ravel()].reshape(spec.n_h, spec.n_w, 2)

    # Cell centers in corner-index coordinates; their median intensity
    # separates the two pattern colors.
    ci, cj = np.meshgrid(np.arange(spec.n_w + 1) - 0.5,
                         np.arange(spec.n_h + 1) - 0.5, indexing="xy")
    centers = np.column_stack([ci.ravel(), cj.ravel()])
    shades = _bilinear(image.pixels, _apply_h(homography, centers))
    threshold = float(np.median(shades))

    def first_cell_dark(flipped: bool) -> bool:
        node = np.array([[spec.n_w - 0.5, spec.n_h - 0.5]]) if flipped \
            else np.array([[-0.5, -0.5]])
        shade = _bilinear(image.pixels, _apply_h(homography, node))[0]
        return bool(shade < threshold)

    dark_normal = first_cell_dark(False)
    dark_flipped = first_cell_dark(True)
    if dark_normal != dark_flipped:
        flip = dark_flipped
    else:
        # 180-degree symmetric pattern: take the image-lower-left corner
        # (largest v, then smallest u) as the start.
        normal_start = grid[0, 0]
        flipped_start = grid[-1, -1]
        flip = (flipped_start[1], -flipped_start[0]) > \
            (normal_start[1], -normal_start[0])
    ordered = grid[::-1, ::-1] if flip else grid
    return CornerSet2D(ordered.reshape(-1, 2), canonical=True)


def load_external_corners(path: str | Path,
                          spec: CheckerboardSpec | None = None
                          ) -> CornerSet2D:
    """Read "u v" corner lines produced by an external detector, verbatim."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.strip()
        if not stripped:
            continue
        parts = stripped.split()
        if len(parts) != 2:
            raise ValueError(
                f"{path}:{lineno}: expected 'u v', got {stripped!r}")
        try:
            rows.append((float(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    if spec is not None and len(rows) != spec.corner_count:
        raise ValueError("dimension mismatch")
    return CornerSet2D(np.asarray(rows, dtype=np.float64).reshape(-1, 2),
                       canonical=False)


def save_external_corners(path: str | Path, corners: CornerSet2D) -> None:
    lines = [f"{u!r} {v!r}" for u, v in corners.corners]
    Path(path).write_text("\n".join(lines) + "\n")
