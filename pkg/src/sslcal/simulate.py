"""Synthetic rosette-scan LiDAR + camera test bench.

Generates non-repetitive scan frames of a checkerboard scene, renders the
matching camera image, and exposes full ground truth (extrinsic, 3D/2D
corners, per-point labels) so every pipeline stage can be verified against
an oracle rather than against itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .corners2d import GrayImage
from .corners3d import build_standard_model, pattern_color
from .geometry import (
    CameraIntrinsics,
    CheckerboardSpec,
    PointCloud,
    RigidTransform,
    project_points,
    rotation_from_axis_angle,
    undistort_pixels,
)


@dataclass(frozen=True)
class ScanPattern:
    """Two-stage rosette: superposed circular deflections with
    incommensurate rates, mapped azimuthal-equidistant around +x."""

    a1: float = 0.168
    a2: float = 0.167
    w1: float = 2.0 * math.pi * 111.246
    w2: float = -2.0 * math.pi * 68.754
    point_rate: float = 100_000.0
    frame_duration: float = 0.1

    def __post_init__(self) -> None:
        if self.a1 <= 0.0 or self.a2 < 0.0:
            raise ValueError("need a1 > 0 and a2 >= 0")
        if self.point_rate <= 0.0 or self.frame_duration <= 0.0:
            raise ValueError("point_rate and frame_duration must be positive")

    @property
    def points_per_frame(self) -> int:
        return int(round(self.point_rate * self.frame_duration))

    @property
    def fov_radius(self) -> float:
        return self.a1 + self.a2


@dataclass(frozen=True)
class NoiseModel:
    """Range/intensity corruption; axial sigma interpolates linearly in
    distance between the 1.5 m and 10 m reference values, clamped."""

    sigma_axial_near: float = 0.03
    sigma_axial_far: float = 0.01
    outlier_rate: float = 0.05
    outlier_spread: float = 1.0
    sigma_intensity: float = 0.05

    def __post_init__(self) -> None:
        values = (self.sigma_axial_near, self.sigma_axial_far,
                  self.outlier_rate, self.outlier_spread,
                  self.sigma_intensity)
        if any(v < 0.0 for v in values):
            raise ValueError("noise parameters must be non-negative")
        if self.outlier_rate > 1.0:
            raise ValueError("outlier_rate is a probability")

    def sigma_axial(self, distance: np.ndarray) -> np.ndarray:
        frac = np.clip((np.asarray(distance) - _NOISE_NEAR_M) /
                       (_NOISE_FAR_M - _NOISE_NEAR_M), 0.0, 1.0)
        return self.sigma_axial_near + \
            frac * (self.sigma_axial_far - self.sigma_axial_near)


_NOISE_NEAR_M = 1.5
_NOISE_FAR_M = 10.0

NO_NOISE = NoiseModel(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SimSurface:
    """Planar rectangle: origin corner plus two full-extent edge vectors."""

    origin: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    reflectance: float
    label: int

    def __post_init__(self) -> None:
        for name in ("origin", "edge_u", "edge_v"):
            object.__setattr__(self, name,
                               np.asarray(getattr(self, name),
                                          dtype=np.float64).reshape(3))


SURFACE_BOARD = 0
SURFACE_GROUND = 1
SURFACE_POLE = 2


@dataclass(frozen=True)
class SimScene:
    board_pose: RigidTransform        # board frame -> LiDAR frame
    spec: CheckerboardSpec
    extrinsic_gt: RigidTransform      # LiDAR frame -> camera frame
    intrinsics: CameraIntrinsics
    board_reflectance: tuple[float, float] = (0.12, 0.78)
    extra_surfaces: tuple[SimSurface, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        dark, bright = self.board_reflectance
        if not (0.0 <= dark <= 1.0 and 0.0 <= bright <= 1.0):
            raise ValueError("board reflectance values must lie in [0, 1]")
        object.__setattr__(self, "extra_surfaces",
                           tuple(self.extra_surfaces))

    def board_surface(self) -> SimSurface:
        w = self.spec.board_width
        h = self.spec.board_height
        rot = self.board_pose.rotation
        return SimSurface(origin=self.board_pose.apply(np.zeros(3)),
                          edge_u=rot @ np.array([w, 0.0, 0.0]),
                          edge_v=rot @ np.array([0.0, h, 0.0]),
                          reflectance=0.0, label=SURFACE_BOARD)


def rosette_directions(pattern: ScanPattern, t0: float,
                       n: int) -> np.ndarray:
    """Unit ray directions (n, 3) for n consecutive samples from t0.

    The two-stage angular offsets (u, v) are mapped azimuthal-equidistant
    about the +x axis, so the polar angle equals hypot(u, v) exactly and an
    a2=0 pattern traces a circle of angular radius a1.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    t = t0 + np.arange(n, dtype=np.float64) / pattern.point_rate
    u = pattern.a1 * np.cos(pattern.w1 * t) + \
        pattern.a2 * np.cos(pattern.w2 * t)
    v = pattern.a1 * np.sin(pattern.w1 * t) + \
        pattern.a2 * np.sin(pattern.w2 * t)
    r = np.hypot(u, v)
    safe = np.where(r > 1e-15, r, 1.0)
    sin_r = np.sin(r) / safe
    return np.column_stack([np.cos(r), sin_r * u, sin_r * v])


def _intersect_rectangle(surface: SimSurface, dirs: np.ndarray
                         ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ray parameters t (inf = miss) plus in-rectangle coordinates (s, q)
    in [0, 1], for rays from the origin along dirs."""
    eu, ev = surface.edge_u, surface.edge_v
    normal = np.cross(eu, ev)
    denom = dirs @ normal
    numer = surface.origin @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(np.abs(denom) > 1e-12, numer / denom, np.inf)
    t_safe = np.where(np.isfinite(t), t, 0.0)
    p = dirs * t_safe[:, None] - surface.origin
    guu, gvv, guv = eu @ eu, ev @ ev, eu @ ev
    det = guu * gvv - guv * guv
    pu = p @ eu
    pv = p @ ev
    s = (pu * gvv - pv * guv) / det
    q = (pv * guu - pu * guv) / det
    hit = (t > 1e-6) & np.isfinite(t) & \
        (s >= 0.0) & (s <= 1.0) & (q >= 0.0) & (q <= 1.0)
    return np.where(hit, t, np.inf), s, q


def scan_frame(scene: SimScene, pattern: ScanPattern, noise: NoiseModel,
               t0: float, seed: int) -> PointCloud:
    """One simulated frame with ground-truth labels.

    Labels: ``surface`` (board 0 / extra surface ids), ``cell_color``
    (0 dark, 1 bright, -1 off board), ``is_outlier``.
    """
    dirs = rosette_directions(pattern, t0, pattern.points_per_frame)
    surfaces = [scene.board_surface(), *scene.extra_surfaces]
    all_t = np.full((len(surfaces), len(dirs)), np.inf)
    all_s = np.zeros_like(all_t)
    all_q = np.zeros_like(all_t)
    for k, surf in enumerate(surfaces):
        all_t[k], all_s[k], all_q[k] = _intersect_rectangle(surf, dirs)
    winner = np.argmin(all_t, axis=0)
    cols = np.arange(len(dirs))
    t_hit = all_t[winner, cols]
    hit = np.isfinite(t_hit)
    if not np.any(hit):
        return PointCloud(np.empty((0, 3)), np.empty(0),
                          labels={"surface": np.empty(0, np.int64),
                                  "cell_color": np.empty(0, np.int64),
                                  "is_outlier": np.empty(0, np.int64)})
    dirs = dirs[hit]
    winner = winner[hit]
    dist = t_hit[hit]
    s = all_s[:, hit][winner, np.arange(hit.sum())]
    q = all_q[:, hit][winner, np.arange(hit.sum())]

    dark, bright = scene.board_reflectance
    model = build_standard_model(scene.spec)
    on_board = winner == 0
    color = np.full(len(dirs), -1, dtype=np.int64)
    color[on_board] = pattern_color(model,
                                    s[on_board] * scene.spec.board_width,
                                    q[on_board] * scene.spec.board_height)
    reflect = np.array([surf.reflectance for surf in surfaces])[winner]
    reflect[on_board] = np.where(color[on_board] == 0, dark, bright)

    rng = np.random.default_rng(seed)
    axial = rng.normal(0.0, 1.0, len(dirs)) * noise.sigma_axial(dist)
    intensity = np.clip(
        reflect + rng.normal(0.0, 1.0, len(dirs)) * noise.sigma_intensity,
        0.0, 1.0)
    is_outlier = rng.random(len(dirs)) < noise.outlier_rate
    magnitude = rng.uniform(0.2, 1.0, len(dirs)) * noise.outlier_spread
    sign = np.where(rng.random(len(dirs)) < 0.5, -1.0, 1.0)
    final = np.where(is_outlier, dist + sign * magnitude, dist + axial)
    final = np.maximum(final, 1e-3)
    labels = {"surface": np.array([surfaces[k].label for k in winner],
                                  dtype=np.int64),
              "cell_color": color,
              "is_outlier": is_outlier.astype(np.int64)}
    return PointCloud(dirs * final[:, None], intensity, labels=labels)


def ground_truth_corners(scene: SimScene) -> np.ndarray:
    """Inner corners in the LiDAR frame, (n_w * n_h, 3), in the canonical
    order shared by corner3d/corner2d (dark lower-left; physically lower
    first corner for 180-degree symmetric patterns)."""
    spec = scene.spec
    model = build_standard_model(spec)
    board = np.column_stack([model.std_corners,
                             np.zeros(len(model.std_corners))])
    lidar = scene.board_pose.apply(board)
    if (spec.n_w + spec.n_h) % 2 == 1:
        return lidar
    first, last = lidar[0], lidar[-1]
    if first[2] < last[2] - 1e-9:
        return lidar
    if last[2] < first[2] - 1e-9:
        return lidar[::-1].copy()
    return lidar if first[1] >= last[1] else lidar[::-1].copy()


_AMBIENT = 0.45


def render_image(scene: SimScene, supersample: int = 2
                 ) -> tuple[GrayImage, np.ndarray, np.ndarray]:
    """Distortion-aware ray-cast of the board over an ambient background.

    Returns (image, ground-truth corner pixels in canonical order,
    board mask at pixel centers).
    """
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    intr = scene.intrinsics
    cam_pose = scene.extrinsic_gt.compose(scene.board_pose)
    w = scene.spec.board_width
    h = scene.spec.board_height
    extent = np.array([[0.0, 0.0, 0.0], [w, 0.0, 0.0],
                       [w, h, 0.0], [0.0, h, 0.0]])
    corners_cam = cam_pose.apply(extent)
    if np.any(corners_cam[:, 2] <= 0.0):
        raise ValueError("board behind camera")

    surface = SimSurface(origin=cam_pose.apply(np.zeros(3)),
                         edge_u=cam_pose.rotation @ np.array([w, 0.0, 0.0]),
                         edge_v=cam_pose.rotation @ np.array([0.0, h, 0.0]),
                         reflectance=0.0, label=SURFACE_BOARD)
    dark, bright = scene.board_reflectance
    model = build_standard_model(scene.spec)

    def shade_at(pixel_coords: np.ndarray) -> np.ndarray:
        normalized = undistort_pixels(pixel_coords, intr)
        rays = np.column_stack([normalized, np.ones(len(normalized))])
        t, s, q = _intersect_rectangle(surface, rays)
        on = np.isfinite(t)
        out = np.full(len(rays), _AMBIENT)
        color = pattern_color(model, s[on] * w, q[on] * h)
        out[on] = np.where(color == 0, dark, bright)
        return out

    # Shade only a padded box around the projected board; the pad absorbs
    # distortion bowing of the quad edges. Everything else is ambient.
    quad_px = project_points(corners_cam, intr)
    pad = 40.0 + 0.02 * math.hypot(intr.width, intr.height)
    x0 = max(0, int(math.floor(quad_px[:, 0].min() - pad)))
    x1 = min(intr.width - 1, int(math.ceil(quad_px[:, 0].max() + pad)))
    y0 = max(0, int(math.floor(quad_px[:, 1].min() - pad)))
    y1 = min(intr.height - 1, int(math.ceil(quad_px[:, 1].max() + pad)))
    shade = np.full((intr.height, intr.width), _AMBIENT)
    mask = np.zeros((intr.height, intr.width), dtype=bool)
    if x1 >= x0 and y1 >= y0:
        sub = (np.arange(supersample) + 0.5) / supersample - 0.5
        ou, ov = np.meshgrid(sub, sub, indexing="xy")
        px, py = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1),
                             indexing="xy")
        acc = np.zeros(px.shape)
        for du, dv in zip(ou.ravel(), ov.ravel()):
            coords = np.column_stack([(px + du).ravel(), (py + dv).ravel()])
            acc += shade_at(coords).reshape(px.shape)
        shade[y0:y1 + 1, x0:x1 + 1] = acc / supersample ** 2
        centers = np.column_stack([px.ravel(),
                                   py.ravel()]).astype(np.float64)
        normalized = undistort_pixels(centers, intr)
        rays = np.column_stack([normalized, np.ones(len(normalized))])
        t, _, _ = _intersect_rectangle(surface, rays)
        mask[y0:y1 + 1, x0:x1 + 1] = np.isfinite(t).reshape(px.shape)
    image = GrayImage(shade)

    corners_lidar = ground_truth_corners(scene)
    corners_px = project_points(scene.extrinsic_gt.apply(corners_lidar), intr)
    return image, corners_px, mask


def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=1250.0, fy=1250.0, cx=640.3, cy=478.6,
                            k1=-0.08, k2=0.012, p1=5e-4, p2=-4e-4,
                            width=1280, height=960)


def default_extrinsic() -> RigidTransform:
    """LiDAR -> camera for a rigid bench mount: camera looks along LiDAR +x,
    offset a few centimeters, with a small residual misalignment."""
    axes = np.array([[0.0, -1.0, 0.0],
                     [0.0, 0.0, -1.0],
                     [1.0, 0.0, 0.0]])
    wobble = rotation_from_axis_angle(np.array([0.009, -0.013, 0.011]))
    center_lidar = np.array([-0.02, 0.06, 0.08])
    rot = wobble @ axes
    return RigidTransform(rot, -rot @ center_lidar)


def facing_pose(center: np.ndarray, spec: CheckerboardSpec,
                yaw: float = 0.0, pitch: float = 0.0,
                roll: float = 0.0) -> RigidTransform:
    """Board pose whose pattern faces the sensor from `center`, tilted by
    the given angles about the board's own axes."""
    center = np.asarray(center, dtype=np.float64).reshape(3)
    z_board = -center / np.linalg.norm(center)
    up = np.array([0.0, 0.0, 1.0])
    y_board = up - (up @ z_board) * z_board
    norm = np.linalg.norm(y_board)
    if norm < 1e-9:
        raise ValueError("board center on the vertical axis")
    y_board /= norm
    x_board = np.cross(y_board, z_board)
    base = np.column_stack([x_board, y_board, z_board])
    tilt = rotation_from_axis_angle(np.array([0.0, yaw, 0.0])) if yaw else \
        np.eye(3)
    tilt = tilt @ rotation_from_axis_angle(np.array([pitch, 0.0, 0.0])) if \
        pitch else tilt
    tilt = tilt @ rotation_from_axis_angle(np.array([0.0, 0.0, roll])) if \
        roll else tilt
    rot = base @ tilt
    offset = np.array([spec.board_width / 2.0, spec.board_height / 2.0, 0.0])
    return RigidTransform(rot, center - rot @ offset)


def default_scene(spec: CheckerboardSpec | None = None,
                  distance: float = 4.0) -> SimScene:
    spec = spec or CheckerboardSpec(n_w=7, n_h=5, g_s=0.08)
    pose = facing_pose(np.array([distance, 0.0, 0.0]), spec)
    return SimScene(board_pose=pose, spec=spec,
                    extrinsic_gt=default_extrinsic(),
                    intrinsics=default_intrinsics())


def clutter_surfaces(pose: RigidTransform,
                     spec: CheckerboardSpec) -> tuple[SimSurface, ...]:
    """Upholder strip slightly behind the board plus a large uniform ground
    plane safely below everything."""
    rot = pose.rotation
    w = spec.board_width
    pole_origin = pose.apply(np.array([w / 2.0 - 0.025, -0.60, -0.02]))
    pole = SimSurface(origin=pole_origin,
                      edge_u=rot @ np.array([0.05, 0.0, 0.0]),
                      edge_v=rot @ np.array([0.0, 0.55, 0.0]),
                      reflectance=0.40, label=SURFACE_POLE)
    board_extent = pose.apply(np.array([[0.0, 0.0, 0.0],
                                        [w, 0.0, 0.0],
                                        [w, spec.board_height, 0.0],
                                        [0.0, spec.board_height, 0.0]]))
    low_z = min(float(board_extent[:, 2].min()),
                float(pole_origin[2]),
                float(pose.apply(np.array([w / 2.0 + 0.025,
                                           -0.05, -0.02]))[2]),
                0.0)  # never a ceiling: a board above the sensor must not
                      # end up occluded by its own clutter plane
    ground = SimSurface(origin=np.array([0.5, -6.0, low_z - 0.25]),
                        edge_u=np.array([12.0, 0.0, 0.0]),
                        edge_v=np.array([0.0, 12.0, 0.0]),
                        reflectance=0.50, label=SURFACE_GROUND)
    return (pole, ground)


@dataclass(frozen=True)
class PlacementTruth:
    placement_id: int
    board_pose: RigidTransform
    corners_lidar: np.ndarray
    corners_pixels: np.ndarray
    board_mask: np.ndarray


@dataclass(frozen=True)
class PlacementData:
    placement_id: int
    frames: list[PointCloud]
    image: GrayImage
    truth: PlacementTruth


@dataclass(frozen=True)
class CalibrationDataset:
    placements: list[PlacementData]
    extrinsic_gt: RigidTransform
    intrinsics: CameraIntrinsics
    spec: CheckerboardSpec
    pattern: ScanPattern
    noise: NoiseModel
    seed: int


def frame_seed(seed: int, placement_id: int, frame_index: int) -> int:
    """Derived per-frame seed, stable under any scheduling of the work."""
    ss = np.random.SeedSequence([int(seed), int(placement_id),
                                 int(frame_index)])
    return int(ss.generate_state(1)[0])


_PLACEMENT_RETRIES = 300
_MIN_CENTER_SEPARATION = 0.5
_FOV_MARGIN = 0.015
_DISTANCE_RANGE = (1.5, 10.0)
_TILT_MAX = math.radians(35.0)
_ROLL_MAX = math.radians(8.0)


def _pose_in_view(pose: RigidTransform, scene: SimScene,
                  pattern: ScanPattern) -> bool:
    spec = scene.spec
    w, h = spec.board_width, spec.board_height
    extent = np.array([[0.0, 0.0, 0.0], [w, 0.0, 0.0],
                       [w, h, 0.0], [0.0, h, 0.0],
                       [w / 2.0, h / 2.0, 0.0]])
    lidar = pose.apply(extent)
    ranges = np.linalg.norm(lidar, axis=1)
    if np.any(ranges < 1e-6):
        return False
    polar = np.arccos(np.clip(lidar[:, 0] / ranges, -1.0, 1.0))
    if np.any(polar > pattern.fov_radius - _FOV_MARGIN):
        return False
    normal = pose.rotation[:, 2]
    center = lidar[4]
    if normal @ center >= 0.0:
        return False
    cam = scene.extrinsic_gt.apply(lidar)
    if np.any(cam[:, 2] < 0.3):
        return False
    px = project_points(cam, scene.intrinsics)
    margin = 8.0
    return bool(np.all((px[:, 0] >= margin) &
                       (px[:, 0] <= scene.intrinsics.width - 1 - margin) &
                       (px[:, 1] >= margin) &
                       (px[:, 1] <= scene.intrinsics.height - 1 - margin)))


def sample_board_pose(rng: np.random.Generator, scene: SimScene,
                      pattern: ScanPattern,
                      existing_centers: list[np.ndarray]) -> RigidTransform:
    """One admissible board pose: in both FOVs, tilted up to +-35 degrees,
    center at least 0.5 m from every existing placement center."""
    spec = scene.spec
    half_diag = math.hypot(spec.board_width, spec.board_height) / 2.0
    for _ in range(_PLACEMENT_RETRIES):
        dist = rng.uniform(*_DISTANCE_RANGE)
        max_polar = pattern.fov_radius - _FOV_MARGIN - \
            math.atan2(half_diag * 1.1, dist)
        if max_polar <= 0.0:
            continue
        polar = rng.uniform(0.0, max_polar)
        azimuth = rng.uniform(0.0, 2.0 * math.pi)
        center = dist * np.array([math.cos(polar),
                                  math.sin(polar) * math.cos(azimuth),
                                  math.sin(polar) * math.sin(azimuth)])
        yaw = rng.uniform(-_TILT_MAX, _TILT_MAX)
        pitch = rng.uniform(-_TILT_MAX, _TILT_MAX)
        roll = rng.uniform(-_ROLL_MAX, _ROLL_MAX)
        pose = facing_pose(center, spec, yaw=yaw, pitch=pitch, roll=roll)
        if not _pose_in_view(pose, scene, pattern):
            continue
        if any(np.linalg.norm(center - c) < _MIN_CENTER_SEPARATION
               for c in existing_centers):
            continue
        return pose
    raise ValueError("placement sampling exhausted retries; board cannot "
                     "fit both fields of view")


def make_calibration_dataset(scene_base: SimScene, n_placements: int,
                             seed: int, n_frames: int = 50,
                             pattern: ScanPattern | None = None,
                             noise: NoiseModel | None = None,
                             clutter: bool = True) -> CalibrationDataset:
    """Sampled placements, each with scan frames, a rendered image, and the
    per-placement corner ground truth."""
    if n_placements < 1:
        raise ValueError("need n_placements >= 1")
    if n_frames < 1:
        raise ValueError("need n_frames >= 1")
    pattern = pattern or ScanPattern()
    noise = noise if noise is not None else NoiseModel()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 101]))
    placements = []
    centers: list[np.ndarray] = []
    offset = np.array([scene_base.spec.board_width / 2.0,
                       scene_base.spec.board_height / 2.0, 0.0])
    for pid in range(n_placements):
        pose = sample_board_pose(rng, scene_base, pattern, centers)
        centers.append(pose.apply(offset))
        extras = scene_base.extra_surfaces
        if clutter and not extras:
            extras = clutter_surfaces(pose, scene_base.spec)
        scene = replace(scene_base, board_pose=pose, extra_surfaces=extras)
        frames = [scan_frame(scene, pattern, noise,
                             t0=f * pattern.frame_duration,
                             seed=frame_seed(seed, pid, f))
                  for f in range(n_frames)]
        for f, frame in enumerate(frames):
            frame.frame_id = f
        image, corners_px, mask = render_image(scene)
        truth = PlacementTruth(placement_id=pid, board_pose=pose,
                               corners_lidar=ground_truth_corners(scene),
                               corners_pixels=corners_px, board_mask=mask)
        placements.append(PlacementData(placement_id=pid, frames=frames,
                                        image=image, truth=truth))
    return CalibrationDataset(placements=placements,
                              extrinsic_gt=scene_base.extrinsic_gt,
                              intrinsics=scene_base.intrinsics,
                              spec=scene_base.spec, pattern=pattern,
                              noise=noise, seed=seed)
