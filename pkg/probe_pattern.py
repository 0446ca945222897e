"""Probe ScanPattern defaults: cross-frame disjointness and 50-frame coverage."""
import sys
import numpy as np
from scipy.spatial import cKDTree

sys.path.insert(0, "src")
from sslcal.simulate import ScanPattern, rosette_directions


def chord_to_angle(chord):
    return 2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))


def probe(pattern, n_frames=50, grid_step=5e-4, label=""):
    n = pattern.points_per_frame
    f0 = rosette_directions(pattern, 0.0, n)
    f1 = rosette_directions(pattern, pattern.frame_duration, n)
    d, _ = cKDTree(f1).query(f0, workers=-1)
    min_cross = chord_to_angle(d.min())

    frames = [rosette_directions(pattern, k * pattern.frame_duration, n)
              for k in range(n_frames)]
    union = np.concatenate(frames)
    R = pattern.fov_radius
    g = np.arange(-R, R + grid_step, grid_step)
    uu, vv = np.meshgrid(g, g)
    r = np.hypot(uu, vv)
    keep = r <= R
    u, v, r = uu[keep], vv[keep], r[keep]
    safe = np.where(r > 1e-15, r, 1.0)
    s = np.sin(r) / safe
    test = np.column_stack([np.cos(r), s * u, s * v])
    dist, _ = cKDTree(union).query(test, workers=-1)
    gaps = chord_to_angle(dist)
    worst = np.argmax(gaps)
    print(f"{label} pts/frame={n} union={len(union)}")
    print(f"  min cross-frame angle: {min_cross:.3e} rad"
          f"  (need > 1e-6)")
    print(f"  max coverage gap: {np.degrees(gaps.max()):.4f} deg"
          f"  (need < 0.2) at r={r[worst]:.4f} "
          f"az={np.degrees(np.arctan2(v[worst], u[worst])):.1f}")
    return min_cross, np.degrees(gaps.max())


if __name__ == "__main__":
    probe(ScanPattern(), label="default")
