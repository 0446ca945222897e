"""Time-domain integration: per-frame statistical outlier removal, then stacking.

A non-repetitive scan pattern covers new directions every frame, so stacking
filtered frames densifies the target without smearing it. Filtering happens
per frame because the density statistics of a single sweep are stationary;
the stacked cloud's are not.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import PointCloud, knn_mean_distances


@dataclass(frozen=True)
class IntegrationParams:
    k: int = 20
    scale_std: float = 1.0
    max_frames: int = 50

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.scale_std < 0:
            raise ValueError("scale_std must be >= 0")
        if self.max_frames < 1:
            raise ValueError("max_frames must be >= 1")


def sor_threshold(mean_knn_distances: np.ndarray, scale_std: float) -> float:
    """Retention threshold: mean + scale_std * population std of the per-point
    mean k-NN distances."""
    d = np.asarray(mean_knn_distances, dtype=np.float64)
    return float(d.mean() + scale_std * d.std())

def remove_statistical_outliers(frame: PointCloud,
                                params: IntegrationParams) -> PointCloud:
    """Drop points whose mean k-NN distance exceeds the frame's threshold.

    Points with disK <= mean + scale_std * std are retained (ties kept). A
    frame too small for k neighbors is returned unchanged with a warning.
    """
    if len(frame) <= params.k:
        warnings.warn(
            f"frame {frame.frame_id!r} has {len(frame)} points, "
            f"need more than k={params.k}; returned unfiltered",
            RuntimeWarning, stacklevel=2)
        return frame
    disk = knn_mean_distances(frame, params.k)
    keep = disk <= sor_threshold(disk, params.scale_std)
    return frame.select(keep)


def integrate_frames(frames: Sequence[PointCloud],
                     params: IntegrationParams) -> PointCloud:
    """Filter each frame independently and stack the survivors in frame order.

    At most params.max_frames frames are consumed.
    """
    frames = list(frames)[: params.max_frames]
    if not frames:
        raise ValueError("no frames")
    filtered = [remove_statistical_outliers(f, params) for f in frames]
    return PointCloud.concatenate(filtered)
