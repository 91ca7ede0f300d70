"""Back-projection, statistical outlier removal and detection gating."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from ..errors import EmptyMask, TooFewPoints
from ..geometry import PointCloud, as_points

DEFAULT_MIN_POINTS = 64
DEFAULT_OUTLIER_K = 16
DEFAULT_OUTLIER_ALPHA = 2.0


def back_project(obs) -> PointCloud:
    """Masked pixels with positive depth lifted through the pinhole model.

    Points are ordered row-major by pixel.
    """
    d = obs.depth.depth
    sel = obs.mask & (d > 0)
    if not np.any(sel):
        raise EmptyMask("no masked pixel has valid depth")
    v, u = np.nonzero(sel)
    z = d[v, u]
    cam = obs.camera
    x = (u - cam.cx) * z / cam.fx
    y = (v - cam.cy) * z / cam.fy
    return PointCloud(np.column_stack([x, y, z]))


def remove_outliers(cloud, k: int = DEFAULT_OUTLIER_K, alpha: float = DEFAULT_OUTLIER_ALPHA) -> PointCloud:
    """Drop points whose mean distance to their k nearest neighbours exceeds mean + alpha * std."""
    pts = as_points(cloud)
    if len(pts) <= k:
        raise TooFewPoints(f"need more than k={k} points, got {len(pts)}")
    d, _ = cKDTree(pts).query(pts, k + 1)
    mean_d = d[:, 1:].mean(axis=1)
    mu = mean_d.mean()
    # the relative slack absorbs rounding when all neighbour spacings are equal
    keep = mean_d <= mu + alpha * mean_d.std() + 1e-9 * mu
    return PointCloud(pts[keep])


def gate_detection(cloud, min_points: int = DEFAULT_MIN_POINTS) -> bool:
    """Accept a detection only if it has at least ``min_points`` points."""
    return len(as_points(cloud)) >= min_points
