"""Pose, box and shape metrics for estimated objects."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from ..errors import DegenerateBox
from ..geometry import Mesh, Sim3Pose, geodesic_angle
from ..meshfit import chamfer_loss, sample_surface
from ..scoring import SymmetrySpec

# corner sign patterns and the 12 edges between corners differing in one sign
_SIGNS = np.array(list(product((-1.0, 1.0), repeat=3)))
_EDGES = [(i, j) for i in range(8) for j in range(i + 1, 8) if np.sum(_SIGNS[i] != _SIGNS[j]) == 1]
_INSIDE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class OrientedBox:
    """Box with full side lengths ``extents`` along the columns of ``rotation``."""

    center: np.ndarray
    rotation: np.ndarray
    extents: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.extents, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(e)) or np.any(e <= 0):
            raise DegenerateBox(f"box extents must be positive, got {e}")
        object.__setattr__(self, "extents", e)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))

    def corners(self) -> np.ndarray:
        return self.center + (_SIGNS * self.extents / 2.0) @ self.rotation.T

    def contains(self, pts, tol: float = 0.0) -> np.ndarray:
        local = (np.asarray(pts) - self.center) @ self.rotation
        return np.all(np.abs(local) <= self.extents / 2.0 + tol, axis=-1)

    def planes(self):
        """Six (normal, offset) pairs with ``normal . x <= offset`` inside."""
        out = []
        for a in range(3):
            n = self.rotation[:, a]
            h = self.extents[a] / 2.0
            c = n @ self.center
            out += [(n, c + h), (-n, -c + h)]
        return out


def _edge_plane_hits(a: OrientedBox, b: OrientedBox) -> list:
    """Points where the edges of ``a`` cross the face planes of ``b``."""
    corners = a.corners()
    hits = []
    for i, j in _EDGES:
        p, q = corners[i], corners[j]
        d = q - p
        for n, off in b.planes():
            den = n @ d
            if abs(den) < 1e-15:
                continue
            t = (off - n @ p) / den
            if 0.0 <= t <= 1.0:
                hits.append(p + t * d)
    return hits


def intersection_volume(a: OrientedBox, b: OrientedBox) -> float:
    """Volume of the convex intersection of two oriented boxes.

    The intersection polytope's vertices are among the corners of either box
    inside the other and the edge/face crossings between them; its volume is
    that of their convex hull.
    """
    scale = max(a.extents.max(), b.extents.max())
    tol = _INSIDE_TOL * scale
    cand = [a.corners()[b.contains(a.corners(), tol)], b.corners()[a.contains(b.corners(), tol)]]
    hits = np.array(_edge_plane_hits(a, b) + _edge_plane_hits(b, a)).reshape(-1, 3)
    if len(hits):
        cand.append(hits[a.contains(hits, tol) & b.contains(hits, tol)])
    pts = np.concatenate(cand)
    if len(pts) < 4:
        return 0.0
    try:
        vol = ConvexHull(pts).volume
    except QhullError:  # flat or degenerate contact
        return 0.0
    return float(min(vol, a.volume, b.volume))


def box_iou(a: OrientedBox, b: OrientedBox) -> float:
    inter = intersection_volume(a, b)
    return float(inter / (a.volume + b.volume - inter))


def shape_box(mesh: Mesh, normalize: bool = True):
    """Canonical bounding-box center and extents; extents scaled to unit diagonal if ``normalize``."""
    lo, hi = mesh.bounds()
    ext = hi - lo
    diag = np.linalg.norm(ext)
    if diag <= 0:
        raise DegenerateBox("mesh has zero extent")
    return (lo + hi) / 2.0, ext / diag if normalize else ext


def box_from_pose(pose: Sim3Pose, mesh: Mesh) -> OrientedBox:
    """Posed box of ``mesh``: scale times its unit-diagonal aspect ratios, at the posed box center."""
    center, aspect = shape_box(mesh)
    return OrientedBox(pose.apply(center[None])[0], pose.rotation, pose.scale * aspect)


def iou3d(est_pose: Sim3Pose, est_mesh: Mesh, gt_pose: Sim3Pose, gt_mesh: Mesh) -> float:
    """3D IoU between the posed unit-diagonal boxes of the estimated and true shapes."""
    return box_iou(box_from_pose(est_pose, est_mesh), box_from_pose(gt_pose, gt_mesh))


def rotation_error(r_est, r_gt, spec: SymmetrySpec | None = None) -> float:
    """Degrees; minimum over the proper rotations of ``spec``.

    With a continuous axis only the direction of that axis counts.
    """
    spec = spec if spec is not None else SymmetrySpec()
    r_est = np.asarray(r_est)
    r_gt = np.asarray(r_gt)
    if spec.continuous_axis is not None:
        a = np.asarray(spec.continuous_axis, dtype=np.float64)
        a = a / np.linalg.norm(a)
        c = np.clip((r_est @ a) @ (r_gt @ a), -1.0, 1.0)
        return float(np.degrees(np.arccos(c)))
    return min(geodesic_angle(r_est @ m, r_gt) for m in spec.proper_rotations())


def pose_errors(est: Sim3Pose, gt: Sim3Pose, spec: SymmetrySpec | None = None):
    """``(rotation deg, translation m, relative scale)``."""
    rot = rotation_error(est.rotation, gt.rotation, spec)
    trans = float(np.linalg.norm(est.translation - gt.translation))
    scale = abs(est.scale - gt.scale) / gt.scale
    return rot, trans, float(scale)


def chamfer_metric(est_mesh: Mesh, gt_mesh: Mesh, n_samples: int = 10000, seed: int = 0) -> float:
    """Two-sided mean squared nearest-neighbour distance between surface samples.

    Both meshes are sampled with the same seed, so identical meshes give 0.
    """
    a = sample_surface(est_mesh, n_samples, seed).positions
    b = sample_surface(gt_mesh, n_samples, seed).positions
    return chamfer_loss(a, b)[0]


def threshold_accuracy(rot_err, trans_err, deg: float, meters: float) -> float:
    r = np.asarray(rot_err, dtype=np.float64)
    t = np.asarray(trans_err, dtype=np.float64)
    if r.size == 0:
        return 0.0
    ok = (r < deg) & (t < meters)
    return float(ok.mean())
