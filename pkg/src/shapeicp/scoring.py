"""Hypothesis scores: residual statistics, symmetry check, depth rendering."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import AllBehindCamera, EmptyMask, NonFinite
from .geometry import Mesh, Sim3Pose, as_points, reflection_across_plane, rotation_about_axis

BACKGROUND = 0.0
NEAR_PLANE = 1e-6
_RASTER_CHUNK = 2_000_000
_INSIDE_EPS = 1e-9


# ---------------------------------------------------------------------------
# camera and images


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1e-4
    # crops of a larger image may have their principal point outside the crop
    allow_offcenter: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if not self.allow_offcenter and not (-0.5 <= self.cx <= self.width - 0.5 and -0.5 <= self.cy <= self.height - 0.5):
            raise ValueError("principal point must lie inside the image")
        if self.depth_scale <= 0:
            raise ValueError("depth_scale must be positive")

    def project(self, points):
        p = as_points(points)
        z = p[:, 2]
        return np.column_stack([self.fx * p[:, 0] / z + self.cx, self.fy * p[:, 1] / z + self.cy]), z

    def to_dict(self):
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height", "depth_scale")}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), float(d.get("depth_scale", 1e-4)))


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Per-pixel depth in meters; ``background`` marks pixels without depth."""

    depth: np.ndarray
    background: float = BACKGROUND

    def __post_init__(self):
        d = np.array(self.depth, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError("depth must be a 2D array")
        bad = ~((d > 0) | (d == self.background))
        if np.any(bad):
            raise ValueError("depths must be positive or equal to the background value")
        d.setflags(write=False)
        object.__setattr__(self, "depth", d)

    @property
    def valid(self) -> np.ndarray:
        return self.depth != self.background

    @property
    def shape(self):
        return self.depth.shape


# ---------------------------------------------------------------------------
# rasterization


def _rasterize(verts_cam, faces, cam: CameraIntrinsics):
    h, w = cam.height, cam.width
    zbuf = np.full(h * w, np.inf)
    tri = verts_cam[faces]  # (F, 3, 3)
    keep = np.all(tri[:, :, 2] > NEAR_PLANE, axis=1)
    tri = tri[keep]
    if len(tri) == 0:
        return zbuf.reshape(h, w)
    z = tri[:, :, 2]
    u = cam.fx * tri[:, :, 0] / z + cam.cx
    v = cam.fy * tri[:, :, 1] / z + cam.cy
    area2 = (u[:, 1] - u[:, 0]) * (v[:, 2] - v[:, 0]) - (u[:, 2] - u[:, 0]) * (v[:, 1] - v[:, 0])
    umin = np.clip(np.ceil(u.min(1)), 0, w - 1).astype(np.int64)
    umax = np.clip(np.floor(u.max(1)), 0, w - 1).astype(np.int64)
    vmin = np.clip(np.ceil(v.min(1)), 0, h - 1).astype(np.int64)
    vmax = np.clip(np.floor(v.max(1)), 0, h - 1).astype(np.int64)
    nu = umax - umin + 1
    nv = vmax - vmin + 1
    live = (u.max(1) >= 0) & (u.min(1) <= w - 1) & (v.max(1) >= 0) & (v.min(1) <= h - 1)
    live &= (nu > 0) & (nv > 0) & (np.abs(area2) > 1e-12)
    idx = np.flatnonzero(live)
    counts = (nu * nv)[idx]
    bounds = np.searchsorted(np.cumsum(counts), np.arange(0, counts.sum(), _RASTER_CHUNK), side="right")
    bounds = np.unique(np.concatenate([[0], bounds, [len(idx)]]))
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        fi = idx[lo:hi]
        cnt = counts[lo:hi]
        if cnt.sum() == 0:
            continue
        owner = np.repeat(fi, cnt)
        start = np.repeat(np.cumsum(cnt) - cnt, cnt)
        local = np.arange(cnt.sum()) - start
        pu = umin[owner] + local % nu[owner]
        pv = vmin[owner] + local // nu[owner]
        ua, ub, uc = u[owner].T
        va, vb, vc = v[owner].T
        inv_area = 1.0 / area2[owner]
        la = ((ub - pu) * (vc - pv) - (uc - pu) * (vb - pv)) * inv_area
        lb = ((uc - pu) * (va - pv) - (ua - pu) * (vc - pv)) * inv_area
        lc = 1.0 - la - lb
        inside = (la >= -_INSIDE_EPS) & (lb >= -_INSIDE_EPS) & (lc >= -_INSIDE_EPS)
        if not np.any(inside):
            continue
        zz = z[owner[inside]]
        inv_z = la[inside] / zz[:, 0] + lb[inside] / zz[:, 1] + lc[inside] / zz[:, 2]
        np.minimum.at(zbuf, pv[inside] * w + pu[inside], 1.0 / inv_z)
    return zbuf.reshape(h, w)


def render_depth(pose: Sim3Pose, mesh: Mesh, cam: CameraIntrinsics) -> DepthImage:
    """Z-buffer depth image of ``mesh`` placed by ``pose`` (camera frame).

    Pixel (u, v) samples the ray through image coordinates (u, v); depth is
    interpolated perspective-correctly (1/z linear in screen space).  Faces
    are not culled; faces crossing the near plane are dropped.
    """
    if len(mesh.faces) == 0:
        raise ValueError("mesh has no faces")
    verts = pose.apply(mesh.vertices)
    if np.all(verts[:, 2] <= 0):
        raise AllBehindCamera("every vertex lies behind the camera")
    zbuf = _rasterize(verts, mesh.faces, cam)
    zbuf[~np.isfinite(zbuf)] = BACKGROUND
    return DepthImage(zbuf, BACKGROUND)


# ---------------------------------------------------------------------------
# depth rendering score


@dataclass(frozen=True, eq=False)
class RenderTarget:
    """Observed depth cropped around the mask and resampled for scoring.

    ``occluder`` holds the valid depth of pixels outside the mask (background
    elsewhere); a model pixel behind such a surface is hidden, not wrong.
    """

    camera: CameraIntrinsics
    observed: np.ndarray
    omega: np.ndarray
    occluder: np.ndarray | None = None


def prepare_render_target(observed: DepthImage, cam: CameraIntrinsics, mask=None, max_side: int = 96,
                          margin: float = 0.1, mask_only: bool = False, occlusion_aware: bool = True) -> RenderTarget:
    """Crop the masked observation to its (padded) bounding box, longer side <= ``max_side``.

    With ``occlusion_aware`` the unmasked valid depth is kept as occluders.
    """
    d = observed.depth
    mask = observed.valid if mask is None else np.asarray(mask, dtype=bool)
    if not np.any(mask):
        raise EmptyMask("observation mask is empty")
    masked = np.where(mask, d, BACKGROUND)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    y0, y1, x0, x1 = rows[0], rows[-1], cols[0], cols[-1]
    py = int(np.ceil(margin * (y1 - y0 + 1)))
    px = int(np.ceil(margin * (x1 - x0 + 1)))
    y0, y1 = max(0, y0 - py), min(cam.height - 1, y1 + py)
    x0, x1 = max(0, x0 - px), min(cam.width - 1, x1 + px)
    w, h = x1 - x0 + 1, y1 - y0 + 1
    f = min(1.0, max_side / max(w, h))
    wn, hn = max(1, int(round(w * f))), max(1, int(round(h * f)))
    fx_, fy_ = wn / w, hn / h
    crop_cam = CameraIntrinsics(
        cam.fx * fx_, cam.fy * fy_,
        fx_ * (cam.cx - x0 + 0.5) - 0.5, fy_ * (cam.cy - y0 + 0.5) - 0.5,
        wn, hn, cam.depth_scale, allow_offcenter=True,
    )
    us = np.clip(np.round(x0 - 0.5 + (np.arange(wn) + 0.5) / fx_), x0, x1).astype(np.int64)
    vs = np.clip(np.round(y0 - 0.5 + (np.arange(hn) + 0.5) / fy_), y0, y1).astype(np.int64)
    obs = masked[np.ix_(vs, us)]
    omega = mask[np.ix_(vs, us)] if mask_only else np.ones_like(obs, dtype=bool)
    if not np.any(omega):
        raise EmptyMask("scoring region is empty")
    occ = None
    if occlusion_aware:
        occ = np.where(~mask & observed.valid, d, BACKGROUND)[np.ix_(vs, us)]
        if not np.any(occ != BACKGROUND):
            occ = None
    return RenderTarget(crop_cam, obs, omega, occ)


def render_score(pose: Sim3Pose, mesh: Mesh, target: RenderTarget) -> float:
    try:
        rendered = render_depth(pose, mesh, target.camera).depth
    except AllBehindCamera:
        rendered = np.full(target.observed.shape, BACKGROUND)
    if target.occluder is not None:
        hidden = (target.occluder != BACKGROUND) & (rendered != BACKGROUND) & (target.occluder < rendered)
        rendered = np.where(hidden, target.observed, rendered)
    diff = (rendered - target.observed)[target.omega]
    return float(np.mean(diff ** 2))


def depth_render_score(pose: Sim3Pose, asm, code, cam: CameraIntrinsics, observed: DepthImage, **kwargs) -> float:
    """Mean squared depth difference between the rendered model and the observation.

    Background pixels take part with the shared background value, so model
    silhouettes spilling past the object are penalized.
    """
    target = prepare_render_target(observed, cam, **kwargs)
    return render_score(pose, asm.mesh(code), target)


# ---------------------------------------------------------------------------
# residual and symmetry scores


def point_residuals(pose: Sim3Pose, model_points, measurements, tree: cKDTree | None = None) -> np.ndarray:
    """Squared distance from each measurement to the nearest posed model point."""
    q = as_points(measurements)
    x = pose.inverse().apply(q)
    tree = tree if tree is not None else cKDTree(as_points(model_points))
    d, _ = tree.query(x)
    return pose.scale ** 2 * d ** 2


def residual_scores(residuals):
    """Mean and population standard deviation of per-measurement residuals."""
    r = np.asarray(residuals, dtype=np.float64)
    return float(r.mean()), float(r.std())


@dataclass(frozen=True, eq=False)
class SymmetrySpec:
    """Canonical-frame symmetry operations of a category.

    ``operations`` is a list of (3x3 matrix, kind) with kind "rotation" or
    "reflection"; ``continuous_axis`` marks a surface of revolution.
    """

    operations: list = field(default_factory=list)
    continuous_axis: tuple | None = None

    def __post_init__(self):
        ops = []
        for m, kind in self.operations:
            m = np.asarray(m, dtype=np.float64)
            if np.abs(m.T @ m - np.eye(3)).max() > 1e-9:
                raise ValueError("symmetry operation must be orthonormal")
            det = np.linalg.det(m)
            if kind == "rotation" and det < 0 or kind == "reflection" and det > 0:
                raise ValueError(f"{kind} has determinant {det:+.0f}")
            if kind not in ("rotation", "reflection"):
                raise ValueError(f"unknown symmetry kind {kind!r}")
            ops.append((m, kind))
        object.__setattr__(self, "operations", ops)

    @property
    def matrices(self):
        return [m for m, _ in self.operations]

    def proper_rotations(self):
        """Identity plus every proper rotation in the spec."""
        return [np.eye(3)] + [m for m, kind in self.operations if kind == "rotation"]

    def __len__(self):
        return len(self.operations)

    @classmethod
    def from_entries(cls, entries):
        """Build from catalog entries (see FORMATS.md)."""
        ops, axis = [], None
        for e in entries:
            kind = e["type"]
            if kind == "rotation":
                angles = e.get("angles_deg")
                if angles is None:
                    fold = int(e["fold"])
                    angles = [360.0 * i / fold for i in range(1, fold)]
                ops += [(rotation_about_axis(e["axis"], a), "rotation") for a in angles]
            elif kind == "continuous":
                n = int(e.get("samples", 8))
                ops += [(rotation_about_axis(e["axis"], 360.0 * i / n), "rotation") for i in range(1, n)]
                axis = tuple(float(c) for c in e["axis"])
            elif kind == "reflection":
                ops.append((reflection_across_plane(e["normal"]), "reflection"))
            else:
                raise ValueError(f"unknown symmetry entry type {kind!r}")
        return cls(ops, axis)


# canonical frame: y up; these follow common tabletop-object conventions
DEFAULT_SYMMETRY_CATALOG = {
    "bottle": [{"type": "continuous", "axis": [0, 1, 0], "samples": 8}],
    "can": [{"type": "continuous", "axis": [0, 1, 0], "samples": 8}],
    "bowl": [{"type": "continuous", "axis": [0, 1, 0], "samples": 8}],
    "box": [{"type": "rotation", "axis": [0, 1, 0], "fold": 4}],
    "laptop": [{"type": "reflection", "normal": [1, 0, 0]}],
    "mug": [{"type": "reflection", "normal": [0, 0, 1]}],
    "camera": [],
    "synthetic": [{"type": "reflection", "normal": [0, 0, 1]}],
}


def load_symmetry_catalog(path=None) -> dict:
    """Category -> SymmetrySpec from a JSON file (or the built-in catalog)."""
    raw = DEFAULT_SYMMETRY_CATALOG if path is None else json.loads(Path(path).read_text())
    return {cat: SymmetrySpec.from_entries(entries) for cat, entries in raw.items()}


def symmetry_for(category: str, catalog: dict | None = None) -> SymmetrySpec:
    catalog = catalog if catalog is not None else load_symmetry_catalog()
    return catalog.get(category, SymmetrySpec())


def symmetry_residuals(pose: Sim3Pose, model_points, measurements, op, tree=None) -> np.ndarray:
    """Residuals of measurements mapped through ``T T_psi T^-1`` against ``T p``."""
    q = as_points(measurements)
    x = pose.inverse().apply(q) @ np.asarray(op).T
    tree = tree if tree is not None else cKDTree(as_points(model_points))
    d, _ = tree.query(x)
    return pose.scale ** 2 * d ** 2


def symmetry_score(pose: Sim3Pose, model_points, measurements, spec: SymmetrySpec, tree=None) -> float:
    """Average over operations of (mean + std) of the symmetry residuals; 0 without operations."""
    if len(spec) == 0:
        return 0.0
    tree = tree if tree is not None else cKDTree(as_points(model_points))
    total = 0.0
    for m in spec.matrices:
        r = symmetry_residuals(pose, model_points, measurements, m, tree)
        total += r.mean() + r.std()
    return float(total / len(spec))


def total_score(s_r, s_sigma, s_psi=0.0, s_dr=None, lambda_psi=0.0, lambda_dr=0.0) -> float:
    """``S_r + S_sigma + lambda_psi * S_psi + lambda_dr * S_dr``; ``s_dr=None`` means rendering inactive."""
    parts = [s_r, s_sigma, s_psi] + ([] if s_dr is None else [s_dr])
    if not all(np.isfinite(p) for p in parts):
        raise NonFinite(f"non-finite score component in {parts}")
    total = s_r + s_sigma + lambda_psi * s_psi
    if s_dr is not None:
        total += lambda_dr * s_dr
    return float(total)
