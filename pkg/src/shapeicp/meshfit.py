"""Surface sampling, mesh deformation losses and template fitting.

All losses return ``(value, gradient)``; gradients are with respect to the
vertex array (or the first point set for the Chamfer term).  The private
``_normal_consistency``, ``_edge_length`` and ``_laplacian`` accept vertex
arrays with extra leading dimensions so many meshes sharing one topology can
be evaluated at once.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import EmptyCloud, EmptyMesh, IsolatedVertex, NoInteriorEdges, NonFiniteLoss
from .geometry import Mesh, MeshTopology, as_points

log = logging.getLogger(__name__)

LAPLACIAN_EPS = 1e-12
NORMAL_EPS = 1e-300


@dataclass(frozen=True, eq=False)
class SurfaceSamples:
    """Fixed barycentric samples: face index and weights per sample."""

    face_index: np.ndarray
    weights: np.ndarray
    positions: np.ndarray
    faces: np.ndarray = field(repr=False)
    n_vertices: int = 0

    def __len__(self):
        return len(self.face_index)

    @property
    def vertex_index(self) -> np.ndarray:
        """(N, 3) vertex ids used by each sample."""
        return self.faces[self.face_index]

    def evaluate(self, vertices) -> np.ndarray:
        """Sample positions for vertex arrays of shape (..., V, 3)."""
        v = np.asarray(vertices)
        corner = v[..., self.vertex_index, :]  # (..., N, 3, 3)
        return np.einsum("nk,...nkd->...nd", self.weights, corner)

    def scatter_matrix(self) -> sp.csr_matrix:
        """(V, N) matrix mapping per-sample gradients onto vertices."""
        n = len(self)
        rows = self.vertex_index.ravel()
        cols = np.repeat(np.arange(n), 3)
        return sp.csr_matrix((self.weights.ravel(), (rows, cols)), shape=(self.n_vertices, n))


def sample_surface(mesh: Mesh, n: int, seed: int = 0) -> SurfaceSamples:
    """Area-weighted face choice and uniform barycentric weights on each face."""
    if len(mesh.faces) == 0:
        raise EmptyMesh("mesh has no faces")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise EmptyMesh("mesh has zero surface area")
    face_index = rng.choice(len(areas), size=n, p=areas / total)
    uv = rng.random((n, 2))
    flip = uv.sum(axis=1) > 1.0
    uv[flip] = 1.0 - uv[flip]
    w = np.column_stack([1.0 - uv[:, 0] - uv[:, 1], uv[:, 0], uv[:, 1]])
    # exact unit sum
    w[:, 0] = 1.0 - w[:, 1] - w[:, 2]
    samples = SurfaceSamples(face_index, w, np.zeros((n, 3)), mesh.faces, mesh.n_vertices)
    pos = samples.evaluate(mesh.vertices)
    object.__setattr__(samples, "positions", pos)
    for a in (face_index, w, pos):
        a.setflags(write=False)
    return samples


# ---------------------------------------------------------------------------
# losses


def chamfer_loss(a, b):
    """Two-sided mean squared nearest-neighbour distance; gradient w.r.t. ``a``."""
    pa, pb = as_points(a), as_points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyCloud("chamfer needs two nonempty clouds")
    _, nn_ab = cKDTree(pb).query(pa)
    _, nn_ba = cKDTree(pa).query(pb)
    d_ab = pa - pb[nn_ab]
    d_ba = pa[nn_ba] - pb
    n, m = len(pa), len(pb)
    value = (d_ab ** 2).sum() / n + (d_ba ** 2).sum() / m
    grad = 2.0 * d_ab / n
    np.add.at(grad, nn_ba, 2.0 * d_ba / m)
    return float(value), grad


def _apply_sparse(op: sp.spmatrix, x: np.ndarray) -> np.ndarray:
    """Apply a (R, V) sparse operator along axis -2 of a (..., V, 3) array."""
    v = x.shape[-2]
    lead = x.shape[:-2]
    flat = np.moveaxis(x.reshape((-1, v, 3)), 1, 0).reshape(v, -1)
    out = op @ flat
    return np.moveaxis(out.reshape(op.shape[0], -1, 3), 0, 1).reshape(lead + (op.shape[0], 3))


def _normal_consistency(verts, topo: MeshTopology, with_grad=True):
    interior = topo.interior_edges
    if len(interior) == 0:
        raise NoInteriorEdges("no edge is shared by two faces")
    f = topo.faces
    tri = verts[..., f, :]  # (..., F, 3, 3)
    e1 = tri[..., 1, :] - tri[..., 0, :]
    e2 = tri[..., 2, :] - tri[..., 0, :]
    a = np.cross(e1, e2)
    norm = np.sqrt((a * a).sum(-1))
    nrm = a / np.maximum(norm, NORMAL_EPS)[..., None]
    fp = topo.edge_faces[interior, 0]
    fm = topo.edge_faces[interior, 1]
    cos = (nrm[..., fp, :] * nrm[..., fm, :]).sum(-1)
    ne = len(interior)
    value = (1.0 - cos).sum(-1) / ne
    if not with_grad:
        return value, None
    # d(1 - cos)/d n_plus = -n_minus, chained through n = a / |a|
    acc_p, acc_m = topo.interior_face_accumulators
    g_n = _apply_sparse(acc_p, -nrm[..., fm, :] / ne) + _apply_sparse(acc_m, -nrm[..., fp, :] / ne)
    nf = nrm.shape[-2]
    lead = nrm.shape[:-2]
    proj = (g_n * nrm).sum(-1, keepdims=True)
    g_a = (g_n - proj * nrm) / np.maximum(norm, NORMAL_EPS)[..., None]
    g_v1 = np.cross(e2, g_a)
    g_v2 = np.cross(g_a, e1)
    g_v0 = -g_v1 - g_v2
    corners = np.stack([g_v0, g_v1, g_v2], axis=-2)  # (..., F, 3, 3)
    corners = corners.reshape(lead + (nf * 3, 3))
    grad = _apply_sparse(topo.corner_scatter, corners)
    return value, grad


def _edge_length(verts, topo: MeshTopology, with_grad=True):
    d = _apply_sparse(topo.edge_difference, verts)
    ne = d.shape[-2]
    value = (d * d).sum((-1, -2)) / ne
    if not with_grad:
        return value, None
    grad = _apply_sparse(topo.edge_difference.T.tocsr(), 2.0 * d / ne)
    return value, grad


def _laplacian(verts, topo: MeshTopology, with_grad=True):
    if np.any(topo.degree == 0):
        raise IsolatedVertex("every vertex needs at least one neighbour")
    u = _apply_sparse(topo.laplacian, verts)
    norm = np.sqrt((u * u).sum(-1))
    nv = topo.n_vertices
    value = norm.sum(-1) / nv
    if not with_grad:
        return value, None
    safe = norm >= LAPLACIAN_EPS
    unit = np.where(safe[..., None], u / np.where(safe, norm, 1.0)[..., None], 0.0)
    grad = _apply_sparse(topo.laplacian.T.tocsr(), unit / nv)
    return value, grad


def normal_consistency_loss(mesh: Mesh):
    """Mean ``1 - cos`` between the normals of faces sharing each interior edge."""
    value, grad = _normal_consistency(mesh.vertices, mesh.topology)
    return float(value), grad


def edge_length_loss(mesh: Mesh):
    """Mean squared edge length."""
    if len(mesh.edges) == 0:
        raise EmptyMesh("mesh has no edges")
    value, grad = _edge_length(mesh.vertices, mesh.topology)
    return float(value), grad


def laplacian_loss(mesh: Mesh):
    """Mean (unsquared) norm of the uniform Laplacian at each vertex."""
    value, grad = _laplacian(mesh.vertices, mesh.topology)
    return float(value), grad


def regularizers(verts, topo: MeshTopology, w_normal, w_edge, w_laplacian, with_grad=True):
    """Weighted sum of the three mesh regularizers for (..., V, 3) vertices."""
    total = 0.0
    grad = 0.0 if with_grad else None
    for weight, fn in ((w_normal, _normal_consistency), (w_edge, _edge_length), (w_laplacian, _laplacian)):
        if weight == 0:
            continue
        v, g = fn(verts, topo, with_grad)
        total = total + weight * v
        if with_grad:
            grad = grad + weight * g
    if with_grad and np.isscalar(grad):
        grad = np.zeros_like(verts)
    return total, grad


# ---------------------------------------------------------------------------
# template deformation


@dataclass
class DeformationConfig:
    w_normal: float = 0.01
    w_edge: float = 1.0
    w_laplacian: float = 0.1
    n_template_samples: int = 2500
    n_target_samples: int = 2500
    iterations: int = 2000
    lr: float = 1.0
    momentum: float = 0.9
    lr_milestones: tuple = (0.6, 0.85)
    lr_decay: float = 0.1
    resample_target: bool = True
    eval_samples: int = 20000
    seed: int = 0

    def __post_init__(self):
        if min(self.w_normal, self.w_edge, self.w_laplacian) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.n_template_samples < 1 or self.n_target_samples < 1:
            raise ValueError("sample counts must be >= 1")
        self.lr_milestones = tuple(self.lr_milestones)


@dataclass
class DeformationResult:
    mesh: Mesh
    chamfer: float
    history: list


def chamfer_between_meshes(a: Mesh, b: Mesh, n: int, seed: int = 0) -> float:
    pa = sample_surface(a, n, seed).positions
    pb = sample_surface(b, n, seed + 1).positions
    return chamfer_loss(pa, pb)[0]


def deform_template(template: Mesh, target: Mesh, cfg: DeformationConfig | None = None) -> DeformationResult:
    """Fit ``template`` vertices to ``target`` by SGD with momentum.

    Template sample weights are drawn once and stay fixed; target samples are
    redrawn each step unless ``cfg.resample_target`` is False.  The target is
    expected centered with unit bounding-box diagonal.
    """
    cfg = cfg or DeformationConfig()
    ss = np.random.SeedSequence(cfg.seed)
    tmpl_seed, tgt_seed, eval_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    samples = sample_surface(template, cfg.n_template_samples, tmpl_seed)
    scatter = samples.scatter_matrix()
    topo = template.topology
    verts = template.vertices.copy()
    buf = np.zeros_like(verts)
    fixed_target = sample_surface(target, cfg.n_target_samples, tgt_seed).positions
    tgt_rng = np.random.default_rng(tgt_seed)
    milestones = [int(round(m * cfg.iterations)) for m in cfg.lr_milestones]
    history = []
    for it in range(cfg.iterations):
        lr = cfg.lr * cfg.lr_decay ** sum(it >= m for m in milestones)
        if cfg.resample_target:
            q = sample_surface(target, cfg.n_target_samples, int(tgt_rng.integers(2 ** 63))).positions
        else:
            q = fixed_target
        p = samples.evaluate(verts)
        lc, gp = chamfer_loss(p, q)
        lr_val, g_reg = regularizers(verts, topo, cfg.w_normal, cfg.w_edge, cfg.w_laplacian)
        loss = lc + float(lr_val)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"loss became {loss} at iteration {it} (chamfer={lc}, reg={lr_val})")
        grad = scatter @ gp + g_reg
        buf = cfg.momentum * buf + grad
        verts = verts - lr * buf
        history.append(loss)
    out = template.with_vertices(verts)
    final = chamfer_between_meshes(out, target, cfg.eval_samples, eval_seed)
    log.info("deformation finished: loss %.3e chamfer %.3e", history[-1] if history else np.nan, final)
    return DeformationResult(out, final, history)
