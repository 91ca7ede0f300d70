"""Geometric value types, SIM(3) alignment, exact k-NN and the SO(3) grid."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import DegenerateConfiguration, EmptyReference

ORTHO_TOL = 1e-9
# umeyama: second singular value of the source covariance below this
# fraction of the largest means the source is collinear (or a single point).
DEGENERATE_RATIO = 1e-12


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# point clouds and meshes


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1 and pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains NaN or Inf coordinates")
        object.__setattr__(self, "points", _frozen(pts))
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (len(pts),):
                raise ValueError("weights must have one entry per point")
            object.__setattr__(self, "weights", _frozen(w))

    def __len__(self):
        return len(self.points)


def as_points(x) -> np.ndarray:
    """Return an (n, 3) float array from a PointCloud, Mesh or array-like."""
    if isinstance(x, PointCloud):
        return x.points
    if isinstance(x, Mesh):
        return x.vertices
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1 and a.size == 0:
        a = a.reshape(0, 3)
    return a


@dataclass(frozen=True, eq=False)
class MeshTopology:
    """Connectivity derived from a face list; shared by meshes with equal faces."""

    faces: np.ndarray
    n_vertices: int

    @classmethod
    def from_faces(cls, faces, n_vertices):
        f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= n_vertices):
            raise ValueError("face index out of range")
        return cls(_frozen(f, np.int64), int(n_vertices))

    @cached_property
    def _edge_data(self):
        f = self.faces
        if len(f) == 0:
            return np.zeros((0, 2), np.int64), np.zeros((0, 2), np.int64)
        pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        owner = np.tile(np.arange(len(f)), 3)
        pairs = np.sort(pairs, axis=1)
        edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        order = np.argsort(inverse, kind="stable")
        sorted_inv = inverse[order]
        first = np.searchsorted(sorted_inv, np.arange(len(edges)), side="left")
        counts = np.bincount(inverse, minlength=len(edges))
        edge_faces = np.full((len(edges), 2), -1, np.int64)
        edge_faces[:, 0] = owner[order[first]]
        two = counts >= 2
        edge_faces[two, 1] = owner[order[first[two] + 1]]
        return _frozen(edges, np.int64), _frozen(edge_faces, np.int64)

    @property
    def edges(self) -> np.ndarray:
        return self._edge_data[0]

    @property
    def edge_faces(self) -> np.ndarray:
        """(E, 2) adjacent face indices; -1 marks a boundary edge."""
        return self._edge_data[1]

    @cached_property
    def interior_edges(self) -> np.ndarray:
        return np.flatnonzero(self.edge_faces[:, 1] >= 0)

    @cached_property
    def interior_face_accumulators(self):
        """(F, E_int) operators scattering per-interior-edge values to either face."""
        interior = self.interior_edges
        ne = len(interior)
        nf = len(self.faces)
        cols = np.arange(ne)
        ones = np.ones(ne)
        acc_p = sp.csr_matrix((ones, (self.edge_faces[interior, 0], cols)), shape=(nf, ne))
        acc_m = sp.csr_matrix((ones, (self.edge_faces[interior, 1], cols)), shape=(nf, ne))
        return acc_p, acc_m

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        e = self.edges
        n = self.n_vertices
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))

    @cached_property
    def degree(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel()

    @cached_property
    def laplacian(self) -> sp.csr_matrix:
        """Uniform Laplacian ``I - D^-1 A``; rows of isolated vertices are zero."""
        deg = self.degree
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        lap = sp.identity(self.n_vertices, format="csr") - sp.diags(inv) @ self.adjacency
        lap = lap.tocsr()
        lap[deg == 0] = 0
        lap.eliminate_zeros()
        return lap

    @cached_property
    def edge_difference(self) -> sp.csr_matrix:
        """(E, V) operator mapping vertices to ``v[e0] - v[e1]``."""
        e = self.edges
        ne = len(e)
        rows = np.concatenate([np.arange(ne), np.arange(ne)])
        cols = np.concatenate([e[:, 0], e[:, 1]])
        vals = np.concatenate([np.ones(ne), -np.ones(ne)])
        return sp.csr_matrix((vals, (rows, cols)), shape=(ne, self.n_vertices))

    @cached_property
    def corner_scatter(self) -> sp.csr_matrix:
        """(V, 3F) operator summing per-face-corner values into vertices."""
        f = self.faces.ravel()
        return sp.csr_matrix(
            (np.ones(len(f)), (f, np.arange(len(f)))), shape=(self.n_vertices, len(f))
        )


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh. Vertices in meters, faces as vertex-index triples."""

    vertices: np.ndarray
    faces: np.ndarray
    topology: MeshTopology | None = field(default=None, repr=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise ValueError("mesh vertices must be finite")
        object.__setattr__(self, "vertices", _frozen(v))
        topo = self.topology
        if topo is None or topo.n_vertices != len(v):
            topo = MeshTopology.from_faces(self.faces, len(v))
        object.__setattr__(self, "topology", topo)
        object.__setattr__(self, "faces", topo.faces)

    @property
    def edges(self):
        return self.topology.edges

    @property
    def edge_faces(self):
        return self.topology.edge_faces

    @property
    def n_vertices(self):
        return len(self.vertices)

    def with_vertices(self, vertices) -> "Mesh":
        return Mesh(vertices, self.faces, self.topology)

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        """Unit normals following the face winding (zero for degenerate faces)."""
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return np.where(norm > 0, n / np.where(norm > 0, norm, 1.0), 0.0)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def is_closed_manifold(self) -> bool:
        return bool(len(self.edges)) and bool(np.all(self.edge_faces[:, 1] >= 0))


def icosphere(level: int = 3, radius: float = 1.0) -> Mesh:
    """Subdivided icosahedron with outward-facing winding.

    Level 3 gives 642 vertices and 1280 faces.
    """
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    for _ in range(level):
        pairs = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
        edges, inv = np.unique(pairs, axis=0, return_inverse=True)
        inv = inv.ravel()
        mid = verts[edges].mean(axis=1)
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        base = len(verts)
        nf = len(faces)
        ab, bc, ca = base + inv[:nf], base + inv[nf:2 * nf], base + inv[2 * nf:]
        a, b, c = faces.T
        faces = np.concatenate(
            [
                np.stack([a, ab, ca], 1),
                np.stack([b, bc, ab], 1),
                np.stack([c, ca, bc], 1),
                np.stack([ab, bc, ca], 1),
            ]
        )
        verts = np.concatenate([verts, mid])
    return Mesh(verts * radius, faces)


def box_mesh(extents=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> Mesh:
    """Closed axis-aligned box made of 12 outward-wound triangles."""
    hx, hy, hz = np.asarray(extents, dtype=np.float64) / 2.0
    v = np.array(
        [[sx * hx, sy * hy, sz * hz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
    ) + np.asarray(center, dtype=np.float64)
    # vertex id = 4*ix + 2*iy + iz
    f = np.array(
        [
            [0, 1, 3], [0, 3, 2],  # -x
            [4, 6, 7], [4, 7, 5],  # +x
            [0, 4, 5], [0, 5, 1],  # -y
            [2, 3, 7], [2, 7, 6],  # +y
            [0, 2, 6], [0, 6, 4],  # -z
            [1, 5, 7], [1, 7, 3],  # +z
        ]
    )
    return Mesh(v, f)


def normalize_mesh(mesh: Mesh) -> Mesh:
    """Center at the bounding-box center and scale to unit bounding-box diagonal."""
    lo, hi = mesh.bounds()
    diag = np.linalg.norm(hi - lo)
    if diag <= 0:
        raise DegenerateConfiguration("mesh has zero extent")
    return mesh.with_vertices((mesh.vertices - (lo + hi) / 2.0) / diag)


# ---------------------------------------------------------------------------
# rotations and SIM(3)


def rotation_about_axis(axis, angle_deg: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    a = np.deg2rad(angle_deg)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(a) * k + (1 - np.cos(a)) * (k @ k)


def reflection_across_plane(normal) -> np.ndarray:
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    return np.eye(3) - 2.0 * np.outer(n, n)


def quaternion_to_matrix(q) -> np.ndarray:
    """(..., 4) unit quaternions in (w, x, y, z) order to (..., 3, 3) matrices."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - z * w)
    r[..., 0, 2] = 2 * (x * z + y * w)
    r[..., 1, 0] = 2 * (x * y + z * w)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - x * w)
    r[..., 2, 0] = 2 * (x * z - y * w)
    r[..., 2, 1] = 2 * (y * z + x * w)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def random_rotations(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotations from normalized Gaussian quaternions."""
    return quaternion_to_matrix(rng.standard_normal((n, 4)))


def project_to_so3(r: np.ndarray) -> np.ndarray:
    """Nearest proper rotation(s) in Frobenius norm."""
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    u = u.copy()
    u[..., :, 2] *= d[..., None]
    return u @ vt


@dataclass(frozen=True, eq=False)
class Sim3Pose:
    """``x -> scale * rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        s = float(self.scale)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t)) and np.isfinite(s)):
            raise ValueError("pose must be finite")
        if np.abs(r.T @ r - np.eye(3)).max() >= ORTHO_TOL or np.linalg.det(r) <= 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if s <= 0:
            raise ValueError("scale must be strictly positive")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))
        object.__setattr__(self, "scale", s)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3), 1.0)

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        a = m[:3, :3]
        s = np.cbrt(np.linalg.det(a))
        return cls(project_to_so3(a / s), m[:3, 3], s)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        p = as_points(points)
        return self.scale * p @ self.rotation.T + self.translation

    def inverse(self) -> "Sim3Pose":
        rt = self.rotation.T
        return Sim3Pose(rt, -(rt @ self.translation) / self.scale, 1.0 / self.scale)

    def compose(self, other: "Sim3Pose") -> "Sim3Pose":
        """``self ∘ other``: apply ``other`` first."""
        r = project_to_so3(self.rotation @ other.rotation)
        t = self.scale * self.rotation @ other.translation + self.translation
        return Sim3Pose(r, t, self.scale * other.scale)

    __matmul__ = compose

    def to_dict(self):
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["rotation"], d["translation"], d["scale"])


def geodesic_angle(r1, r2) -> float:
    """Rotation angle of ``r1.T @ r2`` in degrees, in [0, 180]."""
    c = (np.trace(np.asarray(r1).T @ np.asarray(r2)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def geodesic_angles(r1s, r2) -> np.ndarray:
    """Vectorized :func:`geodesic_angle` of a stack against one rotation (or stack)."""
    r1s = np.asarray(r1s)
    c = (np.einsum("...ij,...ij->...", r1s, np.asarray(r2)) - 1.0) / 2.0
    return np.degrees(np.arccos(np.clip(c, -1.0, 1.0)))


# ---------------------------------------------------------------------------
# Umeyama


def umeyama_batch(src, dst, weights):
    """Weighted SIM(3) alignment for a stack of problems.

    Parameters
    ----------
    src : (H, N, 3) array
    dst : (H, N, 3) or (N, 3) array
    weights : (H, N) or (N,) nonnegative array

    Returns
    -------
    rotation (H, 3, 3), translation (H, 3), scale (H,), ok (H,) bool.
    Entries with ``ok == False`` are degenerate and hold the identity.
    """
    src = np.asarray(src, dtype=np.float64)
    h = src.shape[0]
    dst = np.broadcast_to(np.asarray(dst, dtype=np.float64), src.shape)
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), src.shape[:2])
    wsum = w.sum(axis=1)
    ok = (np.count_nonzero(w > 0, axis=1) >= 3) & (wsum > 0)
    wn = w / np.where(wsum > 0, wsum, 1.0)[:, None]
    mu_s = (wn[:, None, :] @ src)[:, 0]
    mu_d = (wn[:, None, :] @ dst)[:, 0]
    sc = src - mu_s[:, None]
    dc = dst - mu_d[:, None]
    wsc = (sc * wn[..., None]).transpose(0, 2, 1)
    cov_ss = wsc @ sc
    cov_ds = (wsc @ dc).transpose(0, 2, 1)
    sv_src = np.linalg.svd(cov_ss, compute_uv=False)
    ok &= sv_src[:, 1] > DEGENERATE_RATIO * sv_src[:, 0]
    var_s = np.trace(cov_ss, axis1=1, axis2=2)
    u, d, vt = np.linalg.svd(cov_ds)
    sign = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    sign[sign == 0] = 1.0
    S = np.ones((h, 3))
    S[:, 2] = sign
    rot = np.einsum("hij,hj,hjk->hik", u, S, vt)
    scale = (d * S).sum(axis=1) / np.where(var_s > 0, var_s, 1.0)
    ok &= np.isfinite(scale) & (scale > 0)
    trans = mu_d - scale[:, None] * np.einsum("hij,hj->hi", rot, mu_s)
    rot[~ok] = np.eye(3)
    trans[~ok] = 0.0
    scale[~ok] = 1.0
    return rot, trans, scale, ok


def umeyama(source, target, correspondence_weights=None) -> Sim3Pose:
    """Weighted least-squares SIM(3) with ``s R source + t ≈ target``.

    Raises :class:`DegenerateConfiguration` for fewer than three weighted
    points or a collinear/zero-variance source.
    """
    p = as_points(source)
    q = as_points(target)
    if correspondence_weights is None:
        w = np.ones(len(p))
    else:
        w = np.asarray(correspondence_weights, dtype=np.float64)
    if not (len(p) == len(q) == len(w)):
        raise ValueError("source, target and weights must have equal length")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    if len(p) < 3:
        raise DegenerateConfiguration("need at least 3 correspondences")
    r, t, s, ok = umeyama_batch(p[None], q, w[None])
    if not ok[0]:
        raise DegenerateConfiguration("source points are collinear or weights degenerate")
    return Sim3Pose(r[0], t[0], s[0])


# ---------------------------------------------------------------------------
# nearest neighbours


def nearest_neighbors(query, reference, q: int = 1, tree: cKDTree | None = None):
    """Exact q-nearest reference points for each query point.

    Returns ``(indices, sqdist)`` both of shape (n_query, q), sorted by
    squared distance with ties broken by the smaller reference index.
    """
    qp = as_points(query)
    rp = as_points(reference)
    n = len(rp)
    if n == 0:
        raise EmptyReference("reference set is empty")
    if not 1 <= q <= n:
        raise ValueError(f"q must be in [1, {n}], got {q}")
    if len(qp) == 0:
        return np.zeros((0, q), np.int64), np.zeros((0, q))
    if tree is None:
        tree = cKDTree(rp)
    k = min(q + 1, n)
    _, idx = tree.query(qp, k=k)
    idx = np.asarray(idx, dtype=np.int64).reshape(len(qp), k)
    d2 = ((qp[:, None, :] - rp[idx]) ** 2).sum(-1)
    order = np.lexsort((idx, d2), axis=-1)
    idx = np.take_along_axis(idx, order, axis=1)
    d2 = np.take_along_axis(d2, order, axis=1)
    if k > q:
        # a tie at the cut means an unseen equidistant point may have a smaller index
        tied = np.flatnonzero(d2[:, q - 1] >= d2[:, q])
        for m in tied:
            full = ((rp - qp[m]) ** 2).sum(-1)
            o = np.lexsort((np.arange(n), full))[:k]
            idx[m], d2[m] = o, full[o]
    return idx[:, :q].copy(), d2[:, :q].copy()


def closest_points_on_triangles(p, a, b, c) -> np.ndarray:
    """Barycentric weights ``(..., 3)`` of the point of triangle ``abc`` closest to ``p``.

    All inputs broadcast over leading axes.  Voronoi-region test on the
    vertices, edges and interior (Ericson, Real-Time Collision Detection).
    Degenerate triangles fall back to their vertex or edge regions.
    """
    p, a, b, c = (np.asarray(x, dtype=np.float64) for x in (p, a, b, c))
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    d1, d2 = (ab * ap).sum(-1), (ac * ap).sum(-1)
    d3, d4 = (ab * bp).sum(-1), (ac * bp).sum(-1)
    d5, d6 = (ab * cp).sum(-1), (ac * cp).sum(-1)
    va, vb, vc = d3 * d6 - d5 * d4, d5 * d2 - d1 * d6, d1 * d4 - d3 * d2

    def safe(num, den):
        return num / np.where(den == 0, 1.0, den)

    den = va + vb + vc
    v, w = safe(vb, den), safe(vc, den)
    out = np.stack([1.0 - v - w, v, w], -1)
    zero = np.zeros_like(d1)
    one = np.ones_like(d1)
    # later assignments take priority: edges over the interior, vertices over edges
    t = safe(d4 - d3, (d4 - d3) + (d5 - d6))
    regions = [
        ((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), (zero, 1.0 - t, t)),
    ]
    t = safe(d2, d2 - d6)
    regions.append(((vb <= 0) & (d2 >= 0) & (d6 <= 0), (1.0 - t, zero, t)))
    t = safe(d1, d1 - d3)
    regions.append(((vc <= 0) & (d1 >= 0) & (d3 <= 0), (1.0 - t, t, zero)))
    regions += [((d6 >= 0) & (d5 <= d6), (zero, zero, one)),
                ((d3 >= 0) & (d4 <= d3), (zero, one, zero)),
                ((d1 <= 0) & (d2 <= 0), (one, zero, zero))]
    for mask, weights in regions:
        out = np.where(mask[..., None], np.stack(weights, -1), out)
    return out


def closest_points_on_mesh(points, mesh: "Mesh", candidates: int = 16):
    """Closest surface point of ``mesh`` for each query point.

    Only the faces with the ``candidates`` nearest centroids are searched,
    which is exact for query points near a reasonably even triangulation.
    Returns ``(face index (M,), barycentric weights (M, 3), points (M, 3))``.
    """
    x = as_points(points)
    tri = mesh.vertices[mesh.faces]
    k = min(candidates, len(tri))
    _, cand = cKDTree(tri.mean(axis=1)).query(x, k=k)
    cand = np.asarray(cand, dtype=np.int64).reshape(len(x), k)
    t = tri[cand]  # (M, k, 3, 3)
    bary = closest_points_on_triangles(x[:, None], t[..., 0, :], t[..., 1, :], t[..., 2, :])
    pts = np.einsum("mkb,mkbd->mkd", bary, t)
    best = np.argmin(((pts - x[:, None]) ** 2).sum(-1), axis=1)
    rows = np.arange(len(x))
    return cand[rows, best], bary[rows, best], pts[rows, best]


# ---------------------------------------------------------------------------
# SO(3) grid


@dataclass(frozen=True, eq=False)
class RotationGrid:
    rotations: np.ndarray
    level: int
    n_sphere: int
    n_circle: int

    def __len__(self):
        return len(self.rotations)


def healpix_centers(nside: int):
    """Ring-scheme HEALPix pixel centers ``(theta, phi)``; 12*nside**2 equal-area cells."""
    npix = 12 * nside * nside
    ncap = 2 * nside * (nside - 1)
    p = np.arange(npix)
    z = np.empty(npix)
    phi = np.empty(npix)

    north = p < ncap
    pn = p[north]
    i = (1 + np.sqrt(1 + 2 * pn).astype(np.int64)) // 2
    # guard against sqrt rounding
    i = np.where(2 * i * (i - 1) > pn, i - 1, i)
    j = pn + 1 - 2 * i * (i - 1)
    z[north] = 1 - i * i / (3.0 * nside * nside)
    phi[north] = (j - 0.5) * np.pi / (2 * i)

    eq = (p >= ncap) & (p < npix - ncap)
    pe = p[eq] - ncap
    tmp = pe // (4 * nside)
    i = tmp + nside
    j = pe - tmp * 4 * nside + 1
    fodd = np.where((i + nside) % 2 == 1, 1.0, 0.5)
    z[eq] = (2 * nside - i) * 2.0 / (3.0 * nside)
    phi[eq] = (j - fodd) * np.pi / (2 * nside)

    south = p >= npix - ncap
    ps = npix - p[south]
    i = (1 + np.sqrt(2 * ps - 1).astype(np.int64)) // 2
    i = np.where(2 * i * (i - 1) >= ps, i - 1, i)
    j = 4 * i + 1 - (ps - 2 * i * (i - 1))
    z[south] = -1 + i * i / (3.0 * nside * nside)
    phi[south] = (j - 0.5) * np.pi / (2 * i)
    return np.arccos(np.clip(z, -1.0, 1.0)), phi


def so3_grid(level: int = 1) -> RotationGrid:
    """Hopf-fibration grid: equal-area S^2 cells times a uniform circle.

    Both factors have ``12 * 4**level`` samples, so level 1 has 48 x 48 = 2304
    rotations and level 0 has 144.
    """
    if level not in (0, 1):
        raise ValueError("level must be 0 or 1")
    nside = 2 ** level
    theta, phi = healpix_centers(nside)
    n_circle = 12 * 4 ** level
    psi = (np.arange(n_circle) + 0.5) * 2.0 * np.pi / n_circle
    th = np.repeat(theta, n_circle)
    ph = np.repeat(phi, n_circle)
    ps = np.tile(psi, len(theta))
    quat = np.stack(
        [
            np.cos(th / 2) * np.cos(ps / 2),
            np.cos(th / 2) * np.sin(ps / 2),
            np.sin(th / 2) * np.cos(ph + ps / 2),
            np.sin(th / 2) * np.sin(ph + ps / 2),
        ],
        axis=1,
    )
    rots = quaternion_to_matrix(quat)
    rots = project_to_so3(rots)
    return RotationGrid(_frozen(rots), level, len(theta), n_circle)
