"""Mesh-based active shape model: PCA over deformed templates, evaluation, I/O."""
from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError, KTooLarge, LengthMismatch, NoStoredCodes, TopologyMismatch
from .geometry import Mesh, MeshTopology, PointCloud, Sim3Pose, as_points, icosphere, normalize_mesh
from .meshfit import DeformationConfig, SurfaceSamples, deform_template, sample_surface

log = logging.getLogger(__name__)

MAGIC = b"SASM"
VERSION = 1


@dataclass(frozen=True, eq=False)
class ActiveShapeModel:
    """``vertices(c) = mean + sum_k c_k * bases[k]``.

    mean: (V, 3); bases: (K, V, 3) orthonormal as flattened 3V-vectors;
    singular_values: (K,); codes: (U, K) projected training codes.
    """

    mean: np.ndarray
    bases: np.ndarray
    singular_values: np.ndarray
    codes: np.ndarray
    faces: np.ndarray
    category: str = ""

    @property
    def k(self) -> int:
        return self.bases.shape[0]

    @property
    def n_models(self) -> int:
        return self.codes.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.mean.shape[0]

    @cached_property
    def topology(self) -> MeshTopology:
        return MeshTopology.from_faces(self.faces, self.n_vertices)

    @cached_property
    def flat_bases(self) -> np.ndarray:
        return self.bases.reshape(self.k, -1)

    def vertices(self, code) -> np.ndarray:
        """Vertex array(s) for a code of shape (K,) or a batch (..., K)."""
        c = np.asarray(code, dtype=np.float64)
        if c.shape[-1] != self.k:
            raise LengthMismatch(f"code has length {c.shape[-1]}, model has K={self.k}")
        return self.mean + np.einsum("...k,kvd->...vd", c, self.bases)

    def mesh(self, code) -> Mesh:
        return Mesh(self.vertices(code), self.faces, self.topology)

    def truncate(self, k: int) -> "ActiveShapeModel":
        """Keep the leading ``k`` bases (codes are re-projected, i.e. truncated)."""
        if not 1 <= k <= self.k:
            raise KTooLarge(f"k must be in [1, {self.k}]")
        return ActiveShapeModel(
            self.mean, self.bases[:k], self.singular_values[:k], self.codes[:, :k], self.faces, self.category
        )


def _check_topology(meshes):
    ref = meshes[0]
    for i, m in enumerate(meshes[1:], 1):
        if m.n_vertices != ref.n_vertices or m.faces.shape != ref.faces.shape or np.any(m.faces != ref.faces):
            raise TopologyMismatch(f"mesh {i} does not share the topology of mesh 0")


def build_asm(deformed_templates, k: int, category: str = "") -> ActiveShapeModel:
    """PCA over flattened vertex vectors of meshes sharing one topology.

    Bases are the top-``k`` right singular vectors of the centered U x 3V
    data matrix, each signed so its largest-magnitude entry is positive.
    """
    meshes = list(deformed_templates)
    if len(meshes) < 2:
        raise KTooLarge("need at least two meshes")
    _check_topology(meshes)
    u = len(meshes)
    if not 1 <= k <= u - 1:
        raise KTooLarge(f"k must be in [1, {u - 1}] for {u} meshes, got {k}")
    data = np.stack([m.vertices.ravel() for m in meshes])
    mean = data.mean(axis=0)
    centered = data - mean
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    bases = vt[:k].copy()
    lead = np.argmax(np.abs(bases), axis=1)
    signs = np.sign(bases[np.arange(k), lead])
    bases *= signs[:, None]
    codes = centered @ bases.T
    v = meshes[0].n_vertices
    return ActiveShapeModel(
        mean.reshape(v, 3), bases.reshape(k, v, 3), sv[:k].copy(), codes, meshes[0].faces.copy(), category
    )


def reconstruct(asm: ActiveShapeModel, code) -> Mesh:
    c = np.asarray(code, dtype=np.float64)
    if c.shape != (asm.k,):
        raise LengthMismatch(f"expected a code of length {asm.k}, got shape {c.shape}")
    return asm.mesh(c)


@dataclass(frozen=True, eq=False)
class SampledModel:
    """Linear map code -> sample points: ``points = base + jacobian @ code``."""

    base: np.ndarray  # (N, 3)
    jacobian: np.ndarray  # (N, 3, K)
    samples: SurfaceSamples

    def points(self, code) -> np.ndarray:
        c = np.asarray(code, dtype=np.float64)
        flat = self.jacobian.reshape(-1, self.jacobian.shape[-1])
        return self.base + (c @ flat.T).reshape(c.shape[:-1] + self.base.shape)


def sampled_model(asm: ActiveShapeModel, samples: SurfaceSamples) -> SampledModel:
    base = samples.evaluate(asm.mean)
    jac = np.moveaxis(samples.evaluate(asm.bases), 0, -1)
    return SampledModel(base, jac, samples)


def sample_points_with_jacobian(asm: ActiveShapeModel, samples: SurfaceSamples, code):
    """Surface sample positions for ``code`` and their (N, 3, K) Jacobian."""
    c = np.asarray(code, dtype=np.float64)
    if c.shape != (asm.k,):
        raise LengthMismatch(f"expected a code of length {asm.k}, got shape {c.shape}")
    if len(samples) and samples.face_index.max() >= len(asm.faces):
        raise ValueError("sample face index out of range for this model")
    sm = sampled_model(asm, samples)
    return PointCloud(sm.points(c)), sm.jacobian


def mean_code(asm: ActiveShapeModel) -> np.ndarray:
    if asm.n_models == 0:
        raise NoStoredCodes("model stores no training codes")
    return asm.codes.mean(axis=0)


def nearest_corpus_code(asm: ActiveShapeModel, observed, pose: Sim3Pose, n_samples: int = 2000, seed: int = 0):
    """Training code whose reconstruction best explains ``observed``.

    The observation is mapped to the canonical frame with ``pose``'s inverse
    and scored by the one-sided (measurement to model) mean squared
    nearest-neighbour distance. Ties go to the lower model index.
    """
    if asm.n_models == 0:
        raise NoStoredCodes("model stores no training codes")
    pts = pose.inverse().apply(as_points(observed))
    if len(pts) == 0:
        raise ValueError("observed cloud is empty")
    samples = sample_surface(asm.mesh(mean_code(asm)), n_samples, seed)
    best, best_cost = 0, np.inf
    for u, code in enumerate(asm.codes):
        model_pts = samples.evaluate(asm.vertices(code))
        d, _ = cKDTree(model_pts).query(pts)
        cost = float(np.mean(d ** 2))
        if cost < best_cost:
            best, best_cost = u, cost
    return asm.codes[best].copy()


def build_asm_from_meshes(meshes, k: int, category: str = "", template: Mesh | None = None,
                          cfg: DeformationConfig | None = None):
    """Normalize each mesh, wrap the template around it and run PCA.

    Returns the model and the list of per-mesh final Chamfer distances.
    """
    template = template if template is not None else normalize_mesh(icosphere(3))
    deformed, chamfers = [], []
    for i, m in enumerate(meshes):
        res = deform_template(template, normalize_mesh(m), cfg)
        log.info("mesh %d: chamfer %.3e", i, res.chamfer)
        deformed.append(res.mesh)
        chamfers.append(res.chamfer)
    return build_asm(deformed, k, category), chamfers


# ---------------------------------------------------------------------------
# SASM1 persistence


def asm_to_bytes(asm: ActiveShapeModel) -> bytes:
    buf = io.BytesIO()
    cat = asm.category.encode("utf-8")
    v, f, k, u = asm.n_vertices, len(asm.faces), asm.k, asm.n_models
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(cat)))
    buf.write(cat)
    buf.write(struct.pack("<IIII", v, f, k, u))
    for arr in (asm.mean, asm.bases, asm.singular_values, asm.codes):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(asm.faces, dtype="<u4").tobytes())
    return buf.getvalue()


def asm_from_bytes(data: bytes) -> ActiveShapeModel:
    if data[:4] != MAGIC:
        raise FormatError("not a SASM file (bad magic)")
    try:
        version, clen = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise FormatError(f"unsupported SASM version {version}")
        off = 12
        category = data[off:off + clen].decode("utf-8")
        off += clen
        v, f, k, u = struct.unpack_from("<IIII", data, off)
        off += 16

        def take(count, dtype, shape):
            nonlocal off
            size = count * np.dtype(dtype).itemsize
            if off + size > len(data):
                raise FormatError("truncated SASM file")
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(shape)
            off += size
            return arr

        mean = take(3 * v, "<f8", (v, 3)).astype(np.float64)
        bases = take(k * 3 * v, "<f8", (k, v, 3)).astype(np.float64)
        sv = take(k, "<f8", (k,)).astype(np.float64)
        codes = take(u * k, "<f8", (u, k)).astype(np.float64)
        faces = take(3 * f, "<u4", (f, 3)).astype(np.int64)
    except struct.error as exc:
        raise FormatError(f"truncated SASM header: {exc}") from exc
    if off != len(data):
        raise FormatError("trailing bytes after SASM payload")
    return ActiveShapeModel(mean, bases, sv, codes, faces, category)


def save_asm(asm: ActiveShapeModel, path) -> None:
    Path(path).write_bytes(asm_to_bytes(asm))


def load_asm(path) -> ActiveShapeModel:
    return asm_from_bytes(Path(path).read_bytes())
