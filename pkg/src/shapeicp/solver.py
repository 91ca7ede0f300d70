"""Alternating pose/shape estimation with EM associations and multiple hypotheses.

Every hypothesis holds a SIM(3) pose mapping the canonical model frame to the
camera frame and a shape code.  One iteration per hypothesis is

    associate (Q nearest model points, Gaussian weights from the current state)
    pose step  (weighted Umeyama on all weighted pairs, composed onto the pose)
    shape step (a few gradient steps on the code with the new pose and the
                same associations, regularized on the mesh)

Hypotheses start from the rotations of an SO(3) grid and are pruned at
milestone iterations by their total score, keeping survivors at least
``separation_deg`` apart.  The arithmetic is batched over hypotheses; the
single-hypothesis functions below run the same code with a batch of one.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from . import scoring
from ._kernels import code_regularizers, knn
from .asm import ActiveShapeModel, SampledModel, mean_code, sampled_model
from .errors import (AllHypothesesDead, DegenerateConfiguration, EmptyInputs, EmptyMeasurements,
                     IsolatedVertex, LengthMismatch, NoInteriorEdges, NonFiniteLoss)
from .geometry import (PointCloud, RotationGrid, Sim3Pose, as_points, closest_points_on_mesh, geodesic_angles,
                       nearest_neighbors, project_to_so3, so3_grid, umeyama_batch)
from .meshfit import _apply_sparse, sample_surface

log = logging.getLogger(__name__)

_CHUNK = 256


@dataclass
class SolverConfig:
    q: int = 3
    iterations: int = 60
    # isotropic EM std, as fractions of the initial scale estimate, annealed linearly
    sigma_start: float = 0.1
    sigma_end: float = 0.02
    shape_inner_steps: int = 5
    shape_step_rule: str = "cauchy"  # "cauchy" or "fixed"
    shape_step_size: float = 1.0
    shape_backtracks: int = 10
    shape_freeze_tail: int = 10
    shape_warmup: int = 20  # pose-only iterations before the first shape step
    # when the dense samples switch on, restart each code from the best-fitting
    # training code if that explains the measurements better
    code_reinit: bool = True
    # far weaker than the template-fitting weights: a one-sided partial view
    # cannot balance strong edge shrinkage, which then biases the scale
    w_normal: float = 1e-4
    w_edge: float = 0.01
    w_laplacian: float = 1e-3
    # (iteration, survivors) milestones
    pruning: tuple = ((5, 256), (10, 64), (20, 16), (35, 4))
    separation_deg: float = 20.0
    # after the last pruning milestone every survivor is duplicated with its
    # translation pushed away from the camera by these multiples of the cloud
    # spread; the partial view leaves depth weakly constrained and EM tends to
    # settle short of the true depth with a shrunken scale
    ray_offsets: tuple = (0.0, 0.15, 0.3)
    lambda_psi: float = 1.0
    lambda_dr: float = 1e-3
    render_threshold: int = 16
    render_max_side: int = 96
    render_margin: float = 0.1
    render_mask_only: bool = False
    # unmasked depth in front of the model hides it instead of counting as a mismatch
    render_occlusion_aware: bool = True
    # coarse samples while many hypotheses are alive, dense ones after pruning
    n_model_samples: int = 500
    n_model_samples_fine: int = 20000
    fine_threshold: int = 16
    max_measurements: int = 400
    grid_level: int = 1
    # "centroid": t = cloud centroid, s = mean distance to it (raw units)
    # "visible": per rotation, match centroid and spread of the model part
    #            facing the camera
    init: str = "visible"
    # final joint pose/code refinement of the best hypothesis against the mesh
    # surface itself; the sample-based EM cannot resolve offsets below the
    # sample spacing
    refine_iterations: int = 30
    refine_max_measurements: int = 3000
    refine_damping: float = 1e-3
    # Gaussian prior on the code from the training codes, weighted by the
    # residual variance (1 = MAP); 0 disables
    refine_code_prior: float = 1.0
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        self.pruning = tuple((int(i), int(k)) for i, k in self.pruning)
        self.ray_offsets = tuple(float(x) for x in self.ray_offsets)
        if self.q < 1:
            raise ValueError("q must be >= 1")
        if self.refine_iterations < 0 or self.refine_damping <= 0 or self.refine_code_prior < 0:
            raise ValueError("refine_iterations and refine_code_prior must be >= 0, refine_damping > 0")
        if self.separation_deg < 0:
            raise ValueError("separation must be >= 0")
        counts = [k for _, k in self.pruning]
        iters = [i for i, _ in self.pruning]
        if any(b >= a for a, b in zip(counts, counts[1:])):
            raise ValueError("pruning survivor counts must be strictly decreasing")
        if any(b <= a for a, b in zip(iters, iters[1:])):
            raise ValueError("pruning milestones must be strictly increasing")
        if self.init not in ("centroid", "visible"):
            raise ValueError("init must be 'centroid' or 'visible'")
        if self.shape_step_rule not in ("cauchy", "fixed"):
            raise ValueError("shape_step_rule must be 'cauchy' or 'fixed'")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown solver options: {sorted(unknown)}")
        return cls(**d)

    def sigma_fraction(self, it: int) -> float:
        if self.iterations <= 1:
            return self.sigma_start
        return self.sigma_start + (self.sigma_end - self.sigma_start) * it / (self.iterations - 1)


@dataclass
class EmAssociations:
    """Q nearest model points per measurement and their EM weights.

    ``weights[m].sum() * 2 * sigma[m]**2 == 1`` for every measurement.
    """

    indices: np.ndarray  # (M, Q)
    sqdist: np.ndarray  # (M, Q)
    weights: np.ndarray  # (M, Q)
    sigma: np.ndarray  # (M,)

    @property
    def responsibilities(self) -> np.ndarray:
        """Posterior association probabilities (weights scaled to unit row sums)."""
        return self.weights * (2.0 * self.sigma[:, None] ** 2)


@dataclass
class Hypothesis:
    pose: Sim3Pose
    code: np.ndarray
    grid_index: int = -1
    model_points: np.ndarray | None = None  # posed model samples (camera frame)
    residuals: np.ndarray | None = None
    scores: dict = field(default_factory=dict)
    alive: bool = True
    flagged: bool = False

    @property
    def total(self) -> float:
        return self.scores.get("S_tot", np.inf)


@dataclass
class RunResult:
    best: Hypothesis
    survivors: list
    stages: list
    runtime: float
    measurement_count: int


# ---------------------------------------------------------------------------
# EM association


def em_weights(sqdist, sigma):
    """Normalized Gaussian weights ``N(d) / (2 sigma^2 sum N(d'))`` along the last axis."""
    d2 = np.asarray(sqdist, dtype=np.float64)
    s2 = np.asarray(sigma, dtype=np.float64) ** 2
    s2 = np.broadcast_to(s2, d2.shape[:-1])[..., None]
    g = np.exp(-(d2 - d2.min(axis=-1, keepdims=True)) / (2.0 * s2))
    return g / (2.0 * s2 * g.sum(axis=-1, keepdims=True))


def em_associate(measurements, model_points, q: int, sigma) -> EmAssociations:
    """Associate each measurement with its ``q`` closest (already posed) model points."""
    meas = as_points(measurements)
    pts = as_points(model_points)
    if len(meas) == 0 or len(pts) == 0:
        raise EmptyInputs("measurements and model points must be nonempty")
    if len(pts) < q:
        raise ValueError(f"need at least q={q} model points")
    idx, d2 = nearest_neighbors(meas, pts, q)
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (len(meas),)).copy()
    return EmAssociations(idx, d2, em_weights(d2, sig), sig)


def em_objective(measurements, model: SampledModel, code, pose: Sim3Pose, assoc: EmAssociations):
    """Frozen-weight EM objective ``sum_mn w_mn |s R p_n + t - q_m|^2``.

    Returns ``(value, gradient w.r.t. code, (src, dst, weights))`` where the
    last item lists every weighted (posed model point, measurement) pair.
    """
    q = as_points(measurements)
    p = model.points(code)
    posed = pose.scale * p @ pose.rotation.T + pose.translation
    src = posed[assoc.indices]  # (M, Q, 3)
    r = src - q[:, None, :]
    value = float((assoc.weights * (r * r).sum(-1)).sum())
    # d/dc: 2 w r^T s R J_n
    back = pose.scale * r @ pose.rotation  # (M, Q, 3) = s R^T r
    jac = model.jacobian[assoc.indices]  # (M, Q, 3, K)
    grad = 2.0 * np.einsum("mq,mqi,mqik->k", assoc.weights, back, jac)
    dst = np.broadcast_to(q[:, None, :], src.shape)
    return value, grad, (src.reshape(-1, 3), dst.reshape(-1, 3), assoc.weights.ravel())


def em_expected_loglik(measurements, posed_hat, posed_new, assoc: EmAssociations) -> float:
    """Expected complete-data log-likelihood in per-measurement form.

    ``posed_hat`` are the model points under the last estimate (they set the
    posterior), ``posed_new`` under the candidate estimate; association sets
    and sigma come from ``assoc``.  Uses a uniform prior of 1/Q per candidate
    and isotropic Gaussians.
    """
    q = as_points(measurements)
    qn = assoc.indices.shape[1]
    s2 = assoc.sigma[:, None] ** 2
    r_hat = ((posed_hat[assoc.indices] - q[:, None]) ** 2).sum(-1)
    r_new = ((posed_new[assoc.indices] - q[:, None]) ** 2).sum(-1)
    log_n_hat = -r_hat / (2 * s2) - 1.5 * np.log(2 * np.pi * s2)
    log_n_new = -r_new / (2 * s2) - 1.5 * np.log(2 * np.pi * s2)
    a = np.exp(log_n_hat - log_n_hat.max(axis=1, keepdims=True))
    post = a / a.sum(axis=1, keepdims=True)
    return float((post * (np.log(1.0 / qn) + log_n_new)).sum())


# ---------------------------------------------------------------------------
# batched hypothesis state and steps


@dataclass
class _Batch:
    rot: np.ndarray  # (H, 3, 3)
    trans: np.ndarray  # (H, 3)
    scale: np.ndarray  # (H,)
    code: np.ndarray  # (H, K)
    grid_index: np.ndarray  # (H,)
    flagged: np.ndarray  # (H,) bool
    alive: np.ndarray  # (H,) bool

    def __len__(self):
        return len(self.scale)

    def take(self, sel):
        return _Batch(*(getattr(self, f.name)[sel] for f in fields(self)))

    def pose(self, h) -> Sim3Pose:
        return Sim3Pose(self.rot[h], self.trans[h], self.scale[h])


class _Problem:
    """Per-scene constants shared by every hypothesis."""

    def __init__(self, measurements, asm: ActiveShapeModel, cfg: SolverConfig, symmetry=None,
                 render_target=None, model: SampledModel | None = None):
        self.meas = as_points(measurements)
        self.asm = asm
        self.cfg = cfg
        self.symmetry = symmetry if symmetry is not None else scoring.SymmetrySpec()
        self.render_target = render_target
        self._fixed_model = model is not None
        self.fine = False
        if model is None:
            model = self._sample_model(cfg.n_model_samples, 0)
        self.use_model(model)
        topo = asm.topology
        self.topo = topo
        # edge term is quadratic in the code: L_e = c'Gc + 2h'c + const
        e = len(topo.edges)
        d_mean = _apply_sparse(topo.edge_difference, asm.mean).ravel()
        d_bases = _apply_sparse(topo.edge_difference, asm.bases).reshape(asm.k, -1)
        self.edge_g = d_bases @ d_bases.T / e
        self.edge_h = d_bases @ d_mean / e
        self.edge_c = d_mean @ d_mean / e
        self.lap_mean = np.ascontiguousarray(_apply_sparse(topo.laplacian, asm.mean))
        self.lap_bases = np.ascontiguousarray(_apply_sparse(topo.laplacian, asm.bases))
        if cfg.w_laplacian and np.any(topo.degree == 0):
            raise IsolatedVertex("every vertex needs at least one neighbour")
        interior = topo.interior_edges
        if cfg.w_normal and len(interior) == 0:
            raise NoInteriorEdges("no edge is shared by two faces")
        self.face_p = np.ascontiguousarray(topo.edge_faces[interior, 0])
        self.face_m = np.ascontiguousarray(topo.edge_faces[interior, 1])
        self.faces = np.ascontiguousarray(topo.faces)
        self.reg_mean = np.ascontiguousarray(asm.mean)
        self.reg_bases = np.ascontiguousarray(asm.bases)
        self._pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    def _sample_model(self, n, stream):
        seed = int(np.random.SeedSequence(self.cfg.seed).spawn(stream + 1)[stream].generate_state(1)[0])
        return sampled_model(self.asm, sample_surface(self.asm.mesh(mean_code(self.asm)), n, seed))

    def use_model(self, model: SampledModel):
        self.model = model
        # per-sample products for the quadratic data term
        jac, base = model.jacobian, model.base
        n, _, k = jac.shape
        self.jac_flat = jac.reshape(n * 3, k)
        self.jtj = np.einsum("nik,nil->nkl", jac, jac).reshape(n, k * k)
        self.base_j = np.einsum("ni,nik->nk", base, jac)
        self.base_sq = (base * base).sum(-1)

    def refine_samples(self):
        """Enter the dense stage; resamples unless a model was supplied or no denser set is configured."""
        if self.fine:
            return
        self.fine = True
        if self._fixed_model or self.cfg.n_model_samples_fine <= self.cfg.n_model_samples:
            return
        self.use_model(self._sample_model(self.cfg.n_model_samples_fine, 1))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()

    def map_chunks(self, fn, n):
        """Run ``fn(lo, hi)`` over hypothesis chunks; results land by index so order is fixed."""
        bounds = [(lo, min(n, lo + _CHUNK)) for lo in range(0, n, _CHUNK)]
        if self._pool is None:
            for b in bounds:
                fn(*b)
        else:
            list(self._pool.map(lambda b: fn(*b), bounds))

    # -- geometry helpers

    def canonical_points(self, code):
        return self.model.points(code)  # (H, N, 3)

    def canonical_meas(self, b: _Batch, meas=None):
        meas = self.meas if meas is None else meas
        return ((meas[None] - b.trans[:, None]) @ b.rot) / b.scale[:, None, None]

    def associate(self, b: _Batch, q: int, sigma):
        """Per-hypothesis exact Q-NN in the canonical frame; squared distances in meters."""
        h, m = len(b), len(self.meas)
        idx = np.zeros((h, m, q), np.int64)
        d2 = np.zeros((h, m, q))
        pts = self.canonical_points(b.code)
        x = self.canonical_meas(b)

        def work(lo, hi):
            idx[lo:hi], d2[lo:hi] = knn(pts[lo:hi], x[lo:hi], q)

        self.map_chunks(work, h)
        d2 *= (b.scale ** 2)[:, None, None]
        return idx, d2, em_weights(d2, sigma)

    def pose_step(self, b: _Batch, idx, w):
        """Weighted Umeyama increment in the camera frame, composed onto each pose."""
        h = len(b)
        m, q = idx.shape[1:]
        pts = self.canonical_points(b.code)
        posed = b.scale[:, None, None] * (pts @ b.rot.transpose(0, 2, 1)) + b.trans[:, None]
        dst = np.broadcast_to(self.meas[:, None, :], (m, q, 3)).reshape(-1, 3)
        out_r, out_t, out_s = b.rot.copy(), b.trans.copy(), b.scale.copy()
        ok_all = np.zeros(h, bool)
        for lo in range(0, h, _CHUNK):
            hi = min(h, lo + _CHUNK)
            src = np.take_along_axis(posed[lo:hi], idx[lo:hi].reshape(hi - lo, -1)[..., None], axis=1)
            dr, dt, ds, ok = umeyama_batch(src, dst, w[lo:hi].reshape(hi - lo, -1))
            new_r = project_to_so3(np.einsum("hij,hjk->hik", dr, b.rot[lo:hi]))
            new_t = ds[:, None] * np.einsum("hij,hj->hi", dr, b.trans[lo:hi]) + dt
            new_s = ds * b.scale[lo:hi]
            out_r[lo:hi] = np.where(ok[:, None, None], new_r, b.rot[lo:hi])
            out_t[lo:hi] = np.where(ok[:, None], new_t, b.trans[lo:hi])
            out_s[lo:hi] = np.where(ok, new_s, b.scale[lo:hi])
            ok_all[lo:hi] = ok
        b.rot, b.trans, b.scale = out_r, out_t, out_s
        b.flagged |= ~ok_all
        return ok_all

    def reinit_codes(self, b: _Batch):
        """Replace each code by the stored training code with the lowest one-sided residual, if lower."""
        corpus = self.asm.codes
        if len(corpus) == 0 or len(b) == 0:
            return
        x = self.canonical_meas(b)
        h = len(b)
        cand = np.concatenate([b.code[:, None], np.broadcast_to(corpus[None], (h,) + corpus.shape)], axis=1)
        cost = np.empty((h, cand.shape[1]))
        for j in range(cand.shape[1]):
            pts = np.ascontiguousarray(self.model.points(cand[:, j]))
            _, d2 = knn(pts, x, 1)
            cost[:, j] = d2[..., 0].mean(axis=1)
        best = np.argmin(cost, axis=1)  # ties keep the current code
        b.code = cand[np.arange(h), best].copy()

    # -- shape step

    def data_quadratic(self, b: _Batch, idx, resp):
        """Coefficients of the data term ``c'Gc + 2h'c + const`` in canonical units.

        The data term is the weighted mean squared residual between model
        points and measurements, both mapped to the canonical frame (so
        divided by the current scale), with responsibilities summing to one
        per measurement.
        """
        h, m, q = idx.shape
        n = self.model.base.shape[0]
        x = self.canonical_meas(b)
        flat = (np.arange(h)[:, None, None] * n + idx).ravel()
        wr = resp.ravel()
        wn = np.bincount(flat, wr, minlength=h * n).reshape(h, n)
        xw = np.broadcast_to(x[:, :, None, :], (h, m, q, 3)).reshape(-1, 3)
        y = np.stack([np.bincount(flat, wr * xw[:, d], minlength=h * n) for d in range(3)], -1).reshape(h, n, 3)
        k = self.model.jacobian.shape[-1]
        g = (wn @ self.jtj).reshape(h, k, k) / m
        hv = (wn @ self.base_j - y.reshape(h, -1) @ self.jac_flat) / m
        const = ((resp * (x * x).sum(-1)[:, :, None]).sum((1, 2))
                 - 2 * (y.reshape(h, -1) @ self.model.base.ravel()) + wn @ self.base_sq) / m
        return g, hv, const

    def shape_objective(self, codes, quad, with_grad=True):
        """Data term plus weighted mesh regularizers for a batch of codes."""
        cfg = self.cfg
        g, hv, const = quad
        val = np.einsum("hk,hkl,hl->h", codes, g, codes) + 2 * (hv * codes).sum(-1) + const
        grad = 2 * np.einsum("hkl,hl->hk", g, codes) + 2 * hv if with_grad else None
        if cfg.w_edge:
            val = val + cfg.w_edge * (np.einsum("hk,kl,hl->h", codes, self.edge_g, codes)
                                      + 2 * codes @ self.edge_h + self.edge_c)
            if with_grad:
                grad = grad + cfg.w_edge * (2 * codes @ self.edge_g + 2 * self.edge_h)
        if cfg.w_normal or cfg.w_laplacian:
            h = len(codes)
            r_val = np.empty(h)
            r_grad = np.empty((h, self.asm.k))
            code_regularizers(np.ascontiguousarray(codes, dtype=np.float64), self.reg_mean, self.reg_bases,
                              self.faces, self.face_p, self.face_m, self.lap_mean, self.lap_bases,
                              float(cfg.w_normal), float(cfg.w_laplacian), bool(with_grad), r_val, r_grad)
            val = val + r_val
            if with_grad:
                grad = grad + r_grad
        return val, grad

    def shape_step(self, b: _Batch, idx, resp):
        """``shape_inner_steps`` gradient steps on each code, halving on increase."""
        cfg = self.cfg
        h = len(b)
        new_codes = b.code.copy()
        ok_all = np.ones(h, bool)
        for lo in range(0, h, _CHUNK):
            hi = min(h, lo + _CHUNK)
            sub = b.take(slice(lo, hi))
            quad = self.data_quadratic(sub, idx[lo:hi], resp[lo:hi])
            codes, ok = self._descend(sub.code.copy(), quad)
            new_codes[lo:hi] = codes
            ok_all[lo:hi] = ok
        b.code = new_codes
        return ok_all

    def _descend(self, codes, quad):
        cfg = self.cfg
        curv_mat = 2 * (quad[0] + cfg.w_edge * self.edge_g)
        f, g = self.shape_objective(codes, quad)
        ok = np.isfinite(f) & np.all(np.isfinite(g), axis=1)
        for _ in range(cfg.shape_inner_steps):
            if cfg.shape_step_rule == "cauchy":
                gg = (g * g).sum(-1)
                curv = np.einsum("hk,hkl,hl->h", g, curv_mat, g)
                alpha = cfg.shape_step_size * np.where(curv > 0, gg / np.where(curv > 0, curv, 1.0), 1.0)
            else:
                alpha = np.full(len(codes), float(cfg.shape_step_size))
            pending = ok & np.any(g != 0, axis=1)
            for _ in range(cfg.shape_backtracks + 1):
                if not np.any(pending):
                    break
                sel = np.flatnonzero(pending)
                trial = codes[sel] - alpha[sel, None] * g[sel]
                ft, gt = self.shape_objective(trial, tuple(a[sel] for a in quad))
                good = np.isfinite(ft) & (ft <= f[sel]) & np.all(np.isfinite(gt), axis=1)
                acc = sel[good]
                codes[acc], f[acc], g[acc] = trial[good], ft[good], gt[good]
                pending[acc] = False
                alpha[sel[~good]] *= 0.5
        return codes, ok

    # -- scoring

    def score(self, b: _Batch, render: bool):
        """Residual, symmetry and (optionally) render scores for every hypothesis."""
        cfg = self.cfg
        h = len(b)
        out = {k: np.zeros(h) for k in ("S_r", "S_sigma", "S_psi", "S_dr", "S_tot")}
        residuals = np.zeros((h, len(self.meas)))
        pts = self.canonical_points(b.code)
        x = self.canonical_meas(b)
        ops = self.symmetry.matrices

        def work(lo, hi):
            for i in range(lo, hi):
                tree = cKDTree(pts[i])
                d, _ = tree.query(x[i])
                r = b.scale[i] ** 2 * d ** 2
                residuals[i] = r
                out["S_r"][i], out["S_sigma"][i] = scoring.residual_scores(r)
                if ops:
                    acc = 0.0
                    for op in ops:
                        ds, _ = tree.query(x[i] @ op.T)
                        rs = b.scale[i] ** 2 * ds ** 2
                        acc += rs.mean() + rs.std()
                    out["S_psi"][i] = acc / len(ops)

        self.map_chunks(work, h)
        use_render = render and self.render_target is not None
        for i in range(h):
            s_dr = None
            if use_render:
                s_dr = scoring.render_score(b.pose(i), self.asm.mesh(b.code[i]), self.render_target)
                out["S_dr"][i] = s_dr
            try:
                out["S_tot"][i] = scoring.total_score(out["S_r"][i], out["S_sigma"][i], out["S_psi"][i], s_dr,
                                                      cfg.lambda_psi, cfg.lambda_dr)
            except Exception:
                out["S_tot"][i] = np.inf
        if not use_render:
            out["S_dr"][:] = np.nan
        return out, residuals


def select_survivors(rotations, totals, k: int, separation_deg: float):
    """Greedy score-ordered pick of ``k`` rotations pairwise ``separation_deg`` apart.

    If too few candidates satisfy the separation, the remaining slots are
    filled in score order. Returns ``(indices in score order, relaxed)``.
    """
    totals = np.asarray(totals, dtype=np.float64)
    order = [i for i in np.argsort(totals, kind="stable") if np.isfinite(totals[i])]
    k = min(k, len(order))
    chosen = []
    for i in order:
        if len(chosen) == k:
            break
        if not chosen or geodesic_angles(rotations[chosen], rotations[i]).min() >= separation_deg:
            chosen.append(i)
    relaxed = len(chosen) < k
    if relaxed:
        taken = set(chosen)
        for i in order:
            if len(chosen) == k:
                break
            if i not in taken:
                chosen.append(i)
        chosen.sort(key=lambda i: (totals[i], i))
    return np.array(chosen, dtype=np.int64), relaxed


# ---------------------------------------------------------------------------
# single-hypothesis API


def _batch_from(hyp: Hypothesis) -> _Batch:
    return _Batch(hyp.pose.rotation[None].copy(), hyp.pose.translation[None].copy(),
                  np.array([hyp.pose.scale]), np.asarray(hyp.code, dtype=np.float64)[None].copy(),
                  np.array([hyp.grid_index]), np.array([hyp.flagged]), np.array([True]))


def posed_model_points(model: SampledModel, pose: Sim3Pose, code) -> np.ndarray:
    return pose.apply(model.points(code))


def pose_step(hyp: Hypothesis, measurements, assoc: EmAssociations, model: SampledModel) -> Sim3Pose:
    """Weighted Umeyama on the frozen EM pairs, accumulated onto ``hyp.pose``.

    On a degenerate configuration the pose is returned unchanged and the
    hypothesis is flagged.
    """
    if not hyp.alive:
        raise ValueError("hypothesis is not alive")
    posed = posed_model_points(model, hyp.pose, hyp.code)
    src = posed[assoc.indices].reshape(-1, 3)
    dst = np.broadcast_to(as_points(measurements)[:, None], assoc.indices.shape + (3,)).reshape(-1, 3)
    dr, dt, ds, ok = umeyama_batch(src[None], dst, assoc.weights.reshape(1, -1))
    if not ok[0]:
        hyp.flagged = True
        return hyp.pose
    inc = Sim3Pose(dr[0], dt[0], ds[0])
    return inc.compose(hyp.pose)


class ShapeStepper:
    """Shape step for one hypothesis against a fixed ASM and config."""

    def __init__(self, measurements, asm: ActiveShapeModel, cfg: SolverConfig, model: SampledModel | None = None):
        self.problem = _Problem(measurements, asm, cfg, model=model)

    @property
    def model(self):
        return self.problem.model

    def objective(self, hyp: Hypothesis, assoc: EmAssociations, code=None, with_grad=True):
        """Shape-step objective and code gradient at ``code`` (default: ``hyp.code``)."""
        b = _batch_from(hyp)
        quad = self.problem.data_quadratic(b, assoc.indices[None], assoc.responsibilities[None])
        c = np.asarray(hyp.code if code is None else code, dtype=np.float64)[None]
        val, grad = self.problem.shape_objective(c, quad, with_grad)
        return float(val[0]), (None if grad is None else grad[0])

    def step(self, hyp: Hypothesis, assoc: EmAssociations) -> np.ndarray:
        b = _batch_from(hyp)
        quad = self.problem.data_quadratic(b, assoc.indices[None], assoc.responsibilities[None])
        codes, ok = self.problem._descend(b.code.copy(), quad)
        if not ok[0]:
            raise NonFiniteLoss("shape objective is not finite")
        return codes[0]


def shape_step(hyp: Hypothesis, measurements, assoc: EmAssociations, asm: ActiveShapeModel,
               cfg: SolverConfig, model: SampledModel | None = None) -> np.ndarray:
    """Gradient descent on the code from ``hyp.code`` with pose held fixed."""
    if not hyp.alive:
        raise ValueError("hypothesis is not alive")
    return ShapeStepper(measurements, asm, cfg, model).step(hyp, assoc)


def initial_pose(measurements) -> tuple:
    """Centroid translation and mean distance to the centroid as scale."""
    q = as_points(measurements)
    if len(q) == 0:
        raise EmptyMeasurements("no measurements")
    center = q.mean(axis=0)
    scale = float(np.linalg.norm(q - center, axis=1).mean())
    return center, scale


def visible_initial_poses(measurements, asm: ActiveShapeModel, rotations, code=None, n: int = 2000, seed: int = 0):
    """Per-rotation translation and scale matching the camera-facing model part to the cloud.

    For rotation R, samples of ``asm.mesh(code)`` are weighted by how much
    their rotated normal faces the viewing ray to the cloud centroid (zero
    when facing away), which mimics the pixel density of a depth image.  The
    scale maps their weighted mean distance to their weighted centroid onto
    the cloud's, and the translation puts that centroid on the cloud's.
    Returns ``(translations (H, 3), scales (H,))``.
    """
    center, spread = initial_pose(measurements)
    rotations = np.asarray(rotations, dtype=np.float64)
    mesh = asm.mesh(mean_code(asm) if code is None else code)
    smp = sample_surface(mesh, n, seed)
    p = smp.positions
    fn = mesh.face_normals()[smp.face_index]
    norm = np.linalg.norm(center)
    view = center / norm if norm > 0 else np.array([0.0, 0.0, 1.0])
    w = np.maximum(0.0, -(fn @ (rotations.transpose(0, 2, 1) @ view).T).T)  # (H, N)
    tot = w.sum(axis=1)
    w[tot <= 0] = 1.0  # degenerate view: fall back to the whole model
    w /= w.sum(axis=1, keepdims=True)
    c_vis = w @ p
    rho = (w * np.linalg.norm(p[None] - c_vis[:, None], axis=-1)).sum(axis=1)
    scales = spread / rho
    trans = center - scales[:, None] * np.einsum("hij,hj->hi", rotations, c_vis)
    return trans, scales


def initialize_hypotheses(measurements, asm: ActiveShapeModel, grid: RotationGrid, cfg: SolverConfig | None = None,
                          initial_code=None) -> list:
    """One hypothesis per grid rotation, all starting from the same code."""
    cfg = cfg or SolverConfig()
    if initial_code is None:
        code = mean_code(asm)
    else:
        code = np.asarray(initial_code, dtype=np.float64)
        if code.shape != (asm.k,):
            raise LengthMismatch(f"initial code must have length {asm.k}")
    center, scale = initial_pose(measurements)
    if scale <= 0:
        raise DegenerateConfiguration("measurements have zero spread")
    rots = np.asarray(grid.rotations, dtype=np.float64)
    if cfg.init == "visible":
        trans, scales = visible_initial_poses(measurements, asm, rots, code, seed=cfg.seed)
    else:
        trans, scales = np.repeat(center[None], len(rots), 0), np.full(len(rots), scale)
    return [Hypothesis(Sim3Pose(r, t, sc), code.copy(), i) for i, (r, t, sc) in enumerate(zip(rots, trans, scales))]


# ---------------------------------------------------------------------------
# full run


def _hypotheses_from(b: _Batch, scores=None, residuals=None, problem=None):
    out = []
    for i in range(len(b)):
        pose = b.pose(i)
        hyp = Hypothesis(pose, b.code[i].copy(), int(b.grid_index[i]), flagged=bool(b.flagged[i]),
                         alive=bool(b.alive[i]))
        if problem is not None:
            hyp.model_points = pose.apply(problem.model.points(b.code[i]))
        if scores is not None:
            hyp.scores = {k: float(v[i]) for k, v in scores.items()}
        if residuals is not None:
            hyp.residuals = residuals[i].copy()
        out.append(hyp)
    return out


def score_hypotheses(measurements, hyps, asm: ActiveShapeModel, cfg: SolverConfig | None = None, observation=None,
                     symmetry=None, render: bool = True) -> list:
    """Score dicts (S_r, S_sigma, S_psi, S_dr, S_tot) for given hypotheses as the solver would.

    Model samples are the dense ones used after pruning; ``S_dr`` is NaN
    without an observation or with ``render`` False.
    """
    cfg = cfg or SolverConfig()
    meas = as_points(measurements)
    target = None
    if observation is not None and render:
        target = scoring.prepare_render_target(observation.depth, observation.camera, observation.mask,
                                               cfg.render_max_side, cfg.render_margin, cfg.render_mask_only,
                                               cfg.render_occlusion_aware)
    prob = _Problem(meas, asm, cfg, symmetry, target)
    try:
        prob.refine_samples()
        b = _Batch(np.array([h.pose.rotation for h in hyps]), np.array([h.pose.translation for h in hyps]),
                   np.array([h.pose.scale for h in hyps]), np.array([np.asarray(h.code, float) for h in hyps]),
                   np.arange(len(hyps)), np.zeros(len(hyps), bool), np.ones(len(hyps), bool))
        scores, _ = prob.score(b, render)
    finally:
        prob.close()
    return [{k: float(v[i]) for k, v in scores.items()} for i in range(len(hyps))]


def subsample_measurements(measurements, max_points: int, seed: int):
    q = as_points(measurements)
    if max_points and len(q) > max_points:
        rng = np.random.default_rng(seed)
        q = q[np.sort(rng.choice(len(q), max_points, replace=False))]
    return q


def run(measurements, observation=None, asm: ActiveShapeModel | None = None, cfg: SolverConfig | None = None,
        initial_code=None, symmetry=None, grid: RotationGrid | None = None) -> RunResult:
    """Estimate pose and shape from a segmented, back-projected depth cloud.

    ``observation`` supplies ``depth`` (DepthImage, background outside the
    mask), ``mask`` and ``camera`` for the depth-rendering score; pass None
    to score without rendering.
    """
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    meas_all = as_points(measurements)
    if len(meas_all) == 0:
        raise EmptyMeasurements("no measurements")
    meas = subsample_measurements(meas_all, cfg.max_measurements, cfg.seed + 1)
    grid = grid if grid is not None else so3_grid(cfg.grid_level)
    render_target = None
    if observation is not None:
        render_target = scoring.prepare_render_target(
            observation.depth, observation.camera, observation.mask, cfg.render_max_side, cfg.render_margin,
            cfg.render_mask_only, cfg.render_occlusion_aware)
    prob = _Problem(meas, asm, cfg, symmetry, render_target)
    try:
        res = _run(prob, meas, asm, cfg, initial_code, grid, t0)
        if cfg.refine_iterations > 0:
            _refine_best(prob, res, subsample_measurements(meas_all, cfg.refine_max_measurements, cfg.seed + 2))
        res.runtime = time.perf_counter() - t0
        return res
    finally:
        prob.close()


# ---------------------------------------------------------------------------
# surface refinement


@dataclass
class RefineResult:
    pose: Sim3Pose
    code: np.ndarray
    rms_before: float  # point-to-surface RMS distance (m)
    rms_after: float
    iterations: int


def _surface_residuals(meas, pose: Sim3Pose, mesh):
    x = pose.inverse().apply(meas)
    face, bary, pts = closest_points_on_mesh(x, mesh)
    rms = pose.scale * float(np.sqrt(((pts - x) ** 2).sum(-1).mean()))
    return face, bary, pts, rms


def surface_refine(measurements, pose: Sim3Pose, code, asm: ActiveShapeModel, iterations: int = 30,
                   damping: float = 1e-3, code_prior: float = 0.0) -> RefineResult:
    """Levenberg-Marquardt on rotation, translation, log-scale and code.

    Each iteration projects the measurements onto the current mesh, freezes
    the face and barycentric weights (so the surface point is linear in the
    code) and takes a damped Gauss-Newton step on the point-to-plane
    residuals.  Steps that do not lower the frozen cost raise the damping.

    With ``code_prior`` > 0 the cost gains ``code_prior * sigma^2 * sum_k (c_k - m_k)^2 / v_k``
    with ``m``, ``v`` the per-mode mean and variance of the training codes and
    ``sigma^2`` the current mean squared residual; ``code_prior`` = 1 is the
    Gaussian MAP estimate.  The prior fades as the fit becomes exact.
    """
    q = as_points(measurements)
    r_mat, t, s = pose.rotation.copy(), pose.translation.copy(), float(pose.scale)
    c = np.asarray(code, dtype=np.float64).copy()
    faces = asm.faces
    mu = damping
    k = asm.k
    prior_mean, prior_isd = np.zeros(k), np.zeros(k)
    if code_prior > 0 and asm.n_models >= 2:
        var = asm.codes.var(axis=0)
        prior_mean = asm.codes.mean(axis=0)
        prior_isd = np.where(var > 0, np.sqrt(code_prior / np.where(var > 0, var, 1.0)), 0.0)

    def frozen(r_mat, t, s, c, face, bary):
        tri = asm.mesh(c).vertices[faces[face]]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        y = s * np.einsum("mb,mbd->md", bary, tri) @ r_mat.T + t
        nc = n @ r_mat.T
        return y, nc, ((y - q) * nc).sum(-1)

    face, bary, _, rms0 = _surface_residuals(q, pose, asm.mesh(c))
    done = 0
    for done in range(1, iterations + 1):
        y, nc, r = frozen(r_mat, t, s, c, face, bary)
        jc = np.einsum("mb,kmbd->mdk", bary, asm.bases[:, faces[face]])  # (M, 3, K)
        a = np.concatenate([np.cross(y - t, nc), nc, ((y - t) * nc).sum(-1)[:, None],
                            s * np.einsum("md,mdk->mk", nc @ r_mat, jc)], axis=1)
        # prior rows: sqrt(sigma^2) * (c - m) / sd, frozen sigma within the iteration
        w = np.sqrt(float(np.mean(r * r))) * prior_isd
        a = np.concatenate([a, np.concatenate([np.zeros((k, 7)), np.diag(w)], axis=1)])
        r = np.concatenate([r, w * (c - prior_mean)])
        hess, grad = a.T @ a, a.T @ r
        f0 = float(r @ r)
        step = None
        for _ in range(10):
            d = -np.linalg.solve(hess + mu * np.diag(np.diag(hess) + 1e-12), grad)
            dr = Rotation.from_rotvec(d[:3]).as_matrix()
            trial = (dr @ r_mat, t + d[3:6], s * np.exp(d[6]), c + d[7:])
            rt = frozen(*trial, face, bary)[2]
            if float(rt @ rt) + float(((w * (trial[3] - prior_mean)) ** 2).sum()) < f0:
                step = trial
                mu = max(mu / 3.0, 1e-9)
                break
            mu *= 4.0
        if step is None:
            break
        r_mat, t, s, c = step
        face, bary, _, _ = _surface_residuals(q, Sim3Pose(project_to_so3(r_mat), t, s), asm.mesh(c))
        if np.abs(d).max() < 1e-10:
            break
    out = Sim3Pose(project_to_so3(r_mat), t, s)
    rms1 = _surface_residuals(q, out, asm.mesh(c))[3]
    return RefineResult(out, c, rms0, rms1, done)


def _refine_best(prob, res: RunResult, meas):
    """Refine the best hypothesis in place, keeping it only if the surface fit improves."""
    cfg = prob.cfg
    best = res.best
    try:
        ref = surface_refine(meas, best.pose, best.code, prob.asm, cfg.refine_iterations, cfg.refine_damping,
                             cfg.refine_code_prior)
    except (np.linalg.LinAlgError, ValueError) as exc:
        log.debug("surface refinement failed: %s", exc)
        return
    if not (np.isfinite(ref.rms_after) and ref.rms_after <= ref.rms_before):
        return
    b = _Batch(ref.pose.rotation[None], ref.pose.translation[None], np.array([ref.pose.scale]), ref.code[None],
               np.array([best.grid_index]), np.array([best.flagged]), np.array([True]))
    scores, residuals = prob.score(b, prob.render_target is not None)
    hyp = _hypotheses_from(b, scores, residuals, prob)[0]
    res.best = hyp
    res.survivors[0] = hyp
    res.stages.append({"iteration": cfg.iterations, "refined": True, "rms_before": ref.rms_before,
                       "rms_after": ref.rms_after, "refine_iterations": ref.iterations})


def _offset_along_ray(b: _Batch, offsets, spread) -> _Batch:
    """Copies of every hypothesis shifted along its camera ray (offset 0 keeps the original)."""
    n = len(b)
    rep = b.take(np.tile(np.arange(n), len(offsets)))
    norm = np.linalg.norm(rep.trans, axis=1, keepdims=True)
    ray = np.where(norm > 0, rep.trans / np.where(norm > 0, norm, 1.0), np.array([0.0, 0.0, 1.0]))
    rep.trans = rep.trans + np.repeat(np.asarray(offsets), n)[:, None] * spread * ray
    return rep


def _run(prob, meas, asm, cfg, initial_code, grid, t0):
    hyps = initialize_hypotheses(meas, asm, grid, cfg, initial_code)
    h = len(hyps)
    b = _Batch(
        np.array([x.pose.rotation for x in hyps]), np.array([x.pose.translation for x in hyps]),
        np.array([x.pose.scale for x in hyps]), np.repeat(hyps[0].code[None], h, 0),
        np.arange(h), np.zeros(h, bool), np.ones(h, bool),
    )
    # sigma is tied to the spread of the cloud itself, independent of model units
    s0 = float(np.linalg.norm(meas - meas.mean(axis=0), axis=1).mean())
    milestones = dict(cfg.pruning)
    last = max(milestones) if milestones else -1
    stages = []
    for it in range(cfg.iterations):
        if len(b) <= cfg.fine_threshold and not prob.fine:
            prob.refine_samples()
            if cfg.code_reinit:
                prob.reinit_codes(b)
        sigma = cfg.sigma_fraction(it) * s0
        idx, _, w = prob.associate(b, cfg.q, sigma)
        prob.pose_step(b, idx, w)
        if cfg.shape_warmup <= it < cfg.iterations - cfg.shape_freeze_tail:
            ok = prob.shape_step(b, idx, w * (2.0 * sigma ** 2))
            b.alive &= ok
        finite = (np.all(np.isfinite(b.rot), axis=(1, 2)) & np.all(np.isfinite(b.trans), axis=1)
                  & np.isfinite(b.scale) & (b.scale > 0) & np.all(np.isfinite(b.code), axis=1))
        b.alive &= finite
        if not np.any(b.alive):
            stages.append({"iteration": it + 1, "alive": 0, "note": "all hypotheses non-finite"})
            raise AllHypothesesDead("every hypothesis diverged", stages)
        if (it + 1) in milestones:
            b = b.take(b.alive)
            keep = milestones[it + 1]
            render = len(b) <= cfg.render_threshold
            scores, _ = prob.score(b, render)
            sel, relaxed = select_survivors(b.rot, scores["S_tot"], keep, cfg.separation_deg)
            if len(sel) == 0:
                stages.append({"iteration": it + 1, "alive": 0, "note": "no finite scores"})
                raise AllHypothesesDead("no hypothesis has a finite score", stages)
            stages.append({
                "iteration": it + 1, "alive_before": len(b), "kept": int(len(sel)), "relaxed": bool(relaxed),
                "rendered": bool(render and prob.render_target is not None),
                "best_S_tot": float(scores["S_tot"][sel[0]]),
                "survivor_rotations": b.rot[sel].tolist(),
            })
            log.debug("iteration %d: kept %d of %d (relaxed=%s)", it + 1, len(sel), len(b), relaxed)
            b = b.take(sel)
            if it + 1 == last and len(cfg.ray_offsets) > 0:
                b = _offset_along_ray(b, cfg.ray_offsets, s0)
    b = b.take(b.alive)
    if len(b) == 0:
        raise AllHypothesesDead("no hypothesis survived", stages)
    render = len(b) <= cfg.render_threshold
    scores, residuals = prob.score(b, render)
    order = np.array([i for i in np.argsort(scores["S_tot"], kind="stable") if np.isfinite(scores["S_tot"][i])])
    if len(order) == 0:
        raise AllHypothesesDead("no final hypothesis has a finite score", stages)
    ranked = _hypotheses_from(b.take(order), {k: v[order] for k, v in scores.items()}, residuals[order], prob)
    stages.append({"iteration": cfg.iterations, "final": len(ranked),
                   "rendered": bool(render and prob.render_target is not None)})
    return RunResult(ranked[0], ranked, stages, time.perf_counter() - t0, len(meas))
