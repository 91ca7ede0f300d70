import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shapeicp._kernels import code_regularizers, knn
from shapeicp.asm import mean_code, sampled_model
from shapeicp.errors import EmptyInputs
from shapeicp.geometry import Sim3Pose, random_rotations, so3_grid, umeyama
from shapeicp.meshfit import _laplacian, _normal_consistency, regularizers, sample_surface
from shapeicp.solver import (Hypothesis, ShapeStepper, SolverConfig, _Problem, em_associate, em_expected_loglik,
                             em_objective, em_weights, initial_pose, pose_step, run, select_survivors,
                             surface_refine, visible_initial_poses)

seeds = st.integers(0, 2 ** 31 - 1)


@given(seeds, st.integers(1, 6))
def test_em_weights_normalize(seed, q):
    rng = np.random.default_rng(seed)
    d2 = rng.uniform(0, 5, size=(20, q))
    sigma = rng.uniform(0.05, 2.0, size=20)
    w = em_weights(d2, sigma)
    assert np.allclose((w * 2 * sigma[:, None] ** 2).sum(1), 1.0, atol=1e-12)
    # closer candidates weigh more
    order = np.argsort(d2, axis=1)
    ws = np.take_along_axis(w, order, 1)
    assert np.all(np.diff(ws, axis=1) <= 1e-15)


def test_em_weights_survive_large_distances():
    w = em_weights(np.array([[1e6, 1e6 + 1.0]]), 0.01)
    assert np.all(np.isfinite(w)) and abs(w.sum() * 2e-4 - 1) < 1e-12


def enumerated_loglik(q, posed_hat, posed_new, idx, sigma):
    """Brute force over every joint assignment of measurements to candidates."""
    m, qn = idx.shape
    total, norm = 0.0, 0.0
    logs = []
    for assign in itertools.product(range(qn), repeat=m):
        lp_hat, lp_new = 0.0, 0.0
        for i, j in enumerate(assign):
            s2 = sigma[i] ** 2
            c = -1.5 * np.log(2 * np.pi * s2) + np.log(1.0 / qn)
            lp_hat += c - ((posed_hat[idx[i, j]] - q[i]) ** 2).sum() / (2 * s2)
            lp_new += c - ((posed_new[idx[i, j]] - q[i]) ** 2).sum() / (2 * s2)
        logs.append((lp_hat, lp_new))
    logs = np.array(logs)
    post = np.exp(logs[:, 0] - logs[:, 0].max())
    post /= post.sum()
    return float((post * logs[:, 1]).sum())


@given(seeds)
def test_expected_loglik_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(3, 3))
    model = rng.normal(size=(6, 3))
    assoc = em_associate(q, model, 2, rng.uniform(0.3, 1.5))
    new = model + rng.normal(0, 0.1, model.shape)
    a = em_expected_loglik(q, model, new, assoc)
    b = enumerated_loglik(q, model, new, assoc.indices, assoc.sigma)
    assert abs(a - b) < 1e-10 * max(1.0, abs(b))


def test_em_associate_errors():
    with pytest.raises(EmptyInputs):
        em_associate(np.zeros((0, 3)), np.zeros((3, 3)), 1, 1.0)
    with pytest.raises(ValueError):
        em_associate(np.zeros((2, 3)), np.zeros((1, 3)), 2, 1.0)


@given(seeds, st.integers(1, 5), st.integers(1, 80))
def test_kernel_knn_matches_brute_force(seed, k, n):
    rng = np.random.default_rng(seed)
    k = min(k, n)
    pts = rng.normal(size=(2, n, 3)) * rng.uniform(0.01, 10)
    qry = rng.normal(size=(2, 17, 3)) * rng.uniform(0.01, 10)
    idx, d2 = knn(pts, qry, k)
    for h in range(2):
        brute = ((qry[h][:, None] - pts[h][None]) ** 2).sum(-1)
        assert np.allclose(d2[h], np.sort(brute, 1)[:, :k], rtol=1e-12, atol=1e-12)
        assert np.allclose(np.take_along_axis(brute, idx[h], 1), d2[h], rtol=1e-12, atol=1e-12)


def test_kernel_knn_clustered_points():
    rng = np.random.default_rng(0)
    # dense cluster plus far outliers stresses the grid cell size
    pts = np.concatenate([rng.normal(0, 1e-3, (500, 3)), rng.normal(0, 100, (5, 3))])[None]
    qry = rng.normal(0, 1, (1, 50, 3))
    idx, d2 = knn(pts, qry, 3)
    brute = ((qry[0][:, None] - pts[0][None]) ** 2).sum(-1)
    assert np.allclose(d2[0], np.sort(brute, 1)[:, :3])


def _problem(asm, meas=None, **kw):
    meas = np.random.default_rng(0).normal(size=(40, 3)) if meas is None else meas
    return _Problem(meas, asm, SolverConfig(**kw))


def test_code_regularizers_match_mesh_losses(asm5):
    prob = _problem(asm5)
    rng = np.random.default_rng(1)
    codes = rng.normal(0, 0.1, (3, asm5.k))
    val = np.empty(3)
    grad = np.empty((3, asm5.k))
    code_regularizers(codes, prob.reg_mean, prob.reg_bases, prob.faces, prob.face_p, prob.face_m, prob.lap_mean,
                      prob.lap_bases, 0.3, 0.7, True, val, grad)
    for h in range(3):
        v = asm5.vertices(codes[h])
        ref, g = regularizers(v, asm5.topology, 0.3, 0.0, 0.7)
        assert abs(val[h] - ref) < 1e-10
        assert np.allclose(grad[h], np.einsum("vd,kvd->k", g, asm5.bases), atol=1e-10)


def _assoc_for(prob, hyp, q=3, sigma=0.05):
    posed = hyp.pose.apply(prob.model.points(hyp.code))
    return em_associate(prob.meas, posed, q, sigma)


def _scene_points(asm, code, pose, n=200, seed=0):
    return pose.apply(sample_surface(asm.mesh(code), n, seed).positions)


def test_shape_objective_gradient(asm5):
    rng = np.random.default_rng(3)
    pose = Sim3Pose(random_rotations(1, rng)[0], [0.1, 0.0, 1.0], 0.3)
    meas = _scene_points(asm5, asm5.codes[2], pose) + rng.normal(0, 0.002, (200, 3))
    cfg = SolverConfig(w_normal=0.05, w_edge=0.5, w_laplacian=0.2)
    st_ = ShapeStepper(meas, asm5, cfg)
    for _ in range(5):
        hyp = Hypothesis(pose, rng.normal(0, 0.05, asm5.k))
        assoc = _assoc_for(st_.problem, hyp)
        f, g = st_.objective(hyp, assoc)
        fd = np.zeros_like(g)
        for k in range(asm5.k):
            e = np.zeros(asm5.k)
            e[k] = 1e-6
            fd[k] = (st_.objective(hyp, assoc, hyp.code + e)[0] - st_.objective(hyp, assoc, hyp.code - e)[0]) / 2e-6
        assert np.linalg.norm(fd - g) / np.linalg.norm(g) < 1e-4


def test_shape_data_term_matches_brute_force(asm5):
    rng = np.random.default_rng(4)
    pose = Sim3Pose(random_rotations(1, rng)[0], [0.0, 0.1, 1.2], 0.25)
    meas = _scene_points(asm5, asm5.codes[1], pose, 100)
    cfg = SolverConfig(w_normal=0.0, w_edge=0.0, w_laplacian=0.0)
    st_ = ShapeStepper(meas, asm5, cfg)
    hyp = Hypothesis(pose, rng.normal(0, 0.05, asm5.k))
    assoc = _assoc_for(st_.problem, hyp)
    code = rng.normal(0, 0.05, asm5.k)
    x = pose.inverse().apply(meas)
    p = st_.model.points(code)
    brute = (assoc.responsibilities * ((x[:, None] - p[assoc.indices]) ** 2).sum(-1)).sum() / len(meas)
    assert abs(st_.objective(hyp, assoc, code)[0] - brute) < 1e-12


def test_shape_step_decreases_objective(asm5):
    rng = np.random.default_rng(5)
    pose = Sim3Pose(np.eye(3), [0, 0, 1.0], 0.3)
    meas = _scene_points(asm5, asm5.codes[0], pose)
    st_ = ShapeStepper(meas, asm5, SolverConfig())
    hyp = Hypothesis(pose, mean_code(asm5))
    assoc = _assoc_for(st_.problem, hyp)
    new = st_.step(hyp, assoc)
    assert st_.objective(hyp, assoc, new)[0] < st_.objective(hyp, assoc)[0]


def test_q1_pose_step_is_hard_icp(asm5):
    rng = np.random.default_rng(6)
    pose = Sim3Pose(random_rotations(1, rng)[0], [0.0, 0.0, 1.0], 0.3)
    meas = _scene_points(asm5, asm5.codes[3], pose)
    model = sampled_model(asm5, sample_surface(asm5.mesh(mean_code(asm5)), 300, 0))
    from shapeicp.geometry import rotation_about_axis
    start = Sim3Pose(pose.rotation @ rotation_about_axis([1, 2, 0], 4.0), pose.translation + 0.01, 0.28)
    hyp = Hypothesis(start, asm5.codes[3])
    posed = start.apply(model.points(hyp.code))
    assoc = em_associate(meas, posed, 1, 0.05)
    got = pose_step(hyp, meas, assoc, model)
    # hard ICP: plain Umeyama of nearest model points onto measurements, composed
    d2 = ((meas[:, None] - posed[None]) ** 2).sum(-1)
    inc = umeyama(posed[d2.argmin(1)], meas)
    expect = inc.compose(start)
    assert np.allclose(got.matrix(), expect.matrix(), atol=1e-10)


def test_em_objective_gradient(asm5):
    rng = np.random.default_rng(7)
    pose = Sim3Pose(random_rotations(1, rng)[0], [0.0, 0.0, 1.0], 0.3)
    meas = _scene_points(asm5, asm5.codes[3], pose, 80)
    model = sampled_model(asm5, sample_surface(asm5.mesh(mean_code(asm5)), 200, 0))
    code = rng.normal(0, 0.05, asm5.k)
    assoc = em_associate(meas, pose.apply(model.points(code)), 3, 0.02)
    f, g, _ = em_objective(meas, model, code, pose, assoc)
    fd = np.array([(em_objective(meas, model, code + e, pose, assoc)[0]
                    - em_objective(meas, model, code - e, pose, assoc)[0]) / 2e-6 for e in np.eye(asm5.k) * 1e-6])
    assert np.linalg.norm(fd - g) / np.linalg.norm(g) < 1e-4


@given(seeds, st.integers(1, 20), st.floats(0, 60))
def test_select_survivors_separation(seed, k, sep):
    rng = np.random.default_rng(seed)
    rots = random_rotations(40, rng)
    totals = rng.uniform(size=40)
    sel, relaxed = select_survivors(rots, totals, k, sep)
    assert len(sel) == min(k, 40) and len(set(sel.tolist())) == len(sel)
    if not relaxed:
        from shapeicp.geometry import geodesic_angles
        for i in range(len(sel)):
            for j in range(i):
                assert geodesic_angles(rots[sel[i]][None], rots[sel[j]])[0] >= sep
        assert np.all(np.diff(totals[sel]) >= 0)


def test_select_survivors_skips_nonfinite():
    rots = random_rotations(3, np.random.default_rng(0))
    sel, _ = select_survivors(rots, [np.inf, 1.0, np.nan], 3, 0.0)
    assert sel.tolist() == [1]


def test_initial_poses(asm5):
    rng = np.random.default_rng(8)
    pose = Sim3Pose(random_rotations(1, rng)[0], [0.0, 0.0, 1.0], 0.3)
    meas = _scene_points(asm5, asm5.codes[0], pose, 500)
    c, s = initial_pose(meas)
    assert np.allclose(c, meas.mean(0)) and abs(s - np.linalg.norm(meas - c, axis=1).mean()) < 1e-12
    t, sc = visible_initial_poses(meas, asm5, pose.rotation[None])
    assert t.shape == (1, 3) and sc.shape == (1,) and sc[0] > 0


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(q=0)
    with pytest.raises(ValueError):
        SolverConfig(pruning=((5, 10), (10, 20)))
    with pytest.raises(ValueError):
        SolverConfig.from_dict({"nope": 1})
    with pytest.raises(ValueError):
        SolverConfig(init="other")


def test_run_recovers_easy_pose(asm5):
    """Noise-free full-coverage cloud with a small grid and schedule."""
    from shapeicp.geometry import RotationGrid, geodesic_angle
    rng = np.random.default_rng(9)
    pose = Sim3Pose(random_rotations(1, rng)[0], [0.0, 0.0, 1.0], 0.3)
    meas = _scene_points(asm5, asm5.codes[4], pose, 800)
    grid = so3_grid(1)
    near = np.argsort([geodesic_angle(r, pose.rotation) for r in grid.rotations])[:32]
    sub = RotationGrid(np.asarray(grid.rotations)[near], grid.level, grid.n_sphere, grid.n_circle)
    cfg = SolverConfig(pruning=((5, 8), (10, 2)), iterations=30, shape_warmup=5, n_model_samples_fine=3000)
    res = run(meas, None, asm5, cfg, grid=sub)
    assert geodesic_angle(res.best.pose.rotation, pose.rotation) < 3.0
    assert abs(res.best.pose.scale / pose.scale - 1) < 0.03


def test_em_associate_examples():
    sigma = 0.2
    q = np.zeros((1, 3))
    a = em_associate(q, np.array([[0.3, 0, 0], [1.0, 0, 0]]), 1, sigma)
    assert abs(a.weights[0, 0] - 1 / (2 * sigma ** 2)) < 1e-12
    ring = np.array([[0.1, 0, 0], [0, 0.1, 0], [0, 0, 0.1]])
    a = em_associate(q, ring, 3, sigma)
    assert np.allclose(a.weights, 1 / (6 * sigma ** 2), rtol=1e-12)
    a = em_associate(q, np.array([[0, 0, 0], [sigma, 0, 0], [2 * sigma, 0, 0]]), 3, sigma)
    d = np.array([0.0, sigma, 2 * sigma])
    g = np.exp(-d ** 2 / (2 * sigma ** 2)) / (np.sqrt(2 * np.pi) * sigma) ** 3
    assert np.allclose(a.weights[0], g / (2 * sigma ** 2 * g.sum()), rtol=1e-12)
    assert np.allclose(a.weights[0] / a.weights[0, 0], [1, np.exp(-0.5), np.exp(-2)], rtol=1e-12)


@settings(max_examples=10, deadline=None)
@given(seeds)
def test_surface_refine_recovers_exact_pose_and_code(seed):
    """From a few degrees and percent off, the refinement lands on the noise-free truth."""
    from shapeicp.geometry import geodesic_angle, rotation_about_axis
    asm = _refine_asm()
    rng = np.random.default_rng(seed)
    code = asm.codes[rng.integers(asm.n_models)]
    pose = Sim3Pose(random_rotations(1, rng)[0], rng.uniform(-0.1, 0.1, 3) + [0, 0, 1], rng.uniform(0.2, 0.35))
    meas = _scene_points(asm, code, pose, 1500, seed % 1000)
    start = Sim3Pose(rotation_about_axis(rng.normal(size=3), 3.0) @ pose.rotation,
                     pose.translation + rng.normal(0, 0.005, 3), pose.scale * 1.03)
    out = surface_refine(meas, start, code + rng.normal(0, 0.05, asm.k), asm)
    assert out.rms_after <= out.rms_before
    assert out.rms_after < 1e-7
    assert geodesic_angle(out.pose.rotation, pose.rotation) < 1e-4
    assert np.linalg.norm(out.pose.translation - pose.translation) < 1e-6
    assert abs(out.pose.scale / pose.scale - 1) < 1e-6
    assert np.allclose(out.code, code, atol=1e-4)


_REFINE_ASM = []


def _refine_asm():
    if not _REFINE_ASM:
        from shapeicp.app.synth import synthetic_corpus
        from shapeicp.asm import build_asm
        _REFINE_ASM.append(build_asm(synthetic_corpus(8, seed=3), 4, "synthetic"))
    return _REFINE_ASM[0]


def test_surface_refine_keeps_exact_start(asm5):
    pose = Sim3Pose(np.eye(3), [0.0, 0.0, 1.0], 0.3)
    meas = _scene_points(asm5, asm5.codes[2], pose, 800)
    out = surface_refine(meas, pose, asm5.codes[2], asm5, iterations=5)
    assert out.rms_before < 1e-12 and out.rms_after < 1e-12
    assert np.allclose(out.code, asm5.codes[2], atol=1e-9)


def test_surface_refine_code_prior(asm5):
    rng = np.random.default_rng(4)
    pose = Sim3Pose(random_rotations(1, rng)[0], [0.0, 0.0, 1.0], 0.3)
    exact = _scene_points(asm5, asm5.codes[2], pose, 800)
    # on exact data the residual, hence the prior weight, goes to zero
    out = surface_refine(exact, pose, asm5.codes[2], asm5, iterations=5, code_prior=1.0)
    assert np.allclose(out.code, asm5.codes[2], atol=1e-9)
    noisy = exact + rng.normal(0, 0.003, exact.shape)
    free = surface_refine(noisy, pose, asm5.codes[2], asm5, code_prior=0.0)
    strong = surface_refine(noisy, pose, asm5.codes[2], asm5, code_prior=1e12)
    mean = asm5.codes.mean(axis=0)
    assert np.linalg.norm(strong.code - mean) < 1e-3 * np.linalg.norm(asm5.codes[2] - mean)
    assert np.linalg.norm(free.code - mean) > np.linalg.norm(strong.code - mean)
