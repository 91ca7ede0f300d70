import numpy as np
import pytest
from hypothesis import given, strategies as st

from shapeicp.asm import (asm_from_bytes, asm_to_bytes, build_asm, load_asm, mean_code, nearest_corpus_code,
                          reconstruct, sample_points_with_jacobian, save_asm)
from shapeicp.errors import FormatError, KTooLarge, LengthMismatch, TopologyMismatch
from shapeicp.geometry import Sim3Pose, icosphere, random_rotations
from shapeicp.meshfit import sample_surface


def test_full_rank_reconstructs_training_meshes(corpus, full_asm):
    for mesh, code in zip(corpus, full_asm.codes):
        assert np.abs(reconstruct(full_asm, code).vertices - mesh.vertices).max() < 1e-8


def test_bases_orthonormal(full_asm):
    b = full_asm.flat_bases
    assert np.abs(b @ b.T - np.eye(full_asm.k)).max() < 1e-8
    assert np.all(np.diff(full_asm.singular_values) <= 1e-12)


def test_k1_is_leading_mode(corpus, full_asm):
    a1 = build_asm(corpus, 1)
    assert np.allclose(a1.flat_bases[0], full_asm.flat_bases[0])
    assert np.allclose(a1.codes[:, 0], full_asm.codes[:, 0])


def test_truncation_error_decreases_with_k(corpus, full_asm):
    errs = []
    for k in (1, 3, 5, full_asm.k):
        a = full_asm.truncate(k)
        errs.append(max(np.abs(a.mesh(a.codes[i]).vertices - m.vertices).max() for i, m in enumerate(corpus)))
    assert all(x >= y - 1e-12 for x, y in zip(errs, errs[1:]))


def test_k_bounds(corpus):
    with pytest.raises(KTooLarge):
        build_asm(corpus, len(corpus))
    with pytest.raises(KTooLarge):
        build_asm(corpus[:1], 1)


def test_topology_mismatch(corpus):
    with pytest.raises(TopologyMismatch):
        build_asm([corpus[0], icosphere(2)], 1)


def test_sasm_round_trip_bytes(full_asm, tmp_path):
    data = asm_to_bytes(full_asm)
    again = asm_from_bytes(data)
    assert asm_to_bytes(again) == data
    save_asm(full_asm, tmp_path / "m.sasm")
    assert (tmp_path / "m.sasm").read_bytes() == data
    b = load_asm(tmp_path / "m.sasm")
    for name in ("mean", "bases", "singular_values", "codes", "faces"):
        assert np.array_equal(getattr(b, name), getattr(full_asm, name))
    assert b.category == full_asm.category


@pytest.mark.parametrize("mutate", [lambda d: b"XXXX" + d[4:], lambda d: d[:-1], lambda d: d + b"\0",
                                    lambda d: d[:4] + (2).to_bytes(4, "little") + d[8:], lambda d: d[:10]])
def test_sasm_rejects_corrupt(full_asm, mutate):
    with pytest.raises(FormatError):
        asm_from_bytes(mutate(asm_to_bytes(full_asm)))


@given(st.integers(0, 10 ** 6))
def test_sample_jacobian_is_exact(seed):

    rng = np.random.default_rng(seed)
    asm = _small_asm()
    smp = sample_surface(asm.mesh(mean_code(asm)), 30, seed)
    c = rng.normal(size=asm.k) * 0.1
    dc = rng.normal(size=asm.k)
    p0, jac = sample_points_with_jacobian(asm, smp, c)
    p1, _ = sample_points_with_jacobian(asm, smp, c + dc)
    assert np.allclose(p1.points - p0.points, jac @ dc, atol=1e-12)


_cache = {}


def _small_asm():
    if "a" not in _cache:
        from shapeicp.app.synth import synthetic_corpus
        _cache["a"] = build_asm(synthetic_corpus(6, seed=3), 4)
    return _cache["a"]


def test_code_length_checked(asm5):
    with pytest.raises(LengthMismatch):
        reconstruct(asm5, np.zeros(4))


def test_nearest_corpus_code_finds_generator(asm5):
    rng = np.random.default_rng(0)
    pose = Sim3Pose(random_rotations(1, rng)[0], [0.1, 0.0, 1.0], 0.3)
    pts = pose.apply(sample_surface(asm5.mesh(asm5.codes[4]), 500, 1).positions)
    assert np.array_equal(nearest_corpus_code(asm5, pts, pose), asm5.codes[4])
