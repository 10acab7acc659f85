"""Cosine alignment, coding rate and the combined objectives."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msdistill import autodiff as ad
from msdistill.errors import ContractError, ValidationError
from msdistill.losses import (
    PATCH_RESAMPLE,
    LossConfig,
    StudentTaps,
    TeacherTaps,
    all_pairs,
    coding_rate,
    cosine_alignment,
    cr_prefactor,
    dino_pairs,
    l2n,
    local_patch_targets,
    loss_ms,
    loss_optical,
    total_loss,
)
from msdistill.model import EncoderConfig, HeadConfig, StudentModel
from msdistill.views import CropParams

seeds = st.integers(0, 2**31 - 1)


def unit(shape, rng):
    return l2n(rng.normal(size=shape))


def naive_cr(zs, eps):
    """Direct float64 evaluation of the coding-rate formula with numpy's slogdet."""
    rows, p = zs[0].shape
    c = (p + rows) / (p * rows)
    vals = [np.linalg.slogdet(np.eye(p) + p / (rows * eps) * z.T @ z)[1] for z in zs]
    return -c * sum(vals) / len(zs)


# ---------------------------------------------------------------------------
# cosine alignment
# ---------------------------------------------------------------------------


def test_cosine_analytic_values():
    e = np.array([[1.0, 0.0]])
    assert cosine_alignment(e, e, [(0, 0)]).item() == 1.0
    assert cosine_alignment(e, np.array([[0.0, 1.0]]), [(0, 0)]).item() == 0.0
    d = np.array([[1.0, 1.0]]) / math.sqrt(2)
    assert abs(cosine_alignment(e, d, [(0, 0)]).item() - math.sqrt(2) / 2) < 1e-15


def test_cosine_rejects_empty_pairing_and_non_unit_rows():
    e = np.array([[1.0, 0.0]])
    with pytest.raises(ContractError):
        cosine_alignment(e, e, [])
    with pytest.raises(ContractError):
        cosine_alignment(e, 2 * e, [(0, 0)])


def test_pair_tables():
    assert dino_pairs(2, 4) == [(0, 1), (0, 2), (0, 3), (1, 0), (1, 2), (1, 3)]
    assert len(all_pairs(2, 5)) == 10


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(0, 4), st.integers(1, 5), st.integers(2, 8), seeds)
def test_cosine_matches_loop_oracle(n, m, b, p, seed):
    rng = np.random.default_rng(seed)
    t, s = unit((n, b, p), rng), unit((n + m, b, p), rng)
    pairs = dino_pairs(n, n + m) or [(0, 0)]
    ref = np.mean([t[i, k] @ s[j, k] for i, j in pairs for k in range(b)])
    assert abs(cosine_alignment(t, s, pairs).item() - ref) < 1e-12


# ---------------------------------------------------------------------------
# coding rate
# ---------------------------------------------------------------------------


def test_coding_rate_zero_and_scalar_case():
    assert coding_rate([np.zeros((4, 3)), np.zeros((4, 3))]).item() == 0.0
    # V = 1, B = N = p = 1, z = 1, eps = 0.05: -(2 / 1) ln(1 + 1 / 0.05)
    val = coding_rate([np.array([[1.0]])], eps=0.05).item()
    assert abs(val - (-2.0 * math.log(21.0))) < 1e-9


def test_prefactor():
    assert cr_prefactor(1, 1, 1) == 2.0
    assert cr_prefactor(32, 16, 1) == (32 + 16) / (32 * 16)
    z = unit((6, 4), np.random.default_rng(0))
    a = coding_rate([z], prefactor=1.0).item()
    b = coding_rate([z]).item()
    assert abs(b - cr_prefactor(4, 6, 1) * a) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 12), st.integers(1, 8), seeds)
def test_coding_rate_matches_slogdet_and_is_nonpositive(v, rows, p, seed):
    rng = np.random.default_rng(seed)
    zs = [unit((rows, p), rng) for _ in range(v)]
    val = coding_rate(zs, eps=0.05).item()
    assert val <= 0.0
    assert abs(val - naive_cr(zs, 0.05)) < 1e-9 * max(1.0, abs(val))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 10), st.integers(1, 6), st.floats(1.01, 5.0), seeds)
def test_scaling_strictly_decreases(rows, p, c, seed):
    z = np.random.default_rng(seed).normal(size=(rows, p))
    assert coding_rate([c * z]).item() < coding_rate([z]).item()


def test_coding_rate_contracts():
    with pytest.raises(ContractError):
        coding_rate([])
    with pytest.raises(ContractError):
        coding_rate([np.zeros((0, 3))])
    with pytest.raises(ContractError):
        coding_rate([np.zeros((3, 2)), np.zeros((4, 2))])


def test_pure_coding_rate_step_raises_logdet():
    rng = np.random.default_rng(7)
    n, b, p = 2, 6, 4
    w = ad.Tensor(rng.normal(size=(n + 2, b, p)), requires_grad=True)
    t = unit((n, b, p), rng)
    cfg = LossConfig(gamma=1.0)

    def logdets(z3):
        z = z3[:n].reshape(n * b, p)
        return np.linalg.slogdet(np.eye(p) + p / (n * b * cfg.eps) * z.T @ z)[1]

    def objective():
        # -l_ms with the cosine part removed is +gamma * l_cr
        _, parts = loss_ms(t, ad.l2_normalize(w), cfg)
        return ad.scale(parts["l_cr"], cfg.gamma)

    before = logdets(l2n(w.data))
    _, (g,) = ad.grad(objective, [w])
    w.data = w.data - 0.05 * g
    assert logdets(l2n(w.data)) > before


# ---------------------------------------------------------------------------
# multispectral objective
# ---------------------------------------------------------------------------


def test_loss_ms_gamma_zero_identical_is_one():
    rng = np.random.default_rng(1)
    row = unit((1, 3, 5), rng)
    t = np.repeat(row, 2, axis=0)
    s = np.repeat(row, 5, axis=0)
    l, parts = loss_ms(t, s, LossConfig(gamma=0.0))
    assert abs(l.item() - 1.0) < 1e-12
    assert abs(parts["l_cos_ms"].item() - 1.0) < 1e-12


def test_loss_ms_zero_rows_rejected():
    with pytest.raises(ContractError):
        loss_ms(np.zeros((2, 3, 4)), np.zeros((4, 3, 4)), LossConfig())


@settings(max_examples=15, deadline=None)
@given(st.floats(0.0, 3.0), seeds)
def test_loss_ms_compositional_oracle(gamma, seed):
    rng = np.random.default_rng(seed)
    t, s = unit((2, 4, 6), rng), unit((5, 4, 6), rng)
    l, _ = loss_ms(t, s, LossConfig(gamma=gamma))
    cos = np.mean([t[i, k] @ s[j, k] for i in range(2) for j in range(5) if j != i for k in range(4)])
    cr = naive_cr([t.reshape(8, 6), s[:2].reshape(8, 6)], 0.05)
    assert abs(l.item() - (cos - gamma * cr)) < 1e-9


# ---------------------------------------------------------------------------
# optical objective
# ---------------------------------------------------------------------------


def _heads():
    enc = EncoderConfig(patch_size=4, embed_dim=8, depth=1, heads=2, mid_layer=1, image_size=8)
    return StudentModel.create(enc, HeadConfig(8, 4, 6), seed=0).astype(np.float64)


def _taps(rng, n=2, m=3, b=2, t=4, d=8, dt=6):
    teacher = TeacherTaps(rng.normal(size=(n, b, dt)), rng.normal(size=(n, b, t, dt)), rng.normal(size=(n, b, t, dt)))
    student = StudentTaps(
        ad.const(rng.normal(size=(n + m, b, d))),
        ad.const(rng.normal(size=(n, b, t, d))),
        ad.const(rng.normal(size=(n, b, t, d))),
    )
    return teacher, student


@settings(max_examples=10, deadline=None)
@given(st.floats(0, 2), st.floats(0, 2), st.floats(0, 2), seeds)
def test_loss_optical_compositional_oracle(a1, a2, a3, seed):
    rng = np.random.default_rng(seed)
    model = _heads()
    teacher, student = _taps(rng)
    l, parts = loss_optical(teacher, student, model.project, LossConfig(alpha1=a1, alpha2=a2, alpha3=a3))
    with ad.no_record():
        s_cls = model.project("cls", student.cls).data
        s_p1 = model.project("p1", student.p_F).data
        s_p2 = model.project("p2", student.p_mid).data
    t_cls = l2n(teacher.cls)
    cls = np.mean([t_cls[i, k] @ s_cls[j, k] for i in range(2) for j in range(5) for k in range(2)])
    p1 = np.mean(np.sum(l2n(teacher.p_F) * s_p1, axis=-1))
    p2 = np.mean(np.sum(l2n(teacher.p_mid) * s_p2, axis=-1))
    assert abs(parts["l_o_cls"].item() - cls) < 1e-12
    assert abs(parts["l_o_p1"].item() - p1) < 1e-12
    assert abs(parts["l_o_p2"].item() - p2) < 1e-12
    assert abs(l.item() - (a1 * cls + a2 * p1 + a3 * p2)) < 1e-12


def test_loss_optical_identical_cls_and_zero_weights():
    rng = np.random.default_rng(2)
    teacher, student = _taps(rng)
    v = l2n(rng.normal(size=6))
    teacher.cls[:] = v

    def heads(name, x):
        if name == "cls":
            return ad.const(np.broadcast_to(v, x.shape[:-1] + (6,)).copy())
        return _heads().project(name, x)
    l, _ = loss_optical(teacher, student, heads, LossConfig(alpha1=1.0, alpha2=0.0, alpha3=0.0))
    assert abs(l.item() - 1.0) < 1e-12
    l0, _ = loss_optical(teacher, student, _heads().project, LossConfig(alpha1=0.0, alpha2=0.0, alpha3=0.0))
    assert l0.item() == 0.0


def test_loss_optical_resamples_teacher_grid():
    rng = np.random.default_rng(3)
    teacher, student = _taps(rng, t=16)
    student = StudentTaps(student.cls, ad.const(rng.normal(size=(2, 2, 4, 8))), ad.const(rng.normal(size=(2, 2, 4, 8))))
    l, _ = loss_optical(teacher, student, _heads().project, LossConfig())
    assert np.isfinite(l.item())
    bad = StudentTaps(student.cls, ad.const(rng.normal(size=(2, 2, 3, 8))), student.p_mid)
    with pytest.raises(ContractError):
        loss_optical(teacher, bad, _heads().project, LossConfig())


def test_local_patch_targets_identity_crop():
    """A local view equal to the global crop reads the teacher map back unchanged."""
    rng = np.random.default_rng(4)
    maps = l2n(rng.normal(size=(1, 1, 4, 3)))
    g = CropParams(0, 0, 16, 16, False, False, 8)
    loc = CropParams(0, 0, 16, 16, False, False, 8)
    tgt, w = local_patch_targets(maps, [[g]], [[loc]], 2)
    np.testing.assert_allclose(tgt[0, 0], maps[0, 0], atol=1e-12)
    np.testing.assert_array_equal(w, 1.0)
    # a flipped local view reads the map mirrored along columns
    tgt, _ = local_patch_targets(maps, [[g]], [[CropParams(0, 0, 16, 16, True, False, 8)]], 2)
    np.testing.assert_allclose(tgt[0, 0], maps[0, 0][[1, 0, 3, 2]], atol=1e-12)


def test_resample_mode_adds_local_terms():
    rng = np.random.default_rng(5)
    teacher, student = _taps(rng, n=1, m=1, b=1)
    student.p_F_local = ad.const(rng.normal(size=(1, 1, 4, 8)))
    student.p_mid_local = ad.const(rng.normal(size=(1, 1, 4, 8)))
    g = CropParams(0, 0, 16, 16, False, False, 8)
    geom = ([[g]], [[g]])
    a, _ = loss_optical(teacher, student, _heads().project, LossConfig())
    b, _ = loss_optical(teacher, student, _heads().project, LossConfig(patch_pairs=PATCH_RESAMPLE), geom)
    assert a.item() != b.item()
    with pytest.raises(ContractError):
        loss_optical(teacher, student, _heads().project, LossConfig(patch_pairs=PATCH_RESAMPLE))


# ---------------------------------------------------------------------------
# combined objective
# ---------------------------------------------------------------------------


def test_total_loss_values():
    assert total_loss(1.0, 2.0) == -3.0
    assert total_loss(0.0, 0.0) == 0.0
    assert total_loss(ad.const(np.array(1.0)), ad.const(np.array(2.0))).item() == -3.0


def test_total_gradient_is_negated_sum():
    rng = np.random.default_rng(6)
    w = ad.Tensor(rng.normal(size=(3, 2, 4)), requires_grad=True)
    t = unit((2, 2, 4), rng)
    o = unit((2, 2, 4), rng)

    def lms():
        return loss_ms(t, ad.l2_normalize(w), LossConfig())[0]

    def lo():
        return cosine_alignment(o, ad.take(ad.l2_normalize(w), 0, 2, axis=0), all_pairs(2, 2))
    _, (g_ms,) = ad.grad(lms, [w])
    _, (g_o,) = ad.grad(lo, [w])
    _, (g_t,) = ad.grad(lambda: total_loss(lms(), lo()), [w])
    np.testing.assert_allclose(g_t, -(g_ms + g_o), atol=1e-12)


def test_loss_config_validation():
    for bad in (LossConfig(gamma=-1), LossConfig(eps=0), LossConfig(alpha2=-0.1), LossConfig(patch_pairs="x")):
        with pytest.raises(ValidationError):
            bad.validate()
