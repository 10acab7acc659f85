"""Student encoder, taps, projection heads and checkpoints."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msdistill import autodiff as ad
from msdistill.errors import FormatError, ShapeError, ValidationError
from msdistill.model import (
    HEAD_NAMES,
    MS,
    OPTICAL,
    EncoderConfig,
    HeadConfig,
    StudentModel,
    embed_patches,
    encode,
    load_model,
    parameter_count,
    patchify,
    project,
    save_model,
)


def small(depth=2, mid=1, **kw):
    enc = EncoderConfig(patch_size=4, embed_dim=16, depth=depth, heads=2, mid_layer=mid, image_size=16, **kw)
    return StudentModel.create(enc, HeadConfig(32, 8, 12), seed=0)


def images(n=2, c=10, s=16, seed=0):
    return np.random.default_rng(seed).normal(size=(n, c, s, s)).astype(np.float32)


def test_token_counts_and_shapes():
    m = small()
    with ad.no_record():
        out = m.forward(images(), MS)
        opt = m.forward(images(c=3), OPTICAL)
        loc = m.forward(images(s=8), MS)
    assert out.cls_F.shape == (2, 16) and out.p_F.shape == (2, 16, 16) and out.p_mid.shape == (2, 16, 16)
    assert opt.p_F.shape == (2, 16, 16)
    # local views use a smaller grid with resampled positional embeddings
    assert loc.p_F.shape == (2, 4, 16)


def test_patchify_row_major():
    x = np.arange(2 * 4 * 4, dtype=np.float32).reshape(1, 2, 4, 4)
    p = patchify(x, 2)
    assert p.shape == (1, 4, 8)
    np.testing.assert_array_equal(p[0, 1], np.r_[x[0, 0, :2, 2:].ravel(), x[0, 1, :2, 2:].ravel()])


def test_depth_zero_taps_are_the_embedding():
    m = small(depth=0, mid=0)
    x = images()
    with ad.no_record():
        tok = embed_patches(x, MS, m.params, m.encoder).data
        out = m.forward(x, MS)
    np.testing.assert_array_equal(out.cls_F.data, tok[:, 0])
    np.testing.assert_array_equal(out.p_F.data, tok[:, 1:])
    np.testing.assert_array_equal(out.p_mid.data, tok[:, 1:])


def test_permutation_equivariance_without_positions():
    m = small().astype(np.float64)
    m.params["embed.pos"].data[:] = 0.0
    x = images().astype(np.float64)
    perm = np.random.default_rng(1).permutation(16)
    with ad.no_record():
        tok = embed_patches(x, MS, m.params, m.encoder)
        shuffled = ad.const(np.concatenate([tok.data[:, :1], tok.data[:, 1:][:, perm]], axis=1))
        a = encode(tok, m.params, m.encoder)
        b = encode(shuffled, m.params, m.encoder)
    np.testing.assert_allclose(b.p_F.data, a.p_F.data[:, perm], atol=1e-12)
    np.testing.assert_allclose(b.p_mid.data, a.p_mid.data[:, perm], atol=1e-12)
    np.testing.assert_allclose(b.cls_F.data, a.cls_F.data, atol=1e-12)


def test_forward_is_deterministic():
    m = small()
    x = images(seed=2)
    with ad.no_record():
        a, b = m.forward(x, MS), m.forward(x, MS)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u.data, v.data)


def test_joint_forward_matches_separate_passes():
    m = small().astype(np.float64)
    xm, xo = images(seed=3).astype(np.float64), images(c=3, seed=4).astype(np.float64)
    with ad.no_record():
        jm, jo = m.forward_joint([(xm, MS), (xo, OPTICAL)])
        sm, so = m.forward(xm, MS), m.forward(xo, OPTICAL)
    for u, v in zip(jm + jo, sm + so):
        np.testing.assert_allclose(u.data, v.data, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(HEAD_NAMES), st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_head_output_is_unit_norm(head, seed, scale):
    m = small()
    x = np.random.default_rng(seed).normal(size=(5, 16)) * scale
    with ad.no_record():
        y = m.project(head, ad.const(x.astype(np.float32))).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), 1.0, atol=1e-5)


def test_identity_head_closed_form():
    d = 6
    params = {
        "head.x.fc1.weight": ad.const(np.eye(d)),
        "head.x.fc1.bias": ad.const(np.zeros(d)),
        "head.x.fc2.weight": ad.const(np.eye(d)),
        "head.x.fc2.bias": ad.const(np.zeros(d)),
    }
    x = np.random.default_rng(5).normal(size=(4, d))
    gelu = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
    ref = gelu / np.linalg.norm(gelu, axis=-1, keepdims=True)
    np.testing.assert_allclose(project(params, "x", ad.const(x)).data, ref, atol=1e-12)


def test_head_width_mismatch():
    m = small()
    with pytest.raises(ShapeError):
        m.project("ms", ad.const(np.ones((2, 5), np.float32)))


def test_heads_are_independent():
    m = small()
    x = ad.const(np.random.default_rng(6).normal(size=(3, 16)).astype(np.float32))
    with ad.no_record():
        before = {h: m.project(h, x).data.copy() for h in HEAD_NAMES}
    for target in HEAD_NAMES:
        saved = {k: v.data.copy() for k, v in m.params.items() if k.startswith(f"head.{target}.")}
        for k in saved:
            m.params[k].data += 1.0
        with ad.no_record():
            for h in HEAD_NAMES:
                if h != target:
                    np.testing.assert_array_equal(m.project(h, x).data, before[h])
            assert not np.array_equal(m.project(target, x).data, before[target])
        for k, v in saved.items():
            m.params[k].data = v


def test_parameter_count_formula_and_regression():
    enc, heads = EncoderConfig(), HeadConfig()
    m = StudentModel.create(enc, heads)
    assert m.n_parameters() == parameter_count(enc, heads)
    # frozen for the desk defaults
    assert parameter_count(enc, heads) == 341_792
    for depth, mid in ((0, 0), (1, 1), (3, 2)):
        e = EncoderConfig(depth=depth, mid_layer=mid, embed_dim=32, mlp_ratio=2)
        assert StudentModel.create(e, heads).n_parameters() == parameter_count(e, heads)


def test_encoder_config_validation():
    with pytest.raises(ValidationError):
        EncoderConfig(embed_dim=10, heads=4).validate()
    with pytest.raises(ValidationError):
        EncoderConfig(depth=4, mid_layer=4).validate()
    with pytest.raises(ValidationError):
        EncoderConfig(image_size=30).validate()
    m = small()
    with pytest.raises(ValidationError):
        m.forward(images(c=4), MS)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    m = small()
    path = save_model(tmp_path / "s.msck", m, {"note": "x"}, {"extra.blob": np.arange(3, dtype=np.float32)})
    back, header, extra = load_model(path)
    assert header["note"] == "x"
    assert back.encoder == m.encoder and back.heads == m.heads
    for k, v in m.params.items():
        assert back.params[k].data.tobytes() == v.data.tobytes()
    np.testing.assert_array_equal(extra["extra.blob"], np.arange(3))


def test_checkpoint_rejects_truncation(tmp_path):
    path = save_model(tmp_path / "s.msck", small())
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError):
        load_model(path)
