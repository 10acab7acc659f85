"""Tensor primitives, the reverse sweep and the finite-difference harness (float64)."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msdistill import autodiff as ad
from msdistill.autodiff import Tensor
from msdistill.errors import ContractError, NotSPDError, ShapeError


def leaf(shape, rng, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def weighted(fn, shape_out_rng):
    """``sum(fn() * R)`` with a fixed random R, so every output entry matters."""
    rng = shape_out_rng
    cache = {}

    def f():
        y = fn()
        if "r" not in cache:
            cache["r"] = rng.normal(size=y.shape)
        return ad.sum(ad.mul(y, ad.const(cache["r"])))
    return f


def check(fn, params, tol=1e-6, h=1e-3):
    # Five-point rule at h = 1e-3: truncation ~h^4 and rounding ~eps |f| / h
    # both stay near 1e-11. Entries under 1e-4 are judged on absolute error
    # (< 1e-10) via the floor.
    rng = np.random.default_rng(123)
    err = ad.finite_diff_check(weighted(fn, rng), params, h=h, floor=1e-4, stencil=4)
    assert err < tol, err


dims = st.integers(1, 16)
seeds = st.integers(0, 2**31 - 1)
FAST = settings(max_examples=15)


@FAST
@given(dims, dims, seeds)
def test_elementwise(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = leaf((a, b), rng), leaf((a, b), rng)
    check(lambda: ad.add(x, y), [x, y])
    check(lambda: ad.sub(x, y), [x, y])
    check(lambda: ad.mul(x, y), [x, y])
    check(lambda: ad.scale(x, -2.5), [x])
    row = leaf((b,), rng)
    check(lambda: ad.add(x, row), [x, row])


@FAST
@given(dims, dims, dims, seeds)
def test_matmul_and_linear(a, b, c, seed):
    rng = np.random.default_rng(seed)
    x, w, bias = leaf((a, b), rng), leaf((b, c), rng), leaf((c,), rng)
    check(lambda: ad.matmul(x, w), [x, w])
    check(lambda: ad.linear(x, w, bias), [x, w, bias])


@FAST
@given(st.integers(1, 4), dims, dims, seeds)
def test_batched_matmul(n, a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = leaf((n, a, b), rng), leaf((n, b, a), rng)
    check(lambda: ad.matmul(x, y), [x, y])


@FAST
@given(dims, dims, seeds)
def test_reductions_and_shapes(a, b, seed):
    rng = np.random.default_rng(seed)
    x = leaf((a, b), rng)
    check(lambda: ad.mean(x, axis=0), [x])
    check(lambda: ad.sum(x, axis=1, keepdims=True), [x])
    check(lambda: ad.reshape(x, (b, a)), [x])
    check(lambda: ad.transpose(x), [x])
    y = leaf((a, 3), rng)
    check(lambda: ad.concat([x, y], axis=1), [x, y])
    check(lambda: ad.split(ad.concat([x, y], axis=1), [b, 3], axis=1)[1], [x, y])
    check(lambda: ad.take(x, 0, 1, axis=0), [x])


@FAST
@given(dims, dims, seeds)
def test_nonlinearities(a, b, seed):
    rng = np.random.default_rng(seed)
    x = leaf((a, b), rng, -3, 3)
    pos = leaf((a, b), rng, 0.5, 2.0)
    check(lambda: ad.exp(x), [x])
    check(lambda: ad.log(pos), [pos])
    check(lambda: ad.gelu(x), [x])
    check(lambda: ad.softmax(x), [x])
    check(lambda: ad.l2_normalize(x), [x])


@FAST
@given(st.integers(1, 6), st.integers(3, 16), seeds)
def test_layer_norm_gradient(n, d, seed):
    # d = 2 is degenerate: normalized pairs are always (-1, 1) and the input gradient is only eps-driven
    rng = np.random.default_rng(seed)
    x, w, b = leaf((n, 3, d), rng), leaf((d,), rng), leaf((d,), rng)
    # a token whose entries nearly coincide has curvature ~ 1 / spread^3, so use a finer step
    check(lambda: ad.layer_norm(x, w, b), [x, w, b], h=2e-4)


@FAST
@given(st.integers(1, 8), seeds)
def test_logdet_gradient(p, seed):
    rng = np.random.default_rng(seed)
    z = leaf((p + 2, p), rng)
    eye = ad.const(np.eye(p))

    def fn():
        return ad.spd_logdet_cholesky(ad.add(eye, ad.matmul(ad.swap_last(z), z)))
    assert ad.finite_diff_check(fn, [z], h=1e-5) < 1e-6


def test_logdet_of_gram_4x3():
    rng = np.random.default_rng(0)
    x = leaf((4, 3), rng)
    eye = ad.const(np.eye(3))
    err = ad.finite_diff_check(lambda: ad.spd_logdet_cholesky(ad.add(eye, ad.matmul(ad.swap_last(x), x))), [x], h=1e-5)
    assert err < 1e-6


def test_forward_values():
    x = np.random.default_rng(1).normal(size=(3, 5))
    np.testing.assert_array_equal(ad.matmul(ad.const(np.eye(3)), ad.const(x)).data, x)
    y = ad.l2_normalize(ad.const(x)).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), 1.0, atol=1e-6)
    ln = ad.layer_norm(ad.const(x), ad.const(np.ones(5)), ad.const(np.zeros(5))).data
    np.testing.assert_allclose(ln.mean(-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(ln.var(-1), 1.0, atol=1e-5)
    g = ad.gelu(ad.const(x)).data
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(g, ref, rtol=1e-12)
    s = ad.softmax(ad.const(x)).data
    ref = np.exp(x) / np.exp(x).sum(-1, keepdims=True)
    np.testing.assert_allclose(s, ref, rtol=1e-12)


def naive_det(a):
    """Laplace expansion along the first row (float64 oracle for small matrices)."""
    n = a.shape[0]
    if n == 1:
        return a[0, 0]
    total = 0.0
    for j in range(n):
        minor = np.delete(np.delete(a, 0, axis=0), j, axis=1)
        total += (-1) ** j * a[0, j] * naive_det(minor)
    return total


def test_logdet_values():
    for p in (1, 3, 7):
        assert ad.spd_logdet_cholesky(ad.const(np.eye(p))).item() == 0.0
    assert abs(ad.spd_logdet_cholesky(ad.const(2 * np.eye(2))).item() - 2 * math.log(2)) < 1e-12
    for c in (0.3, 1.7, 9.0):
        assert abs(ad.spd_logdet_cholesky(ad.const(c * np.eye(4))).item() - 4 * math.log(c)) < 1e-12


@settings(max_examples=5, deadline=None)
@given(seeds)
def test_logdet_matches_naive_determinant(seed):
    b = np.random.default_rng(seed).normal(size=(8, 8))
    a = b + b.T + 8 * np.eye(8)
    # b + b^T + 8 I need not be SPD for every draw; shift until it is
    lam = np.linalg.eigvalsh(a).min()
    if lam <= 0.5:
        a += (0.5 - lam + 1.0) * np.eye(8)
    assert abs(ad.spd_logdet_cholesky(ad.const(a)).item() - math.log(naive_det(a))) < 1e-10


def test_cholesky_matches_reference_and_rejects_indefinite():
    rng = np.random.default_rng(2)
    m = rng.normal(size=(6, 6))
    a = m @ m.T + np.eye(6)
    np.testing.assert_allclose(ad.cholesky_lower(a), np.linalg.cholesky(a), atol=1e-12)
    with pytest.raises(NotSPDError) as info:
        ad.cholesky_lower(np.diag([1.0, -1.0, 2.0]))
    assert info.value.pivot == 1


def test_backward_basics():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum(x)
    np.testing.assert_array_equal(ad.backward(tape, loss)[x], np.ones((2, 3)))
    with ad.Tape() as tape:
        loss = ad.sum(ad.mul(x, x))
    np.testing.assert_array_equal(ad.backward(tape, loss)[x], 2 * x.data)


def test_gradient_accumulation_is_exact():
    rng = np.random.default_rng(3)
    x = leaf((4, 4), rng)

    def f():
        return ad.sum(ad.exp(x))

    def g():
        return ad.sum(ad.mul(x, x))
    _, (gf,) = ad.grad(f, [x])
    _, (gg,) = ad.grad(g, [x])
    _, (gs,) = ad.grad(lambda: ad.add(f(), g()), [x])
    np.testing.assert_array_equal(gs, gf + gg)


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.scale(x, 2.0)
    with pytest.raises(ContractError):
        ad.backward(tape, y)


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        ad.add(ad.const(np.ones((2, 3))), ad.const(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        ad.matmul(ad.const(np.ones((2, 3))), ad.const(np.ones((2, 3))))


def test_harness_on_linear_and_constant():
    rng = np.random.default_rng(4)
    x = leaf((5,), rng)
    a = rng.normal(size=5)
    # f is linear, so a wide step has no truncation error and little rounding error
    assert ad.finite_diff_check(lambda: ad.sum(ad.mul(x, ad.const(a))), [x], h=1e-2) < 1e-9
    _, (g,) = ad.grad(lambda: ad.const(np.array(3.0)), [x])
    np.testing.assert_array_equal(g, 0.0)
    assert ad.finite_diff_check(lambda: ad.add(ad.scale(ad.sum(x), 0.0), ad.const(np.array(3.0))), [x]) == 0.0


def test_harness_detects_the_injected_fault():
    rng = np.random.default_rng(5)
    z = leaf((5, 3), rng)
    eye = ad.const(np.eye(3))

    def fn():
        return ad.spd_logdet_cholesky(ad.add(eye, ad.matmul(ad.swap_last(z), z)))
    assert ad.finite_diff_check(fn, [z]) < 1e-6
    with ad.inject_fault("cholesky_backward"):
        assert ad.finite_diff_check(fn, [z]) > 1e-2


def test_no_record_blocks_the_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        with ad.no_record():
            ad.exp(x)
        assert len(tape) == 0
