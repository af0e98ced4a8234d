import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import central_diff, direct_conv
from convtimenet.errors import DimensionError, EmptyInputError, NumericError
from convtimenet.tensor import (
    affine,
    conv1d_grads,
    conv1d_same,
    conv_bank_backward,
    conv_bank_forward,
    conv_group_backward,
    conv_group_forward,
    mean_over_time,
    pad_widths,
)


def test_pad_widths_even_and_odd():
    assert pad_widths(1) == (0, 0)
    assert pad_widths(4) == (1, 2)
    assert pad_widths(5) == (2, 2)
    with pytest.raises(ValueError):
        pad_widths(0)


def test_zero_input_gives_bias():
    out = conv1d_same(np.zeros((8, 1)), np.random.default_rng(0).normal(size=(4, 1)), 0.5)
    assert np.array_equal(out, np.full(8, 0.5))


def test_identity_tap_at_left_pad():
    x = np.random.default_rng(1).normal(size=(11, 1))
    w = np.array([[0.0], [1.0], [0.0], [0.0]])
    assert np.array_equal(conv1d_same(x, w, 0.0), x[:, 0])


def test_matches_direct_sum(rng):
    x = rng.normal(size=(12, 3))
    w = rng.normal(size=(5, 3))
    assert np.max(np.abs(conv1d_same(x, w, 0.3) - direct_conv(x, w, 0.3))) < 1e-12


@given(T=st.integers(1, 32), f=st.integers(1, 8), c=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_matches_direct_sum_property(T, f, c, seed):
    r = np.random.default_rng(seed)
    x, w, b = r.normal(size=(T, c)), r.normal(size=(f, c)), r.normal()
    assert np.max(np.abs(conv1d_same(x, w, b) - direct_conv(x, w, b))) < 1e-10


def test_univariate_vector_input():
    x = np.arange(6.0)
    w = np.array([[1.0], [2.0]])
    assert np.allclose(conv1d_same(x, w, 0.0), direct_conv(x[:, None], w, 0.0))


def test_channel_mismatch_and_non_finite():
    with pytest.raises(DimensionError):
        conv1d_same(np.zeros((5, 2)), np.zeros((3, 1)), 0.0)
    x = np.zeros((5, 1))
    x[2] = np.nan
    with pytest.raises(NumericError):
        conv1d_same(x, np.zeros((3, 1)), 0.0)


@pytest.mark.parametrize("f", [1, 2, 7, 16, 33, 64])
def test_output_length_is_input_length(f):
    x = np.random.default_rng(f).normal(size=(20, 2))
    assert conv1d_same(x, np.ones((f, 2)), 0.0).shape == (20,)


@given(seed=st.integers(0, 2**31), alpha=st.floats(-3, 3), beta=st.floats(-3, 3))
def test_linearity(seed, alpha, beta):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(10, 2)), r.normal(size=(10, 2))
    w, b = r.normal(size=(4, 2)), r.normal()
    lhs = conv1d_same(alpha * x + beta * y, w, b)
    rhs = alpha * conv1d_same(x, w, b) + beta * conv1d_same(y, w, b) - (alpha + beta - 1) * b
    assert np.allclose(lhs, rhs, atol=1e-10)


def test_translation_interior():
    r = np.random.default_rng(3)
    T, f, s = 30, 5, 3
    x, w = r.normal(size=(T, 1)), r.normal(size=(f, 1))
    shifted = np.zeros_like(x)
    shifted[s:] = x[:-s]
    a, b = conv1d_same(x, w, 0.0), conv1d_same(shifted, w, 0.0)
    left, right = pad_widths(f)
    sl = slice(left + s, T - right - s)
    assert np.allclose(b[sl], np.roll(a, s)[sl], atol=1e-12)


def test_grads_zero_upstream():
    r = np.random.default_rng(4)
    gx, gw, gb = conv1d_grads(r.normal(size=(9, 2)), r.normal(size=(3, 2)), np.zeros(9))
    assert not gx.any() and not gw.any() and gb == 0


def test_grad_bias_is_T_for_unit_upstream():
    _, _, gb = conv1d_grads(np.random.default_rng(5).normal(size=(7, 1)), np.zeros((4, 1)), np.ones(7))
    assert gb == 7


def _rel(a, n):
    return np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8))


def test_grads_match_finite_differences(rng):
    T, f, c = 10, 4, 2
    x, w, b = rng.normal(size=(T, c)), rng.normal(size=(f, c)), 0.2
    u = rng.normal(size=T)
    gx, gw, gb = conv1d_grads(x, w, u)
    ng_x = central_diff(lambda: float(u @ conv1d_same(x, w, b)), x)
    ng_w = central_diff(lambda: float(u @ conv1d_same(x, w, b)), w)
    assert _rel(gx, ng_x) < 1e-6 and _rel(gw, ng_w) < 1e-6
    assert gb == pytest.approx(u.sum(), abs=1e-12)


@given(T=st.integers(2, 12), f=st.integers(1, 6), c=st.integers(1, 3), seed=st.integers(0, 2**31))
def test_grads_finite_difference_property(T, f, c, seed):
    r = np.random.default_rng(seed)
    x, w, u = r.normal(size=(T, c)), r.normal(size=(f, c)), r.normal(size=T)
    gx, gw, _ = conv1d_grads(x, w, u)
    loss = lambda: float(u @ conv1d_same(x, w, 0.0))
    # the loss is bilinear, so central differences are exact up to rounding
    assert np.allclose(gx, central_diff(loss, x), atol=1e-7, rtol=1e-5)
    assert np.allclose(gw, central_diff(loss, w), atol=1e-7, rtol=1e-5)


def test_grads_shape_mismatch():
    with pytest.raises(DimensionError):
        conv1d_grads(np.zeros((5, 1)), np.zeros((3, 1)), np.zeros(4))


def test_group_forward_matches_oracle_batched(rng):
    x = rng.normal(size=(3, 15, 2))
    w = rng.normal(size=(4, 6, 2))
    b = rng.normal(size=4)
    out = conv_group_forward(x, w, b)
    for i in range(3):
        for k in range(4):
            assert np.allclose(out[i, :, k], direct_conv(x[i], w[k], b[k]), atol=1e-12)


def test_bank_matches_per_group(rng):
    lengths = [2, 3, 8]
    x = rng.normal(size=(2, 13, 3))
    ws = [rng.normal(size=(2, f, 3)) for f in lengths]
    bs = [rng.normal(size=2) for _ in lengths]
    bank = conv_bank_forward(x, ws, bs)
    ref = np.concatenate([conv_group_forward(x, w, b) for w, b in zip(ws, bs)], axis=2)
    assert np.allclose(bank, ref, atol=1e-12)
    g = rng.normal(size=bank.shape)
    gx, gws, gbs = conv_bank_backward(x, ws, g)
    off = 0
    gx_ref = np.zeros_like(x)
    for w, gw, gb in zip(ws, gws, gbs):
        rx, rw, rb = conv_group_backward(x, w, g[:, :, off : off + 2])
        gx_ref += rx
        assert np.allclose(gw, rw, atol=1e-11) and np.allclose(gb, rb, atol=1e-11)
        off += 2
    assert np.allclose(gx, gx_ref, atol=1e-11)


def test_bank_rejects_unsorted_lengths(rng):
    x = rng.normal(size=(1, 5, 1))
    with pytest.raises(ValueError):
        conv_bank_forward(x, [np.ones((1, 4, 1)), np.ones((1, 2, 1))], [np.zeros(1), np.zeros(1)])


def test_affine_cases(rng):
    z = rng.normal(size=7)
    W, b = rng.normal(size=(5, 7)), rng.normal(size=5)
    assert np.array_equal(affine(np.zeros(7), W, b), b)
    assert np.allclose(affine(z, np.eye(7), np.zeros(7)), z)
    naive = np.array([b[k] + sum(W[k, i] * z[i] for i in range(7)) for k in range(5)])
    assert np.allclose(affine(z, W, b), naive, atol=1e-12)
    with pytest.raises(DimensionError):
        affine(np.zeros(6), W, b)


def test_mean_over_time(rng):
    assert np.array_equal(mean_over_time(np.full((6, 3), 2.5)), np.full(3, 2.5))
    T = 9
    col = np.arange(T, dtype=float)[:, None]
    assert mean_over_time(col)[0] == (T - 1) / 2
    X = rng.normal(size=(9, 4))
    assert np.allclose(mean_over_time(X), [sum(X[:, c]) / 9 for c in range(4)], atol=1e-14)
    with pytest.raises(EmptyInputError):
        mean_over_time(np.zeros((0, 3)))
