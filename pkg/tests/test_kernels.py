import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deskasr import kernels as K
from deskasr.kernels import DimensionError, Parameter, Rng, Tensor

import gradcases

T = lambda a: Tensor(np.asarray(a, np.float32))  # noqa: E731


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    a = [[1, 2], [3, 4]]
    np.testing.assert_array_equal(K.matmul(T(np.eye(2)), T(a)).data, a)


def test_matmul_hand_product():
    out = K.matmul(T([[1, 2], [3, 4]]), T([[5, 6], [7, 8]])).data
    np.testing.assert_array_equal(out, [[19, 22], [43, 50]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        K.matmul(T(np.ones((2, 3))), T(np.ones((4, 5))))


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_matmul_matches_float64_triple_loop(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(m, k)).astype(np.float32), rng.normal(size=(k, n)).astype(np.float32)
    ref = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            ref[i, j] = sum(float(a[i, t]) * float(b[t, j]) for t in range(k))
    np.testing.assert_allclose(K.matmul(Tensor(a), Tensor(b)).data, ref, rtol=1e-5, atol=1e-5)


# ---------------------------------------------------------------- softmax


def test_softmax_examples():
    np.testing.assert_allclose(K.softmax(T([0, 0])).data, [0.5, 0.5])
    np.testing.assert_allclose(K.softmax(T([math.log(2), 0])).data, [2 / 3, 1 / 3], rtol=1e-6)
    big = K.softmax(T([1000, 0])).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [1, 0], atol=1e-7)


def test_softmax_empty_axis():
    with pytest.raises(ValueError):
        K.softmax(T(np.zeros((3, 0))))


finite = st.floats(-50, 50, allow_nan=False, width=32)


@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 8)), elements=finite), st.floats(-20, 20))
def test_softmax_sums_to_one_and_is_shift_invariant(x, c):
    s = K.softmax(Tensor(x)).data
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-6)
    s2 = K.softmax(Tensor(x + np.float32(c))).data
    np.testing.assert_allclose(s, s2, atol=1e-6)


@given(arrays(np.float32, st.integers(2, 8), elements=finite, unique=True))
def test_softmax_preserves_order(x):
    s = K.softmax(Tensor(x)).data
    assert np.all(np.diff(s[np.argsort(x)]) >= 0)


# ---------------------------------------------------------------- layer norm


def test_layer_norm_examples():
    one = T(np.ones(4))
    np.testing.assert_array_equal(K.layer_norm(T(np.full(4, 3.0)), one, T(np.zeros(4))).data, 0)
    out = K.layer_norm(T([1, 3]), T([1, 1]), T([0, 0]), eps=0.0).data
    np.testing.assert_allclose(out, [-1, 1])
    np.testing.assert_array_equal(K.layer_norm(T(np.full(4, -2.0)), one, T(np.full(4, 5.0))).data, 5)


@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 9)), elements=st.floats(-100, 100)))
def test_layer_norm_moments(x):
    x = x + np.arange(x.shape[-1])  # keep rows away from constant
    y = K.layer_norm(Tensor(x), eps=0.0).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-9)
    np.testing.assert_allclose(y.var(-1), 1, atol=1e-9)


# ---------------------------------------------------------------- attention


def _identity_params(d):
    eye = T(np.eye(d))
    return {"wq": eye, "wk": eye, "wv": eye, "wo": eye}


def test_mha_equal_weights():
    out = K.multi_head_attention(T([[1]]), T([[1], [1]]), T([[2], [4]]), _identity_params(1), 1).data
    np.testing.assert_allclose(out, [[3.0]])


def test_mha_single_key_returns_value():
    rng = np.random.default_rng(0)
    params = {k: T(rng.normal(size=(4, 4))) for k in ("wq", "wk", "wv", "wo")}
    q, k, v = T(rng.normal(size=(3, 4))), T(rng.normal(size=(1, 4))), T(rng.normal(size=(1, 4)))
    out = K.multi_head_attention(q, k, v, params, 2).data
    expect = (v.data @ params["wv"].data.T) @ params["wo"].data.T
    np.testing.assert_allclose(out, np.repeat(expect, 3, 0), rtol=1e-5, atol=1e-6)


@given(st.integers(0, 2**31), st.sampled_from([1, 2, 4]), st.integers(1, 6))
def test_mha_key_value_permutation_invariance(seed, heads, lk):
    rng = np.random.default_rng(seed)
    d = 4
    params = {k: Tensor(rng.normal(size=(d, d))) for k in ("wq", "wk", "wv", "wo")}
    q, k, v = rng.normal(size=(3, d)), rng.normal(size=(lk, d)), rng.normal(size=(lk, d))
    perm = rng.permutation(lk)
    a = K.multi_head_attention(Tensor(q), Tensor(k), Tensor(v), params, heads).data
    b = K.multi_head_attention(Tensor(q), Tensor(k[perm]), Tensor(v[perm]), params, heads).data
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_mha_errors():
    with pytest.raises(DimensionError):
        K.multi_head_attention(T(np.ones((2, 6))), T(np.ones((2, 6))), T(np.ones((2, 6))), _identity_params(6), 4)
    with pytest.raises(DimensionError):
        K.multi_head_attention(T(np.ones((2, 4))), T(np.ones((2, 3))), T(np.ones((2, 4))), _identity_params(4), 2)


def test_attention_mask_hides_keys():
    q = T([[1.0, 0.0]])
    k = T([[1.0, 0.0], [5.0, 0.0]])
    v = T([[1.0, 1.0], [9.0, 9.0]])
    out = K.attention(q, k, v, 1, key_mask=np.array([[True, False]])).data
    np.testing.assert_allclose(out, [[1.0, 1.0]])


# ---------------------------------------------------------------- LSTM


def _zero_lstm(i, h):
    return {"w_x": T(np.zeros((4 * h, i))), "w_h": T(np.zeros((4 * h, h))), "b": T(np.zeros(4 * h))}


def test_lstm_step_zero_params():
    p = _zero_lstm(3, 2)
    h, c = K.lstm_step(T([1, 2, 3]), T([0, 0]), T([0, 0]), p)
    np.testing.assert_array_equal(h.data, 0)
    np.testing.assert_array_equal(c.data, 0)
    c0 = np.array([1.5, -4.0], np.float32)
    _, c = K.lstm_step(T([1, 2, 3]), T([0.3, 0.1]), Tensor(c0), p)
    np.testing.assert_allclose(c.data, 0.5 * c0)


def test_lstm_step_deterministic_and_shape_checked():
    rng = np.random.default_rng(1)
    p = {"w_x": T(rng.normal(size=(8, 3))), "w_h": T(rng.normal(size=(8, 2))), "b": T(rng.normal(size=8))}
    x, h, c = T(rng.normal(size=3)), T(rng.normal(size=2)), T(rng.normal(size=2))
    a, b = K.lstm_step(x, h, c, p), K.lstm_step(x, h, c, p)
    assert a[0].data.tobytes() == b[0].data.tobytes() and a[1].data.tobytes() == b[1].data.tobytes()
    with pytest.raises(DimensionError):
        K.lstm_step(T(np.ones(4)), h, c, p)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("scale", [0.3, 1.0])
def test_fused_lstm_matches_steps(dtype, scale):
    rng = np.random.default_rng(3)
    hd, t = 5, 12
    zx = (rng.normal(size=(2, t, 4 * hd)) * scale).astype(dtype)
    wh = (rng.normal(size=(4 * hd, hd)) * scale).astype(dtype)
    fast = K.lstm(Tensor(zx), Tensor(wh)).data
    taped = K.lstm(Tensor(zx, requires_grad=True), Tensor(wh)).data
    p = {"w_x": Tensor(np.eye(4 * hd, dtype=dtype)), "w_h": Tensor(wh)}
    for bi in range(2):
        h, c = Tensor(np.zeros(hd, dtype)), Tensor(np.zeros(hd, dtype))
        for s in range(t):
            h, c = K.lstm_step(Tensor(zx[bi, s]), h, c, p)
            tol = 1e-5 if dtype == np.float32 else 1e-12
            np.testing.assert_allclose(fast[bi, s], h.data, atol=tol)
            np.testing.assert_allclose(taped[bi, s], h.data, atol=tol)
    assert fast.dtype == dtype


# ---------------------------------------------------------------- convolutions


def test_conv1d_examples():
    x = T([1, 2, 3])
    np.testing.assert_array_equal(K.conv1d(x, T([1])).data, [1, 2, 3])
    np.testing.assert_array_equal(K.conv1d(x, T([1, 1])).data, [3, 5])


def test_transposed_conv_length():
    assert K.transposed_conv_out_len(3, 2, 2, 0) == 6
    out = K.transposed_conv1d(T([1, 2, 3]), T([1, 1]), stride=2)
    assert out.shape == (6,)
    np.testing.assert_array_equal(out.data, [1, 1, 2, 2, 3, 3])


def test_conv_invalid_geometry():
    with pytest.raises((DimensionError, ValueError)):
        K.conv1d(T([1, 2]), T([1, 1, 1]))
    with pytest.raises((DimensionError, ValueError)):
        K.conv1d(T([1, 2, 3]), T([1]), stride=0)


@given(st.integers(1, 5), st.integers(1, 3), st.integers(0, 2), st.integers(0, 4), st.integers(0, 2**31))
def test_conv1d_matches_direct_sum(kw, stride, pad, extra, seed):
    rng = np.random.default_rng(seed)
    t = max(kw - 2 * pad, 1) + extra
    x, k = rng.normal(size=(t, 2)), rng.normal(size=(kw, 2, 3))
    tout = K.conv_out_len(t, kw, stride, pad)
    if tout < 1:
        return
    xp = np.pad(x, [(pad, pad), (0, 0)])
    ref = np.array([[sum(xp[o * stride + j, ci] * k[j, ci, co] for j in range(kw) for ci in range(2)) for co in range(3)] for o in range(tout)])
    np.testing.assert_allclose(K.conv1d(Tensor(x), Tensor(k), stride, pad).data, ref, atol=1e-12)


@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 5), st.integers(0, 2**31))
def test_transposed_conv_is_adjoint_of_conv(kw, stride, t, seed):
    """<conv(y), x> == <y, convT(x)> for matching geometry."""
    rng = np.random.default_rng(seed)
    k = rng.normal(size=(kw, 2, 3))
    x = rng.normal(size=(t, 2))
    tup = K.transposed_conv_out_len(t, kw, stride, 0)
    y = rng.normal(size=(tup, 3))
    kt = np.transpose(k, (0, 2, 1))  # [K, C_out, C_in]
    up = K.transposed_conv1d(Tensor(x), Tensor(k), stride).data
    down = K.conv1d(Tensor(y), Tensor(kt), stride).data
    assert down.shape == x.shape
    np.testing.assert_allclose((up * y).sum(), (down * x).sum(), rtol=1e-10)


# ---------------------------------------------------------------- autodiff


def test_backward_identity_matmul():
    w = Parameter(np.arange(6, dtype=np.float32).reshape(2, 3))
    K.backward(K.sum_all(K.matmul(T(np.eye(2)), w)))
    np.testing.assert_array_equal(w.grad, np.ones((2, 3)))


def test_backward_accumulates():
    w = Parameter(np.ones((2, 2), np.float32))
    for _ in range(2):
        K.backward(K.sum_all(K.mul(w, w)))
    np.testing.assert_array_equal(w.grad, 4 * np.ones((2, 2)))
    w.zero_grad()
    np.testing.assert_array_equal(w.grad, 0)


def test_backward_rejects_non_scalar():
    w = Parameter(np.ones((2, 2), np.float32))
    with pytest.raises(ValueError):
        K.backward(K.mul(w, w))


@pytest.mark.parametrize("name", gradcases.KERNELS)
def test_finite_difference(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(5):
        f, arrays_ = gradcases.make_case(name, rng)
        assert gradcases.max_rel_error(f, arrays_) < 1e-3


@settings(max_examples=120)
@given(st.sampled_from(gradcases.KERNELS), st.integers(0, 2**31))
def test_finite_difference_property(name, seed):
    f, arrays_ = gradcases.make_case(name, np.random.default_rng(seed))
    assert gradcases.max_rel_error(f, arrays_) < 1e-3


def test_finite_difference_paraformer_loss_end_to_end():
    for seed in range(2):
        assert gradcases.paraformer_e2e_error(seed) < 1e-3


# ---------------------------------------------------------------- purity, finiteness


def test_kernels_are_pure():
    rng = np.random.default_rng(5)
    for name in gradcases.KERNELS:
        f, arrays_ = gradcases.make_case(name, rng)
        before = [a.copy() for a in arrays_]
        a = f(*[Tensor(x) for x in arrays_]).data
        b = f(*[Tensor(x) for x in arrays_]).data
        assert a.tobytes() == b.tobytes(), name
        for x, y in zip(arrays_, before):
            np.testing.assert_array_equal(x, y)


def test_float32_stays_float32():
    x = T(np.random.default_rng(0).normal(size=(3, 4)))
    for fn in (K.relu, K.gelu, K.sigmoid, K.tanh, K.softmax, K.layer_norm):
        assert fn(x).dtype == np.float32


# ---------------------------------------------------------------- Rng


def _xorshift64star_oracle(state, n):
    mask = (1 << 64) - 1
    out = []
    for _ in range(n):
        state ^= state >> 12
        state ^= (state << 25) & mask
        state ^= state >> 27
        r = (state * 0x2545F4914F6CDD1D) & mask
        out.append((r >> 11) / 2.0**53)
    return out, state


def test_rng_follows_documented_update_rule():
    r = Rng(42)
    s0 = r.state
    got = r.uniform(10)
    ref, s1 = _xorshift64star_oracle(s0, 10)
    np.testing.assert_array_equal(got, ref)
    assert r.state == s1


def test_rng_determinism_and_fork():
    a, b = Rng(7), Rng(7)
    np.testing.assert_array_equal(a.normal(20), b.normal(20))
    np.testing.assert_array_equal(a.integers(0, 9, 30), b.integers(0, 9, 30))
    c = Rng(7)
    before = c.state
    f1, f2 = c.fork(1), c.fork(2)
    assert c.state == before
    assert not np.array_equal(f1.uniform(5), f2.uniform(5))
    assert not np.array_equal(Rng(7).uniform(5), Rng(8).uniform(5))


@given(st.integers(0, 2**64 - 1), st.integers(1, 50), st.integers(0, 50))
def test_rng_choice_distinct(seed, n, k):
    k = min(k, n)
    idx = Rng(seed).choice(n, k)
    assert len(set(idx.tolist())) == k and (idx < n).all() and (idx >= 0).all()
