import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deskasr import kernels as K
from deskasr.kernels import Rng, Tensor
from deskasr.paraformer import (
    SILENCE,
    Paraformer,
    ParaformerConfig,
    TokenSpan,
    aas,
    alignment_targets,
    cif,
    cif_weights,
    decode_nar,
    encode,
    glancing_mask,
    glancing_sample,
    greedy_decode,
    paraformer_loss,
    predict_alphas,
    recognize,
    scale_alphas,
    timestamps_from_alphas,
    unfold_time,
    upsample_alphas,
)

import gradcases
from oracles import cif_oracle

F32 = np.float32


def small_cfg(**kw):
    base = dict(vocab_size=6, feat_dim=4, lfr_m=1, lfr_n=1, d_model=8, n_heads=2, d_ff=16, enc_layers=2, dec_layers=2, ts_hidden=4)
    base.update(kw)
    return ParaformerConfig(**base)


@pytest.fixture(scope="module")
def model():
    return Paraformer(small_cfg(), seed=3)


# ---------------------------------------------------------------- CIF


def test_cif_hand_example():
    h = np.arange(8, dtype=F32).reshape(4, 2)
    out = cif(h, [0.6] * 4)
    assert out.fires.tolist() == [1, 3]
    np.testing.assert_allclose(out.embeddings[0], 0.6 * h[0] + 0.4 * h[1], rtol=1e-6)
    np.testing.assert_allclose(out.embeddings[1], 0.2 * h[1] + 0.6 * h[2] + 0.2 * h[3], rtol=1e-5)
    assert out.residual == pytest.approx(0.4, abs=1e-6)
    assert not out.tail_fired


def test_cif_zero_alphas():
    out = cif(np.ones((5, 3), F32), np.zeros(5))
    assert len(out.fires) == 0 and out.embeddings.shape == (0, 3)


def test_cif_shape_errors():
    with pytest.raises(K.DimensionError):
        cif(np.ones((4, 2)), np.ones(3))
    with pytest.raises(ValueError):
        cif(np.ones((4, 2)), np.ones(4), threshold=0)


def test_cif_matches_brute_force_1000_cases():
    rng = np.random.default_rng(0)
    for case in range(1000):
        t = int(rng.integers(1, 25))
        d = int(rng.integers(1, 4))
        hi = float(rng.choice([0.5, 1.0, 1.6]))
        alphas = (rng.random(t) * hi).astype(F32)
        if case % 7 == 0:
            alphas[rng.random(t) < 0.3] = 0
        h = rng.normal(size=(t, d)).astype(F32)
        out = cif(h, alphas)
        fires, embs, resid, used, tail = cif_oracle(alphas, h)
        np.testing.assert_array_equal(out.fires, fires)
        assert out.embeddings.tobytes() == embs.tobytes()
        assert out.residual == resid and out.tail_fired == tail
        assert np.all(np.diff(out.fires) >= 0)
        full = used[:-1] if tail else used
        np.testing.assert_allclose(full, 1.0, atol=1e-5)
        if hi <= 1.0 and not tail:
            assert np.all(np.diff(out.fires) > 0)


# ---------------------------------------------------------------- scale_alphas


def test_scale_alphas_examples():
    s = scale_alphas(np.full(4, 0.6, F32), 3)
    np.testing.assert_allclose(s, 0.75)
    assert len(cif(np.ones((4, 1), F32), s).fires) == 3
    a = np.array([0.5, 1.0, 0.5], F32)
    np.testing.assert_array_equal(scale_alphas(a, 2), a)


def test_scale_alphas_errors():
    with pytest.raises(ValueError):
        scale_alphas(np.zeros(3), 2)
    with pytest.raises(ValueError):
        scale_alphas(np.ones(3), 0)


def test_scaled_cif_emits_exactly_n_1000_cases():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        t = int(rng.integers(1, 60))
        n = int(rng.integers(1, t + 1))
        a = rng.random(t).astype(F32) + F32(1e-3)
        s = scale_alphas(a, n)
        assert len(cif(np.zeros((t, 0), F32), s).fires) == n


def test_scale_alphas_tape_gradient():
    rng = np.random.default_rng(2)
    n = np.array([2.0, 3.0])
    r = rng.normal(size=(2, 5))

    def f(a):
        return K.sum_all(K.mul(scale_alphas(a, n), Tensor(r)))

    assert gradcases.max_rel_error(f, [rng.random((2, 5)) + 0.1]) < 1e-3


@given(st.integers(0, 2**31), st.integers(1, 6))
def test_cif_weights_reproduce_cif(seed, n):
    rng = np.random.default_rng(seed)
    t = n + int(rng.integers(0, 6))
    a = scale_alphas(rng.random(t).astype(F32) + F32(0.05), n)
    h = rng.normal(size=(t, 3)).astype(F32)
    w = cif_weights(Tensor(a.astype(np.float64)), n).data
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-5)
    np.testing.assert_allclose(w @ h, cif(h, a).embeddings[:n], atol=1e-4)


def test_cif_weights_gradient():
    rng = np.random.default_rng(4)
    for _ in range(20):
        t, n = int(rng.integers(2, 8)), int(rng.integers(1, 4))
        r = rng.normal(size=(n, t))
        a = rng.random(t) * 0.9 + 0.05
        c = np.cumsum(a)
        if np.abs(c - np.round(c)).min() < 0.01:  # piecewise linear: skip points within h of a kink
            continue
        assert gradcases.max_rel_error(lambda x: K.sum_all(K.mul(cif_weights(x, n), Tensor(r))), [a]) < 1e-3


def test_unfold_time_gradient_and_layout():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(5, 2))
    out = unfold_time(Tensor(x), 3).data
    np.testing.assert_array_equal(out[0], np.concatenate([np.zeros(2), x[0], x[1]]))
    r = rng.normal(size=(5, 6))
    assert gradcases.max_rel_error(lambda v: K.sum_all(K.mul(unfold_time(v, 3), Tensor(r))), [x]) < 1e-3


# ---------------------------------------------------------------- encoder / predictor / decoder


def test_encode_shapes_and_determinism(model):
    x = np.random.default_rng(0).normal(size=(1, 4)).astype(F32)
    assert encode(model, x).shape == (1, 8)
    x = np.random.default_rng(0).normal(size=(9, 4)).astype(F32)
    a, b = encode(model, x).data, encode(model, x).data
    assert a.shape == (9, 8) and a.tobytes() == b.tobytes()
    with pytest.raises(K.DimensionError):
        encode(model, np.zeros((3, 5), F32))
    with pytest.raises(ValueError):
        encode(model, np.zeros((0, 4), F32))


def test_encoder_zero_blocks_is_normalised_input_path():
    m = Paraformer(small_cfg(), seed=1)
    for name, p in m.store.items():
        if name.startswith("encoder.layer") and (".attn." in name or ".ffn." in name):
            p.data[:] = 0
    x = np.random.default_rng(1).normal(size=(6, 4)).astype(F32)
    st_ = m.store
    lin = x @ st_["encoder.in_proj.weight"].data.T + st_["encoder.in_proj.bias"].data
    from deskasr.layers import sinusoid_positions

    pre = lin + sinusoid_positions(6, 8)
    mu, var = pre.mean(-1, keepdims=True), pre.var(-1, keepdims=True)
    expect = (pre - mu) / np.sqrt(var + 1e-5)
    np.testing.assert_allclose(encode(m, x).data, expect, atol=1e-5)


def test_predictor_saturation():
    m = Paraformer(small_cfg(), seed=1)
    for name in ("predictor.conv.weight", "predictor.conv.bias", "predictor.out.weight", "predictor.out.bias"):
        m.store[name].data[:] = 0
    h = Tensor(np.random.default_rng(0).normal(size=(5, 8)).astype(F32))
    np.testing.assert_array_equal(predict_alphas(m, h).data, 0.5)
    m.store["predictor.out.bias"].data[:] = -60
    assert predict_alphas(m, h).data.max() < 1e-20


def test_predictor_sum_gradient():
    m = gradcases.tiny_paraformer(0)
    h = np.random.default_rng(0).normal(size=(6, 8))
    params = [m.store[k] for k in ("predictor.conv.weight", "predictor.conv.bias", "predictor.out.weight", "predictor.out.bias")]
    arrays = [p.data for p in params]

    def f(*ts):
        for p, t in zip(params, ts):
            p.data, p.requires_grad = t.data, t.requires_grad
        saved = [(lin.weight, lin.bias) for lin in (m.predictor.conv, m.predictor.out)]
        m.predictor.conv.weight, m.predictor.conv.bias, m.predictor.out.weight, m.predictor.out.bias = ts
        try:
            return K.sum_all(predict_alphas(m, Tensor(h)))
        finally:
            (m.predictor.conv.weight, m.predictor.conv.bias), (m.predictor.out.weight, m.predictor.out.bias) = saved

    assert gradcases.max_rel_error(f, arrays) < 1e-3


def test_alphas_in_open_interval(model):
    h = encode(model, np.random.default_rng(2).normal(size=(12, 4)).astype(F32))
    a = predict_alphas(model, h).data
    assert (a > 0).all() and (a < 1).all()
    a2 = upsample_alphas(model, h).data
    assert a2.shape == (24,) and (a2 > 0).all() and (a2 < 1).all()


def test_upsample_rates():
    for rate, t in [(1, 5), (2, 3)]:
        m = Paraformer(small_cfg(upsample_rate=rate), seed=0)
        h = encode(m, np.zeros((t, 4), F32))
        assert upsample_alphas(m, h).shape == (rate * t,)


def test_decoder_is_bidirectional(model):
    rng = np.random.default_rng(3)
    mem = encode(model, rng.normal(size=(7, 4)).astype(F32))
    e = rng.normal(size=(4, 8)).astype(F32)
    base = decode_nar(model, e, mem).data
    assert base.shape == (4, 6)
    e2 = e.copy()
    e2[-1] += rng.normal(size=8).astype(F32)  # a constant shift would vanish under layer norm
    moved = decode_nar(model, e2, mem).data
    assert np.abs(moved[0] - base[0]).max() > 1e-4  # a future token changes the first output
    assert decode_nar(model, e[:1], mem).shape == (1, 6)
    assert decode_nar(model, e, mem).data.tobytes() == base.tobytes()
    with pytest.raises(ValueError):
        decode_nar(model, np.zeros((0, 8), F32), mem)


# ---------------------------------------------------------------- sampler / loss / greedy


def test_glancing_examples():
    emb = Tensor(np.random.default_rng(0).normal(size=(5, 3)).astype(F32))
    table = Tensor(np.arange(18, dtype=F32).reshape(6, 3))
    same = glancing_sample(emb, [1, 2, 3, 4, 5], [1, 2, 3, 4, 5], table, 0.7, Rng(0))
    np.testing.assert_array_equal(same.data, emb.data)
    m1 = glancing_mask([1, 2, 3, 0, 0], [1, 2, 3, 4, 5], 0.5, Rng(9))
    m2 = glancing_mask([1, 2, 3, 0, 0], [1, 2, 3, 4, 5], 0.5, Rng(9))
    assert m1.sum() == 1 and (m1 == m2).all()
    tgt = [5, 4, 3, 2, 1]
    allrep = glancing_sample(emb, [0, 0, 0, 0, 0], tgt, table, 1.0, Rng(1)).data
    np.testing.assert_array_equal(allrep, table.data[tgt])


def test_glancing_errors():
    with pytest.raises(ValueError):
        glancing_mask([1, 2], [1, 2, 3], 0.5, Rng(0))
    with pytest.raises(ValueError):
        glancing_mask([1, 2], [1, 3], 1.5, Rng(0))


@given(st.lists(st.integers(0, 4), min_size=1, max_size=20), st.floats(0, 1), st.integers(0, 2**31))
def test_glancing_count_rule(first, lam, seed):
    rng = np.random.default_rng(seed)
    tgt = rng.integers(0, 5, len(first))
    d = int((np.array(first) != tgt).sum())
    m = glancing_mask(first, tgt, lam, Rng(seed))
    assert m.sum() == min(len(first), math.ceil(lam * d - 1e-9))


def test_loss_examples():
    n, v = 3, 4
    parts = paraformer_loss(np.zeros((n, v)), np.zeros((n, v)), np.array([1.0, 1.0, 1.0]), [0, 1, 2])
    assert parts.ce_first == pytest.approx(math.log(4), abs=1e-6)
    assert parts.ce_second == pytest.approx(math.log(4), abs=1e-6)
    parts = paraformer_loss(np.zeros((n, v)), np.zeros((n, v)), np.array([0.8, 0.8, 0.8]), [0, 1, 2])
    assert parts.quantity == pytest.approx(0.6, abs=1e-6)
    assert parts.total == pytest.approx(2 * math.log(4) + 0.6, abs=1e-6)
    onehot = np.full((n, v), -1e4)
    onehot[np.arange(n), [0, 1, 2]] = 1e4
    parts = paraformer_loss(onehot, onehot, np.array([1.5, 1.5]), [0, 1, 2], label_smoothing=0.0)
    assert parts.total == 0.0
    assert min(parts.ce_first, parts.ce_second, parts.quantity) >= 0


def test_loss_batch_padding():
    rng = np.random.default_rng(0)
    l1, l2 = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    a = np.array([[0.5, 0.5, 1.0, 1.0], [0.7, 0.6, 0.0, 0.0]])
    tg = [[1, 2, 3], [0, 1]]
    both = paraformer_loss(l1, l2, a, tg)
    s0 = paraformer_loss(l1[0], l2[0], a[0], tg[0])
    s1 = paraformer_loss(l1[1, :2], l2[1, :2], a[1], tg[1])
    assert both.ce_first == pytest.approx((3 * s0.ce_first + 2 * s1.ce_first) / 5, rel=1e-9)
    assert both.quantity == pytest.approx((s0.quantity + s1.quantity) / 2, rel=1e-9)


def test_loss_gradient_wrt_inputs():
    rng = np.random.default_rng(7)
    for _ in range(10):
        l1, l2, a = rng.normal(size=(2, 4)), rng.normal(size=(2, 4)), rng.random(5)
        tgt = rng.integers(0, 4, 2)
        f = lambda x, y, z: paraformer_loss(x, y, z, tgt).tensor  # noqa: E731
        assert gradcases.max_rel_error(f, [l1, l2, a]) < 1e-3


def test_greedy_examples():
    np.testing.assert_array_equal(greedy_decode(np.array([[0, 1], [1, 0]])), [1, 0])
    assert greedy_decode(np.array([[0.5, 0.5]]))[0] == 0


@given(st.integers(0, 2**31))
def test_greedy_matches_max_scan(seed):
    x = np.random.default_rng(seed).integers(-3, 3, size=(6, 5)).astype(F32)
    ref = []
    for row in x:
        best, arg = -np.inf, -1
        for j, v in enumerate(row):
            if v > best:
                best, arg = v, j
        ref.append(arg)
    np.testing.assert_array_equal(greedy_decode(x), ref)


# ---------------------------------------------------------------- timestamps / AAS


def test_timestamps_hand_trace():
    ts = timestamps_from_alphas(np.full(4, 0.5, F32), 2, 10)
    assert [(s.token, s.start_ms, s.end_ms) for s in ts.spans] == [(0, 0, 20), (1, 20, 40)]


def test_timestamps_no_tokens():
    ts = timestamps_from_alphas(np.full(5, 0.3, F32), 0, 10)
    assert [(s.token, s.start_ms, s.end_ms) for s in ts.spans] == [(SILENCE, 0, 50)]


def test_timestamps_errors():
    with pytest.raises(ValueError):
        timestamps_from_alphas(np.zeros(4, F32), 2, 10)
    with pytest.raises(ValueError):
        timestamps_from_alphas(np.ones(2, F32), 3, 10)


def test_timestamps_silence_marked():
    a = np.array([0.001, 0.001, 0.5, 0.5, 0.001, 0.5, 0.5, 0.001], F32)
    ts = timestamps_from_alphas(a, 2, 10, tokens=[4, 5])
    got = [(s.token, s.start_ms, s.end_ms) for s in ts.spans]
    assert got == [(SILENCE, 0, 20), (4, 20, 40), (SILENCE, 40, 50), (5, 50, 70), (SILENCE, 70, 80)]


@given(st.integers(0, 2**31), st.integers(1, 40), st.sampled_from([5, 10, 30]))
def test_timestamps_partition_timeline(seed, t, shift):
    rng = np.random.default_rng(seed)
    a = rng.random(t).astype(F32)
    a[rng.random(t) < 0.3] *= 0.01
    n = int(rng.integers(0, t + 1))
    if a.sum() <= 0:
        return
    ts = timestamps_from_alphas(a, n, shift)
    spans = ts.spans
    assert spans[0].start_ms == 0 and spans[-1].end_ms == t * shift
    for s0, s1 in zip(spans, spans[1:]):
        assert s0.end_ms == s1.start_ms
    assert all(s.end_ms > s.start_ms for s in spans)
    assert len(ts.token_spans()) == n


def test_aas_examples():
    ref = [(1, 0, 30), (2, 30, 40)]
    pred = [TokenSpan(1, 0, 20), TokenSpan(2, 20, 40)]
    assert aas([TokenSpan(1, 0, 30), TokenSpan(2, 30, 40)], ref) == 0
    assert aas(pred, ref) == 5.0
    shifted = [TokenSpan(t, s + 10, e + 10) for t, s, e in ref]
    assert aas(shifted, ref) == 10.0
    with pytest.raises(ValueError):
        aas(pred[:1], ref)


@given(st.lists(st.tuples(st.integers(0, 500), st.integers(1, 200)), min_size=1, max_size=8), st.integers(0, 300))
def test_aas_shift_property(spans, shift):
    ref = [(1, s, s + d) for s, d in spans]
    pred = [TokenSpan(1, s + shift, e + shift) for _, s, e in ref]
    assert aas(pred, ref) == shift


def test_alignment_targets_fire_at_token_ends():
    spans = [(1, 0, 60), (2, 60, 90), (3, 150, 240)]
    tgt = alignment_targets(spans, 30, 10)
    assert tgt.sum() == pytest.approx(3.0, abs=1e-5)
    fires = cif(np.zeros((30, 0), F32), tgt).fires
    np.testing.assert_array_equal(fires, [5, 8, 23])


# ---------------------------------------------------------------- inference


def test_recognize_ignores_training_only_settings():
    x = np.random.default_rng(8).normal(size=(20, 4)).astype(F32) + 2
    m1 = Paraformer(small_cfg(glance_ratio=0.0), seed=5)
    m2 = Paraformer(small_cfg(glance_ratio=1.0), seed=5)
    r1, r2 = recognize(m1, x), recognize(m2, x)
    assert r1.tokens == r2.tokens
    np.testing.assert_array_equal(r1.alphas, r2.alphas)


def test_recognize_empty_and_spans(model):
    r = recognize(model, np.zeros((0, 4), F32))
    assert r.tokens == [] and r.timestamps.spans == []
    x = np.random.default_rng(9).normal(size=(30, 4)).astype(F32)
    r = recognize(model, x)
    toks = r.timestamps.token_spans()
    assert [s.token for s in toks] == r.tokens
    if r.timestamps.spans:
        assert r.timestamps.spans[-1].end_ms == 30 * model.cfg.ts_shift_ms * model.cfg.upsample_rate
