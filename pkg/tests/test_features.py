import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deskasr.features import (
    FbankConfig,
    FeatureFrames,
    SynthConfig,
    WavFormatError,
    fbank,
    lfr_stack,
    make_voices,
    mel_filterbank,
    nearest_template,
    pack_feat,
    read_wav,
    synth_audio,
    synth_generate,
    unpack_feat,
    write_wav,
)
from deskasr.kernels import Rng


def test_frame_count_one_second():
    assert fbank(np.zeros(16000, np.int16)).num_frames == 98
    assert fbank(np.zeros(8000, np.int16), 8000).num_frames == 98


def test_empty_and_short_audio():
    assert fbank(np.zeros(0, np.int16)).frames.shape == (0, 80)
    assert fbank(np.zeros(399, np.int16)).num_frames == 0
    assert fbank(np.zeros(400, np.int16)).num_frames == 1


def test_invalid_rate():
    with pytest.raises(ValueError):
        fbank(np.zeros(16000, np.int16), 44100)


def test_silence_frames_equal():
    f = fbank(np.zeros(4000, np.int16)).frames
    assert (f == f[0]).all()
    np.testing.assert_allclose(f[0], math.log(1e-10), rtol=1e-6)


def test_deterministic():
    pcm = np.random.default_rng(0).integers(-3000, 3000, 5000).astype(np.int16)
    assert fbank(pcm).frames.tobytes() == fbank(pcm).frames.tobytes()


def _fbank_oracle(pcm, sr, n_mels=8):
    """Per-frame loops with an explicit DFT sum and hand-built triangles."""
    win, hop = sr * 25 // 1000, sr * 10 // 1000
    n_fft = 1
    while n_fft < win:
        n_fft *= 2
    x = [float(v) for v in pcm]
    t = 1 + (len(x) - win) // hop
    ham = [0.54 - 0.46 * math.cos(2 * math.pi * i / (win - 1)) for i in range(win)]
    mel = lambda f: 2595 * math.log10(1 + f / 700)  # noqa: E731
    lo, hi = mel(20.0), mel(sr / 2)
    pts = [lo + (hi - lo) * i / (n_mels + 1) for i in range(n_mels + 2)]
    out = []
    for fi in range(t):
        seg = x[fi * hop : fi * hop + win]
        pe = [seg[0] - 0.97 * seg[0]] + [seg[i] - 0.97 * seg[i - 1] for i in range(1, win)]
        w = np.array([pe[i] * ham[i] for i in range(win)])
        k = np.arange(n_fft // 2 + 1)[:, None]
        n = np.arange(win)[None, :]
        re = (w * np.cos(2 * np.pi * k * n / n_fft)).sum(1)
        im = (w * np.sin(2 * np.pi * k * n / n_fft)).sum(1)
        power = re**2 + im**2
        row = []
        for m in range(n_mels):
            e = 0.0
            for b in range(n_fft // 2 + 1):
                bm = mel(b * sr / n_fft)
                up = (bm - pts[m]) / (pts[m + 1] - pts[m])
                down = (pts[m + 2] - bm) / (pts[m + 2] - pts[m + 1])
                e += power[b] * max(0.0, min(up, down))
            row.append(math.log(max(e, 1e-10)))
        out.append(row)
    return np.array(out)


@pytest.mark.parametrize("sr", [8000, 16000])
def test_fbank_matches_loop_oracle(sr):
    pcm = np.random.default_rng(sr).integers(-8000, 8000, sr // 20).astype(np.int16)
    got = fbank(pcm, sr, FbankConfig(n_mels=8)).frames
    np.testing.assert_allclose(got, _fbank_oracle(pcm, sr), rtol=1e-5, atol=1e-4)


def test_mean_norm_flag():
    pcm = np.random.default_rng(1).integers(-5000, 5000, 8000).astype(np.int16)
    f = fbank(pcm, cfg=FbankConfig(mean_norm=True)).frames
    np.testing.assert_allclose(f.mean(0), 0, atol=1e-4)


def test_mel_filterbank_triangles_peak_at_one():
    fb = mel_filterbank(10, 512, 16000, 20.0)
    assert fb.shape == (10, 257)
    assert (fb >= 0).all() and (fb <= 1).all()
    assert (fb.max(1) > 0.5).all()


@settings(max_examples=40)
@given(arrays(np.int16, st.integers(0, 3000)))
def test_fbank_finite(pcm):
    assert np.isfinite(fbank(pcm).frames).all()


# ---------------------------------------------------------------- LFR


def _ff(x):
    return FeatureFrames(np.asarray(x, np.float32))


def test_lfr_examples():
    x = np.arange(30, dtype=np.float32).reshape(10, 3)
    np.testing.assert_array_equal(lfr_stack(_ff(x), 1, 1).frames, x)
    out = lfr_stack(_ff(x), 7, 6)
    assert out.num_frames == 2 and out.frames.shape[1] == 21
    assert out.frame_shift_ms == 60
    five = lfr_stack(_ff(x[:5]), 7, 6).frames
    assert five.shape == (1, 21)
    np.testing.assert_array_equal(five[0].reshape(7, 3), np.concatenate([x[:5], x[4:5], x[4:5]]))


@given(st.integers(0, 40), st.integers(1, 8), st.integers(1, 8), st.integers(1, 4))
def test_lfr_properties(t, m, n, d):
    x = np.random.default_rng(t * 100 + m * 10 + n).normal(size=(t, d)).astype(np.float32)
    out = lfr_stack(_ff(x), m, n).frames
    assert out.shape == (-(-t // n), m * d)
    if t:
        np.testing.assert_array_equal(out[0, :d], x[0])
        for j in range(out.shape[0]):
            for w in range(m):
                np.testing.assert_array_equal(out[j, w * d : (w + 1) * d], x[min(j * n + w, t - 1)])


def test_lfr_rejects_bad_window():
    with pytest.raises(ValueError):
        lfr_stack(_ff(np.zeros((3, 2))), 0, 1)


# ---------------------------------------------------------------- synthetic data


def _templates(v=6, d=5, seed=0):
    t = np.random.default_rng(seed).normal(size=(v, d)).astype(np.float32) * 3
    t[0] = 0
    return t


def test_synth_forced_duration():
    cfg = SynthConfig(vocab_size=6, noise=0.0)
    feats, ali = synth_generate([3], Rng(0), cfg, _templates(), durations=[5])
    assert feats.num_frames == 5
    assert (feats.frames == feats.frames[0]).all()
    assert ali.spans == [(3, 0, 5)]


def test_synth_seeded_and_empty():
    cfg = SynthConfig(vocab_size=6, silence_prob=0.3)
    a = synth_generate([1, 2, 3], Rng(4), cfg, _templates())
    b = synth_generate([1, 2, 3], Rng(4), cfg, _templates())
    assert a[0].frames.tobytes() == b[0].frames.tobytes() and a[1].spans == b[1].spans
    f, ali = synth_generate([], Rng(0), cfg, _templates())
    assert f.num_frames == 0 and ali.spans == []


@given(st.lists(st.integers(1, 5), min_size=1, max_size=12), st.integers(0, 2**31))
def test_synth_noise_free_classification_recovers_tokens(tokens, seed):
    cfg = SynthConfig(vocab_size=6, noise=0.0, dur_min=1, dur_max=4)
    tm = _templates()
    feats, ali = synth_generate(tokens, Rng(seed), cfg, tm)
    labels = nearest_template(feats.frames, tm)
    for tok, s, e in ali.spans:
        assert (labels[s:e] == tok).all()
    assert ali.tokens() == tokens


@given(st.lists(st.integers(1, 5), min_size=1, max_size=12), st.integers(0, 2**31), st.integers(0, 4))
def test_synth_alignment_partitions_without_silence(tokens, seed, lead):
    cfg = SynthConfig(vocab_size=6, silence_prob=0.0, dur_min=1, dur_max=6, lead_sil=lead)
    feats, ali = synth_generate(tokens, Rng(seed), cfg, _templates())
    bounds = [(s, e) for _, s, e in ali.spans]
    assert bounds[0][0] == lead and bounds[-1][1] == feats.num_frames
    for (s0, e0), (s1, e1) in zip(bounds, bounds[1:]):
        assert e0 == s1
    assert all(e > s for s, e in bounds)


def test_synth_audio_alignment_in_frames():
    cfg = SynthConfig(vocab_size=6, silence_prob=0.5, lead_sil=3, trail_sil=2)
    voices = make_voices(cfg)
    pcm, ali = synth_audio([1, 2, 3], Rng(2), cfg, voices)
    end = ali.spans[-1][2]
    assert len(pcm) == (end + 2) * 160
    assert (pcm[: 3 * 160] == 0).all()
    spans = ali.spans
    assert all(a[2] <= b[1] for a, b in zip(spans, spans[1:]))


def test_twin_voices_share_amplitudes():
    cfg = SynthConfig(vocab_size=8, twins=2)
    v = make_voices(cfg)
    np.testing.assert_array_equal(v.amps[7], v.amps[1])
    np.testing.assert_array_equal(v.amps[6], v.amps[2])
    assert not np.array_equal(v.amps[3], v.amps[4])


# ---------------------------------------------------------------- I/O


def test_wav_round_trip(tmp_path):
    pcm = np.random.default_rng(0).integers(-32768, 32767, 1234).astype(np.int16)
    write_wav(tmp_path / "a.wav", pcm, 8000)
    back, sr = read_wav(tmp_path / "a.wav")
    assert sr == 8000
    np.testing.assert_array_equal(back, pcm)


def _wav_header(channels, bits, fmt=1, rate=16000, n=0):
    block = channels * bits // 8
    return (
        b"RIFF" + struct.pack("<I", 36 + n) + b"WAVE" + b"fmt " + struct.pack("<IHHIIHH", 16, fmt, channels, rate, rate * block, block, bits)
        + b"data" + struct.pack("<I", n)
    )  # fmt: skip


@pytest.mark.parametrize(
    "blob",
    [
        b"not a wav at all",
        _wav_header(2, 16, n=8) + bytes(8),
        _wav_header(1, 8, n=4) + bytes(4),
        _wav_header(1, 32, fmt=3, n=8) + bytes(8),
    ],
)
def test_wav_rejects_other_encodings(tmp_path, blob):
    p = tmp_path / "x.wav"
    p.write_bytes(blob)
    with pytest.raises(WavFormatError):
        read_wav(p)


def test_feat_pack_round_trip():
    x = np.random.default_rng(0).normal(size=(7, 3)).astype(np.float32)
    np.testing.assert_array_equal(unpack_feat(pack_feat(x)), x)
    with pytest.raises(ValueError):
        unpack_feat(pack_feat(x)[:-1])
