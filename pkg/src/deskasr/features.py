"""Acoustic front end and synthetic data with known alignments."""

from __future__ import annotations

import functools
import io
import math
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import Rng

LOG_FLOOR = 1e-10


class WavFormatError(ValueError):
    """The file is not 16-bit mono little-endian PCM in a RIFF container."""


@dataclass
class FbankConfig:
    n_mels: int = 80
    frame_length_ms: int = 25
    frame_shift_ms: int = 10
    preemph: float = 0.97
    low_freq: float = 20.0
    mean_norm: bool = False


@dataclass
class FeatureFrames:
    frames: np.ndarray  # [T, D] float32
    frame_shift_ms: int = 10
    frame_length_ms: int = 25

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class Alignment:
    spans: list[tuple[int, int, int]] = field(default_factory=list)  # (token_id, start_frame, end_frame)

    def tokens(self) -> list[int]:
        return [s[0] for s in self.spans]

    def to_ms(self, frame_shift_ms: int) -> list[tuple[int, int, int]]:
        return [(t, s * frame_shift_ms, e * frame_shift_ms) for t, s, e in self.spans]


# --------------------------------------------------------------------------
# WAV


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read 16-bit mono PCM; returns (int16 samples, sample rate)."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    try:
        with wave.open(io.BytesIO(data)) as w:
            if w.getcomptype() != "NONE":
                raise WavFormatError(f"{path}: compressed WAV is not supported")
            if w.getnchannels() != 1:
                raise WavFormatError(f"{path}: expected mono, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise WavFormatError(f"{path}: expected 16-bit samples, got {8 * w.getsampwidth()}-bit")
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:  # e.g. float or extensible encodings
        raise WavFormatError(f"{path}: {exc}") from None
    return np.frombuffer(raw, dtype="<i2").astype(np.int16), rate


def write_wav(path, pcm: np.ndarray, sample_rate: int = 16000) -> None:
    pcm = np.asarray(pcm, dtype=np.int16)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.astype("<i2").tobytes())


# --------------------------------------------------------------------------
# fbank


def mel_scale(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def inv_mel_scale(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def _mel_points(n_mels: int, sample_rate: int, low_freq: float) -> np.ndarray:
    return np.linspace(mel_scale(low_freq), mel_scale(sample_rate / 2), n_mels + 2)


def mel_center_freqs(n_mels: int = 80, sample_rate: int = 16000, low_freq: float = 20.0) -> np.ndarray:
    return inv_mel_scale(_mel_points(n_mels, sample_rate, low_freq)[1:-1])


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, low_freq: float) -> np.ndarray:
    """Triangular filters in the mel domain, [n_mels, n_fft//2 + 1]."""
    pts = _mel_points(n_mels, sample_rate, low_freq)
    bin_mel = mel_scale(np.arange(n_fft // 2 + 1) * sample_rate / n_fft)
    left, center, right = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (bin_mel[None, :] - left) / (center - left)
    down = (right - bin_mel[None, :]) / (right - center)
    return np.maximum(0.0, np.minimum(up, down))


def num_frames(n_samples: int, sample_rate: int, cfg: FbankConfig) -> int:
    win = sample_rate * cfg.frame_length_ms // 1000
    hop = sample_rate * cfg.frame_shift_ms // 1000
    if n_samples < win:
        return 0
    return 1 + (n_samples - win) // hop


def fbank(pcm, sample_rate: int = 16000, cfg: FbankConfig | None = None) -> FeatureFrames:
    """Log-mel filterbank energies, one row per frame."""
    cfg = cfg or FbankConfig()
    if sample_rate not in (8000, 16000):
        raise ValueError(f"unsupported sample rate {sample_rate}")
    x = np.asarray(pcm, dtype=np.float64)
    win = sample_rate * cfg.frame_length_ms // 1000
    hop = sample_rate * cfg.frame_shift_ms // 1000
    t = num_frames(len(x), sample_rate, cfg)
    if t == 0:
        return FeatureFrames(np.zeros((0, cfg.n_mels), np.float32), cfg.frame_shift_ms, cfg.frame_length_ms)
    n_fft = 1 << (win - 1).bit_length()
    raw = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:t]
    # pre-emphasis inside each frame; first sample uses itself as predecessor
    frames = np.empty((t, win), np.float64)
    frames[:, 1:] = raw[:, 1:] - cfg.preemph * raw[:, :-1]
    frames[:, :1] = raw[:, :1] - cfg.preemph * raw[:, :1]
    frames *= _hamming(win)
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    power = spec.real**2 + spec.imag**2
    mel = power @ _filterbank_cached(cfg.n_mels, n_fft, sample_rate, cfg.low_freq).T
    feats = np.log(np.maximum(mel, LOG_FLOOR))
    if cfg.mean_norm:
        feats = feats - feats.mean(axis=0, keepdims=True)
    return FeatureFrames(feats.astype(np.float32), cfg.frame_shift_ms, cfg.frame_length_ms)


_FB_CACHE: dict = {}


@functools.lru_cache(maxsize=8)
def _hamming(win: int) -> np.ndarray:
    w = np.hamming(win)
    w.setflags(write=False)
    return w


def _filterbank_cached(n_mels, n_fft, sample_rate, low_freq):
    key = (n_mels, n_fft, sample_rate, low_freq)
    fb = _FB_CACHE.get(key)
    if fb is None:
        fb = mel_filterbank(n_mels, n_fft, sample_rate, low_freq)
        fb.setflags(write=False)
        _FB_CACHE[key] = fb
    return fb


def lfr_stack(feats: FeatureFrames, m: int, n: int) -> FeatureFrames:
    """Low frame rate: every ``n`` frames emit the concatenation of ``m`` frames.

    Output length is ceil(T/n); windows running past the end repeat the last
    input frame.
    """
    if m < 1 or n < 1:
        raise ValueError("lfr window and hop must be >= 1")
    x = feats.frames
    t, d = x.shape
    tout = -(-t // n)
    if tout == 0:
        out = np.zeros((0, m * d), np.float32)
    else:
        idx = np.arange(tout)[:, None] * n + np.arange(m)[None, :]
        idx = np.minimum(idx, t - 1)
        out = x[idx].reshape(tout, m * d)
    return FeatureFrames(np.ascontiguousarray(out, dtype=np.float32), feats.frame_shift_ms * n, feats.frame_length_ms)


# --------------------------------------------------------------------------
# synthetic speech


@dataclass
class SynthConfig:
    vocab_size: int = 32
    dur_min: int = 12  # frames of 10 ms
    dur_max: int = 24
    noise: float = 1.0
    silence_prob: float = 0.0  # chance of a pause after each token
    sil_min: int = 5
    sil_max: int = 15
    lead_sil: int = 0  # leading/trailing silence frames
    trail_sil: int = 0
    sample_rate: int = 16000
    voice_seed: int = 1234
    twins: int = 0  # tokens V-twins..V-1 share the voice of tokens 1..twins
    edge_ms: int = 20  # raised-cosine attack/decay of every rendered token


@dataclass
class Voices:
    """Per-token sinusoid amplitudes at the mel centre frequencies.

    Row 0 is silence.  ``templates`` are the mean log-mel frames of a steady
    rendering and are what :func:`synth_generate` repeats.
    """

    amps: np.ndarray  # [V, n_partials]
    freqs: np.ndarray  # [n_partials]
    templates: np.ndarray  # [V, n_mels]


def make_voices(cfg: SynthConfig, fb: FbankConfig | None = None) -> Voices:
    fb = fb or FbankConfig()
    rng = Rng(cfg.voice_seed)
    v = cfg.vocab_size
    freqs = mel_center_freqs(fb.n_mels, cfg.sample_rate, fb.low_freq)
    keep = freqs < 0.45 * cfg.sample_rate
    freqs = freqs[keep]
    n = len(freqs)
    db = rng.normal((v, n)) * 12.0
    # light smoothing over neighbouring partials
    kern = np.array([0.25, 0.5, 0.25])
    db = np.stack([np.convolve(row, kern, mode="same") for row in db])
    amps = 10.0 ** (db / 20.0)
    amps *= 600.0 / np.sqrt((amps**2).sum(axis=1, keepdims=True))
    amps[0] = 0.0
    for k in range(1, cfg.twins + 1):
        amps[v - k] = amps[k]
    templates = np.zeros((v, fb.n_mels), np.float32)
    steady = int(0.5 * cfg.sample_rate)
    t = np.arange(steady) / cfg.sample_rate
    phase = rng.uniform(n) * 2 * np.pi
    basis = np.sin(2 * np.pi * freqs[None, :] * t[:, None] + phase[None, :])
    for tok in range(v):
        pcm = basis @ amps[tok]
        templates[tok] = fbank(np.round(pcm), cfg.sample_rate, fb).frames.mean(axis=0)
    return Voices(amps, freqs, templates)


def _draw_durations(tokens, rng: Rng, cfg: SynthConfig, durations=None):
    if durations is not None:
        return [int(d) for d in durations], [0] * len(tokens)
    durs = [rng.integers(cfg.dur_min, cfg.dur_max + 1) for _ in tokens]
    pauses = []
    for i in range(len(tokens)):
        last = i == len(tokens) - 1
        if not last and cfg.silence_prob > 0 and rng.random() < cfg.silence_prob:
            pauses.append(rng.integers(cfg.sil_min, cfg.sil_max + 1))
        else:
            pauses.append(0)
    return durs, pauses


def _layout(tokens, durs, pauses, lead: int):
    spans = []
    pos = lead
    for tok, d, p in zip(tokens, durs, pauses):
        spans.append((int(tok), pos, pos + d))
        pos += d + p
    return spans, pos


def synth_generate(tokens, rng: Rng, cfg: SynthConfig, templates: np.ndarray, durations=None) -> tuple[FeatureFrames, Alignment]:
    """Render ``tokens`` directly in the feature domain.

    Each token repeats its template for a random number of frames, optional
    pauses repeat the silence template (row 0); Gaussian noise of std
    ``cfg.noise`` is added to every frame.
    """
    d = templates.shape[1]
    if len(tokens) == 0:
        return FeatureFrames(np.zeros((0, d), np.float32)), Alignment([])
    durs, pauses = _draw_durations(tokens, rng, cfg, durations)
    lead = cfg.lead_sil
    spans, end = _layout(tokens, durs, pauses, lead)
    total = end + cfg.trail_sil
    labels = np.zeros(total, np.int64)
    for tok, s, e in spans:
        labels[s:e] = tok
    frames = templates[labels].astype(np.float64)
    if cfg.noise > 0:
        frames = frames + rng.normal((total, d)) * cfg.noise
    return FeatureFrames(frames.astype(np.float32)), Alignment(spans)


def synth_audio(tokens, rng: Rng, cfg: SynthConfig, voices: Voices, durations=None) -> tuple[np.ndarray, Alignment]:
    """Render ``tokens`` as 16-bit PCM; alignment is in 10 ms frame units.

    Each token is a sum of sinusoids (random phases per occurrence) with its
    voice amplitudes and raised-cosine edges of ``cfg.edge_ms``; pauses are
    digital silence.
    """
    sr = cfg.sample_rate
    hop = sr // 100
    if len(tokens) == 0:
        return np.zeros(0, np.int16), Alignment([])
    durs, pauses = _draw_durations(tokens, rng, cfg, durations)
    spans, end = _layout(tokens, durs, pauses, cfg.lead_sil)
    total = (end + cfg.trail_sil) * hop
    pcm = np.zeros(total, np.float64)
    ramp = int(cfg.edge_ms * sr / 1000)
    for tok, s, e in spans:
        n = (e - s) * hop
        phase = rng.uniform(len(voices.freqs)) * 2 * np.pi
        sin_t, cos_t = _oscillators(voices.freqs, sr, n)
        # sin(wt + p) = sin(wt)cos(p) + cos(wt)sin(p)
        amp = voices.amps[tok]
        sig = sin_t @ (amp * np.cos(phase)) + cos_t @ (amp * np.sin(phase))
        env = np.ones(n)
        r = min(ramp, n // 2)
        if r > 0:
            w = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
            env[:r] = w
            env[n - r :] = w[::-1]
        pcm[s * hop : s * hop + n] += sig * env
    pcm = np.clip(np.round(pcm), -32768, 32767).astype(np.int16)
    return pcm, Alignment(spans)


_OSC_CACHE: dict = {}


def _oscillators(freqs: np.ndarray, sr: int, n: int):
    """sin/cos tables [n, n_partials] starting at t=0 (grown and cached per frequency set)."""
    key = (freqs.tobytes(), sr)
    tab = _OSC_CACHE.get(key)
    if tab is None or tab[0].shape[0] < n:
        t = np.arange(max(n, 4 * sr // 10)) / sr
        arg = 2 * np.pi * freqs[None, :] * t[:, None]
        tab = (np.sin(arg), np.cos(arg))
        _OSC_CACHE[key] = tab
    return tab[0][:n], tab[1][:n]


def nearest_template(frames: np.ndarray, templates: np.ndarray) -> np.ndarray:
    """Frame-wise nearest template index (squared Euclidean; ties to lowest id)."""
    d2 = ((frames[:, None, :].astype(np.float64) - templates[None, :, :]) ** 2).sum(axis=-1)
    return d2.argmin(axis=1)


def frames_to_ms(frame: int, shift_ms: int) -> int:
    return int(frame * shift_ms)


def silence_frame(n_mels: int = 80) -> np.ndarray:
    return np.full(n_mels, math.log(LOG_FLOOR), np.float32)


def pack_feat(frames: np.ndarray) -> bytes:
    """Serialise one feature matrix: u32 T, u32 D, float32 little-endian data."""
    frames = np.asarray(frames, dtype="<f4")
    return struct.pack("<II", *frames.shape) + frames.tobytes()


def unpack_feat(data: bytes) -> np.ndarray:
    if len(data) < 8:
        raise ValueError("truncated feature file")
    t, d = struct.unpack("<II", data[:8])
    body = data[8:]
    if len(body) != 4 * t * d:
        raise ValueError("truncated feature file")
    return np.frombuffer(body, dtype="<f4").reshape(t, d).astype(np.float32)
