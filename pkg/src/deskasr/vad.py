"""Voice activity detection: FSMN frame scorer and a streaming segmenter."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .kernels import Rng, Tensor
from .layers import Adam, Linear, ParamStore

log = logging.getLogger(__name__)

SILENCE, SPEECH = "SILENCE", "SPEECH"


@dataclass
class VadConfig:
    speech_threshold: float = 0.5
    smooth_window: int = 5  # frames, odd
    min_speech_ms: int = 100
    max_silence_in_speech_ms: int = 300
    max_segment_ms: int = 15000
    pad_ms: int = 100
    frame_shift_ms: int = 10
    split_search_ms: int = 1000  # forced cuts look for the quietest frame this far back

    def __post_init__(self):
        if not 0.0 < self.speech_threshold < 1.0:
            raise ValueError("speech_threshold must lie in (0, 1)")
        if self.smooth_window < 1 or self.smooth_window % 2 == 0:
            raise ValueError("smooth_window must be a positive odd frame count")
        if self.frame_shift_ms <= 0:
            raise ValueError("frame_shift_ms must be positive")
        for name in ("min_speech_ms", "max_silence_in_speech_ms", "max_segment_ms", "pad_ms", "split_search_ms"):
            v = getattr(self, name)
            if v < 0 or v % self.frame_shift_ms:
                raise ValueError(f"{name} must be a non-negative multiple of frame_shift_ms")
        if self.min_speech_ms == 0 or self.max_segment_ms == 0:
            raise ValueError("min_speech_ms and max_segment_ms must be positive")
        if self.pad_ms > self.max_silence_in_speech_ms:
            # a closed segment's padded end must not run past the silence that closed it
            raise ValueError("pad_ms may not exceed max_silence_in_speech_ms")
        if self.max_segment_ms < 2 * self.min_speech_ms + 2 * self.pad_ms:
            raise ValueError("max_segment_ms too short for min_speech_ms and padding")

    def frames(self, ms: int) -> int:
        return ms // self.frame_shift_ms


@dataclass
class Segment:
    start_ms: int
    end_ms: int
    mean_score: float

    def __post_init__(self):
        if self.start_ms < 0 or self.end_ms <= self.start_ms:
            raise ValueError(f"bad segment [{self.start_ms}, {self.end_ms})")

    def to_json(self) -> dict:
        return {"start_ms": int(self.start_ms), "end_ms": int(self.end_ms), "score": round(float(self.mean_score), 6)}


@dataclass
class VadState:
    """Streaming state; one per audio stream."""

    mode: str = SILENCE
    t: int = 0  # next smoothed frame index to run through the machine
    n_raw: int = 0  # raw probabilities received
    raw: deque = field(default_factory=deque)  # raw probs for frames >= t - half
    recent: deque = field(default_factory=deque)  # (frame, smoothed prob) of the last split_search frames
    run_len: int = 0  # consecutive above-threshold frames while in SILENCE
    run_sum: float = 0.0
    seg_start: int = 0  # frame where the open segment begins (padding included)
    core_start: int = 0
    last_above: int = -1
    silence_len: int = 0
    score_sum: float = 0.0  # smoothed probs from core_start through last_above
    score_n: int = 0
    pending_sum: float = 0.0  # smoothed probs after last_above
    pending_n: int = 0
    prev_end: int = 0  # end frame of the previous segment
    finished: bool = False


# --------------------------------------------------------------------------
# frame scorer


@dataclass
class VadModelConfig:
    n_mels: int = 80
    hidden: int = 32
    left_taps: int = 8
    right_taps: int = 2
    n_units: int = 2  # unit 0 is silence


class VadModel:
    """linear -> relu -> FSMN memory block -> linear -> softmax over units."""

    def __init__(self, cfg: VadModelConfig | None = None, seed: int = 0):
        self.cfg = cfg = cfg or VadModelConfig()
        rng = Rng(seed)
        self.store = ParamStore()
        self.store.new("vad.feat_mean", (cfg.n_mels,), init="zeros")
        self.store.new("vad.feat_std", (cfg.n_mels,), init="const", value=1.0)
        self.inp = Linear(self.store, "vad.in", cfg.n_mels, cfg.hidden, rng)
        self.taps = self.store.new("vad.memory", (cfg.left_taps + cfg.right_taps + 1, cfg.hidden), rng, init="normal", value=0.1)
        self.out = Linear(self.store, "vad.out", cfg.hidden, cfg.n_units, rng)
        self.buffers = {"vad.feat_mean", "vad.feat_std"}

    def trainable(self) -> list:
        return [p for name, p in self.store.items() if name not in self.buffers]

    def logits(self, feats) -> Tensor:
        x = np.asarray(feats, np.float32)
        x = (x - self.store["vad.feat_mean"].data) / self.store["vad.feat_std"].data
        h = K.relu(self.inp(Tensor(x.astype(np.float32))))
        m = K.add(h, K.depthwise_conv1d(h, self.taps, self.cfg.left_taps, self.cfg.right_taps))
        return self.out(m)


def score_frames(features, model: VadModel) -> np.ndarray:
    """Speech probability per frame: one minus the silence-unit posterior."""
    feats = np.asarray(features, np.float32)
    if feats.shape[0] == 0:
        return np.zeros(0, np.float32)
    p = K.softmax(model.logits(feats), axis=-1).data
    return np.clip(1.0 - p[:, 0], 0.0, 1.0).astype(np.float32)


def smooth_probs(probs, window: int) -> np.ndarray:
    """Centred moving average; the window shrinks at both ends."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd")
    p = np.asarray(probs, np.float64)
    n = len(p)
    half = window // 2
    out = np.empty(n, np.float64)
    for t in range(n):
        out[t] = _window_mean(p[max(0, t - half) : min(n, t + half + 1)])
    return out


def _window_mean(vals) -> float:
    s = 0.0
    for v in vals:
        s += float(v)
    return s / len(vals)


# --------------------------------------------------------------------------
# segmenter


def segment_stream(probs, state: VadState | None, cfg: VadConfig) -> tuple[list[Segment], VadState]:
    """Feed a chunk of raw frame probabilities; returns segments completed so far."""
    state = state if state is not None else VadState()
    if state.finished:
        raise RuntimeError("stream already finalized")
    half = cfg.smooth_window // 2
    out: list[Segment] = []
    for p in np.asarray(probs, np.float64).ravel():
        state.raw.append(float(p))
        state.n_raw += 1
        # frame t is ready once its right context has arrived
        while state.t + half < state.n_raw:
            _advance(state, _smoothed_at(state, state.t, state.n_raw, half), cfg, out)
    return out, state


def finalize(state: VadState, cfg: VadConfig) -> list[Segment]:
    """Flush the look-ahead and close any open segment at the end of the stream."""
    if state.finished:
        return []
    half = cfg.smooth_window // 2
    out: list[Segment] = []
    while state.t < state.n_raw:
        _advance(state, _smoothed_at(state, state.t, state.n_raw, half), cfg, out)
    if state.mode == SPEECH:
        _close(state, cfg, out, limit=state.n_raw)
    state.finished = True
    return out


def segment_offline(probs, cfg: VadConfig) -> list[Segment]:
    segs, st = segment_stream(probs, None, cfg)
    return segs + finalize(st, cfg)


def _smoothed_at(state: VadState, t: int, n: int, half: int) -> float:
    first = state.n_raw - len(state.raw)  # frame index of raw[0]
    lo, hi = max(0, t - half), min(n, t + half + 1)
    vals = [state.raw[i - first] for i in range(lo, hi)]
    # drop raw frames nobody will need again
    while state.raw and first < t + 1 - half:
        state.raw.popleft()
        first += 1
    return _window_mean(vals)


def _advance(state: VadState, p: float, cfg: VadConfig, out: list[Segment]) -> None:
    t = state.t
    state.t += 1
    state.recent.append((t, p))
    if len(state.recent) > max(cfg.frames(cfg.split_search_ms), 1):
        state.recent.popleft()
    above = p > cfg.speech_threshold
    if state.mode == SILENCE:
        if above:
            state.run_len += 1
            state.run_sum += p
            if state.run_len >= cfg.frames(cfg.min_speech_ms):
                first = t - state.run_len + 1
                state.mode = SPEECH
                state.seg_start = max(first - cfg.frames(cfg.pad_ms), state.prev_end, 0)
                state.core_start = first
                state.last_above = t
                state.score_sum, state.score_n = state.run_sum, state.run_len
                state.pending_sum, state.pending_n = 0.0, 0
                state.silence_len = 0
        else:
            state.run_len = 0
            state.run_sum = 0.0
        return
    if above:
        state.last_above = t
        state.score_sum += state.pending_sum + p
        state.score_n += state.pending_n + 1
        state.pending_sum, state.pending_n = 0.0, 0
        state.silence_len = 0
    else:
        state.silence_len += 1
        state.pending_sum += p
        state.pending_n += 1
        if state.silence_len * cfg.frame_shift_ms > cfg.max_silence_in_speech_ms:
            _close(state, cfg, out, limit=t + 1)
            return
    if t + 1 - state.seg_start >= cfg.frames(cfg.max_segment_ms):
        _force_split(state, cfg, out)


def _close(state: VadState, cfg: VadConfig, out: list[Segment], limit: int) -> None:
    min_frames = cfg.frames(cfg.min_speech_ms)
    end = max(state.last_above + 1, state.core_start + min_frames) + cfg.frames(cfg.pad_ms)
    end = min(end, limit)
    mean = state.score_sum / state.score_n if state.score_n else 0.0
    if end > state.seg_start:
        out.append(Segment(state.seg_start * cfg.frame_shift_ms, end * cfg.frame_shift_ms, mean))
        state.prev_end = end
    state.mode = SILENCE
    state.run_len = 0
    state.run_sum = 0.0
    state.silence_len = 0


def _force_split(state: VadState, cfg: VadConfig, out: list[Segment]) -> None:
    """Cut the open segment at its quietest recent frame; speech continues after the cut."""
    t = state.t - 1
    min_frames = cfg.frames(cfg.min_speech_ms)
    lo = state.seg_start + min_frames
    hi = t + 1 - min_frames
    best, best_p = hi, math.inf
    for f, p in state.recent:
        if lo <= f <= hi and p < best_p:
            best, best_p = f, p
    cut = max(best, lo)
    # running sums cover core_start..t; every frame from the cut on is still in `recent`
    tail_sum = sum(p for f, p in state.recent if f >= cut)
    head_n = cut - state.core_start
    if head_n > 0:
        mean = (state.score_sum + state.pending_sum - tail_sum) / head_n
    else:
        mean = state.score_sum / state.score_n if state.score_n else 0.0
    out.append(Segment(state.seg_start * cfg.frame_shift_ms, cut * cfg.frame_shift_ms, mean))
    state.prev_end = cut
    # the tail becomes a fresh segment starting at the cut
    tail = [(f, p) for f, p in state.recent if f >= cut]
    state.seg_start = state.core_start = cut
    above = [f for f, p in tail if p > cfg.speech_threshold]
    state.last_above = above[-1] if above else cut - 1
    state.score_sum = sum(p for f, p in tail if f <= state.last_above)
    state.score_n = sum(1 for f, p in tail if f <= state.last_above)
    state.pending_sum = sum(p for f, p in tail if f > state.last_above)
    state.pending_n = sum(1 for f, p in tail if f > state.last_above)


def speech_ms(segments) -> int:
    return sum(s.end_ms - s.start_ms for s in segments)


# --------------------------------------------------------------------------
# training


@dataclass
class VadTrainConfig:
    steps: int = 300
    chunk_frames: int = 1500
    lr: float = 3e-3
    augment_noise: float = 1.0
    seed: int = 0


def frame_labels(n_frames: int, spans, pad_frames: int = 0) -> np.ndarray:
    """1 for frames inside a token span, else 0."""
    lab = np.zeros(n_frames, np.int64)
    for _, s, e in spans:
        lab[max(0, s - pad_frames) : min(n_frames, e + pad_frames)] = 1
    return lab


def train_vad(feats_list, labels_list, model_cfg: VadModelConfig | None = None, cfg: VadTrainConfig | None = None) -> tuple[VadModel, list[float]]:
    """Frame-level cross-entropy on concatenated utterances."""
    cfg = cfg or VadTrainConfig()
    model = VadModel(model_cfg, seed=cfg.seed)
    feats = np.concatenate([np.asarray(f, np.float32) for f in feats_list], axis=0)
    labels = np.concatenate([np.asarray(lab, np.int64) for lab in labels_list])
    if len(feats) == 0:
        raise ValueError("no frames to train on")
    model.store["vad.feat_mean"].data[:] = feats.mean(axis=0)
    model.store["vad.feat_std"].data[:] = np.maximum(feats.std(axis=0), 1e-3)
    params = model.trainable()
    for p in params:
        p.requires_grad = True
    opt = Adam(params, lr=cfg.lr)
    rng = Rng(cfg.seed).fork(11)
    n = len(feats)
    size = min(cfg.chunk_frames, n)
    losses = []
    for _ in range(cfg.steps):
        s = rng.integers(0, n - size + 1)
        x = feats[s : s + size]
        if cfg.augment_noise > 0:
            x = (x + rng.normal(x.shape) * cfg.augment_noise).astype(np.float32)
        loss = K.cross_entropy(model.logits(x), labels[s : s + size])
        opt.zero_grad()
        K.backward(loss)
        opt.step()
        losses.append(float(loss.data))
    for p in params:
        p.requires_grad = False
    log.info("vad loss %.4f -> %.4f", losses[0], losses[-1])
    return model, losses
