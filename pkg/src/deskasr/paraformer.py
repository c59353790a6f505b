"""Single-pass non-autoregressive recogniser with a CIF predictor and timestamp head.

Shapes are time-major: features ``[B, T, F]`` (or ``[T, F]`` for one
utterance), encoder output ``[B, T, D]``, CIF weights ``[B, T]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from . import kernels as K
from .contextual import ContextualLayer, HotwordEmbedder, HotwordList
from .kernels import Rng, Tensor
from .layers import FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamStore, sinusoid_positions

SILENCE = -1


@dataclass
class ParaformerConfig:
    vocab_size: int = 32
    feat_dim: int = 80
    lfr_m: int = 7
    lfr_n: int = 6
    fbank_shift_ms: int = 10
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    enc_layers: int = 2
    dec_layers: int = 1
    predictor_width: int = 3
    predictor_bias: float = -1.0
    cif_threshold: float = 1.0
    tail_threshold: float = 0.5
    upsample_rate: int = 2
    ts_hidden: int = 32
    silence_threshold: float = 0.08  # fraction of max(alpha2)
    glance_ratio: float = 0.5
    quantity_weight: float = 1.0
    label_smoothing: float = 0.1
    ts_weight: float = 1.0
    peak_weight: float = 0.0  # mean alpha*(1-alpha) penalty, pushes alphas towards 0/1

    @property
    def input_dim(self) -> int:
        return self.feat_dim * self.lfr_m

    @property
    def frame_shift_ms(self) -> int:
        return self.fbank_shift_ms * self.lfr_n

    @property
    def ts_shift_ms(self) -> int:
        return self.frame_shift_ms // self.upsample_rate


@dataclass
class PredictorOutput:
    alphas: np.ndarray  # [T]
    fires: np.ndarray  # [N] frame index of each token
    embeddings: np.ndarray  # [N, D]
    residual: float
    tail_fired: bool = False


@dataclass
class TokenSpan:
    token: int  # SILENCE for silence
    start_ms: int
    end_ms: int

    @property
    def is_silence(self) -> bool:
        return self.token == SILENCE


@dataclass
class TimestampOutput:
    alphas2: np.ndarray
    spans: list[TokenSpan]
    upsample_rate: int = 1

    def token_spans(self) -> list[TokenSpan]:
        return [s for s in self.spans if not s.is_silence]


@dataclass
class ParaformerLossParts:
    ce_first: float
    ce_second: float
    quantity: float
    total: float
    gamma: float = 1.0
    tensor: Tensor | None = field(default=None, repr=False)


@dataclass
class Recognition:
    tokens: list[int]
    alphas: np.ndarray
    fires: np.ndarray
    timestamps: TimestampOutput


# --------------------------------------------------------------------------
# modules


def unfold_time(x: Tensor, width: int) -> Tensor:
    """Stack ``width`` zero-padded neighbouring frames along channels: [..., T, C] -> [..., T, width*C].

    A Linear layer on the result is a stride-1, same-length conv1d whose
    kernel ``[width, C_in, C_out]`` is ``weight.T.reshape(width, C_in, C_out)``.
    """
    left = (width - 1) // 2
    right = width - 1 - left
    xd = x.data
    t, c = xd.shape[-2], xd.shape[-1]
    padw = [(0, 0)] * (xd.ndim - 2) + [(left, right), (0, 0)]
    xp = np.pad(xd, padw)
    out = np.concatenate([xp[..., j : j + t, :] for j in range(width)], axis=-1)

    def bw(g):
        gx = np.zeros_like(xp)
        for j in range(width):
            gx[..., j : j + t, :] += g[..., j * c : (j + 1) * c]
        return (gx[..., left : left + t, :],)

    return Tensor.from_op(out, (x,), bw)


class EncoderStack:
    """Input normalisation and projection, sinusoidal positions, pre-norm self-attention blocks."""

    def __init__(self, store: ParamStore, cfg: ParaformerConfig, rng: Rng):
        d = cfg.d_model
        self.feat_mean = store.new("encoder.feat_mean", (cfg.input_dim,), init="zeros")
        self.feat_std = store.new("encoder.feat_std", (cfg.input_dim,), init="ones")
        self.in_proj = Linear(store, "encoder.in_proj", cfg.input_dim, d, rng)
        self.blocks = []
        for i in range(cfg.enc_layers):
            p = f"encoder.layer{i}"
            self.blocks.append(
                (
                    LayerNorm(store, f"{p}.ln1", d),
                    MultiHeadAttention(store, f"{p}.attn", d, cfg.n_heads, rng),
                    LayerNorm(store, f"{p}.ln2", d),
                    FeedForward(store, f"{p}.ffn", d, cfg.d_ff, rng),
                )
            )
        self.final_ln = LayerNorm(store, "encoder.final_ln", d)
        self.d = d

    def __call__(self, feats: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if feats.shape[-1] != self.in_proj.n_in:
            raise K.DimensionError(f"encoder expects {self.in_proj.n_in}-dim frames, got {feats.shape[-1]}")
        t = feats.shape[-2]
        x = Tensor((feats.data - self.feat_mean.data) / self.feat_std.data)
        x = K.add(self.in_proj(x), Tensor(sinusoid_positions(t, self.d).astype(feats.dtype)))
        key_mask = None if mask is None else mask[..., None, :]
        for ln1, attn, ln2, ffn in self.blocks:
            h = ln1(x)
            x = K.add(x, attn(h, h, key_mask))
            x = K.add(x, ffn(ln2(x)))
        x = self.final_ln(x)
        if mask is not None:
            x = K.mul(x, Tensor(mask[..., None].astype(x.dtype)))
        return x


class Predictor:
    """alpha = sigmoid(linear(gelu(conv1d(H)))) with a width-3 same-length convolution."""

    def __init__(self, store: ParamStore, cfg: ParaformerConfig, rng: Rng):
        d = cfg.d_model
        self.width = cfg.predictor_width
        self.conv = Linear(store, "predictor.conv", self.width * d, d, rng)
        self.out = Linear(store, "predictor.out", d, 1, rng)
        store["predictor.out.bias"].data[:] = cfg.predictor_bias

    def __call__(self, hidden: Tensor, mask: np.ndarray | None = None) -> Tensor:
        h = K.gelu(self.conv(unfold_time(hidden, self.width)))
        logit = self.out(h)
        a = K.sigmoid(K.reshape(logit, logit.shape[:-1]))
        if mask is not None:
            a = K.mul(a, Tensor(mask.astype(a.dtype)))
        return a


class TimestampHead:
    """Upsample encoder frames by ``rate`` (transposed conv), run an LSTM, squash to alpha2.

    With kernel size equal to the stride the transposed convolution has no
    overlapping taps, so it is computed as a Linear to ``rate*D`` channels
    followed by a reshape; frame ``t`` tap ``j`` lands at output ``t*rate + j``.
    """

    def __init__(self, store: ParamStore, cfg: ParaformerConfig, rng: Rng):
        d, hid = cfg.d_model, cfg.ts_hidden
        self.rate = cfg.upsample_rate
        self.up = Linear(store, "ts.upsample", d, self.rate * d, rng)
        self.lstm_x = Linear(store, "ts.lstm.x", d, 4 * hid, rng)
        self.lstm_h = store.new("ts.lstm.h", (4 * hid, hid), rng)
        self.out = Linear(store, "ts.out", hid, 1, rng)
        self.d = d

    def upsample(self, hidden: Tensor) -> Tensor:
        up = self.up(hidden)  # [..., T, rate*D]
        lead, t = hidden.shape[:-2], hidden.shape[-2]
        return K.reshape(up, (*lead, t * self.rate, self.d))

    def __call__(self, hidden: Tensor, mask: np.ndarray | None = None) -> Tensor:
        u = K.gelu(self.upsample(hidden))
        hs = K.lstm(self.lstm_x(u), self.lstm_h)
        logit = self.out(hs)
        a2 = K.sigmoid(K.reshape(logit, logit.shape[:-1]))
        if mask is not None:
            a2 = K.mul(a2, Tensor(upsample_mask(mask, self.rate).astype(a2.dtype)))
        return a2


def upsample_mask(mask: np.ndarray, rate: int) -> np.ndarray:
    return np.repeat(mask, rate, axis=-1)


class Decoder:
    """Bidirectional decoder over token embeddings; the last layer carries the hotword path."""

    def __init__(self, store: ParamStore, cfg: ParaformerConfig, rng: Rng):
        d = cfg.d_model
        self.d = d
        self.embed = store.new("decoder.embed", (cfg.vocab_size, d), rng, init="normal", value=1.0)
        self.layers = []
        for i in range(cfg.dec_layers - 1):
            p = f"decoder.layer{i}"
            self.layers.append(
                (
                    LayerNorm(store, f"{p}.ln1", d),
                    MultiHeadAttention(store, f"{p}.self", d, cfg.n_heads, rng),
                    LayerNorm(store, f"{p}.ln2", d),
                    MultiHeadAttention(store, f"{p}.src", d, cfg.n_heads, rng),
                    LayerNorm(store, f"{p}.ln3", d),
                    FeedForward(store, f"{p}.ffn", d, cfg.d_ff, rng),
                )
            )
        p = "decoder.last"
        self.last_ln1 = LayerNorm(store, f"{p}.ln1", d)
        self.last_self = MultiHeadAttention(store, f"{p}.self", d, cfg.n_heads, rng)
        self.last_ln2 = LayerNorm(store, f"{p}.ln2", d)
        self.last_ffn = FeedForward(store, f"{p}.ffn", d, cfg.d_ff, rng)
        self.last_ln3 = LayerNorm(store, f"{p}.ln3", d)
        self.contextual = ContextualLayer(store, f"{p}.context", d, cfg.n_heads, rng)
        self.hotwords = HotwordEmbedder(store, "hotword", cfg.vocab_size, d, rng)
        self.final_ln = LayerNorm(store, "decoder.final_ln", d)
        self.out = Linear(store, "decoder.out", d, cfg.vocab_size, rng)

    def __call__(self, emb: Tensor, memory: Tensor, token_mask=None, memory_mask=None, hotword_emb: Tensor | None = None, hotword_mask=None) -> Tensor:
        n = emb.shape[-2]
        x = K.add(emb, Tensor(sinusoid_positions(n, self.d).astype(emb.dtype)))
        self_mask = None if token_mask is None else token_mask[..., None, :]
        src_mask = None if memory_mask is None else memory_mask[..., None, :]
        for ln1, sa, ln2, ca, ln3, ffn in self.layers:
            h = ln1(x)
            x = K.add(x, sa(h, h, self_mask))
            x = K.add(x, ca(ln2(x), memory, src_mask))
            x = K.add(x, ffn(ln3(x)))
        h = self.last_ln1(x)
        x = K.add(x, self.last_self(h, h, self_mask))
        es_prime = K.add(x, self.last_ffn(self.last_ln2(x)))
        if hotword_emb is None:
            hotword_emb = Tensor(np.zeros((1, self.d), emb.dtype))
        o = self.contextual(self.last_ln3(es_prime), memory, hotword_emb, src_mask, hotword_mask)
        x = K.add(es_prime, o)
        return self.out(self.final_ln(x))


class Paraformer:
    def __init__(self, cfg: ParaformerConfig | None = None, seed: int = 0):
        self.cfg = cfg = cfg or ParaformerConfig()
        rng = Rng(seed)
        self.store = ParamStore()
        self.encoder = EncoderStack(self.store, cfg, rng.fork(1))
        self.predictor = Predictor(self.store, cfg, rng.fork(2))
        self.decoder = Decoder(self.store, cfg, rng.fork(3))
        self.ts_head = TimestampHead(self.store, cfg, rng.fork(4))
        self.buffers = {"encoder.feat_mean", "encoder.feat_std"}

    def trainable(self) -> list:
        return [p for name, p in self.store.items() if name not in self.buffers]

    def set_feature_stats(self, mean: np.ndarray, std: np.ndarray) -> None:
        self.store["encoder.feat_mean"].data[:] = mean
        self.store["encoder.feat_std"].data[:] = np.maximum(std, 1e-3)

    def embed_hotwords(self, words: HotwordList | None) -> Tensor:
        return self.decoder.hotwords(words or HotwordList.of())


# --------------------------------------------------------------------------
# operations


def encode(model: Paraformer, feats, mask=None) -> Tensor:
    """Encoder output, one row per (LFR) input frame."""
    x = K.as_tensor(np.asarray(feats, np.float32) if not isinstance(feats, Tensor) else feats)
    if x.shape[-2] < 1:
        raise ValueError("encode needs at least one frame")
    return model.encoder(x, mask)


def predict_alphas(model: Paraformer, hidden: Tensor, mask=None) -> Tensor:
    return model.predictor(K.as_tensor(hidden), mask)


@numba.njit(cache=True)
def _cif_core(alphas, hidden, threshold, tail, max_out):
    t_len, d = hidden.shape
    fires = np.empty(max_out, np.int64)
    emb = np.zeros((max_out, d), np.float32)
    cur = np.zeros(d, np.float32)
    acc = np.float32(0.0)
    n = 0
    for t in range(t_len):
        a = alphas[t]
        while acc + a >= threshold:
            used = threshold - acc
            for k in range(d):
                cur[k] += used * hidden[t, k]
            for k in range(d):
                emb[n, k] = cur[k]
                cur[k] = np.float32(0.0)
            fires[n] = t
            n += 1
            acc = np.float32(0.0)
            a = a - used
        acc = acc + a
        for k in range(d):
            cur[k] += a * hidden[t, k]
    tail_fired = False
    if t_len > 0 and acc >= tail:
        for k in range(d):
            emb[n, k] = cur[k]
        fires[n] = t_len - 1
        n += 1
        tail_fired = True
    return fires[:n].copy(), emb[:n].copy(), acc, tail_fired


def cif(hidden, alphas, threshold: float = 1.0, tail_threshold: float | None = None) -> PredictorOutput:
    """Continuous integrate-and-fire over one utterance, in float32.

    Weights are accumulated left to right.  When the running sum would reach
    ``threshold`` at frame t, the part of alpha_t that completes it goes to the
    current token, the token fires at t, and the rest carries into the next
    token (a frame can fire several times if alpha_t exceeds the threshold).
    A leftover of at least ``tail_threshold`` (default ``threshold/2``) emits a
    final token fired at the last frame; a smaller leftover is dropped.
    Fires are non-decreasing; they are strictly increasing unless a single
    frame completes two tokens (alpha >= threshold, or the tail token).
    """
    a = np.ascontiguousarray(alphas, dtype=np.float32).reshape(-1)
    if isinstance(hidden, Tensor):
        hidden = hidden.data
    h = np.ascontiguousarray(hidden, dtype=np.float32)
    if h.ndim == 1:
        h = h[:, None]
    if h.shape[0] != a.shape[0]:
        raise K.DimensionError(f"cif: {a.shape[0]} alphas for {h.shape[0]} frames")
    if threshold <= 0:
        raise ValueError("cif threshold must be positive")
    tail = 0.5 * threshold if tail_threshold is None else tail_threshold
    max_out = int(float(a.sum(dtype=np.float64)) / threshold) + 3
    fires, emb, acc, tail_fired = _cif_core(a, h, np.float32(threshold), np.float32(tail), max_out)
    return PredictorOutput(a, fires, emb, float(acc), bool(tail_fired))


def scale_alphas(alphas, n):
    """alpha * N / sum(alpha).  Works on arrays (last axis) and on tape tensors (``n`` per row)."""
    if isinstance(alphas, Tensor):
        n_arr = np.asarray(n, dtype=alphas.dtype).reshape(*alphas.shape[:-1], 1)
        total = K.sum_axis(alphas, -1, keepdims=True)
        if np.any(total.data <= 0):
            raise ValueError("scale_alphas: alphas sum to zero")
        return K.div(K.mul(alphas, Tensor(n_arr)), total)
    a = np.asarray(alphas, dtype=np.float32)
    total = float(a.sum(dtype=np.float64))
    if total <= 0:
        raise ValueError("scale_alphas: alphas sum to zero")
    if n < 1:
        raise ValueError("scale_alphas: target length must be >= 1")
    return (a.astype(np.float64) * (n / total)).astype(np.float32)


def cif_weights(alphas: Tensor, n_tokens: int, threshold: float = 1.0) -> Tensor:
    """Token-by-frame integration weights [..., N, T] (differentiable).

    W[n, t] is the length of the overlap between the cumulative-weight
    interval of frame t, [c_{t-1}, c_t), and token n's interval
    [n*threshold, (n+1)*threshold).  ``W @ hidden`` reproduces :func:`cif`
    embeddings for the first ``n_tokens`` tokens (without the tail rule).
    """
    a = alphas.data
    c = np.cumsum(a, axis=-1)
    cp = c - a
    n_idx = np.arange(n_tokens, dtype=a.dtype)[:, None]
    lo = n_idx * threshold
    hi = (n_idx + 1) * threshold
    ce = c[..., None, :]
    cpe = cp[..., None, :]
    upper = np.minimum(ce, hi)
    lower = np.maximum(cpe, lo)
    w = np.maximum(upper - lower, 0).astype(a.dtype)
    active = w > 0
    pick_c = active & (ce < hi)
    pick_p = active & (cpe > lo)

    def bw(g):
        gc = (g * pick_c).sum(axis=-2)
        gp = -(g * pick_p).sum(axis=-2)
        # c_t depends on alpha_s for s <= t, c_{t-1} on s < t
        rc = np.flip(np.cumsum(np.flip(gc, -1), axis=-1), -1)
        rp = np.flip(np.cumsum(np.flip(gp, -1), axis=-1), -1) - gp
        return (rc + rp,)

    return Tensor.from_op(w, (alphas,), bw)


def decode_nar(model: Paraformer, embeddings, encoder_hidden, token_mask=None, memory_mask=None, hotword_emb=None) -> Tensor:
    """One parallel decoder pass: logits [..., N, V]."""
    e = K.as_tensor(embeddings)
    if e.shape[-2] < 1:
        raise ValueError("decode_nar needs at least one token")
    return model.decoder(e, K.as_tensor(encoder_hidden), token_mask, memory_mask, hotword_emb)


def greedy_decode(logits) -> np.ndarray:
    """Per-position argmax; ties go to the lowest token id."""
    x = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(x, axis=-1)


def glancing_mask(first_pass_tokens, target_tokens, lam: float, rng: Rng) -> np.ndarray:
    """Positions to replace: ceil(lam * hamming) of them, uniformly without replacement."""
    fp = np.asarray(first_pass_tokens)
    tg = np.asarray(target_tokens)
    if fp.shape != tg.shape:
        raise ValueError(f"glancing: {fp.shape[0]} first-pass tokens for {tg.shape[0]} targets")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("glancing ratio must lie in [0, 1]")
    n = len(tg)
    d = int((fp != tg).sum())
    k = min(n, int(math.ceil(lam * d - 1e-9)))
    mask = np.zeros(n, bool)
    if k:
        mask[rng.choice(n, k)] = True
    return mask


def _mix(base: Tensor, other: Tensor, mask: np.ndarray) -> Tensor:
    m = Tensor(mask[..., None].astype(base.dtype))
    keep = Tensor((~mask)[..., None].astype(base.dtype))
    return K.add(K.mul(base, keep), K.mul(other, m))


def glancing_sample(acoustic_emb, first_pass_tokens, target_tokens, char_embed_table, lam: float, rng: Rng) -> Tensor:
    """Replace ceil(lam*d) acoustic embeddings by target token embeddings, d = Hamming distance."""
    e = K.as_tensor(acoustic_emb)
    mask = glancing_mask(first_pass_tokens, target_tokens, lam, rng)
    if not mask.any():
        return e
    tgt = K.take_rows(K.as_tensor(char_embed_table), np.asarray(target_tokens))
    return _mix(e, tgt, mask)


def _pad_targets(targets) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(targets, np.ndarray) and targets.ndim == 1:
        targets = [targets]
    seqs = [list(map(int, t)) for t in targets]
    n_max = max((len(s) for s in seqs), default=0)
    out = np.zeros((len(seqs), n_max), np.int64)
    mask = np.zeros((len(seqs), n_max), bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        mask[i, : len(s)] = True
    return out, mask


def paraformer_loss(first_logits, second_logits, alphas, targets, gamma: float = 1.0, label_smoothing: float = 0.1) -> ParaformerLossParts:
    """CE(first pass) + CE(second pass) + gamma * |sum(alpha) - N|.

    Accepts one utterance (logits [N, V], alphas [T], targets [N]) or a padded
    batch (logits [B, N, V], alphas [B, T] zero on padding, targets a list of
    sequences).  CE is averaged over real tokens, the quantity term over
    utterances.  ``tensor`` on the result is the differentiable total.
    """
    l1, l2, a = K.as_tensor(first_logits), K.as_tensor(second_logits), K.as_tensor(alphas)
    single = l1.data.ndim == 2
    if single:
        l1 = K.reshape(l1, (1, *l1.shape))
        l2 = K.reshape(l2, (1, *l2.shape))
        a = K.reshape(a, (1, a.shape[-1]))
        targets = [np.asarray(targets)]
    tgt, mask = _pad_targets(targets)
    if tgt.shape != l1.shape[:-1] or tgt.shape != l2.shape[:-1]:
        raise K.DimensionError(f"paraformer_loss: targets {tgt.shape} vs logits {l1.shape}")
    ce1 = K.cross_entropy(l1, tgt, mask, label_smoothing)
    ce2 = K.cross_entropy(l2, tgt, mask, label_smoothing)
    n = mask.sum(axis=1).astype(a.dtype)
    q = K.mean_all(K.abs_(K.sub(K.sum_axis(a, -1), Tensor(n))))
    total = K.add(K.add(ce1, ce2), K.scale(q, gamma))
    return ParaformerLossParts(float(ce1.data), float(ce2.data), float(q.data), float(total.data), gamma, total)


def upsample_alphas(model: Paraformer, encoder_hidden, mask=None) -> Tensor:
    """alpha2 on the upsampled grid: T_up = rate * T."""
    return model.ts_head(K.as_tensor(encoder_hidden), mask)


def _strict_fires(fires: np.ndarray, n: int, t_len: int) -> np.ndarray:
    f = np.asarray(fires, np.int64)[:n].copy()
    for k in range(1, len(f)):
        f[k] = max(f[k], f[k - 1] + 1)
    for k in range(len(f) - 1, -1, -1):
        f[k] = min(f[k], t_len - (len(f) - k))
    return f


def timestamps_from_alphas(alphas2, n_tokens: int, frame_shift_ms: int, silence_threshold: float = 0.08, upsample_rate: int = 1, tokens=None) -> TimestampOutput:
    """Token spans from upsampled CIF weights.

    alpha2 is rescaled to sum to ``n_tokens`` and integrated; token k owns the
    frames after fire k-1 up to and including fire k.  Within that range, runs
    of frames whose scaled weight is below ``silence_threshold * max`` at the
    start or end are split off as silence; frames after the last fire are
    silence.  The spans partition [0, T_up * frame_shift_ms).
    """
    a = np.asarray(alphas2, np.float32).reshape(-1)
    t_len = len(a)
    total_ms = t_len * frame_shift_ms
    if n_tokens == 0:
        spans = [TokenSpan(SILENCE, 0, total_ms)] if t_len else []
        return TimestampOutput(a, spans, upsample_rate)
    if float(a.sum(dtype=np.float64)) <= 0:
        raise ValueError("timestamps: alpha2 sums to zero but tokens were recognised")
    if n_tokens > t_len:
        raise ValueError(f"timestamps: {n_tokens} tokens cannot fit {t_len} frames")
    labels = list(tokens) if tokens is not None else list(range(n_tokens))
    if len(labels) != n_tokens:
        raise ValueError("timestamps: token labels do not match n_tokens")
    s = scale_alphas(a, n_tokens)
    fires = cif(np.zeros((t_len, 0), np.float32), s).fires
    if len(fires) != n_tokens:  # float slack; cannot happen with the tail rule but be safe
        fires = np.concatenate([fires, np.full(max(0, n_tokens - len(fires)), t_len - 1)])
    fires = _strict_fires(fires, n_tokens, t_len)
    low = s < np.float32(silence_threshold) * s.max()
    frame_spans: list[list[int]] = []

    def push(tok, lo, hi):
        if hi <= lo:
            return
        if tok == SILENCE and frame_spans and frame_spans[-1][0] == SILENCE:
            frame_spans[-1][2] = hi
        else:
            frame_spans.append([tok, lo, hi])

    prev = -1
    for k, f in enumerate(fires):
        lo, hi = prev + 1, int(f)
        i = lo
        while i < hi and low[i]:
            i += 1
        j = hi
        while j > i and low[j]:
            j -= 1
        push(SILENCE, lo, i)
        push(int(labels[k]), i, j + 1)
        push(SILENCE, j + 1, hi + 1)
        prev = hi
    push(SILENCE, prev + 1, t_len)
    spans = [TokenSpan(tok, lo * frame_shift_ms, hi * frame_shift_ms) for tok, lo, hi in frame_spans]
    return TimestampOutput(a, spans, upsample_rate)


def aas(predicted, reference, frame_shift_ms: int = 10) -> float:
    """Mean absolute shift (ms) over all token start and end boundaries.

    ``reference`` is an :class:`~deskasr.features.Alignment` (frames of
    ``frame_shift_ms``) or a list of (token, start_ms, end_ms).
    """
    pred = [s for s in predicted if not s.is_silence]
    if hasattr(reference, "spans"):
        ref = [(t, s * frame_shift_ms, e * frame_shift_ms) for t, s, e in reference.spans]
    else:
        ref = [tuple(r) for r in reference]
    if len(pred) != len(ref):
        raise ValueError(f"aas: {len(pred)} predicted tokens vs {len(ref)} reference tokens")
    if not ref:
        return 0.0
    total = 0.0
    for p, (_, rs, re_) in zip(pred, ref):
        total += abs(p.start_ms - rs) + abs(p.end_ms - re_)
    return total / (2 * len(ref))


def alignment_targets(spans_ms, t_up: int, shift_ms: int, end_mass: float = 0.5) -> np.ndarray:
    """Reference alpha2 from an alignment; every token contributes unit mass.

    ``1 - end_mass`` is spread over the token's frames in proportion to
    overlap and ``end_mass`` sits on the frame whose right edge is nearest the
    token end, so integrating the target fires each token at its end.
    """
    tgt = np.zeros(t_up, np.float64)
    starts = np.arange(t_up) * shift_ms
    ends = starts + shift_ms
    for _, s, e in spans_ms:
        if e <= s:
            continue
        ov = np.clip(np.minimum(ends, e) - np.maximum(starts, s), 0, None)
        tgt += (1 - end_mass) * ov / (e - s)
        first = min(s // shift_ms, t_up - 1)
        f = min(max(first, int(round(e / shift_ms)) - 1), t_up - 1)
        tgt[f] += end_mass
    return tgt.astype(np.float32)


# --------------------------------------------------------------------------
# inference and training passes


def recognize(model: Paraformer, feats: np.ndarray, hotwords: HotwordList | None = None, hotword_emb: Tensor | None = None) -> Recognition:
    """Greedy single-pass recognition of one utterance of LFR features [T, F]."""
    cfg = model.cfg
    feats = np.asarray(feats, np.float32)
    if feats.shape[0] == 0:
        empty = TimestampOutput(np.zeros(0, np.float32), [], cfg.upsample_rate)
        return Recognition([], np.zeros(0, np.float32), np.zeros(0, np.int64), empty)
    h = encode(model, feats)
    alphas = predict_alphas(model, h).data
    out = cif(h.data, alphas, cfg.cif_threshold, cfg.tail_threshold * cfg.cif_threshold)
    a2 = upsample_alphas(model, h).data
    if len(out.fires) == 0:
        ts = timestamps_from_alphas(a2, 0, cfg.ts_shift_ms, cfg.silence_threshold, cfg.upsample_rate)
        return Recognition([], alphas, out.fires, ts)
    if hotword_emb is None:
        hotword_emb = model.embed_hotwords(hotwords)
    logits = decode_nar(model, Tensor(out.embeddings), h, hotword_emb=hotword_emb)
    tokens = [int(t) for t in greedy_decode(logits)]
    n = len(tokens)
    if n > len(a2) or float(a2.sum()) <= 0:
        a2 = np.full(len(a2), 1.0, np.float32) if len(a2) >= n else a2
    ts = timestamps_from_alphas(a2, n, cfg.ts_shift_ms, cfg.silence_threshold, cfg.upsample_rate, tokens)
    return Recognition(tokens, alphas, out.fires, ts)


@dataclass
class Batch:
    feats: np.ndarray  # [B, T, F]
    frame_mask: np.ndarray  # [B, T]
    targets: list[np.ndarray]
    ts_targets: np.ndarray | None = None  # [B, T_up]
    ts_mask: np.ndarray | None = None  # [B] rows with alignments


def make_batch(feats_list, targets, cfg: ParaformerConfig, spans_ms_list=None) -> Batch:
    b = len(feats_list)
    t_max = max(f.shape[0] for f in feats_list)
    feats = np.zeros((b, t_max, feats_list[0].shape[1]), np.float32)
    mask = np.zeros((b, t_max), bool)
    for i, f in enumerate(feats_list):
        feats[i, : len(f)] = f
        mask[i, : len(f)] = True
    ts_t = ts_m = None
    if spans_ms_list is not None:
        t_up = t_max * cfg.upsample_rate
        ts_t = np.zeros((b, t_up), np.float32)
        ts_m = np.zeros(b, bool)
        for i, spans in enumerate(spans_ms_list):
            if spans is None:
                continue
            ts_t[i] = alignment_targets(spans, t_up, cfg.ts_shift_ms)
            ts_m[i] = True
    return Batch(feats, mask, [np.asarray(t, np.int64) for t in targets], ts_t, ts_m)


@dataclass
class TrainStepOutput:
    loss: Tensor
    parts: ParaformerLossParts
    ts_quantity: float
    ts_align: float
    first_pass_errors: int
    replaced: int


def forward_train(model: Paraformer, batch: Batch, rng: Rng, lam: float | None = None, hotwords: HotwordList | None = None, hotword_mask=None) -> TrainStepOutput:
    """Two-pass training forward with teacher-forced lengths and the glancing sampler.

    ``hotword_mask`` ([B, n+1], optional) gives every utterance its own subset of ``hotwords``.
    """
    cfg = model.cfg
    lam = cfg.glance_ratio if lam is None else lam
    x = Tensor(batch.feats)
    h = model.encoder(x, batch.frame_mask)
    alphas = model.predictor(h, batch.frame_mask)
    tgt, tok_mask = _pad_targets(batch.targets)
    n_len = tok_mask.sum(axis=1)
    n_max = tgt.shape[1]
    scaled = scale_alphas(alphas, n_len)
    w = cif_weights(scaled, n_max, cfg.cif_threshold)
    e_a = K.matmul(w, h)  # [B, N, D]
    hot = model.embed_hotwords(hotwords)
    logits1 = model.decoder(e_a, h, tok_mask, batch.frame_mask, hot, hotword_mask)
    first = greedy_decode(logits1)
    masks = np.zeros(tgt.shape, bool)
    errors = 0
    for i in range(len(tgt)):
        n = int(n_len[i])
        errors += int((first[i, :n] != tgt[i, :n]).sum())
        masks[i, :n] = glancing_mask(first[i, :n], tgt[i, :n], lam, rng)
    if masks.any():
        e_s = _mix(e_a, K.take_rows(model.decoder.embed, tgt), masks)
    else:
        e_s = e_a
    logits2 = model.decoder(e_s, h, tok_mask, batch.frame_mask, hot, hotword_mask)
    parts = paraformer_loss(logits1, logits2, alphas, batch.targets, cfg.quantity_weight, cfg.label_smoothing)
    loss = parts.tensor
    if cfg.peak_weight > 0:
        fm = Tensor(batch.frame_mask.astype(np.float32))
        peak = K.scale(K.sum_all(K.mul(K.mul(alphas, K.sub(fm, alphas)), fm)), cfg.peak_weight / max(int(batch.frame_mask.sum()), 1))
        loss = K.add(loss, peak)
    a2 = model.ts_head(h, batch.frame_mask)
    ts_q = K.mean_all(K.abs_(K.sub(K.sum_axis(a2, -1), Tensor(n_len.astype(np.float32)))))
    ts_loss = ts_q
    ts_align = 0.0
    if batch.ts_targets is not None and batch.ts_mask.any():
        rows = Tensor((batch.ts_mask[:, None] & upsample_mask(batch.frame_mask, cfg.upsample_rate)).astype(np.float32))
        diff = K.mul(K.abs_(K.sub(a2, Tensor(batch.ts_targets))), rows)
        align = K.scale(K.sum_all(diff), 1.0 / max(int(batch.ts_mask.sum()), 1))
        ts_align = float(align.data)
        ts_loss = K.add(ts_loss, align)
    loss = K.add(loss, K.scale(ts_loss, cfg.ts_weight))
    return TrainStepOutput(loss, parts, float(ts_q.data), ts_align, errors, int(masks.sum()))
