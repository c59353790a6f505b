"""Hotword biasing: embedder, contextual decoder layer, training sampler and entity metrics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels as K
from .kernels import Parameter, Rng, Tensor
from .layers import Linear, MultiHeadAttention, ParamStore

NO_BIAS: tuple[int, ...] = ()


@dataclass
class HotwordList:
    """Token-id sequences; index 0 is always the NO_BIAS entry."""

    words: list[tuple[int, ...]]

    def __post_init__(self):
        if not self.words or self.words[0] != NO_BIAS:
            self.words = [NO_BIAS] + [tuple(w) for w in self.words]
        for w in self.words[1:]:
            if len(w) == 0:
                raise ValueError("hotword with no tokens")

    @classmethod
    def of(cls, words=()) -> "HotwordList":
        return cls([NO_BIAS] + [tuple(int(t) for t in w) for w in words])

    @property
    def entries(self) -> list[tuple[int, ...]]:
        return self.words[1:]

    def __len__(self) -> int:
        return len(self.words)


@dataclass
class HotwordSamplingConfig:
    p_none: float = 0.3
    k_max: int = 3
    l_min: int = 2
    l_max: int = 4


def read_hotword_file(path, symbols) -> HotwordList:
    """UTF-8 text, one hotword per line, blank lines ignored.

    A line is split on whitespace into token symbols; a line without
    whitespace is matched greedily against the symbol table.
    """
    lookup = {s: i for i, s in enumerate(symbols)}
    words = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split() if " " in line else _greedy_split(line, lookup)
        try:
            words.append(tuple(lookup[p] for p in parts))
        except KeyError as exc:
            raise ValueError(f"{path}:{lineno}: unknown token {exc.args[0]!r}") from None
    return HotwordList.of(words)


def _greedy_split(text: str, lookup: dict) -> list[str]:
    out, i = [], 0
    longest = max((len(s) for s in lookup), default=1)
    while i < len(text):
        for n in range(min(longest, len(text) - i), 0, -1):
            if text[i : i + n] in lookup:
                out.append(text[i : i + n])
                i += n
                break
        else:
            raise ValueError(f"cannot tokenize hotword {text!r}")
    return out


class HotwordEmbedder:
    """Embedding lookup followed by an LSTM; a word is its last hidden state."""

    def __init__(self, store: ParamStore, name: str, vocab: int, dim: int, rng: Rng):
        self.table = store.new(f"{name}.embed", (vocab, dim), rng, init="normal", value=0.3)
        self.w_x = Linear(store, f"{name}.lstm.x", dim, 4 * dim, rng)
        self.w_h = store.new(f"{name}.lstm.h", (4 * dim, dim), rng)
        self.dim = dim

    def __call__(self, words: HotwordList) -> Tensor:
        return embed_hotwords(words, self)


def embed_hotwords(words: HotwordList, embedder: HotwordEmbedder) -> Tensor:
    """[(n+1), D] matrix: row 0 is zeros (NO_BIAS), row i the LSTM state after word i."""
    entries = words.entries
    d = embedder.dim
    zero = Tensor(np.zeros((1, d), embedder.table.dtype))
    if not entries:
        return zero
    vocab = embedder.table.shape[0]
    lengths = np.array([len(w) for w in entries])
    if lengths.min() < 1:
        raise ValueError("empty hotword")
    lmax = int(lengths.max())
    ids = np.zeros((len(entries), lmax), np.int64)
    for i, w in enumerate(entries):
        if max(w) >= vocab or min(w) < 0:
            raise IndexError("hotword token id out of range")
        ids[i, : len(w)] = w
    emb = K.take_rows(embedder.table, ids)  # [n, L, D]
    hs = K.lstm(embedder.w_x(emb), embedder.w_h)  # [n, L, D]
    # pick the hidden state after each word's last token
    sel = np.zeros((len(entries), lmax, 1), hs.dtype)
    sel[np.arange(len(entries)), lengths - 1, 0] = 1.0
    last = K.sum_axis(K.mul(hs, Tensor(sel)), axis=1)  # [n, D]
    return K.concat([zero, last], axis=0)


class ContextualLayer:
    """Source attention over the encoder, contextual attention over hotwords, width-1 conv combiner."""

    def __init__(self, store: ParamStore, name: str, dim: int, n_heads: int, rng: Rng):
        self.ctx_attn = MultiHeadAttention(store, f"{name}.ctx", dim, n_heads, rng)
        self.src_attn = MultiHeadAttention(store, f"{name}.src", dim, n_heads, rng)
        self.combine = Linear(store, f"{name}.combine", 2 * dim, dim, rng)  # conv1d, kernel width 1

    def __call__(self, es_prime: Tensor, memory: Tensor, hotword_emb: Tensor, memory_mask=None, hotword_mask=None) -> Tensor:
        return contextual_layer(es_prime, memory, hotword_emb, self, memory_mask, hotword_mask)

    def linears(self) -> list[Linear]:
        return self.ctx_attn.linears() + self.src_attn.linears() + [self.combine]


def contextual_layer(es_prime: Tensor, memory: Tensor, hotword_emb: Tensor, layer: ContextualLayer, memory_mask=None, hotword_mask=None) -> Tensor:
    """O = Conv1d([E_s''; E_c]) with

    E_c  = MHA(E_s' W_c^Q, E_h W_c^K, E_h W_c^V)
    E_s''= MHA(E_s' W_s^Q, H W_s^K, H W_s^V)

    ``es_prime`` [..., N, D], ``memory`` (encoder output H) [..., T, D],
    ``hotword_emb`` [n+1, D] shared by the batch.  ``hotword_mask`` [B, n+1]
    optionally restricts each utterance to its own rows of the shared matrix.
    """
    d = es_prime.shape[-1]
    if memory.shape[-1] != d or hotword_emb.shape[-1] != d:
        raise K.DimensionError("contextual_layer: model dims disagree")
    hm = None
    if hotword_mask is not None:
        hm = np.asarray(hotword_mask, bool).copy()
        if hm.shape[-1] != hotword_emb.shape[-2]:
            raise K.DimensionError("hotword_mask does not match the hotword rows")
        hm[..., 0] = True  # NO_BIAS is always visible
        hm = hm[..., None, :]
    e_c = layer.ctx_attn(es_prime, hotword_emb, hm)
    e_s2 = layer.src_attn(es_prime, memory, memory_mask)
    return layer.combine(K.concat([e_s2, e_c], axis=-1))


def sample_training_hotwords(target_tokens, rng: Rng, cfg: HotwordSamplingConfig | None = None) -> HotwordList:
    """Random contiguous n-grams of the target, or only NO_BIAS with probability ``p_none``."""
    cfg = cfg or HotwordSamplingConfig()
    target = [int(t) for t in target_tokens]
    if not target or rng.random() < cfg.p_none:
        return HotwordList.of()
    k = rng.integers(1, cfg.k_max + 1)
    words = []
    for _ in range(k):
        hi = min(cfg.l_max, len(target))
        lo = min(cfg.l_min, hi)
        n = rng.integers(lo, hi + 1)
        start = rng.integers(0, len(target) - n + 1)
        words.append(tuple(target[start : start + n]))
    return HotwordList.of(words)


def merge_hotwords(lists) -> HotwordList:
    return merge_hotwords_masked(lists)[0]


def merge_hotwords_masked(lists) -> tuple[HotwordList, np.ndarray]:
    """Union of several lists plus a [len(lists), n+1] mask of which rows each list owns."""
    lists = list(lists)
    index: dict = {}
    words = []
    for hl in lists:
        for w in hl.entries:
            if w not in index:
                index[w] = len(words) + 1
                words.append(w)
    mask = np.zeros((len(lists), len(words) + 1), bool)
    mask[:, 0] = True
    for i, hl in enumerate(lists):
        for w in hl.entries:
            mask[i, index[w]] = True
    return HotwordList.of(words), mask


def _count(seq, sub) -> int:
    n, m = len(seq), len(sub)
    return sum(1 for i in range(n - m + 1) if tuple(seq[i : i + m]) == tuple(sub))


def entity_metrics(hyps, refs, entities) -> tuple[float, float, float]:
    """Entity recall, precision and F1 in percent.

    An entity occurrence in a reference counts as recalled when the entity also
    occurs (as a contiguous token sequence) in the paired hypothesis, up to the
    reference count.  Precision is over entity occurrences in hypotheses.
    """
    ref_total = hyp_total = hit = 0
    for hyp, ref in zip(hyps, refs):
        for ent in entities:
            r = _count(ref, ent)
            h = _count(hyp, ent)
            ref_total += r
            hyp_total += h
            hit += min(r, h)
    recall = 100.0 * hit / ref_total if ref_total else 0.0
    precision = 100.0 * hit / hyp_total if hyp_total else 0.0
    return recall, precision, f1_score(recall, precision)


def f1_score(recall: float, precision: float) -> float:
    if recall + precision == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)
