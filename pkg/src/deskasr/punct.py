"""Streaming punctuation and disfluency tagging with a look-ahead-limited transformer."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import kernels as K
from .contextual import f1_score
from .kernels import Rng, Tensor
from .layers import Adam, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamStore, sinusoid_positions

log = logging.getLogger(__name__)


class PunctClass(IntEnum):
    NONE = 0
    COMMA = 1
    PERIOD = 2
    QUESTION = 3
    ENUM_COMMA = 4


SENTENCE_END = frozenset({PunctClass.PERIOD, PunctClass.QUESTION})


class DisfluencyTag(IntEnum):
    KEEP = 0
    REMOVE = 1


@dataclass
class PunctModelConfig:
    vocab_size: int = 32
    d_model: int = 48
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 128
    l_future: int = 3  # tokens of right context each position may see


class PunctModel:
    def __init__(self, cfg: PunctModelConfig | None = None, seed: int = 0):
        self.cfg = cfg = cfg or PunctModelConfig()
        rng = Rng(seed)
        d = cfg.d_model
        self.store = ParamStore()
        self.embed = self.store.new("punct.embed", (cfg.vocab_size, d), rng, init="normal", value=1.0)
        self.layers = []
        for i in range(cfg.n_layers):
            p = f"punct.layer{i}"
            self.layers.append(
                (
                    LayerNorm(self.store, f"{p}.ln1", d),
                    MultiHeadAttention(self.store, f"{p}.attn", d, cfg.n_heads, rng),
                    LayerNorm(self.store, f"{p}.ln2", d),
                    FeedForward(self.store, f"{p}.ffn", d, cfg.d_ff, rng),
                )
            )
        self.final_ln = LayerNorm(self.store, "punct.final_ln", d)
        self.punct_head = Linear(self.store, "punct.head", d, len(PunctClass), rng)
        self.disfl_head = Linear(self.store, "punct.disfl", d, len(DisfluencyTag), rng)
        self._f64: PunctModel | None = None

    def trainable(self) -> list:
        return list(self.store.values())

    def forward(self, ids: np.ndarray, pos_offset=0) -> tuple[Tensor, Tensor]:
        """``pos_offset`` (int or one per batch row) shifts the absolute positions."""
        ids = np.asarray(ids, np.int64)
        n = ids.shape[-1]
        dt = self.embed.dtype
        off = np.asarray(pos_offset, np.int64)
        table = sinusoid_positions(int(off.max()) + n, self.cfg.d_model).astype(dt)
        pos = table[off[..., None] + np.arange(n)] if off.ndim else table[int(off) : int(off) + n]
        x = K.add(K.take_rows(self.embed, ids), Tensor(pos))
        # right context only enters in the first layer, so the total look-ahead stays l_future
        first, causal = lookahead_mask(n, self.cfg.l_future), lookahead_mask(n, 0)
        for i, (ln1, attn, ln2, ffn) in enumerate(self.layers):
            mask = first if i == 0 else causal
            h = ln1(x)
            x = K.add(x, attn(h, h, mask))
            x = K.add(x, ffn(ln2(x)))
        x = self.final_ln(x)
        return self.punct_head(x), self.disfl_head(x)

    def float64(self) -> "PunctModel":
        """Frozen double-precision twin used for decoding (cached)."""
        if self._f64 is None:
            twin = copy.deepcopy(self)
            twin._f64 = None
            for p in twin.store.values():
                p.data = p.data.astype(np.float64)
                p.requires_grad = False
                p.grad = None
            self._f64 = twin
        return self._f64

    def invalidate(self) -> None:
        self._f64 = None


def lookahead_mask(n: int, l_future: int) -> np.ndarray:
    """[n, n] bool: position i sees every j <= i + l_future."""
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    return j <= i + l_future


def predict_classes(tokens, model: PunctModel) -> tuple[np.ndarray, np.ndarray]:
    """Punctuation logits [N, 5] and disfluency logits [N, 2] (double precision)."""
    ids = np.asarray(tokens, np.int64)
    if ids.ndim != 1 or len(ids) == 0:
        raise ValueError("predict_classes needs a non-empty token sequence")
    if ids.min() < 0 or ids.max() >= model.cfg.vocab_size:
        raise IndexError("token id outside the punctuation vocabulary")
    p, d = model.float64().forward(ids)
    return p.data, d.data


def decode_offline(tokens, model: PunctModel) -> list[tuple[int, PunctClass, DisfluencyTag]]:
    p, d = predict_classes(tokens, model)
    return [(int(t), PunctClass(int(a)), DisfluencyTag(int(b))) for t, a, b in zip(tokens, p.argmax(-1), d.argmax(-1))]


# --------------------------------------------------------------------------
# streaming


@dataclass
class StreamConfig:
    force_after: int = 40
    max_history: int = 100


@dataclass
class StreamState:
    history: list[int] = field(default_factory=list)  # kept tokens, committed prefix then pending
    committed: list[tuple[int, PunctClass, DisfluencyTag]] = field(default_factory=list)  # for history[:committed_len]
    committed_len: int = 0
    dropped: int = 0  # tokens discarded from the front so far
    max_history: int = 100

    @property
    def pending(self) -> list[int]:
        return self.history[self.committed_len :]


def freeze_point(punct_seq, l_future: int, force_after: int) -> int:
    """How many leading pending tokens can be committed."""
    n = len(punct_seq)
    complete = n - l_future  # positions < complete have their full right context
    for i in range(min(complete, n) - 1, -1, -1):
        if PunctClass(punct_seq[i]) in SENTENCE_END:
            return i + 1
    if n > force_after:
        return max(n - l_future, 0)
    return 0


def stream_step(new_tokens, state: StreamState, model: PunctModel, cfg: StreamConfig | None = None) -> tuple[list[tuple[int, PunctClass, DisfluencyTag]], StreamState]:
    """Append tokens and commit whatever is frozen.

    One decode serves the whole chunk: a position's classes depend only on
    tokens up to ``l_future`` ahead, so the freeze rule is replayed token by
    token as if the chunk had arrived one token at a time.  That keeps the
    forced-commit latency bound independent of chunk size.
    """
    cfg = cfg or StreamConfig()
    new_tokens = [int(t) for t in new_tokens]
    if not new_tokens:
        return [], state
    if cfg.force_after <= model.cfg.l_future:
        raise ValueError("force_after must exceed the model look-ahead")
    base = len(state.history)
    state.history.extend(new_tokens)
    p, d = predict_classes(state.history, model)
    pc, dc = p.argmax(-1), d.argmax(-1)
    out = []
    for n in range(base + 1, len(state.history) + 1):
        start = state.committed_len
        k = freeze_point(pc[start:n], model.cfg.l_future, cfg.force_after)
        if k:
            out.extend(_take(state, pc, dc, k))
    _discard(state)
    return out, state


def stream_flush(state: StreamState, model: PunctModel) -> list[tuple[int, PunctClass, DisfluencyTag]]:
    """End of stream: commit every pending token with whatever context exists."""
    if not state.pending:
        return []
    p, d = predict_classes(state.history, model)
    out = _take(state, p.argmax(-1), d.argmax(-1), len(state.pending))
    _discard(state)
    return out


def _take(state: StreamState, pc, dc, k: int):
    start = state.committed_len
    out = [(state.history[start + i], PunctClass(int(pc[start + i])), DisfluencyTag(int(dc[start + i]))) for i in range(k)]
    state.committed.extend(out)
    state.committed_len += k
    return out


def _discard(state: StreamState) -> None:
    if len(state.history) <= state.max_history:
        return
    ends = [i for i, (_, c, _) in enumerate(state.committed) if c in SENTENCE_END]
    if ends:
        cut = ends[-1] + 1
    else:
        cut = min(state.max_history // 2, state.committed_len)
    if cut <= 0:
        return
    del state.history[:cut]
    del state.committed[:cut]
    state.committed_len -= cut
    state.dropped += cut


# --------------------------------------------------------------------------
# rendering and metrics


@dataclass
class RenderConfig:
    separator: str = " "
    marks: dict = field(
        default_factory=lambda: {
            PunctClass.NONE: "",
            PunctClass.COMMA: ",",
            PunctClass.PERIOD: ".",
            PunctClass.QUESTION: "?",
            PunctClass.ENUM_COMMA: ";",
        }
    )


def render_text(committed, symbols=None, cfg: RenderConfig | None = None) -> str:
    """Readable text: removed tokens vanish, marks follow their token.

    A mark on a removed token moves to the previous kept token when that one
    has none, and is dropped at the very start.
    """
    cfg = cfg or RenderConfig()
    words: list[str] = []
    marks: list[PunctClass] = []
    for tok, cls, tag in committed:
        cls = PunctClass(cls)
        if DisfluencyTag(tag) == DisfluencyTag.REMOVE:
            if cls != PunctClass.NONE and marks and marks[-1] == PunctClass.NONE:
                marks[-1] = cls
            continue
        words.append(symbols[tok] if symbols is not None else str(tok))
        marks.append(cls)
    return cfg.separator.join(w + cfg.marks[m] for w, m in zip(words, marks))


@dataclass
class PRF:
    precision: float
    recall: float
    f1: float


def punct_metrics(pred, ref) -> dict:
    """Slot-level P/R/F1 (percent) per non-NONE class plus the overall micro average."""
    pred = [PunctClass(int(c)) for c in pred]
    ref = [PunctClass(int(c)) for c in ref]
    if len(pred) != len(ref):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(ref)} references")
    out = {}
    classes = [c for c in PunctClass if c != PunctClass.NONE]
    for c in classes:
        tp = sum(1 for p, r in zip(pred, ref) if p == r == c)
        fp = sum(1 for p, r in zip(pred, ref) if p == c != r)
        fn = sum(1 for p, r in zip(pred, ref) if r == c != p)
        out[c.name] = _prf(tp, fp, fn)
    tp = sum(1 for p, r in zip(pred, ref) if p == r != PunctClass.NONE)
    fp = sum(1 for p, r in zip(pred, ref) if p != PunctClass.NONE and p != r)
    fn = sum(1 for p, r in zip(pred, ref) if r != PunctClass.NONE and p != r)
    out["overall"] = _prf(tp, fp, fn)
    return out


def _prf(tp: int, fp: int, fn: int) -> PRF:
    p = 100.0 * tp / (tp + fp) if tp + fp else (100.0 if fn == 0 else 0.0)
    r = 100.0 * tp / (tp + fn) if tp + fn else 100.0
    if tp + fp == 0 and tp + fn == 0:
        return PRF(100.0, 100.0, 100.0)
    return PRF(p, r, f1_score(r, p))


# --------------------------------------------------------------------------
# synthetic text and training


@dataclass
class PunctTextConfig:
    """Toy grammar over token ids.

    Sentences open with a starter token; question starters make the sentence
    end in QUESTION.  A connector token is preceded by a COMMA, runs of list
    items carry ENUM_COMMA on all but the last item, filler tokens and the
    first copy of an immediate repetition are REMOVE.
    """

    vocab_size: int = 32
    question_starters: tuple = (1, 2)
    statement_starters: tuple = (3, 4, 5, 6)
    connectors: tuple = (7,)
    fillers: tuple = (8,)
    list_items: tuple = (20, 21, 22, 23, 24)
    clause_min: int = 2
    clause_max: int = 6
    p_question: float = 0.3
    p_connector: float = 0.3
    p_list: float = 0.2
    p_filler: float = 0.05
    p_repeat: float = 0.05

    def __post_init__(self):
        special = self.question_starters + self.statement_starters + self.connectors + self.fillers + self.list_items
        if any(not 0 < t < self.vocab_size for t in special):
            raise ValueError(f"grammar tokens must lie in [1, {self.vocab_size - 1}]")
        if len(self.content()) < 2 or len(self.list_items) < 2:
            raise ValueError("grammar needs at least two content and two list tokens")

    def content(self) -> list[int]:
        special = set(self.question_starters + self.statement_starters + self.connectors + self.fillers + self.list_items)
        return [t for t in range(1, self.vocab_size) if t not in special]


def synth_sentence(rng: Rng, cfg: PunctTextConfig) -> list[tuple[int, PunctClass, DisfluencyTag]]:
    content = cfg.content()
    question = rng.random() < cfg.p_question
    starters = cfg.question_starters if question else cfg.statement_starters
    words: list[list] = [[starters[rng.integers(0, len(starters))], PunctClass.NONE]]

    def pick(pool):
        # no accidental immediate repeats: those are reserved for disfluencies
        while True:
            tok = pool[rng.integers(0, len(pool))]
            if tok != words[-1][0]:
                return tok

    def clause():
        for _ in range(rng.integers(cfg.clause_min, cfg.clause_max + 1)):
            words.append([pick(content), PunctClass.NONE])

    clause()
    if rng.random() < cfg.p_list:
        n = rng.integers(2, 5)
        for i in range(n):
            words.append([pick(cfg.list_items), PunctClass.ENUM_COMMA if i < n - 1 else PunctClass.NONE])
        clause()
    if rng.random() < cfg.p_connector:
        words[-1][1] = PunctClass.COMMA
        words.append([cfg.connectors[rng.integers(0, len(cfg.connectors))], PunctClass.NONE])
        clause()
    words[-1][1] = PunctClass.QUESTION if question else PunctClass.PERIOD
    out: list[tuple[int, PunctClass, DisfluencyTag]] = []
    for i, (tok, cls) in enumerate(words):
        if i > 0 and rng.random() < cfg.p_filler:
            out.append((cfg.fillers[rng.integers(0, len(cfg.fillers))], PunctClass.NONE, DisfluencyTag.REMOVE))
        if rng.random() < cfg.p_repeat:
            out.append((tok, PunctClass.NONE, DisfluencyTag.REMOVE))
        out.append((tok, cls, DisfluencyTag.KEEP))
    return out


def synth_stream(n_tokens: int, rng: Rng, cfg: PunctTextConfig | None = None) -> list[tuple[int, PunctClass, DisfluencyTag]]:
    cfg = cfg or PunctTextConfig()
    out: list = []
    while len(out) < n_tokens:
        out.extend(synth_sentence(rng, cfg))
    return out[:n_tokens]


@dataclass
class PunctTrainConfig:
    steps: int = 2000
    batch_size: int = 16
    seq_len: int = 64
    max_offset: int = 256  # random position shift so long streams look familiar
    lr: float = 3e-3
    seed: int = 0


def train_punct(model_cfg: PunctModelConfig | None = None, cfg: PunctTrainConfig | None = None, text_cfg: PunctTextConfig | None = None) -> tuple[PunctModel, list[float]]:
    cfg = cfg or PunctTrainConfig()
    text_cfg = text_cfg or PunctTextConfig(vocab_size=(model_cfg or PunctModelConfig()).vocab_size)
    model = PunctModel(model_cfg, seed=cfg.seed)
    rng = Rng(cfg.seed).fork(21)
    params = model.trainable()
    for p in params:
        p.requires_grad = True
    opt = Adam(params, lr=cfg.lr)
    losses = []
    for step in range(cfg.steps):
        seqs = [synth_stream(cfg.seq_len, rng, text_cfg) for _ in range(cfg.batch_size)]
        ids = np.array([[t for t, _, _ in s] for s in seqs])
        pl = np.array([[int(c) for _, c, _ in s] for s in seqs])
        dl = np.array([[int(g) for _, _, g in s] for s in seqs])
        offs = np.array([rng.integers(0, cfg.max_offset + 1) for _ in range(cfg.batch_size)])
        p_log, d_log = model.forward(ids, offs)
        loss = K.add(K.cross_entropy(p_log, pl), K.cross_entropy(d_log, dl))
        opt.zero_grad()
        K.backward(loss)
        lr = cfg.lr * min(1.0, (step + 1) / 50) * (0.1 + 0.9 * (1 - step / cfg.steps))
        opt.step(lr)
        losses.append(float(loss.data))
    for p in params:
        p.requires_grad = False
    model.invalidate()
    log.info("punct loss %.4f -> %.4f", losses[0], losses[-1])
    return model, losses


def evaluate_punct(model: PunctModel, n_streams: int = 20, length: int = 120, seed: int = 99, text_cfg: PunctTextConfig | None = None) -> dict:
    rng = Rng(seed)
    text_cfg = text_cfg or PunctTextConfig(vocab_size=model.cfg.vocab_size)
    pred, ref, dpred, dref = [], [], [], []
    for _ in range(n_streams):
        s = synth_stream(length, rng, text_cfg)
        out = decode_offline([t for t, _, _ in s], model)
        pred += [c for _, c, _ in out]
        ref += [c for _, c, _ in s]
        dpred += [int(g) for _, _, g in out]
        dref += [int(g) for _, _, g in s]
    m = punct_metrics(pred, ref)
    m["disfluency_accuracy"] = 100.0 * float(np.mean(np.array(dpred) == np.array(dref)))
    return m
