"""Toy corpora: token sequences, rare entities, JSON-lines records and feature synthesis."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import (
    Alignment,
    FbankConfig,
    SynthConfig,
    Voices,
    fbank,
    lfr_stack,
    synth_audio,
    synth_generate,
    unpack_feat,
    FeatureFrames,
)
from .kernels import Rng


@dataclass
class ToyDataConfig:
    n_train: int = 2000
    n_test: int = 200
    len_min: int = 5
    len_max: int = 15
    n_entities: int = 10
    entity_len_min: int = 2
    entity_len_max: int = 4
    entity_train_count: int = 3  # occurrences of each entity in the training split
    n_entity_test: int = 100
    twin_rate: float = 0.15  # chance a training token with a twin is written as the twin
    seed: int = 7


@dataclass
class Record:
    tokens: list[int]
    seed: int | None = None
    feat: str | None = None
    alignment: list[tuple[int, int, int]] | None = None  # frames of 10 ms
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d: dict = {"tokens": [int(t) for t in self.tokens]}
        if self.seed is not None:
            d["seed"] = int(self.seed)
        if self.feat is not None:
            d["feat"] = self.feat
        if self.alignment is not None:
            d["alignment"] = [list(map(int, s)) for s in self.alignment]
        d.update(self.extra)
        return json.dumps(d)


BLANK_SYMBOL = "<blank>"


def default_symbols(vocab_size: int = 32) -> list[str]:
    """Printable names for token ids: id 0 is the blank, the rest are consonant-vowel syllables."""
    cons, vows = "bdgkmnprstvz", "aeiou"
    sylls = [c + v for c in cons for v in vows]
    if vocab_size - 1 > len(sylls):
        sylls += [f"w{i}" for i in range(vocab_size - 1 - len(sylls))]
    return [BLANK_SYMBOL] + sylls[: vocab_size - 1]


def ordinary_tokens(vocab_size: int, twins: int) -> np.ndarray:
    """Token ids used in everyday text: everything except blank (0) and the twin ids."""
    return np.arange(1, vocab_size - twins)


def twin_tokens(vocab_size: int, twins: int) -> np.ndarray:
    return np.arange(vocab_size - twins, vocab_size)


def make_entities(cfg: ToyDataConfig, synth: SynthConfig, rng: Rng) -> list[tuple[int, ...]]:
    """Rare phrases, each containing at least one twin token (sounds like a common token)."""
    ordin = ordinary_tokens(synth.vocab_size, synth.twins)
    twins = twin_tokens(synth.vocab_size, synth.twins)
    if len(twins) == 0:
        raise ValueError("entities need twin tokens (SynthConfig.twins > 0)")
    seen, out = set(), []
    while len(out) < cfg.n_entities:
        n = rng.integers(cfg.entity_len_min, cfg.entity_len_max + 1)
        ent = [int(ordin[rng.integers(0, len(ordin))]) for _ in range(n)]
        ent[rng.integers(0, n)] = int(twins[rng.integers(0, len(twins))])
        t = tuple(ent)
        if t not in seen:
            seen.add(t)
            out.append(t)
    return out


def _carrier(cfg: ToyDataConfig, ordin, rng: Rng, length=None) -> list[int]:
    n = rng.integers(cfg.len_min, cfg.len_max + 1) if length is None else length
    return [int(ordin[rng.integers(0, len(ordin))]) for _ in range(n)]


def _with_entity(cfg: ToyDataConfig, ordin, ent, rng: Rng) -> list[int]:
    n = max(cfg.len_min, rng.integers(cfg.len_min, cfg.len_max + 1) - len(ent))
    base = _carrier(cfg, ordin, rng, n)
    pos = rng.integers(0, len(base) + 1)
    return base[:pos] + list(ent) + base[pos:]


def _homophones(tokens, synth: SynthConfig, rate: float, rng: Rng) -> list[int]:
    v = synth.vocab_size
    out = []
    for t in tokens:
        if 1 <= t <= synth.twins and rng.random() < rate:
            t = v - t
        out.append(int(t))
    return out


@dataclass
class ToyCorpus:
    train: list[Record]
    test: list[Record]
    entity_test: list[Record]
    entities: list[tuple[int, ...]]


def make_corpus(cfg: ToyDataConfig, synth: SynthConfig) -> ToyCorpus:
    rng = Rng(cfg.seed)
    ordin = ordinary_tokens(synth.vocab_size, synth.twins)
    entities = make_entities(cfg, synth, rng.fork(1)) if synth.twins > 0 and cfg.n_entities > 0 else []
    r = rng.fork(2)
    train_tokens = [_carrier(cfg, ordin, r) for _ in range(cfg.n_train - len(entities) * cfg.entity_train_count)]
    for ent in entities:
        for _ in range(cfg.entity_train_count):
            train_tokens.append(_with_entity(cfg, ordin, ent, r))
    if cfg.twin_rate > 0 and synth.twins > 0:
        train_tokens = [_homophones(t, synth, cfg.twin_rate, r) for t in train_tokens]
    order = r.permutation(len(train_tokens))
    train_tokens = [train_tokens[i] for i in order]
    r = rng.fork(3)
    test_tokens = [_carrier(cfg, ordin, r) for _ in range(cfg.n_test)]
    r = rng.fork(4)
    ent_test = [_with_entity(cfg, ordin, entities[i % len(entities)], r) for i in range(cfg.n_entity_test)] if entities else []

    def recs(toks, base):
        return [Record(t, seed=base + i) for i, t in enumerate(toks)]

    return ToyCorpus(recs(train_tokens, 10_000_000 + cfg.seed * 100_000), recs(test_tokens, 20_000_000 + cfg.seed * 100_000), recs(ent_test, 30_000_000 + cfg.seed * 100_000), entities)


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def read_jsonl(path, vocab_size: int | None = None) -> list[Record]:
    out = []
    base = Path(path).parent
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: bad JSON ({exc.msg})") from None
            toks = d.get("tokens")
            if not isinstance(toks, list) or not all(isinstance(t, int) for t in toks):
                raise ValueError(f"{path}:{lineno}: 'tokens' must be a list of integers")
            if vocab_size is not None and any(t < 0 or t >= vocab_size for t in toks):
                raise ValueError(f"{path}:{lineno}: token id outside vocabulary of {vocab_size}")
            if "seed" not in d and "feat" not in d:
                raise ValueError(f"{path}:{lineno}: record needs 'seed' or 'feat'")
            feat = d.get("feat")
            if feat is not None and not Path(feat).is_absolute():
                feat = str(base / feat)
            ali = d.get("alignment")
            if ali is not None:
                ali = [tuple(int(v) for v in s) for s in ali]
                for (_, s, e), nxt in zip(ali, ali[1:] + [None]):
                    if e <= s or (nxt is not None and nxt[1] < e):
                        raise ValueError(f"{path}:{lineno}: invalid alignment")
            extra = {k: v for k, v in d.items() if k not in ("tokens", "seed", "feat", "alignment")}
            out.append(Record(toks, d.get("seed"), feat, ali, extra))
    return out


@dataclass
class Utterance:
    tokens: list[int]
    fbank: np.ndarray  # [T, n_mels]
    alignment: Alignment | None
    pcm: np.ndarray | None = None


def synthesize(record: Record, synth: SynthConfig, voices: Voices, domain: str = "audio", fb: FbankConfig | None = None, keep_pcm: bool = False) -> Utterance:
    """Features for a record: rendered audio -> fbank (plus feature noise), or template frames directly."""
    if record.feat is not None:
        frames = unpack_feat(Path(record.feat).read_bytes())
        ali = Alignment(list(record.alignment)) if record.alignment is not None else None
        return Utterance(list(record.tokens), frames, ali)
    rng = Rng(record.seed)
    if domain == "feature":
        ff, ali = synth_generate(record.tokens, rng, synth, voices.templates)
        return Utterance(list(record.tokens), ff.frames, ali)
    pcm, ali = synth_audio(record.tokens, rng, synth, voices)
    frames = fbank(pcm, synth.sample_rate, fb).frames
    if synth.noise > 0 and len(frames):
        frames = (frames + rng.normal(frames.shape) * synth.noise).astype(np.float32)
    return Utterance(list(record.tokens), frames, ali, pcm if keep_pcm else None)


def lfr(frames: np.ndarray, m: int, n: int) -> np.ndarray:
    return lfr_stack(FeatureFrames(frames), m, n).frames
