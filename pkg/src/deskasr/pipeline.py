"""End-to-end runtime: VAD -> per-segment recognition (+hotwords) -> timestamps -> punctuation.

Also the model bundle (persistence of all three models) and toy training.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import modelio
from .contextual import HotwordList
from .data import Record, ToyDataConfig, default_symbols, lfr, make_corpus, synthesize
from .features import FbankConfig, SynthConfig, fbank, make_voices, synth_audio
from .kernels import Rng
from .metrics import compute_cer, corpus_error_rate  # noqa: F401  (re-exported)
from .paraformer import Paraformer, ParaformerConfig, TokenSpan, recognize
from .punct import PunctModel, PunctModelConfig, PunctTrainConfig, StreamConfig, StreamState, render_text, stream_flush, stream_step, train_punct
from .runtime import FLOAT32, INT8, AmpPlan, amp_select, apply_plan, clear_plan, uniform_plan
from .train import AsrTrainConfig, evaluate, prepare, train_asr
from .vad import Segment, VadConfig, VadModel, VadModelConfig, VadTrainConfig, frame_labels, score_frames, segment_offline, train_vad

log = logging.getLogger(__name__)

STAGES = ("features", "vad", "asr", "punct")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    vad: VadConfig = field(default_factory=VadConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    fbank: FbankConfig = field(default_factory=FbankConfig)
    punctuate: bool = True
    workers: int = 1  # segments recognised concurrently; output order is unaffected


@dataclass
class TranscriptSegment:
    start_ms: int
    end_ms: int
    tokens: list[TokenSpan]
    text: str = ""
    punctuated_text: str = ""

    def token_ids(self) -> list[int]:
        return [s.token for s in self.tokens]


@dataclass
class Transcript:
    segments: list[TranscriptSegment] = field(default_factory=list)

    def token_ids(self) -> list[int]:
        return [t for s in self.segments for t in s.token_ids()]

    def to_json(self, symbols) -> dict:
        return {
            "segments": [
                {
                    "start_ms": int(s.start_ms),
                    "end_ms": int(s.end_ms),
                    "text": s.text,
                    "punctuated_text": s.punctuated_text,
                    "tokens": [{"token": symbols[t.token], "start_ms": int(t.start_ms), "end_ms": int(t.end_ms)} for t in s.tokens],
                }
                for s in self.segments
            ]
        }


# --------------------------------------------------------------------------
# bundle


@dataclass
class ModelBundle:
    asr: Paraformer
    vad: VadModel
    punct: PunctModel
    symbols: list[str]

    def __post_init__(self):
        v = self.asr.cfg.vocab_size
        if len(self.symbols) != v:
            raise ValueError(f"{len(self.symbols)} symbols for a vocabulary of {v}")
        if self.punct.cfg.vocab_size != v:
            raise ValueError("punctuation and recognition vocabularies differ")

    def models(self) -> dict:
        return {"asr": self.asr, "vad": self.vad, "punct": self.punct}


_MODEL_TYPES = {
    "asr": (Paraformer, ParaformerConfig),
    "vad": (VadModel, VadModelConfig),
    "punct": (PunctModel, PunctModelConfig),
}


def save_model(bundle: ModelBundle, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, model in bundle.models().items():
        modelio.save_store(model.store, d / f"{name}.pflw")
        cfg = {"format_version": modelio.VERSION, **modelio.dataclass_to_config(model.cfg)}
        modelio.write_text_atomic(d / f"{name}.cfg", modelio.format_config(cfg))
    modelio.write_text_atomic(d / "bundle.cfg", modelio.format_config({"format_version": modelio.VERSION, "symbols": bundle.symbols}))


def load_model(directory) -> ModelBundle:
    """Load all three models; any inconsistency raises before a bundle exists."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"model directory {d} does not exist")
    meta = _read_cfg(d / "bundle.cfg")
    models = {}
    for name, (cls, cfg_cls) in _MODEL_TYPES.items():
        values = _read_cfg(d / f"{name}.cfg")
        model = cls(modelio.config_to_dataclass(cfg_cls, values))
        modelio.load_store(model.store, d / f"{name}.pflw")
        models[name] = model
    symbols = meta.get("symbols", "").split(",") if meta.get("symbols") else default_symbols(models["asr"].cfg.vocab_size)
    return ModelBundle(models["asr"], models["vad"], models["punct"], symbols)


def _read_cfg(path: Path) -> dict:
    values = modelio.parse_config(path.read_text(encoding="utf-8"))
    ver = values.pop("format_version", None)
    if ver != str(modelio.VERSION):
        raise modelio.VersionMismatch(f"{path.name}: format_version {ver}, expected {modelio.VERSION}")
    return values


# --------------------------------------------------------------------------
# precision


def apply_precision(bundle: ModelBundle, precision: str = "f32", sqnr_db: float = 30.0, calibration=None, plan: dict | None = None, sample_rate: int = 16000) -> dict:
    """Install f32 / int8 / amp forwards on the recogniser and VAD; returns the plans used.

    The punctuation model always decodes in double precision (its streaming
    guarantee relies on it).
    """
    precision = precision.lower()
    if precision in ("f32", "float32"):
        clear_plan(bundle.asr)
        clear_plan(bundle.vad)
        return {}
    if precision == "int8":
        plans = {"asr": uniform_plan(bundle.asr, INT8), "vad": uniform_plan(bundle.vad, INT8)}
    elif precision == "amp":
        plans = plan or amp_plans(bundle, calibration, sqnr_db, sample_rate)
    else:
        raise ValueError(f"unknown precision {precision!r} (f32, int8, amp)")
    apply_plan(bundle.asr, plans["asr"])
    apply_plan(bundle.vad, plans["vad"])
    return plans


def amp_plans(bundle: ModelBundle, calibration, sqnr_db: float = 30.0, sample_rate: int = 16000) -> dict:
    pcms = list(calibration or [])
    if not pcms:
        raise ValueError("AMP needs calibration audio")
    clear_plan(bundle.asr)
    clear_plan(bundle.vad)
    cfg = bundle.asr.cfg
    fbs = [fbank(p, sample_rate).frames for p in pcms]
    fbs = [f for f in fbs if len(f)]
    if not fbs:
        raise ValueError("calibration audio is shorter than one frame")
    return {
        "asr": amp_select(bundle.asr, [lfr(f, cfg.lfr_m, cfg.lfr_n) for f in fbs], sqnr_db),
        "vad": amp_select(bundle.vad, fbs, sqnr_db),
    }


def plans_to_json(plans: dict) -> dict:
    return {k: v.to_json() for k, v in plans.items()}


def plans_from_json(d: dict) -> dict:
    return {k: AmpPlan.from_json(v) for k, v in d.items()}


# --------------------------------------------------------------------------
# running


def run_pipeline(pcm, bundle: ModelBundle, hotwords: HotwordList | None = None, config: PipelineConfig | None = None, sample_rate: int = 16000, timing: dict | None = None) -> Transcript:
    cfg = config or PipelineConfig()
    timing = timing if timing is not None else {}
    clock = time.perf_counter

    t0 = clock()
    try:
        pcm = np.asarray(pcm)
        if pcm.ndim != 1:
            raise ValueError("expected mono samples")
        frames = fbank(pcm, sample_rate, cfg.fbank).frames
    except ValueError as exc:
        raise PipelineError("features", str(exc)) from exc
    t1 = clock()
    try:
        segments = segment_offline(score_frames(frames, bundle.vad), cfg.vad) if len(frames) else []
    except (ValueError, RuntimeError) as exc:
        raise PipelineError("vad", str(exc)) from exc
    t2 = clock()
    try:
        results = _recognise_segments(frames, segments, bundle, hotwords, cfg)
    except (ValueError, IndexError, RuntimeError) as exc:
        raise PipelineError("asr", str(exc)) from exc
    t3 = clock()
    try:
        out = _assemble(segments, results, bundle, cfg)
    except (ValueError, IndexError) as exc:
        raise PipelineError("punct", str(exc)) from exc
    t4 = clock()
    for k, v in zip(STAGES, (t1 - t0, t2 - t1, t3 - t2, t4 - t3)):
        timing[k] = timing.get(k, 0.0) + v
    return out


def _recognise_segments(frames, segments: list[Segment], bundle: ModelBundle, hotwords, cfg: PipelineConfig) -> list[list[TokenSpan]]:
    asr = bundle.asr
    shift = cfg.fbank.frame_shift_ms
    if hotwords is not None and any(t >= asr.cfg.vocab_size for w in hotwords.entries for t in w):
        raise ValueError("hotword token outside the vocabulary")
    hot_emb = asr.embed_hotwords(hotwords)

    def one(seg: Segment) -> list[TokenSpan]:
        chunk = frames[seg.start_ms // shift : seg.end_ms // shift]
        if len(chunk) == 0:
            return []
        rec = recognize(asr, lfr(chunk, asr.cfg.lfr_m, asr.cfg.lfr_n), hotword_emb=hot_emb)
        spans = []
        for s in rec.timestamps.token_spans():
            start = min(seg.start_ms + s.start_ms, seg.end_ms)
            end = min(seg.start_ms + s.end_ms, seg.end_ms)
            spans.append(TokenSpan(s.token, start, max(start, end)))
        return spans

    if cfg.workers > 1 and len(segments) > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            return list(pool.map(one, segments))
    return [one(s) for s in segments]


def _assemble(segments, results, bundle: ModelBundle, cfg: PipelineConfig) -> Transcript:
    syms = bundle.symbols
    # punctuation runs over the concatenated token stream, one step per segment
    commits: list = []
    if cfg.punctuate:
        state = StreamState(max_history=cfg.stream.max_history)
        for spans in results:
            got, state = stream_step([s.token for s in spans], state, bundle.punct, cfg.stream)
            commits.extend(got)
        commits.extend(stream_flush(state, bundle.punct))
    out = Transcript()
    pos = 0
    for seg, spans in zip(segments, results):
        ids = [s.token for s in spans]
        text = " ".join(syms[t] for t in ids)
        punct_text = render_text(commits[pos : pos + len(ids)], syms) if cfg.punctuate else text
        pos += len(ids)
        out.segments.append(TranscriptSegment(seg.start_ms, seg.end_ms, spans, text, punct_text))
    return out


# --------------------------------------------------------------------------
# synthetic sessions and toy training


def make_session(records: list[Record], synth: SynthConfig, voices, gap_ms=(400, 900), seed: int = 0) -> tuple[np.ndarray, list[tuple[int, int, list[int]]]]:
    """Utterances rendered back to back with digital silence between them.

    Returns the samples and the reference (start_ms, end_ms, tokens) of each
    utterance's speech (first token onset to last token offset).
    """
    rng = Rng(seed)
    spf = synth.sample_rate // 100  # samples per 10 ms frame
    parts, refs = [], []
    at = 0  # frames
    for i, rec in enumerate(records):
        if i:
            gap = rng.integers(gap_ms[0] // 10, gap_ms[1] // 10 + 1)
            parts.append(np.zeros(gap * spf, np.int16))
            at += gap
        pcm, ali = synth_audio(rec.tokens, Rng(rec.seed), synth, voices)
        spans = ali.spans
        refs.append(((at + spans[0][1]) * 10, (at + spans[-1][2]) * 10, list(rec.tokens)))
        parts.append(pcm.astype(np.int16))
        at += len(pcm) // spf
    return np.concatenate(parts) if parts else np.zeros(0, np.int16), refs


def default_synth() -> SynthConfig:
    return SynthConfig(twins=5, silence_prob=0.15, lead_sil=10, trail_sil=10)


@dataclass
class ToyTrainConfig:
    synth: SynthConfig = field(default_factory=default_synth)
    model: ParaformerConfig = field(default_factory=ParaformerConfig)
    asr: AsrTrainConfig = field(default_factory=lambda: AsrTrainConfig(augment_noise=1.0))
    vad_model: VadModelConfig = field(default_factory=VadModelConfig)
    vad: VadTrainConfig = field(default_factory=VadTrainConfig)
    vad_utts: int = 300
    punct_model: PunctModelConfig = field(default_factory=PunctModelConfig)
    punct: PunctTrainConfig = field(default_factory=PunctTrainConfig)


def default_dataset(seed: int = 7, n_train: int = 2000, n_test: int = 200, synth: SynthConfig | None = None):
    synth = synth or default_synth()
    return make_corpus(ToyDataConfig(n_train=n_train, n_test=n_test, seed=seed), synth)


def train_toy(records: list[Record], config: ToyTrainConfig | None = None, seed: int = 0, test_records: list[Record] | None = None, dump_dir=None) -> tuple[ModelBundle, dict]:
    """Train recogniser, VAD and punctuation models; returns the bundle and a log."""
    cfg = config or ToyTrainConfig()
    if len(records) < 100:
        raise ValueError("toy training needs at least 100 records")
    v = cfg.model.vocab_size
    if cfg.synth.vocab_size != v or cfg.punct_model.vocab_size != v:
        raise ValueError("synthesis, recogniser and punctuation vocabularies differ")
    bad = [t for r in records for t in r.tokens if not 0 < t < v]
    if bad:
        raise ValueError(f"token ids must lie in [1, {v - 1}]")
    t_start = time.perf_counter()
    voices = make_voices(cfg.synth)
    clean = dataclasses.replace(cfg.synth, noise=0.0)
    utts = [synthesize(r, clean, voices) for r in records]
    train = prepare(utts, cfg.model, keep_fbank=True)
    dev = None
    if test_records:
        dev = prepare([synthesize(r, cfg.synth, voices) for r in test_records], cfg.model)
    t_synth = time.perf_counter() - t_start

    asr_cfg = dataclasses.replace(cfg.asr, seed=seed)
    asr, history = train_asr(train, cfg.model, asr_cfg, dev=dev, dump_dir=dump_dir)

    vad_cfg = dataclasses.replace(cfg.vad, seed=seed)
    with_ali = [u for u in utts if u.alignment is not None][: cfg.vad_utts]
    labels = [frame_labels(len(u.fbank), u.alignment.spans) for u in with_ali]
    vad, vad_losses = train_vad([u.fbank for u in with_ali], labels, cfg.vad_model, vad_cfg)

    punct, punct_losses = train_punct(cfg.punct_model, dataclasses.replace(cfg.punct, seed=seed))

    bundle = ModelBundle(asr, vad, punct, default_symbols(v))
    result = {"epochs": history, "vad_loss": vad_losses[-1] if vad_losses else None, "punct_loss": punct_losses[-1] if punct_losses else None, "synth_seconds": t_synth}
    if dev is not None:
        ev = evaluate(asr, dev)
        result["test_ter"] = ev["ter"]
        result["test_aas_ms"] = ev["aas_ms"]
    result["seconds"] = time.perf_counter() - t_start
    return bundle, result


def write_log(path, result: dict) -> None:
    Path(path).write_text(json.dumps(result, indent=1, default=float) + "\n", encoding="utf-8")
