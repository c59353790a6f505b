"""Mini-batch training of the recogniser on synthetic utterances."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels as K
from .contextual import HotwordSamplingConfig, merge_hotwords_masked, sample_training_hotwords
from .data import Utterance, lfr
from .kernels import Rng
from .layers import Adam
from .metrics import corpus_error_rate
from .paraformer import Paraformer, ParaformerConfig, aas, forward_train, make_batch, recognize

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AsrTrainConfig:
    epochs: int = 24
    batch_size: int = 16
    lr: float = 2e-3
    warmup_steps: int = 150
    final_lr_frac: float = 0.05
    glance_ratio: float = 0.5
    use_hotwords: bool = True
    shared_hotwords: bool = False  # True: every utterance sees the whole batch's hotwords
    hotword: HotwordSamplingConfig = field(default_factory=HotwordSamplingConfig)
    augment_noise: float = 0.0  # fresh Gaussian noise on fbank frames for every batch
    eval_utts: int = 50
    time_budget_s: float | None = None
    seed: int = 0


@dataclass
class PreparedUtt:
    tokens: list[int]
    feats: np.ndarray  # LFR frames
    spans_ms: list | None
    fbank: np.ndarray | None = None  # kept for on-the-fly augmentation


def prepare(utts: list[Utterance], cfg: ParaformerConfig, keep_fbank: bool = False) -> list[PreparedUtt]:
    out = []
    for u in utts:
        spans = None
        if u.alignment is not None:
            spans = u.alignment.to_ms(cfg.fbank_shift_ms)
        out.append(PreparedUtt(list(u.tokens), lfr(u.fbank, cfg.lfr_m, cfg.lfr_n), spans, u.fbank if keep_fbank else None))
    return out


def feature_stats(prepared: list[PreparedUtt]) -> tuple[np.ndarray, np.ndarray]:
    allf = np.concatenate([p.feats for p in prepared], axis=0).astype(np.float64)
    return allf.mean(axis=0).astype(np.float32), allf.std(axis=0).astype(np.float32)


def lr_at(step: int, total: int, cfg: AsrTrainConfig) -> float:
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / max(total - cfg.warmup_steps, 1)
    return cfg.lr * (cfg.final_lr_frac + (1 - cfg.final_lr_frac) * 0.5 * (1 + math.cos(math.pi * min(frac, 1.0))))


def evaluate(model: Paraformer, data: list[PreparedUtt], hotwords=None) -> dict:
    refs, hyps, shifts = [], [], []
    for u in data:
        r = recognize(model, u.feats, hotwords)
        refs.append(u.tokens)
        hyps.append(r.tokens)
        if u.spans_ms is not None and r.tokens == u.tokens:
            shifts.append(aas(r.timestamps.spans, u.spans_ms))
    return {
        "ter": corpus_error_rate(refs, hyps),
        "aas_ms": float(np.mean(shifts)) if shifts else float("nan"),
        "hyps": hyps,
    }


def _batches(n: int, size: int, rng: Rng, lengths: np.ndarray) -> list[np.ndarray]:
    """Shuffle, then sort inside windows of 8 batches so padding stays small."""
    perm = rng.permutation(n)
    window = size * 8
    out = []
    for s in range(0, n, window):
        chunk = perm[s : s + window]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        for b in range(0, len(chunk), size):
            out.append(chunk[b : b + size])
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def train_asr(train: list[PreparedUtt], model_cfg: ParaformerConfig, cfg: AsrTrainConfig, dev: list[PreparedUtt] | None = None, dump_dir=None) -> tuple[Paraformer, list[dict]]:
    rng = Rng(cfg.seed)
    model = Paraformer(model_cfg, seed=cfg.seed)
    mean, std = feature_stats(train)
    model.set_feature_stats(mean, std)
    params = model.trainable()
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    opt = Adam(params, lr=cfg.lr)
    lengths = np.array([len(u.feats) for u in train])
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    history: list[dict] = []
    step = 0
    start = time.perf_counter()
    batch_rng, glance_rng, hot_rng, noise_rng = rng.fork(1), rng.fork(2), rng.fork(3), rng.fork(4)
    for epoch in range(cfg.epochs):
        sums = {"loss": 0.0, "ce_first": 0.0, "ce_second": 0.0, "quantity": 0.0, "ts_align": 0.0}
        errs = ntok = 0
        for idx in _batches(len(train), cfg.batch_size, batch_rng, lengths):
            utts = [train[i] for i in idx]
            feats = [_augment(u, cfg.augment_noise, noise_rng, model_cfg) for u in utts]
            batch = make_batch(feats, [u.tokens for u in utts], model_cfg, [u.spans_ms for u in utts])
            hot = hot_mask = None
            if cfg.use_hotwords:
                hot, hot_mask = merge_hotwords_masked(sample_training_hotwords(u.tokens, hot_rng, cfg.hotword) for u in utts)
                if cfg.shared_hotwords:
                    hot_mask = None
            out = forward_train(model, batch, glance_rng, cfg.glance_ratio, hot, hot_mask)
            loss = float(out.loss.data)
            if not np.isfinite(loss):
                dump = _dump_state(model, dump_dir, epoch, step)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}; state saved to {dump}")
            opt.zero_grad()
            K.backward(out.loss)
            opt.step(lr_at(step, total, cfg))
            step += 1
            sums["loss"] += loss
            sums["ce_first"] += out.parts.ce_first
            sums["ce_second"] += out.parts.ce_second
            sums["quantity"] += out.parts.quantity
            sums["ts_align"] += out.ts_align
            errs += out.first_pass_errors
            ntok += sum(len(u.tokens) for u in utts)
        entry = {k: v / steps_per_epoch for k, v in sums.items()}
        entry.update(epoch=epoch + 1, train_first_pass_ter=100.0 * errs / max(ntok, 1), elapsed_s=time.perf_counter() - start)
        if dev:
            _freeze(params)
            ev = evaluate(model, dev[: cfg.eval_utts])
            _unfreeze(params)
            entry.update(dev_ter=ev["ter"], dev_aas_ms=ev["aas_ms"])
        history.append(entry)
        log.info("epoch %s", json.dumps({k: round(v, 4) if isinstance(v, float) else v for k, v in entry.items()}))
        if cfg.time_budget_s is not None and time.perf_counter() - start > cfg.time_budget_s:
            log.warning("time budget reached after epoch %d", epoch + 1)
            break
    _freeze(params)
    return model, history


def _augment(u: PreparedUtt, sigma: float, rng: Rng, cfg: ParaformerConfig) -> np.ndarray:
    if sigma <= 0 or u.fbank is None or len(u.fbank) == 0:
        return u.feats
    noisy = (u.fbank + rng.normal(u.fbank.shape) * sigma).astype(np.float32)
    return lfr(noisy, cfg.lfr_m, cfg.lfr_n)


def _freeze(params) -> None:
    for p in params:
        p.requires_grad = False


def _unfreeze(params) -> None:
    for p in params:
        p.requires_grad = True


def _dump_state(model: Paraformer, dump_dir, epoch: int, step: int):
    if dump_dir is None:
        return None
    from .modelio import save_store

    path = Path(dump_dir) / f"diverged_e{epoch}_s{step}.pflw"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_store(model.store, path)
    return path
