"""Edit-distance based error rates."""

from __future__ import annotations

import numpy as np


def edit_distance(ref, hyp) -> int:
    """Levenshtein distance with unit substitution, insertion and deletion costs."""
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def compute_cer(ref_tokens, hyp_tokens) -> float:
    """edit_distance / len(ref)."""
    ref = list(ref_tokens)
    if not ref:
        raise ValueError("compute_cer: empty reference")
    return edit_distance(ref, hyp_tokens) / len(ref)


def corpus_error_rate(refs, hyps) -> float:
    """Total edits over total reference tokens (percent)."""
    errs = sum(edit_distance(r, h) for r, h in zip(refs, hyps))
    n = sum(len(r) for r in refs)
    if n == 0:
        raise ValueError("corpus_error_rate: no reference tokens")
    return 100.0 * errs / n


def token_divergence(a_seqs, b_seqs) -> float:
    """Percent of tokens that differ between two hypothesis sets (edit distance over len(a))."""
    errs = sum(edit_distance(a, b) for a, b in zip(a_seqs, b_seqs))
    n = max(sum(len(a) for a in a_seqs), 1)
    return 100.0 * errs / n


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = 100.0 * tp / (tp + fp) if tp + fp else 0.0
    r = 100.0 * tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def mean(xs) -> float:
    xs = list(xs)
    return float(np.mean(xs)) if xs else 0.0
