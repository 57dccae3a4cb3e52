"""Extraction likelihood, memorization accuracy, perplexity and stopping.

Metric functions take a *predictor*: anything with

* ``logits(x) -> (T, V) array`` and
* ``continuations(x, prefix_lens) -> list of token arrays``, the greedy
  continuation of ``x[:L]`` up to length ``len(x)`` for each ``L``.

Passing ``ModelParams`` (plus optional adapters) wraps the transformer.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import model as _model
from .objectives import token_nll


EL_CHUNK = 8


class TransformerPredictor:
    def __init__(self, params, adapters=None):
        self.params = params
        self.adapters = adapters

    def logits(self, x):
        return _model.forward(self.params, self.adapters, np.asarray(x))

    def continuations(self, x, prefix_lens):
        return _model.greedy_continuations(self.params, self.adapters, x, prefix_lens)

    def batch_continuations(self, xs, prefix_lens):
        return _model.batch_greedy_continuations(self.params, self.adapters, xs, prefix_lens)


def as_predictor(model, adapters=None):
    if isinstance(model, _model.ModelParams):
        return TransformerPredictor(model, adapters)
    return model


def ngrams(seq, n: int) -> list[tuple[int, ...]]:
    seq = [int(t) for t in seq]
    return [tuple(seq[i:i + n]) for i in range(len(seq) - n + 1)]


def ngram_overlap(a, b, n: int) -> float:
    """Fraction of ``a``'s positional n-grams that occur anywhere in ``b``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    grams = ngrams(a, n)
    if not grams:
        return 0.0
    pool = set(ngrams(b, n))
    return sum(g in pool for g in grams) / len(grams)


def _cuts(T: int, n: int) -> list[int]:
    if n < 1 or T < n + 1:
        raise ValueError(f"sequence of length {T} too short for {n}-grams")
    return list(range(1, T - n + 1))


def _score(x, gens, cuts, n) -> float:
    return sum(ngram_overlap(g, x[L:], n) for g, L in zip(gens, cuts)) / len(cuts)


def el_n(model, adapters, x, n: int) -> float:
    """Mean n-gram overlap of greedy continuations with the true suffix.

    Cuts are prefix lengths ``L = 1 .. T - n``; from each, ``T - L`` tokens
    are decoded and scored against ``x[L:]``.
    """
    x = np.asarray(x)
    cuts = _cuts(len(x), n)
    return _score(x, as_predictor(model, adapters).continuations(x, cuts), cuts, n)


def ma(model, adapters, x) -> float:
    """Fraction of positions whose argmax next-token prediction is correct."""
    x = np.asarray(x)
    if len(x) < 2:
        raise ValueError("memorization accuracy needs at least two tokens")
    logits = np.asarray(as_predictor(model, adapters).logits(x))
    return float(np.mean(np.argmax(logits[:-1], axis=-1) == x[1:]))


def perplexity(model, adapters, corpus) -> float:
    """exp of the token-weighted mean negative log-likelihood."""
    seqs = [np.asarray(s) for s in corpus]
    if not seqs:
        raise ValueError("perplexity of an empty corpus")
    pred = as_predictor(model, adapters)
    total, count = 0.0, 0
    for s in seqs:
        nll = token_nll(pred.logits(s), s)
        total += float(nll.sum())
        count += nll.size
    return math.exp(total / count)


def worker_count() -> int:
    """Workers for per-sequence fan-out, capped by ``ULAB_THREADS``."""
    try:
        return max(1, int(os.environ.get("ULAB_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, items):
    workers = worker_count()
    if workers == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class SetStats:
    """Mean EL_n and MA over a set of sequences."""

    el: float
    ma: float
    n: int


def set_stats(model, adapters, corpus, n: int) -> SetStats:
    pred = as_predictor(model, adapters)
    seqs = [np.asarray(s) for s in corpus]
    if not seqs:
        raise ValueError("statistics of an empty corpus")
    if hasattr(pred, "batch_continuations") and len({len(s) for s in seqs}) == 1:
        cuts = _cuts(len(seqs[0]), n)
        chunks = [np.stack(seqs[i:i + EL_CHUNK]) for i in range(0, len(seqs), EL_CHUNK)]
        els = []
        for xs, gens in zip(chunks, _map(lambda xs: pred.batch_continuations(xs, cuts), chunks)):
            els += [_score(x, g, cuts, n) for x, g in zip(xs, gens)]
    else:
        els = _map(lambda s: el_n(pred, None, s, n), seqs)
    mas = _map(lambda s: ma(pred, None, s), seqs)
    return SetStats(float(np.mean(els)), float(np.mean(mas)), n)


def stopping_criterion(forget: SetStats, val: SetStats) -> bool:
    """True once forget-set EL_n and MA are both at or below validation values."""
    if forget.n != val.n:
        raise ValueError(f"n-gram order mismatch: {forget.n} vs {val.n}")
    return forget.el <= val.el and forget.ma <= val.ma


@dataclass(frozen=True)
class MetricReport:
    epoch: int
    n: int
    el_n: float
    ma: float
    ppl_retain: float
    ppl_heldout: float
    el_threshold: float
    ma_threshold: float
    unlearned: bool
    loss_forget: float = float("nan")
    loss_retain: float = float("nan")

    def __post_init__(self):
        expected = self.el_n <= self.el_threshold and self.ma <= self.ma_threshold
        if self.unlearned != expected:
            raise ValueError("unlearned flag inconsistent with thresholds")

    @property
    def thresholds(self) -> tuple[float, float]:
        return (self.el_threshold, self.ma_threshold)

    def to_dict(self) -> dict:
        return asdict(self)
