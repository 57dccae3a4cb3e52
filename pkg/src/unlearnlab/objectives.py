"""Unlearning and retention losses.

Conventions: every loss here is *minimised*. ``lm_loss`` is the mean token
negative log-likelihood; ``ga_loss`` is its negation, so descending it is
gradient ascent on cross-entropy. Logits for a sequence of length T have T
rows and row t predicts token t + 1; the last row is unused.

The ``*_logit_grad`` functions give the per-token derivative with respect to
one row of logits. ``loss_and_logit_grad`` is the batched form used by the
model's backward pass; it returns the gradient of the mean loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .numerics import ShapeError, log_softmax_row, softmax_row


class Kind(str, Enum):
    LM = "lm"
    GA = "ga"
    GD = "gd"
    IHL = "ihl"
    IHL_RETAIN = "ihl-retain"


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: Kind

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))

    @property
    def uses_retain(self) -> bool:
        return self.kind in (Kind.GD, Kind.IHL_RETAIN)

    @property
    def forget_kind(self) -> Kind:
        """The loss applied to the primary sequences."""
        return {Kind.GD: Kind.GA, Kind.IHL_RETAIN: Kind.IHL}.get(self.kind, self.kind)


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    forget_term: float
    retain_term: float = 0.0


def _align(logits, x):
    logits = np.asarray(logits, dtype=np.float64)
    x = np.asarray(x)
    if logits.shape[:-1] != x.shape:
        raise ShapeError(f"logits {logits.shape} do not align with tokens {x.shape}")
    if x.shape[-1] < 2:
        raise ShapeError("need at least two tokens")
    return logits[..., :-1, :], x[..., 1:]


def _take(a, idx):
    return np.take_along_axis(a, idx[..., None], axis=-1)[..., 0]


def runner_up(probs, true_idx):
    """Most likely token other than the true one; ties go to the lowest id."""
    masked = np.array(probs, dtype=np.float64, copy=True)
    np.put_along_axis(masked, np.asarray(true_idx)[..., None], -np.inf, axis=-1)
    return np.argmax(masked, axis=-1)


def token_nll(logits, x) -> np.ndarray:
    """Per-position negative log-likelihood, shape ``x.shape[:-1] + (T-1,)``."""
    y, tgt = _align(logits, x)
    return -_take(log_softmax_row(y), tgt)


def lm_loss(logits, x) -> float:
    return float(token_nll(logits, x).mean())


def ga_loss(logits, x) -> float:
    return -lm_loss(logits, x)


def ihl_token_values(probs, true_idx) -> np.ndarray:
    """Per-token hinge ``max(0, 1 + p_true - p_runner_up)``."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[-1] < 2:
        raise ValueError("inverted hinge needs a vocabulary of at least two tokens")
    true_idx = np.asarray(true_idx)
    p_t = _take(probs, true_idx)
    p_star = _take(probs, runner_up(probs, true_idx))
    return np.maximum(0.0, 1.0 + p_t - p_star)


def ihl_loss(logits, x) -> float:
    y, tgt = _align(logits, x)
    return float(ihl_token_values(softmax_row(y), tgt).mean())


def _check_probs(probs, true_idx):
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise ValueError("expected a probability vector over at least two tokens")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("not a probability vector")
    if not 0 <= true_idx < p.size:
        raise ValueError(f"true index {true_idx} out of range")
    return p


def ihl_logit_grad(probs, true_idx: int) -> np.ndarray:
    p = _check_probs(probs, true_idx)
    return _ihl_grad(p, np.asarray(true_idx))


def _ihl_grad(p, true_idx):
    # Three cases: true token, runner-up, everything else.
    star = runner_up(p, true_idx)
    p_t = _take(p, true_idx)[..., None]
    p_s = _take(p, star)[..., None]
    g = p * (p_s - p_t)
    np.put_along_axis(g, true_idx[..., None], p_t * (p_s - p_t + 1.0), axis=-1)
    np.put_along_axis(g, star[..., None], p_s * (p_s - p_t - 1.0), axis=-1)
    active = (1.0 + p_t - p_s) > 0
    return np.where(active, g, 0.0)


def ga_logit_grad(probs, true_idx: int) -> np.ndarray:
    """Derivative of ``log p_true`` (the per-token ``ga_loss``) w.r.t. the logits."""
    p = _check_probs(probs, true_idx)
    g = -p
    g[true_idx] += 1.0
    return g


def loss_and_logit_grad(kind: Kind, logits, x) -> tuple[float, np.ndarray]:
    """Mean loss over all predicted positions and its gradient w.r.t. ``logits``.

    ``logits`` has shape (..., T, V) and ``x`` shape (..., T). The returned
    gradient has the shape of ``logits`` with a zero final row.
    """
    kind = Kind(kind)
    y, tgt = _align(logits, x)
    count = tgt.size
    probs = softmax_row(y)
    grad = np.zeros(np.shape(logits))
    if kind in (Kind.LM, Kind.GA):
        loss = float(-_take(log_softmax_row(y), tgt).mean())
        g = probs.copy()
        np.put_along_axis(g, tgt[..., None], _take(probs, tgt)[..., None] - 1.0, axis=-1)
        if kind is Kind.GA:
            loss, g = -loss, -g
    elif kind is Kind.IHL:
        loss = float(ihl_token_values(probs, tgt).mean())
        g = _ihl_grad(probs, tgt)
    else:
        raise ValueError(f"{kind} is a composite objective; use its forget/retain parts")
    grad[..., :-1, :] = g / count
    return loss, grad


def combined_loss(spec: ObjectiveSpec, forget_logits, x_f, retain_logits=None, x_r=None) -> LossBreakdown:
    if spec.uses_retain and (retain_logits is None or x_r is None):
        raise ValueError(f"objective {spec.kind.value} needs a retain batch")
    if not spec.uses_retain and retain_logits is not None:
        raise ValueError(f"objective {spec.kind.value} takes no retain batch")
    forget = {Kind.LM: lm_loss, Kind.GA: ga_loss, Kind.IHL: ihl_loss}[spec.forget_kind]
    f = forget(forget_logits, x_f)
    r = lm_loss(retain_logits, x_r) if spec.uses_retain else 0.0
    return LossBreakdown(f + r, f, r)
