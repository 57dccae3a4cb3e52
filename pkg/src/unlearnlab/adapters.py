"""Low-rank adapters: attachment, Fisher-weighted initialisation and merging.

A target weight ``W`` of shape ``(d, k)`` receives ``A`` of shape ``(r, k)``
and ``B`` of shape ``(d, r)``; the adapted layer computes ``W x + B A x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import model as _model
from .model import ModelParams
from .numerics import ShapeError, svd, truncate, row_sums
from .objectives import Kind, ObjectiveSpec

TARGET_SUFFIX = {
    "Q": "q",
    "K": "k",
    "V": "v",
    "O": "o",
    "FFN_in": "ffn.in",
    "FFN_out": "ffn.out",
}
DEFAULT_TARGETS = ("Q", "V", "FFN_in", "FFN_out")
FISHER_EPS = 1e-8
ROW_WEIGHT_FLOOR = 1e-6


def parse_targets(text: str) -> tuple[str, ...]:
    """Parse a CLI list such as ``"q,v,ffn"``; ``ffn`` means both FFN layers."""
    out: list[str] = []
    for tok in (t.strip().lower() for t in text.split(",") if t.strip()):
        if tok == "ffn":
            out += ["FFN_in", "FFN_out"]
        elif tok in ("ffn_in", "ffn.in"):
            out.append("FFN_in")
        elif tok in ("ffn_out", "ffn.out"):
            out.append("FFN_out")
        elif tok.upper() in ("Q", "K", "V", "O"):
            out.append(tok.upper())
        else:
            raise ValueError(f"unknown adapter target {tok!r}")
    return tuple(dict.fromkeys(out))


@dataclass(frozen=True)
class AdapterSpec:
    targets: tuple[str, ...] = DEFAULT_TARGETS
    rank: int = 16
    init: str = "default"

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        if not self.targets:
            raise ValueError("adapter targets must be non-empty")
        unknown = set(self.targets) - set(TARGET_SUFFIX)
        if unknown:
            raise ValueError(f"unknown adapter targets {sorted(unknown)}")
        if self.rank < 1:
            raise ValueError("rank must be positive")
        if self.init not in ("default", "flora"):
            raise ValueError(f"unknown init {self.init!r}")

    def tensor_names(self, config: _model.ModelConfig) -> list[str]:
        return [
            f"blk{i}.{TARGET_SUFFIX[t]}"
            for i in range(config.n_layers)
            for t in self.targets
        ]


@dataclass(frozen=True)
class LoraAdapter:
    target_name: str
    a: np.ndarray
    b: np.ndarray

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def delta(self) -> np.ndarray:
        return np.asarray(self.b, np.float64) @ np.asarray(self.a, np.float64)


@dataclass(frozen=True)
class AdapterSet:
    adapters: dict[str, LoraAdapter]
    compensated: tuple[str, ...] = ()
    init: str = "default"

    def __post_init__(self):
        if self.init == "flora" and set(self.compensated) != set(self.adapters):
            raise ValueError("flora adapters must record every compensated base weight")
        if self.init == "default" and self.compensated:
            raise ValueError("default-initialised adapters compensate no base weights")

    def __len__(self):
        return len(self.adapters)


def _check_rank(params: ModelParams, spec: AdapterSpec):
    for name in spec.tensor_names(params.config):
        d, k = params[name].shape
        if spec.rank > min(d, k):
            raise ShapeError(f"rank {spec.rank} exceeds min{(d, k)} for {name}")


def attach_default(params: ModelParams, spec: AdapterSpec, seed: int) -> AdapterSet:
    """Kaiming-uniform ``A`` (bound sqrt(6 / k)) and zero ``B``."""
    _check_rank(params, spec)
    names = spec.tensor_names(params.config)
    streams = np.random.SeedSequence(seed).spawn(len(names))
    out = {}
    for name, ss in zip(names, streams):
        d, k = params[name].shape
        bound = math.sqrt(6.0 / k)
        a = np.random.default_rng(ss).uniform(-bound, bound, size=(spec.rank, k))
        out[name] = LoraAdapter(name, a.astype(params.dtype), np.zeros((d, spec.rank), params.dtype))
    return AdapterSet(out)


@dataclass
class FisherEstimate:
    """Accumulated squared per-sequence gradients and the number of sequences."""

    sums: dict[str, np.ndarray]
    n_examples: int = 0

    def mean(self) -> dict[str, np.ndarray]:
        if self.n_examples == 0:
            raise ValueError("empty Fisher estimate")
        return {k: v / self.n_examples for k, v in self.sums.items()}

    def merge(self, other: "FisherEstimate") -> "FisherEstimate":
        if set(self.sums) != set(other.sums):
            raise ValueError("cannot merge Fisher estimates over different tensors")
        return FisherEstimate(
            {k: self.sums[k] + other.sums[k] for k in self.sums},
            self.n_examples + other.n_examples,
        )


def estimate_fisher(params: ModelParams, corpus, names=None) -> FisherEstimate:
    """Empirical Fisher: per-sequence LM-loss gradients squared, summed.

    Each sequence contributes the square of its own gradient, so the estimate
    is a sum over sequences rather than the square of a batch gradient.
    """
    seqs = list(corpus)
    if not seqs:
        raise ValueError("cannot estimate Fisher information on an empty corpus")
    keep = list(params.tensors) if names is None else list(names)
    sums = {k: np.zeros(params[k].shape) for k in keep}
    lm = ObjectiveSpec(Kind.LM)
    for s in seqs:
        _, g = _model.grads(params, None, lm, _model.Batch(np.asarray(s)[None]))
        for k in keep:
            sums[k] += g[k] * g[k]
    return FisherEstimate(sums, len(seqs))


def relative_fisher(f_forget: FisherEstimate, f_retain: FisherEstimate,
                    eps: float = FISHER_EPS) -> dict[str, np.ndarray]:
    if eps <= 0:
        raise ValueError("eps must be positive")
    ff, fr = f_forget.mean(), f_retain.mean()
    if set(ff) != set(fr):
        raise ShapeError("forget and retain Fisher estimates cover different tensors")
    out = {}
    for k in ff:
        if ff[k].shape != fr[k].shape:
            raise ShapeError(f"Fisher shape mismatch for {k}: {ff[k].shape} vs {fr[k].shape}")
        out[k] = ff[k] / (fr[k] + eps)
    return out


def flora_init(w, f_rel, r: int, floor: float = ROW_WEIGHT_FLOOR):
    """Row-weighted low-rank approximation of ``w`` with base compensation.

    Row weights are ``max(sqrt(row_sum(f_rel)), floor)``. Returns
    ``(a_star, b_star, w_star)`` where ``b_star @ a_star`` minimises
    ``||diag(weights) (w - B A)||_F`` over rank-``r`` pairs and
    ``w_star = w - b_star @ a_star``.
    """
    if floor <= 0:
        raise ValueError("floor must be positive")
    w = np.asarray(w, dtype=np.float64)
    f_rel = np.asarray(f_rel, dtype=np.float64)
    if w.shape != f_rel.shape:
        raise ShapeError(f"weight {w.shape} and importance {f_rel.shape} differ")
    if not 1 <= r <= min(w.shape):
        raise ShapeError(f"rank {r} outside [1, {min(w.shape)}]")
    dvec = np.maximum(np.sqrt(np.maximum(row_sums(f_rel), 0.0)), floor)
    f = truncate(svd(dvec[:, None] * w), r)
    root = np.sqrt(f.s)
    b_star = (f.u * root) / dvec[:, None]
    a_star = root[:, None] * f.vt
    return a_star, b_star, w - b_star @ a_star


def weighted_objective(w, weights, a, b) -> float:
    """``sum((weights * (w - b a))**2)``, the entrywise-weighted residual."""
    res = np.asarray(weights) * (np.asarray(w) - np.asarray(b) @ np.asarray(a))
    return float((res * res).sum())


def attach_flora(params: ModelParams, spec: AdapterSpec, f_rel: dict[str, np.ndarray],
                 floor: float = ROW_WEIGHT_FLOOR) -> tuple[ModelParams, AdapterSet]:
    """Initialise adapters from the row-weighted SVD and compensate base weights."""
    _check_rank(params, spec)
    new_base, ads = {}, {}
    for name in spec.tensor_names(params.config):
        a, b, w_star = flora_init(params[name], f_rel[name], spec.rank, floor)
        dt = params[name].dtype
        ads[name] = LoraAdapter(name, a.astype(dt), b.astype(dt))
        new_base[name] = w_star.astype(dt)
    return params.replace(new_base), AdapterSet(ads, tuple(ads), "flora")


def merge(params: ModelParams, adapters: AdapterSet | None) -> ModelParams:
    """Fold every adapter into its base weight: ``W' = W + B A``."""
    if adapters is None or not adapters.adapters:
        return params
    new = {}
    for name, ad in adapters.adapters.items():
        w = params[name]
        if ad.b.shape[0] != w.shape[0] or ad.a.shape[1] != w.shape[1] or ad.a.shape[0] != ad.b.shape[1]:
            raise ShapeError(f"adapter for {name} does not conform to weight {w.shape}")
        new[name] = (np.asarray(w, np.float64) + ad.delta()).astype(w.dtype)
    return params.replace(new)
