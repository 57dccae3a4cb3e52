"""A tiny decoder-only transformer with hand-written backward passes.

Pre-LayerNorm blocks, tanh-GELU feed-forward, learned absolute positions and
an untied output head. Linear weights are stored as ``(d_out, d_in)`` so a
layer computes ``h @ W.T``; an attached adapter adds ``(h @ A.T) @ B.T``.

Parameters may be stored as float32 or float64; all arithmetic runs in
float64 and gradients come back as float64.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import NumericalError, ShapeError
from .objectives import (
    Kind,
    LossBreakdown,
    ObjectiveSpec,
    ga_loss,
    ihl_loss,
    lm_loss,
    loss_and_logit_grad,
)

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 512
    max_seq: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("n_heads must divide d_model")
        if self.max_seq < 2:
            raise ValueError("max_seq must be at least 2")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, f = self.d_model, self.d_ff
        out = {"emb.tok": (self.vocab_size, d), "emb.pos": (self.max_seq, d)}
        for i in range(self.n_layers):
            for w in "qkvo":
                out[f"blk{i}.{w}"] = (d, d)
            out[f"blk{i}.ffn.in"] = (f, d)
            out[f"blk{i}.ffn.out"] = (d, f)
            for ln in ("ln1", "ln2"):
                out[f"blk{i}.{ln}.gain"] = (d,)
                out[f"blk{i}.{ln}.bias"] = (d,)
        out["final_ln.gain"] = (d,)
        out["final_ln.bias"] = (d,)
        out["head"] = (self.vocab_size, d)
        return out

    def linear_names(self) -> list[str]:
        """Names of the block linear layers that adapters may target."""
        return [
            f"blk{i}.{w}"
            for i in range(self.n_layers)
            for w in ("q", "k", "v", "o", "ffn.in", "ffn.out")
        ]


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    @property
    def dtype(self):
        return self.tensors["head"].dtype

    def replace(self, updates: dict[str, np.ndarray]) -> "ModelParams":
        return ModelParams(self.config, {**self.tensors, **updates})

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())


def init_params(config: ModelConfig, dtype=np.float64) -> ModelParams:
    """Seeded initialisation: uniform(+-1/sqrt(fan_in)) linears, unit LN gains."""
    root = np.random.SeedSequence(config.seed)
    shapes = config.shapes()
    streams = dict(zip(shapes, root.spawn(len(shapes))))
    tensors = {}
    for name, shape in shapes.items():
        rng = np.random.default_rng(streams[name])
        if name.endswith(".gain"):
            t = np.ones(shape)
        elif name.endswith(".bias"):
            t = np.zeros(shape)
        elif name.startswith("emb."):
            t = rng.uniform(-0.1, 0.1, size=shape)
        else:
            bound = 1.0 / math.sqrt(shape[1])
            t = rng.uniform(-bound, bound, size=shape)
        tensors[name] = t.astype(dtype)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# forward / backward primitives


def _f64(a):
    return np.asarray(a, dtype=np.float64)


def _adapter(adapters, name):
    if adapters is None:
        return None
    return adapters.adapters.get(name)


def _linear(h, w, ad):
    lead = h.shape[:-1]
    h2 = h.reshape(-1, h.shape[-1])
    out = h2 @ _f64(w).T
    if ad is not None:
        z = h2 @ _f64(ad.a).T
        out = out + z @ _f64(ad.b).T
        return out.reshape(*lead, -1), z.reshape(*lead, -1)
    return out.reshape(*lead, -1), None


def _linear_back(dout, h, w, ad, z, name, grads, base_trainable):
    d_out, d_in = dout.shape[-1], h.shape[-1]
    dh = (dout.reshape(-1, d_out) @ _f64(w)).reshape(h.shape)
    if base_trainable:
        grads[name] = dout.reshape(-1, d_out).T @ h.reshape(-1, d_in)
    if ad is not None:
        a, b = _f64(ad.a), _f64(ad.b)
        r = a.shape[0]
        dz = dout.reshape(-1, d_out) @ b
        grads[f"{name}.lora_b"] = dout.reshape(-1, d_out).T @ z.reshape(-1, r)
        grads[f"{name}.lora_a"] = dz.T @ h.reshape(-1, d_in)
        dh = dh + (dz @ a).reshape(h.shape)
    return dh


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * _f64(gain) + _f64(bias), (xhat, inv)


def _layer_norm_back(dy, cache, gain, prefix, grads, trainable):
    xhat, inv = cache
    if trainable:
        grads[f"{prefix}.gain"] = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
        grads[f"{prefix}.bias"] = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * _f64(gain)
    n = xhat.shape[-1]
    return inv / n * (
        n * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )


def _gelu(u):
    th = np.tanh(_GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * u * (1.0 + th), th


def _gelu_back(dout, u, th):
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return dout * (0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * dinner)


def _split_heads(t, n_heads):
    b, T, d = t.shape
    return t.reshape(b, T, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(t):
    b, h, T, dh = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, T, h * dh)


def _causal_softmax(scores):
    T = scores.shape[-1]
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(x, config: ModelConfig) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None]
    if x.ndim != 2:
        raise ShapeError(f"expected tokens of shape (T,) or (B, T), got {x.shape}")
    if x.shape[1] > config.max_seq:
        raise ShapeError(f"sequence length {x.shape[1]} exceeds max_seq {config.max_seq}")
    if x.size and (x.min() < 0 or x.max() >= config.vocab_size):
        raise ValueError("token id outside vocabulary")
    return x.astype(np.int64)


def _forward(params: ModelParams, adapters, x, keep_cache: bool):
    cfg = params.config
    P = params.tensors
    B, T = x.shape
    h = _f64(P["emb.tok"])[x] + _f64(P["emb.pos"])[:T]
    scale = 1.0 / math.sqrt(cfg.head_dim)
    caches = []
    for i in range(cfg.n_layers):
        c = {}
        a, c["ln1"] = _layer_norm(h, P[f"blk{i}.ln1.gain"], P[f"blk{i}.ln1.bias"])
        qkv = {}
        for w in "qkv":
            name = f"blk{i}.{w}"
            out, c[f"z_{w}"] = _linear(a, P[name], _adapter(adapters, name))
            qkv[w] = _split_heads(out, cfg.n_heads)
        att = _causal_softmax(qkv["q"] @ qkv["k"].transpose(0, 1, 3, 2) * scale)
        ctx = _merge_heads(att @ qkv["v"])
        o, c["z_o"] = _linear(ctx, P[f"blk{i}.o"], _adapter(adapters, f"blk{i}.o"))
        h = h + o
        a2, c["ln2"] = _layer_norm(h, P[f"blk{i}.ln2.gain"], P[f"blk{i}.ln2.bias"])
        u, c["z_ffn.in"] = _linear(a2, P[f"blk{i}.ffn.in"], _adapter(adapters, f"blk{i}.ffn.in"))
        g, th = _gelu(u)
        f, c["z_ffn.out"] = _linear(g, P[f"blk{i}.ffn.out"], _adapter(adapters, f"blk{i}.ffn.out"))
        h = h + f
        if keep_cache:
            c.update(a=a, qkv=qkv, att=att, ctx=ctx, a2=a2, u=u, g=g, th=th)
        caches.append(c)
    hf, fcache = _layer_norm(h, P["final_ln.gain"], P["final_ln.bias"])
    logits = (hf.reshape(-1, cfg.d_model) @ _f64(P["head"]).T).reshape(B, T, -1)
    return logits, (caches, hf, fcache)


def _backward(params, adapters, x, cache, dlogits, base_trainable):
    cfg = params.config
    P = params.tensors
    caches, hf, fcache = cache
    B, T = x.shape
    d = cfg.d_model
    scale = 1.0 / math.sqrt(cfg.head_dim)
    grads: dict[str, np.ndarray] = {}
    if base_trainable:
        grads["head"] = dlogits.reshape(-1, dlogits.shape[-1]).T @ hf.reshape(-1, d)
    dhf = (dlogits.reshape(-1, dlogits.shape[-1]) @ _f64(P["head"])).reshape(hf.shape)
    dh = _layer_norm_back(dhf, fcache, P["final_ln.gain"], "final_ln", grads, base_trainable)
    for i in reversed(range(cfg.n_layers)):
        c = caches[i]
        pre = f"blk{i}"
        dg = _linear_back(dh, c["g"], P[f"{pre}.ffn.out"], _adapter(adapters, f"{pre}.ffn.out"),
                          c["z_ffn.out"], f"{pre}.ffn.out", grads, base_trainable)
        du = _gelu_back(dg, c["u"], c["th"])
        da2 = _linear_back(du, c["a2"], P[f"{pre}.ffn.in"], _adapter(adapters, f"{pre}.ffn.in"),
                           c["z_ffn.in"], f"{pre}.ffn.in", grads, base_trainable)
        dh = dh + _layer_norm_back(da2, c["ln2"], P[f"{pre}.ln2.gain"], f"{pre}.ln2", grads, base_trainable)

        dctx = _linear_back(dh, c["ctx"], P[f"{pre}.o"], _adapter(adapters, f"{pre}.o"),
                            c["z_o"], f"{pre}.o", grads, base_trainable)
        dctx = _split_heads(dctx, cfg.n_heads)
        att, qkv = c["att"], c["qkv"]
        datt = dctx @ qkv["v"].transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dctx
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
        dq = dscores @ qkv["k"]
        dk = dscores.transpose(0, 1, 3, 2) @ qkv["q"]
        da = np.zeros_like(c["a"])
        for w, dt in (("q", dq), ("k", dk), ("v", dv)):
            name = f"{pre}.{w}"
            da = da + _linear_back(_merge_heads(dt), c["a"], P[name], _adapter(adapters, name),
                                   c[f"z_{w}"], name, grads, base_trainable)
        dh = dh + _layer_norm_back(da, c["ln1"], P[f"{pre}.ln1.gain"], f"{pre}.ln1", grads, base_trainable)
    if base_trainable:
        demb = np.zeros(P["emb.tok"].shape)
        np.add.at(demb, x.reshape(-1), dh.reshape(-1, d))
        grads["emb.tok"] = demb
        dpos = np.zeros(P["emb.pos"].shape)
        dpos[:T] = dh.sum(axis=0)
        grads["emb.pos"] = dpos
    return grads


# ---------------------------------------------------------------------------
# public API


def forward(params: ModelParams, adapters, x) -> np.ndarray:
    """Logits of shape (T, V) for a single sequence or (B, T, V) for a batch."""
    xb = _as_batch(x, params.config)
    logits, _ = _forward(params, adapters, xb, keep_cache=False)
    return logits[0] if np.ndim(x) == 1 else logits


def is_adapter_mode(adapters) -> bool:
    return adapters is not None and len(adapters.adapters) > 0


def trainable_names(params: ModelParams, adapters) -> list[str]:
    if is_adapter_mode(adapters):
        return [f"{t}.lora_{p}" for t in adapters.adapters for p in ("a", "b")]
    return list(params.tensors)


def trainable_fraction(params: ModelParams, adapters) -> float:
    """Trainable parameters over all parameters of the (possibly adapted) model."""
    if not is_adapter_mode(adapters):
        return 1.0
    n_adapter = sum(ad.a.size + ad.b.size for ad in adapters.adapters.values())
    return n_adapter / (params.n_params() + n_adapter)


@dataclass
class Batch:
    """Sequences for one optimisation step.

    ``x`` holds the sequences the objective's primary term acts on (the forget
    batch for unlearning objectives, training data for ``LM``); ``retain``
    feeds the language-modelling term of the composite objectives.
    """

    x: list | np.ndarray
    retain: list | np.ndarray | None = None


def _groups(seqs):
    """Group sequences by length, preserving order within each group."""
    if isinstance(seqs, np.ndarray) and seqs.ndim == 2:
        return [seqs]
    by_len: dict[int, list] = {}
    for s in seqs:
        by_len.setdefault(len(s), []).append(np.asarray(s))
    return [np.stack(v) for _, v in sorted(by_len.items())]


def _term(params, adapters, kind, seqs, reduction, base_trainable):
    groups = _groups(seqs)
    n_total = sum(len(g) for g in groups)
    if n_total == 0:
        raise ValueError("empty batch")
    loss = 0.0
    grads: dict[str, np.ndarray] = {}
    for g in groups:
        xb = _as_batch(g, params.config)
        logits, cache = _forward(params, adapters, xb, keep_cache=True)
        gl, dlogits = loss_and_logit_grad(kind, logits, xb)
        w = len(g) / n_total if reduction == "mean" else float(len(g))
        loss += w * gl
        for k, v in _backward(params, adapters, xb, cache, dlogits * w, base_trainable).items():
            grads[k] = grads[k] + v if k in grads else v
    return loss, grads


def _first_nonfinite(params, adapters):
    for name, t in params.tensors.items():
        if not np.all(np.isfinite(t)):
            return name
    if adapters is not None:
        for name, ad in adapters.adapters.items():
            for part in ("a", "b"):
                if not np.all(np.isfinite(getattr(ad, part))):
                    return f"{name}.lora_{part}"
    return "logits"


def grads(params: ModelParams, adapters, objective: ObjectiveSpec, batch: Batch,
          reduction: str = "mean") -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Loss breakdown and gradients for every trainable tensor.

    In adapter mode only ``<target>.lora_a`` / ``<target>.lora_b`` gradients
    are produced; otherwise every model tensor gets one. ``reduction`` is
    ``"mean"`` (average over sequences) or ``"sum"``.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    objective = objective if isinstance(objective, ObjectiveSpec) else ObjectiveSpec(objective)
    if objective.uses_retain != (batch.retain is not None):
        raise ValueError(f"objective {objective.kind.value} retain batch mismatch")
    base_trainable = not is_adapter_mode(adapters)
    try:
        f_loss, out = _term(params, adapters, objective.forget_kind, batch.x, reduction, base_trainable)
        r_loss = 0.0
        if objective.uses_retain:
            r_loss, r_grads = _term(params, adapters, Kind.LM, batch.retain, reduction, base_trainable)
            for k, v in r_grads.items():
                out[k] = out[k] + v
    except NumericalError:
        f_loss = r_loss = math.nan
    if not (math.isfinite(f_loss) and math.isfinite(r_loss)):
        name = _first_nonfinite(params, adapters)
        raise NumericalError(f"non-finite {objective.kind.value} loss (offending tensor: {name})")
    return LossBreakdown(f_loss + r_loss, f_loss, r_loss), out


def loss(params: ModelParams, adapters, objective: ObjectiveSpec, batch: Batch) -> LossBreakdown:
    """Forward-only loss with the same reduction as ``grads`` (mean)."""
    objective = objective if isinstance(objective, ObjectiveSpec) else ObjectiveSpec(objective)

    def term(fn, seqs):
        groups = _groups(seqs)
        n = sum(len(g) for g in groups)
        return sum(len(g) / n * fn(forward(params, adapters, _as_batch(g, params.config)), g) for g in groups)

    forget_fn = {Kind.LM: lm_loss, Kind.GA: ga_loss, Kind.IHL: ihl_loss}[objective.forget_kind]
    f = term(forget_fn, batch.x)
    r = term(lm_loss, batch.retain) if objective.uses_retain else 0.0
    return LossBreakdown(f + r, f, r)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def step(params: ModelParams, adapters, grad: dict[str, np.ndarray], state: AdamState, lr: float):
    """One Adam update of the trainable tensors.

    Returns new ``(params, adapters, state)``; untouched tensors are shared
    with the inputs, so frozen weights stay bitwise identical.
    """
    names = trainable_names(params, adapters)
    if set(grad) != set(names):
        missing = sorted(set(names) - set(grad))
        extra = sorted(set(grad) - set(names))
        raise KeyError(f"gradient names do not match trainable tensors (missing {missing}, unexpected {extra})")
    t = state.t + 1
    m, v = dict(state.m), dict(state.v)
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    updated = {}
    for name in names:
        g = _f64(grad[name])
        m[name] = state.beta1 * m.get(name, 0.0) + (1.0 - state.beta1) * g
        v[name] = state.beta2 * v.get(name, 0.0) + (1.0 - state.beta2) * g * g
        upd = lr * (m[name] / bc1) / (np.sqrt(v[name] / bc2) + state.eps)
        updated[name] = upd
    new_state = dataclasses.replace(state, t=t, m=m, v=v)

    if not is_adapter_mode(adapters):
        new = {n: (_f64(params[n]) - u).astype(params[n].dtype) for n, u in updated.items()}
        out = params.replace(new)
        bad = [n for n, t_ in new.items() if not np.all(np.isfinite(t_))]
        if bad:
            raise NumericalError(f"non-finite parameters after step: {bad[0]}")
        return out, adapters, new_state

    new_ads = {}
    for target, ad in adapters.adapters.items():
        a = (_f64(ad.a) - updated[f"{target}.lora_a"]).astype(ad.a.dtype)
        b = (_f64(ad.b) - updated[f"{target}.lora_b"]).astype(ad.b.dtype)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise NumericalError(f"non-finite adapter after step: {target}")
        new_ads[target] = dataclasses.replace(ad, a=a, b=b)
    return params, dataclasses.replace(adapters, adapters=new_ads), new_state


def generate_greedy(params: ModelParams, adapters, prefix, n_new: int) -> np.ndarray:
    """Append ``n_new`` argmax tokens one at a time (ties -> lowest id)."""
    seq = list(np.asarray(prefix, dtype=np.int64))
    if len(seq) < 1:
        raise ShapeError("prefix must be non-empty")
    if len(seq) + n_new > params.config.max_seq:
        raise ShapeError(f"prefix {len(seq)} + {n_new} new tokens exceeds max_seq {params.config.max_seq}")
    for _ in range(n_new):
        logits = forward(params, adapters, np.array(seq))
        seq.append(int(np.argmax(logits[-1])))
    return np.array(seq, dtype=np.int64)


def greedy_continuations(params: ModelParams, adapters, x, prefix_lens) -> list[np.ndarray]:
    """Greedy continuations of ``x[:L]`` up to length ``len(x)`` for each ``L``.

    Equivalent to ``generate_greedy(x[:L], len(x) - L)[L:]`` for every cut.
    """
    return batch_greedy_continuations(params, adapters, np.asarray(x)[None], prefix_lens)[0]


def batch_greedy_continuations(params: ModelParams, adapters, xs, prefix_lens,
                               chunk: int = 8) -> list[list[np.ndarray]]:
    """Continuations for every (sequence, cut) pair of equal-length sequences.

    All cuts decode in lock-step off a key/value cache seeded by one forward
    pass over each full sequence. Rows are laid out cut-major with cuts in
    ascending order, so the rows still decoding always form a prefix.
    """
    cfg = params.config
    xs = _as_batch(xs, cfg)
    lens = np.asarray(prefix_lens, dtype=np.int64)
    S, T = xs.shape
    if lens.size == 0:
        return [[] for _ in range(S)]
    if lens.min() < 1 or lens.max() > T:
        raise ShapeError("prefix lengths must lie in [1, len(x)]")
    order = np.argsort(lens, kind="stable")
    results: list[list[np.ndarray]] = []
    for lo in range(0, S, chunk):
        toks = _decode_chunk(params, adapters, xs[lo:lo + chunk], lens[order])
        n = len(xs[lo:lo + chunk])
        for s in range(n):
            per_cut = [None] * len(lens)
            for c_sorted, c in enumerate(order):
                per_cut[c] = toks[c_sorted * n + s, lens[c]:].copy()
            results.append(per_cut)
    return results


def _decode_chunk(params, adapters, xs, lens):
    cfg = params.config
    P = params.tensors
    S, T = xs.shape
    C = len(lens)
    H, dh = cfg.n_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)

    logits, (caches, _, _) = _forward(params, adapters, xs, keep_cache=True)
    # row r = c * S + s
    keys = [np.tile(c["qkv"]["k"], (C, 1, 1, 1)) for c in caches]
    vals = [np.tile(c["qkv"]["v"], (C, 1, 1, 1)) for c in caches]
    row_len = np.repeat(lens, S)
    row_seq = np.tile(np.arange(S), C)
    out = xs[row_seq].copy()
    has_new = row_len < T
    first = np.argmax(logits[row_seq, np.clip(row_len - 1, 0, T - 1)], axis=-1)
    out[has_new, row_len[has_new]] = first[has_new]

    emb, pos_emb, head = _f64(P["emb.tok"]), _f64(P["emb.pos"]), _f64(P["head"])
    positions = np.arange(T)
    j = 0
    while True:
        n_active = int(np.count_nonzero(row_len + j < T - 1))
        if n_active == 0:
            break
        rows = np.arange(n_active)
        p = row_len[:n_active] + j
        h = emb[out[rows, p]] + pos_emb[p]
        span = int(p.max()) + 1
        hidden = (positions[None, :span] > p[:, None])[:, None, :]
        for i in range(cfg.n_layers):
            pre = f"blk{i}"
            a, _ = _layer_norm(h, P[f"{pre}.ln1.gain"], P[f"{pre}.ln1.bias"])
            q = _linear(a, P[f"{pre}.q"], _adapter(adapters, f"{pre}.q"))[0].reshape(n_active, H, dh)
            k = _linear(a, P[f"{pre}.k"], _adapter(adapters, f"{pre}.k"))[0].reshape(n_active, H, dh)
            v = _linear(a, P[f"{pre}.v"], _adapter(adapters, f"{pre}.v"))[0].reshape(n_active, H, dh)
            kc, vc = keys[i][:n_active, :, :span], vals[i][:n_active, :, :span]
            kc[rows, :, p] = k
            vc[rows, :, p] = v
            sc = (kc @ q[..., None])[..., 0] * scale
            sc = np.where(hidden, -np.inf, sc)
            sc = np.exp(sc - sc.max(axis=-1, keepdims=True))
            att = sc / sc.sum(axis=-1, keepdims=True)
            ctx = (att[:, :, None, :] @ vc)[:, :, 0].reshape(n_active, H * dh)
            h = h + _linear(ctx, P[f"{pre}.o"], _adapter(adapters, f"{pre}.o"))[0]
            a2, _ = _layer_norm(h, P[f"{pre}.ln2.gain"], P[f"{pre}.ln2.bias"])
            u = _linear(a2, P[f"{pre}.ffn.in"], _adapter(adapters, f"{pre}.ffn.in"))[0]
            h = h + _linear(_gelu(u)[0], P[f"{pre}.ffn.out"], _adapter(adapters, f"{pre}.ffn.out"))[0]
        hf, _ = _layer_norm(h, P["final_ln.gain"], P["final_ln.bias"])
        out[rows, p + 1] = np.argmax(hf @ head.T, axis=-1)
        j += 1
    return out
