"""Experiment driver: pretrain to memorization, unlearn, evaluate, report."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adapters as ad
from . import checkpoint, metrics
from . import model as md
from .corpus import Corpora, Corpus, gen_corpus, select_forget
from .metrics import MetricReport, SetStats
from .numerics import NumericalError
from .objectives import Kind, ObjectiveSpec

log = logging.getLogger(__name__)

CSV_COLUMNS = ("epoch", "el_n", "ma", "ppl_retain", "ppl_heldout", "loss_forget", "loss_retain", "unlearned")
METHODS = {"ga": Kind.GA, "gd": Kind.GD, "ihl": Kind.IHL, "ihl-retain": Kind.IHL_RETAIN}


class MemorizationError(RuntimeError):
    """Pretraining hit its epoch cap before the forget set was memorized."""

    def __init__(self, epochs: int, final_ma: float):
        super().__init__(f"forget-set MA {final_ma:.3f} below target after {epochs} epochs")
        self.final_ma = final_ma


@dataclass
class ExperimentConfig:
    model: md.ModelConfig = field(default_factory=md.ModelConfig)
    adapter: ad.AdapterSpec | None = None
    method: str = "ihl-retain"
    forget_count: int = 32
    seq_len: int = 64
    lr: float = 1e-3
    max_unlearn_epochs: int = 20
    metric_n: int = 4
    seed: int = 0
    precision: str = "f64"
    n_train: int = 2048
    n_val: int = 32
    n_heldout: int = 32
    batch_size: int = 8
    pretrain_lr: float = 2e-3
    pretrain_batch_size: int = 32
    pretrain_max_epochs: int = 200
    memorization_target: float = 0.95
    eval_retain_count: int = 64
    fisher_retain_count: int = 128

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = md.ModelConfig(**self.model)
        if isinstance(self.adapter, dict):
            self.adapter = ad.AdapterSpec(**self.adapter)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.forget_count > self.n_train:
            raise ValueError("forget_count exceeds the training set")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be f32 or f64")
        if self.seq_len > self.model.max_seq:
            raise ValueError("seq_len exceeds the model's max_seq")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    @property
    def objective(self) -> ObjectiveSpec:
        return ObjectiveSpec(METHODS[self.method])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if d.get("adapter") and "targets" in d["adapter"]:
            d["adapter"] = {**d["adapter"], "targets": tuple(d["adapter"]["targets"])}
        return cls(**d)


def prepare_corpora(config: ExperimentConfig) -> Corpora:
    """Generate corpora and designate the forget set, both from ``config.seed``."""
    c = gen_corpus(config.seed, config.n_train, config.n_val, config.seq_len,
                   config.model.vocab_size, config.n_heldout)
    _, _, idx = select_forget(c.train, config.forget_count, config.seed)
    return c.with_forget(idx)


def _eval_retain(corpora: Corpora, config: ExperimentConfig) -> Corpus:
    r = corpora.retain
    return Corpus(r.sequences[: config.eval_retain_count], "retain")


@dataclass(frozen=True)
class Thresholds:
    """Validation EL_n / MA, measured once on the pretrained model."""

    el: float
    ma: float
    n: int

    @property
    def stats(self) -> SetStats:
        return SetStats(self.el, self.ma, self.n)


def validation_thresholds(params, corpora: Corpora, n: int) -> Thresholds:
    s = metrics.set_stats(params, None, corpora.validation, n)
    return Thresholds(s.el, s.ma, n)


def evaluate(params, adapters, corpora: Corpora, n: int, thresholds: Thresholds,
             epoch: int = 0, eval_retain: Corpus | None = None,
             loss_forget: float = float("nan"), loss_retain: float = float("nan")) -> MetricReport:
    """EL_n and MA over the forget set, perplexities, and the stopping verdict."""
    forget = metrics.set_stats(params, adapters, corpora.forget, n)
    retain = corpora.retain if eval_retain is None else eval_retain
    return MetricReport(
        epoch=epoch,
        n=n,
        el_n=forget.el,
        ma=forget.ma,
        ppl_retain=metrics.perplexity(params, adapters, retain),
        ppl_heldout=metrics.perplexity(params, adapters, corpora.heldout),
        el_threshold=thresholds.el,
        ma_threshold=thresholds.ma,
        unlearned=metrics.stopping_criterion(forget, thresholds.stats),
        loss_forget=loss_forget,
        loss_retain=loss_retain,
    )


@dataclass
class PretrainResult:
    params: md.ModelParams
    thresholds: Thresholds
    before: MetricReport
    epochs: int
    history: list[float]


def pretrain(config: ExperimentConfig, corpora: Corpora, checkpoint_path=None) -> PretrainResult:
    """Train with the LM loss until forget-set MA reaches the memorization target."""
    params = md.init_params(dataclasses.replace(config.model, seed=config.seed), config.dtype)
    state = md.AdamState()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5054]))
    X = corpora.train.sequences
    lm = ObjectiveSpec(Kind.LM)
    forget = corpora.forget
    history = []
    ma = 0.0
    for epoch in range(1, config.pretrain_max_epochs + 1):
        perm = rng.permutation(len(X))
        for i in range(0, len(X), config.pretrain_batch_size):
            _, g = md.grads(params, None, lm, md.Batch(X[perm[i:i + config.pretrain_batch_size]]))
            params, _, state = md.step(params, None, g, state, config.pretrain_lr)
        ma = float(np.mean([metrics.ma(params, None, s) for s in forget]))
        history.append(ma)
        log.info("pretrain epoch %d: forget MA %.3f", epoch, ma)
        if ma >= config.memorization_target:
            break
    else:
        raise MemorizationError(config.pretrain_max_epochs, ma)
    thresholds = validation_thresholds(params, corpora, config.metric_n)
    before = evaluate(params, None, corpora, config.metric_n, thresholds,
                      eval_retain=_eval_retain(corpora, config))
    if checkpoint_path is not None:
        save_model(checkpoint_path, params, meta={
            "config": config.to_dict(),
            "thresholds": dataclasses.asdict(thresholds),
            "before": before.to_dict(),
        })
    return PretrainResult(params, thresholds, before, epoch, history)


# ---------------------------------------------------------------------------
# unlearning


@dataclass
class RunReport:
    method: str
    adapter: str
    epochs: list[MetricReport]
    epochs_to_unlearn: int | None
    trainable_param_fraction: float
    steps: int
    wall_clock_s: float
    before: MetricReport | None = None
    final_params: md.ModelParams | None = field(default=None, repr=False, compare=False)
    final_adapters: ad.AdapterSet | None = field(default=None, repr=False, compare=False)

    @property
    def final(self) -> MetricReport:
        return self.epochs[-1]

    @property
    def succeeded(self) -> bool:
        return self.epochs_to_unlearn is not None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.epochs:
            w.writerow([r.epoch, repr(r.el_n), repr(r.ma), repr(r.ppl_retain), repr(r.ppl_heldout),
                        repr(r.loss_forget), repr(r.loss_retain), int(r.unlearned)])
        return buf.getvalue()

    def summary(self) -> dict:
        f = self.final
        out = {
            "method": self.method,
            "adapter": self.adapter,
            "epochs_to_unlearn": self.epochs_to_unlearn if self.succeeded else "failed",
            "trainable_param_fraction": self.trainable_param_fraction,
            "final": {"el_n": f.el_n, "ma": f.ma, "ppl_retain": f.ppl_retain, "ppl_heldout": f.ppl_heldout},
            "thresholds": {"el": f.el_threshold, "ma": f.ma_threshold, "n": f.n},
            "steps": self.steps,
            "wall_clock_s": self.wall_clock_s,
            "epochs": [r.to_dict() for r in self.epochs],
        }
        if self.before is not None:
            out["before"] = self.before.to_dict()
        return out


def base_hash(params: md.ModelParams) -> str:
    h = hashlib.sha256()
    for name in sorted(params.tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()


def setup_adapters(config: ExperimentConfig, params: md.ModelParams, corpora: Corpora):
    """Attach adapters per ``config.adapter``; returns ``(params, adapters)``."""
    spec = config.adapter
    if spec is None:
        return params, None
    if spec.init == "default":
        return params, ad.attach_default(params, spec, config.seed)
    names = spec.tensor_names(params.config)
    retain = corpora.retain.sequences[: config.fisher_retain_count]
    f_forget = ad.estimate_fisher(params, corpora.forget, names)
    f_retain = ad.estimate_fisher(params, retain, names)
    return ad.attach_flora(params, spec, ad.relative_fisher(f_forget, f_retain))


def unlearn(config: ExperimentConfig, params: md.ModelParams, corpora: Corpora,
            thresholds: Thresholds, before: MetricReport | None = None) -> RunReport:
    """Run the unlearning loop with a stopping check after every epoch.

    One epoch is one pass over the forget set in batches of
    ``config.batch_size``; each step pairs its forget batch with the next
    retain batch from an independently cycling shuffled stream.
    """
    t0 = time.perf_counter()
    objective = config.objective
    n = config.metric_n
    eval_retain = _eval_retain(corpora, config)
    params, adapters = setup_adapters(config, params, corpora)
    forget = corpora.forget.sequences
    retain = corpora.retain.sequences
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x554C]))
    retain_order = rng.permutation(len(retain))
    retain_pos = 0
    state = md.AdamState()
    reports = [evaluate(params, adapters, corpora, n, thresholds, 0, eval_retain)]
    done_at = None
    steps = 0
    for epoch in range(1, config.max_unlearn_epochs + 1):
        perm = rng.permutation(len(forget))
        lf, lr_, nb = 0.0, 0.0, 0
        for i in range(0, len(forget), config.batch_size):
            xb = forget[perm[i:i + config.batch_size]]
            rb = None
            if objective.uses_retain:
                take = []
                while len(take) < len(xb):
                    if retain_pos == len(retain_order):
                        retain_order = rng.permutation(len(retain))
                        retain_pos = 0
                    take.append(retain_order[retain_pos])
                    retain_pos += 1
                rb = retain[np.array(take)]
            try:
                loss, g = md.grads(params, adapters, objective, md.Batch(xb, rb))
            except NumericalError as e:
                raise NumericalError(f"step {steps + 1} ({objective.kind.value}): {e}") from e
            params, adapters, state = md.step(params, adapters, g, state, config.lr)
            steps += 1
            lf += loss.forget_term
            lr_ += loss.retain_term
            nb += 1
        rep = evaluate(params, adapters, corpora, n, thresholds, epoch, eval_retain, lf / nb, lr_ / nb)
        reports.append(rep)
        log.info("epoch %d: EL %.4f MA %.4f ppl_retain %.3f unlearned=%s",
                 epoch, rep.el_n, rep.ma, rep.ppl_retain, rep.unlearned)
        if rep.unlearned:
            done_at = epoch
            break
    adapter_name = "none" if config.adapter is None else ("flora" if config.adapter.init == "flora" else "lora")
    return RunReport(
        method=config.method,
        adapter=adapter_name,
        epochs=reports,
        epochs_to_unlearn=done_at,
        trainable_param_fraction=md.trainable_fraction(params, adapters),
        steps=steps,
        wall_clock_s=time.perf_counter() - t0,
        before=before,
        final_params=params,
        final_adapters=adapters,
    )


# ---------------------------------------------------------------------------
# persistence


def save_model(path, params: md.ModelParams, adapters: ad.AdapterSet | None = None, meta: dict | None = None):
    tensors = dict(params.tensors)
    ad_meta = None
    if adapters is not None:
        for name, a in adapters.adapters.items():
            tensors[f"adapter/{name}/a"] = a.a
            tensors[f"adapter/{name}/b"] = a.b
        ad_meta = {"init": adapters.init, "compensated": list(adapters.compensated),
                   "targets": list(adapters.adapters)}
    checkpoint.save(path, tensors, {
        "kind": "model",
        "model_config": dataclasses.asdict(params.config),
        "adapters": ad_meta,
        **(meta or {}),
    })


def load_model(path) -> tuple[md.ModelParams, ad.AdapterSet | None, dict]:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "model":
        raise checkpoint.CheckpointError(f"{path} does not hold a model")
    cfg = md.ModelConfig(**meta["model_config"])
    base = {k: v for k, v in tensors.items() if not k.startswith("adapter/")}
    params = md.ModelParams(cfg, {k: base[k] for k in cfg.shapes()})
    adapters = None
    if meta.get("adapters"):
        am = meta["adapters"]
        ads = {n: ad.LoraAdapter(n, tensors[f"adapter/{n}/a"], tensors[f"adapter/{n}/b"]) for n in am["targets"]}
        adapters = ad.AdapterSet(ads, tuple(am["compensated"]), am["init"])
    return params, adapters, meta


def save_fisher(path, est: ad.FisherEstimate, meta: dict | None = None):
    checkpoint.save(path, est.sums, {"kind": "fisher", "n_examples": est.n_examples, **(meta or {})})


def load_fisher(path) -> ad.FisherEstimate:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "fisher":
        raise checkpoint.CheckpointError(f"{path} does not hold a Fisher estimate")
    return ad.FisherEstimate(tensors, int(meta["n_examples"]))


def save_corpora(path, corpora: Corpora, meta: dict | None = None):
    tensors = {
        "train": corpora.train.sequences,
        "validation": corpora.validation.sequences,
        "heldout": corpora.heldout.sequences,
        "successors": corpora.source.successors.astype(np.int64),
        "successor_probs": corpora.source.probs,
    }
    if corpora.forget_idx is not None:
        tensors["forget_idx"] = corpora.forget_idx
    checkpoint.save(path, tensors, {"kind": "corpora", **(meta or {})})


def load_corpora(path) -> Corpora:
    from .corpus import MarkovSource

    t, meta = checkpoint.load(path)
    if meta.get("kind") != "corpora":
        raise checkpoint.CheckpointError(f"{path} does not hold corpora")
    c = Corpora(Corpus(t["train"], "train"), Corpus(t["validation"], "validation"),
                Corpus(t["heldout"], "heldout"), MarkovSource(t["successors"], t["successor_probs"]))
    return c.with_forget(t["forget_idx"]) if "forget_idx" in t else c


def write_reports(out_dir, report: RunReport) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    (out / "summary.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True))
