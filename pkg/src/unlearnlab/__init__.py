"""Machine unlearning at desk scale.

Pretrain a tiny decoder-only transformer until it memorizes a forget set,
then unlearn with gradient ascent, gradient difference or the inverted
hinge loss, optionally through low-rank adapters initialised from relative
Fisher information.
"""

from .adapters import AdapterSet, AdapterSpec, LoraAdapter, attach_default, attach_flora, flora_init, merge
from .harness import ExperimentConfig, RunReport, evaluate, prepare_corpora, pretrain, unlearn
from .metrics import MetricReport, el_n, ma, ngram_overlap, perplexity, stopping_criterion
from .model import ModelConfig, ModelParams, init_params
from .objectives import Kind, ObjectiveSpec, ga_logit_grad, ihl_logit_grad, ihl_loss

__version__ = "0.1.0"

__all__ = [
    "AdapterSet", "AdapterSpec", "ExperimentConfig", "Kind", "LoraAdapter", "MetricReport",
    "ModelConfig", "ModelParams", "ObjectiveSpec", "RunReport", "attach_default", "attach_flora",
    "el_n", "evaluate", "flora_init", "ga_logit_grad", "ihl_logit_grad", "ihl_loss", "init_params",
    "ma", "merge", "ngram_overlap", "perplexity", "prepare_corpora", "pretrain", "stopping_criterion",
    "unlearn",
]
