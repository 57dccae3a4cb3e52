"""End to end on a tiny model: memorize, then forget with IHL + FLoRA.

Takes a few seconds. The desk-scale version of this run lives in the
acceptance tests.
"""

import dataclasses

from unlearnlab import harness as hx
from unlearnlab.adapters import AdapterSpec

cfg = hx.ExperimentConfig.from_dict(dict(
    model=dict(vocab_size=32, d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq=16),
    seq_len=16, n_train=24, n_val=4, n_heldout=4, forget_count=4, batch_size=4,
    pretrain_lr=0.01, metric_n=2, lr=0.01, eval_retain_count=8, fisher_retain_count=8,
))

corpora = hx.prepare_corpora(cfg)
pre = hx.pretrain(cfg, corpora)
print(f"memorized in {pre.epochs} epochs: MA {pre.before.ma:.3f}, EL {pre.before.el_n:.3f}")
print(f"validation thresholds: MA {pre.thresholds.ma:.3f}, EL {pre.thresholds.el:.3f}")

for name, kw in {
    "GA": dict(method="ga"),
    "IHL+FLoRA": dict(method="ihl-retain", adapter=AdapterSpec(("Q", "V", "FFN_in", "FFN_out"), 2, "flora")),
}.items():
    run = hx.unlearn(dataclasses.replace(cfg, **kw), pre.params, corpora, pre.thresholds, pre.before)
    f = run.final
    print(f"{name:>10}: epochs {run.epochs_to_unlearn or 'failed'}, MA {f.ma:.3f}, "
          f"EL {f.el_n:.3f}, retain ppl {pre.before.ppl_retain:.2f} -> {f.ppl_retain:.2f}")

print()
print(run.to_csv())

# With only four validation sequences the MA threshold sits near zero, so
# the gentle IHL run may stop at the epoch cap here. It still forgets much
# of the forget set at a fraction of GA's damage to retain perplexity.
