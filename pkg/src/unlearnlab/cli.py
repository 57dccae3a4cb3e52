"""Command line driver.

Every subcommand works inside one run directory (``--out``)::

    ulab gen      --out run/ --seed 3         # corpora.ulab
    ulab pretrain --out run/                  # model.ulab (+ thresholds)
    ulab unlearn  --out run/ --method ihl-retain --adapter flora
    ulab eval     --out run/ [--model path]
    ulab fisher   --out run/

Exit status is 0 on success, 2 when unlearning hits the epoch cap and 1 on
any error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import adapters as ad
from . import harness as hx

log = logging.getLogger("unlearnlab")

EXIT_OK, EXIT_ERROR, EXIT_NOT_UNLEARNED = 0, 1, 2
CORPORA, MODEL, UNLEARNED = "corpora.ulab", "model.ulab", "unlearned.ulab"


def _shared(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON file of ExperimentConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("."), help="run directory")
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--method", choices=tuple(hx.METHODS))
    p.add_argument("--adapter", choices=("none", "lora", "flora"))
    p.add_argument("--rank", type=int)
    p.add_argument("--targets", help="comma list of q,k,v,o,ffn")
    p.add_argument("--metric-n", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--n-train", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ulab", description="desk-scale machine unlearning experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("gen", "synthesise corpora and pick the forget set"),
        ("pretrain", "train until the forget set is memorized"),
        ("unlearn", "run an unlearning method with per-epoch stopping checks"),
        ("eval", "evaluate a checkpoint against the validation thresholds"),
        ("fisher", "dump forget and retain Fisher estimates"),
    ):
        p = sub.add_parser(name, help=help_)
        _shared(p)
        if name == "eval":
            p.add_argument("--model", type=Path, help="checkpoint to evaluate (default: run/model.ulab)")
    return parser


def resolve_config(args) -> hx.ExperimentConfig:
    """Defaults, then the ``--config`` file, then explicit flags."""
    fields = {}
    if args.config is not None:
        fields.update(json.loads(args.config.read_text()))
    cfg = hx.ExperimentConfig.from_dict(fields)
    over = {}
    for flag, key in (("seed", "seed"), ("precision", "precision"), ("method", "method"),
                      ("metric_n", "metric_n"), ("max_epochs", "max_unlearn_epochs"),
                      ("lr", "lr"), ("n_train", "n_train")):
        if getattr(args, flag) is not None:
            over[key] = getattr(args, flag)
    if args.adapter is not None or args.rank is not None or args.targets is not None:
        base = cfg.adapter or ad.AdapterSpec()
        kind = args.adapter or ("none" if cfg.adapter is None else ("flora" if base.init == "flora" else "lora"))
        if kind == "none":
            over["adapter"] = None
        else:
            over["adapter"] = ad.AdapterSpec(
                targets=ad.parse_targets(args.targets) if args.targets else base.targets,
                rank=args.rank if args.rank is not None else base.rank,
                init="flora" if kind == "flora" else "default",
            )
    return dataclasses.replace(cfg, **over)


def _corpora(cfg, out: Path):
    path = out / CORPORA
    if path.exists():
        return hx.load_corpora(path)
    corpora = hx.prepare_corpora(cfg)
    hx.save_corpora(path, corpora, {"config": cfg.to_dict()})
    return corpora


def _pretrained(out: Path):
    params, _, meta = hx.load_model(out / MODEL)
    return params, hx.Thresholds(**meta["thresholds"]), meta


def cmd_gen(cfg, args) -> int:
    corpora = hx.prepare_corpora(cfg)
    hx.save_corpora(args.out / CORPORA, corpora, {"config": cfg.to_dict()})
    print(f"wrote {args.out / CORPORA}: {len(corpora.train)} train, {len(corpora.forget)} forget")
    return EXIT_OK


def cmd_pretrain(cfg, args) -> int:
    corpora = _corpora(cfg, args.out)
    res = hx.pretrain(cfg, corpora, args.out / MODEL)
    b = res.before
    print(f"memorized after {res.epochs} epochs: MA {b.ma:.4f} EL {b.el_n:.4f} "
          f"(thresholds MA {b.ma_threshold:.4f} EL {b.el_threshold:.4f})")
    return EXIT_OK


def cmd_unlearn(cfg, args) -> int:
    corpora = _corpora(cfg, args.out)
    params, thresholds, meta = _pretrained(args.out)
    from .metrics import MetricReport

    before = MetricReport(**meta["before"]) if "before" in meta else None
    report = hx.unlearn(cfg, params, corpora, thresholds, before)
    hx.write_reports(args.out, report)
    hx.save_model(args.out / UNLEARNED, report.final_params, report.final_adapters,
                  {"config": cfg.to_dict(), "thresholds": dataclasses.asdict(thresholds)})
    f = report.final
    status = f"unlearned at epoch {report.epochs_to_unlearn}" if report.succeeded else "FAILED (epoch cap)"
    print(f"{cfg.method}/{report.adapter}: {status}; EL {f.el_n:.4f} MA {f.ma:.4f} "
          f"ppl_retain {f.ppl_retain:.3f}")
    return EXIT_OK if report.succeeded else EXIT_NOT_UNLEARNED


def cmd_eval(cfg, args) -> int:
    corpora = _corpora(cfg, args.out)
    _, thresholds, _ = _pretrained(args.out)
    params, adapters, _ = hx.load_model(args.model or args.out / MODEL)
    rep = hx.evaluate(params, adapters, corpora, thresholds.n, thresholds,
                      eval_retain=hx._eval_retain(corpora, cfg))
    print(json.dumps(rep.to_dict(), indent=2))
    return EXIT_OK


def cmd_fisher(cfg, args) -> int:
    corpora = _corpora(cfg, args.out)
    params, _, _ = _pretrained(args.out)
    spec = cfg.adapter or ad.AdapterSpec()
    names = spec.tensor_names(params.config)
    retain = corpora.retain.sequences[: cfg.fisher_retain_count]
    for role, seqs in (("forget", corpora.forget.sequences), ("retain", retain)):
        path = args.out / f"fisher_{role}.ulab"
        hx.save_fisher(path, ad.estimate_fisher(params, seqs, names), {"role": role})
        print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "unlearn": cmd_unlearn,
            "eval": cmd_eval, "fisher": cmd_fisher}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except Exception as e:  # noqa: BLE001 - any failure maps to exit status 1
        log.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
