"""Command-line entry points.

Verbs: gen-data, train, eval, sweep-alpha, ablate.
Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import load_run_config
from .data import SynthSpec, generate_synthetic, preset_spec
from .errors import ConfigError, DataError, NumericError
from .train import (
    ABLATION_VARIANTS,
    ablate,
    evaluate_checkpoint,
    parse_alpha_values,
    sweep_alpha,
    train_run,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crab",
        description="Bimodal emotion classifier with multi-layer contrastive supervision",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic bimodal dataset")
    src = gen.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", type=Path, help="JSON file with a generator spec")
    src.add_argument("--preset", choices=["meld-like", "iemocap-like", "balanced"])
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--classes", type=int, default=4, help="class count for the balanced preset")
    gen.add_argument("--train-count", type=int, default=None)
    gen.add_argument("--dev-count", type=int, default=None)
    gen.add_argument("--test-count", type=int, default=None)

    tr = sub.add_parser("train", help="train a model from a JSON config")
    tr.add_argument("--config", type=Path, required=True)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--manifest", type=Path, required=True)
    ev.add_argument("--split", choices=["train", "dev", "test"], required=True)
    ev.add_argument("--batch-size", type=int, default=32)
    ev.add_argument("--out", type=Path, default=None)

    sw = sub.add_parser("sweep-alpha", help="train one run per alpha value")
    sw.add_argument("--config", type=Path, required=True)
    sw.add_argument("--alphas", default="0.25:3.0:0.25",
                    help='inclusive range "start:stop:step" or comma list')
    sw.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    ab = sub.add_parser("ablate", help="run training-objective ablations")
    ab.add_argument("--config", type=Path, required=True)
    ab.add_argument("--variants", default=",".join(ABLATION_VARIANTS),
                    help=f"comma list from {ABLATION_VARIANTS}")
    ab.add_argument("--seeds", default=None, help="comma list of seeds (default: config seed)")
    ab.add_argument("--jobs", type=int, default=1)
    return parser


def _cmd_gen_data(args) -> int:
    if args.spec is not None:
        if not args.spec.exists():
            raise ConfigError(f"spec file not found: {args.spec}")
        try:
            obj = json.loads(args.spec.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.spec}: invalid JSON: {e}") from e
        obj.setdefault("seed", args.seed)
        spec = SynthSpec.from_json_dict(obj)
    else:
        overrides = {}
        counts = dict(train=args.train_count, dev=args.dev_count, test=args.test_count)
        if any(v is not None for v in counts.values()):
            base = preset_spec(args.preset, seed=args.seed, num_classes=args.classes)
            merged = dict(base.counts)
            for split, v in counts.items():
                if v is not None:
                    merged[split] = v
            overrides["counts"] = merged
        spec = preset_spec(args.preset, seed=args.seed, num_classes=args.classes, **overrides)
    generated = generate_synthetic(spec, args.out)
    print(f"wrote {len(generated.records)} utterances")
    print(f"manifest: {generated.manifest_path}")
    print(f"sidecar:  {generated.sidecar_path}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    result = train_run(cfg)
    print(f"run log: {result.run_log_path}")
    print(f"best checkpoint (dev UAR {result.best_dev_uar:.4f} @ epoch {result.best_epoch}): "
          f"{result.best_checkpoint}")
    for split, m in result.final_metrics.items():
        print(f"{split}: WAR {m['war']:.4f}  UAR {m['uar']:.4f}  Macro-F1 {m['macro_f1']:.4f}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    rep, _cm, out_dir = evaluate_checkpoint(
        args.checkpoint, args.manifest, args.split, batch_size=args.batch_size, out_dir=args.out
    )
    print(f"{args.split}: WAR {rep.war:.4f}  UAR {rep.uar:.4f}  Macro-F1 {rep.macro_f1:.4f}")
    print(f"reports: {out_dir}")
    return EXIT_OK


def _cmd_sweep_alpha(args) -> int:
    cfg = load_run_config(args.config)
    alphas = parse_alpha_values(args.alphas)
    summary = sweep_alpha(cfg, alphas, jobs=args.jobs)
    print(f"swept {len(alphas)} alpha values")
    print(f"summary: {summary}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    seeds = None
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seeds must be a comma list of integers, got {args.seeds!r}")
    table = ablate(cfg, variants, seeds=seeds, jobs=args.jobs)
    print(f"ablation table: {table}")
    return EXIT_OK


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep-alpha": _cmd_sweep_alpha,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
