"""Command-line entry point.

Subcommands:

    generate-data --config C --out PATH   synthesize a dataset CSV (already
                                          split into train/val/test)
    run --config C --out-dir D            run the experiment matrix and
        [--strategy S] [--seed N]         write all reports; optional single
        [--desk-scale]                    strategy/seed override and the
                                          desk-scale preset
    evaluate --predictions CSV --out-dir D
                                          fairness metrics for an external
                                          (group,true_label,predicted_label)
                                          prediction log

The FEDFAIR_OUTPUT_DIR environment variable, when set, overrides any
configured or flagged output directory. Exit status is 0 on success and 1
with a one-line reason on stderr otherwise.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .data import generate_synthetic, split_dataset, write_dataset
from .errors import DimensionError, ParseError, TrainingDivergedError, ValidationError
from .federated import parse_strategy
from .harness import (
    OUTPUT_DIR_ENV,
    emit_reports,
    evaluate_predictions,
    parse_config,
    read_predictions,
    run_experiment,
)


def _resolve_out_dir(flag_value, config_value: str) -> str:
    env = os.environ.get(OUTPUT_DIR_ENV)
    if env:
        return env
    if flag_value is not None:
        return flag_value
    return config_value


def _cmd_generate_data(args) -> int:
    cfg = parse_config(args.config)
    ds = generate_synthetic(cfg.data)
    split_dataset(ds, seed=cfg.data.seed)
    write_dataset(ds, args.out)
    print(f"wrote {ds.num_samples} samples for {ds.num_clients} clients to {args.out}")
    return 0


def _cmd_run(args) -> int:
    cfg = parse_config(args.config, desk_scale=args.desk_scale)
    if args.strategy is not None:
        cfg = replace(cfg, strategies=(parse_strategy(args.strategy),))
    if args.seed is not None:
        if args.seed < 0:
            raise ValidationError("--seed must be nonnegative")
        cfg = replace(cfg, seeds=(args.seed,))
    out_dir = _resolve_out_dir(args.out_dir, cfg.output_dir)
    summary = run_experiment(cfg, out_dir=out_dir)
    emit_reports(summary, out_dir)
    print(f"ran {len(summary.results)} (strategy, seed) runs; reports in {out_dir}")
    return 0


def _cmd_evaluate(args) -> int:
    preds = read_predictions(args.predictions)
    out_dir = _resolve_out_dir(args.out_dir, "results")
    fairness = evaluate_predictions(preds, out_dir)
    print(
        f"evaluated {preds.groups.shape[0]} predictions over {len(fairness.groups)} groups; "
        f"reports in {out_dir}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedfair",
        description="Federated-learning fairness simulator",
        epilog=f"The {OUTPUT_DIR_ENV} environment variable overrides the output directory.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate-data", help="synthesize a dataset CSV")
    gen.add_argument("--config", required=True, help="experiment config file")
    gen.add_argument("--out", required=True, help="output dataset CSV path")
    gen.set_defaults(func=_cmd_generate_data)

    run = sub.add_parser("run", help="run the experiment matrix")
    run.add_argument("--config", required=True, help="experiment config file")
    run.add_argument("--out-dir", default=None, help="report directory (default from config)")
    run.add_argument("--strategy", default=None, help="run only this strategy, e.g. 'fedexp(m=2)'")
    run.add_argument("--seed", type=int, default=None, help="run only this seed")
    run.add_argument(
        "--desk-scale", action="store_true", help="apply the fast desk-scale preset"
    )
    run.set_defaults(func=_cmd_run)

    ev = sub.add_parser("evaluate", help="score an external prediction log")
    ev.add_argument("--predictions", required=True, help="CSV of group,true_label,predicted_label")
    ev.add_argument("--out-dir", default=None, help="report directory")
    ev.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ParseError, DimensionError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
