"""Command-line surface for reproducible batch runs.

Exit codes: 0 success, 2 validation/configuration failure, 3 numerical
failure. The environment variable POSTERIOR_STACK_SEED overrides the
default seed of every command.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import io as pio
from .ensemble import compute_intervals, validate
from .errors import (
    CapacityError,
    ConfigurationError,
    DimensionError,
    DomainError,
    EvaluationError,
    NumericalError,
    ParameterError,
    SchemaError,
    StackingError,
)
from .evaluation import baseline_comparison, evaluate, qmc_sample_mixture
from .intervals import IntervalFit, IntervalFitOptions, fit_intervals
from .mixture import FitOptions, MixtureFit, fit_local_mixture, fit_mixture
from .samples import AffineAggregator, SampleFitOptions, fit_sample_stacking
from .scores import HybridSpec
from .synthetic import SCENARIOS, generate, scenario_from_name

_CONFIG_EXIT = (
    ParameterError, ConfigurationError, SchemaError, DimensionError,
    DomainError, CapacityError, EvaluationError, FileNotFoundError,
)


def _default_seed() -> int:
    return int(os.environ.get("POSTERIOR_STACK_SEED", "0"))


def _objective_from_args(args) -> HybridSpec:
    name = args.objective
    if name == "log":
        return HybridSpec.log_score()
    if name == "rank":
        return HybridSpec.rank_distance()
    if name == "moment":
        return HybridSpec.moment()
    if name == "hybrid":
        return HybridSpec.hybrid(args.lambda_rank)
    raise ParameterError(f"unknown objective {name!r}")


def cmd_synth(args) -> int:
    scenario = scenario_from_name(
        args.scenario, n_sims=args.n, n_draws=args.s, seed=args.seed,
        split_fractions=(args.train_frac, args.val_frac, args.test_frac),
    )
    table, ensemble = generate(scenario)
    os.makedirs(args.out, exist_ok=True)
    pio.save_table(table, os.path.join(args.out, "table.jsonl"))
    pio.save_ensemble(
        ensemble,
        os.path.join(args.out, "draws.jsonl"),
        os.path.join(args.out, "logq.jsonl"),
    )
    meta = scenario.to_dict()
    meta["config_hash"] = pio.config_hash(meta)
    pio.atomic_write(
        os.path.join(args.out, "scenario.json"),
        json.dumps(meta, indent=2, sort_keys=True) + "\n",
    )
    print(f"wrote table/draws/logq for scenario {args.scenario!r} to {args.out}")
    return 0


def _load_inputs(args):
    table = pio.load_table(args.table)
    ensemble = pio.load_ensemble(args.draws, getattr(args, "logq", None))
    if ensemble.d != table.d:
        raise SchemaError(
            f"parameter dimension mismatch: table d={table.d}, "
            f"ensemble d={ensemble.d}"
        )
    if ensemble.n_sims != table.n_sims:
        raise SchemaError(
            f"row count mismatch: table N={table.n_sims}, "
            f"ensemble N={ensemble.n_sims}"
        )
    return table, ensemble


def cmd_stack(args) -> int:
    table, ensemble = _load_inputs(args)
    config = {
        "command": "stack", "objective": args.objective,
        "lambda_rank": args.lambda_rank, "alpha": args.alpha,
        "seed": args.seed, "step": args.step, "max_iter": args.max_iter,
    }
    if args.objective == "interval":
        intervals = compute_intervals(ensemble, args.alpha)
        fit = fit_intervals(
            table, intervals,
            IntervalFitOptions(step=args.step, max_iter=args.max_iter),
        )
    elif args.objective == "sample":
        fit = fit_sample_stacking(
            table, ensemble, SampleFitOptions(seed=args.seed)
        ).aggregator
    else:
        objective = _objective_from_args(args)
        options = FitOptions(step=args.step, max_iter=args.max_iter)
        if args.local:
            fit = fit_local_mixture(table, ensemble, objective, options)
        else:
            fit = fit_mixture(table, ensemble, objective, options)
    pio.save_fit(fit, args.out, seed=args.seed, config=config)
    print(f"wrote fit artifact to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    table, ensemble = _load_inputs(args)
    fit = pio.load_fit(args.fit)
    config = {
        "command": "evaluate", "alpha": args.alpha, "bins": args.bins,
        "seed": args.seed,
    }
    report = evaluate(
        fit, table, ensemble, alpha=args.alpha, bins=args.bins, seed=args.seed
    )
    pio.save_report(report, args.out, config=config)
    print(f"wrote evaluation report to {args.out}")
    if args.csv:
        reports = baseline_comparison(
            fit, table, ensemble, alpha=args.alpha, bins=args.bins,
            seed=args.seed,
        )
        pio.atomic_write(args.csv, pio.report_csv(reports))
        print(f"wrote comparison table to {args.csv}")
    return 0


def cmd_sample(args) -> int:
    table, ensemble = _load_inputs(args)
    fit = pio.load_fit(args.fit)
    if isinstance(fit, IntervalFit):
        raise ConfigurationError(
            "interval fits define endpoints only and cannot be sampled"
        )
    rng = np.random.default_rng(args.seed)
    rows = np.arange(table.n_sims)
    lines = []
    if isinstance(fit, MixtureFit):
        if fit.is_local:
            row_w = fit.weights.weights_for(table.y)
        else:
            row_w = np.broadcast_to(
                fit.weights.w, (table.n_sims, fit.weights.w.size)
            )
        from .ensemble import SimplexWeights

        for n in rows:
            draws = qmc_sample_mixture(
                SimplexWeights(row_w[n]), ensemble.draws[:, n], args.s_out,
                rng=rng,
            )
            lines.append(json.dumps({"n": int(n), "draws": draws.tolist()}))
    elif isinstance(fit, AffineAggregator):
        from .samples import aggregate_draws

        if args.s_out > ensemble.n_draws:
            raise CapacityError(
                f"requested {args.s_out} draws but the ensemble holds "
                f"{ensemble.n_draws}"
            )
        aggregated = aggregate_draws(fit, ensemble)
        for n in rows:
            lines.append(json.dumps({
                "n": int(n), "draws": aggregated[n, : args.s_out].tolist(),
            }))
    else:
        raise ConfigurationError(f"cannot sample from {type(fit).__name__}")
    pio.atomic_write(args.out, "\n".join(lines) + "\n")
    meta = {
        "seed": args.seed, "s_out": args.s_out,
        "config_hash": pio.config_hash({
            "command": "sample", "s_out": args.s_out, "seed": args.seed,
        }),
    }
    pio.atomic_write(args.out + ".meta.json",
                     json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {args.s_out} draws per row to {args.out}")
    return 0


def cmd_validate(args) -> int:
    table, ensemble = _load_inputs(args)
    report = validate(table, ensemble)
    print(report)
    return 0 if report.ok else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="posterior-stack",
        description="Stack ensembles of approximate posterior inferences.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scenario dataset")
    p.add_argument("--scenario", required=True, choices=sorted(SCENARIOS))
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--s", type=int, default=100)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--train-frac", type=float, default=0.0)
    p.add_argument("--val-frac", type=float, default=0.8)
    p.add_argument("--test-frac", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stack", help="fit stacking weights")
    p.add_argument("--table", required=True)
    p.add_argument("--draws", required=True)
    p.add_argument("--logq")
    p.add_argument("--objective", required=True,
                   choices=["log", "rank", "moment", "hybrid", "interval",
                            "sample"])
    p.add_argument("--lambda-rank", type=float, default=100.0)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--local", action="store_true",
                   help="fit data-dependent local mixture weights")
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stack)

    p = sub.add_parser("evaluate", help="holdout evaluation of a fit")
    p.add_argument("--fit", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--draws", required=True)
    p.add_argument("--logq")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="also write the best/uniform/stacked table")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sample", help="sample draws from a stacked posterior")
    p.add_argument("--fit", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--draws", required=True)
    p.add_argument("--logq")
    p.add_argument("--s-out", type=int, required=True)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("validate", help="report invariant violations")
    p.add_argument("--table", required=True)
    p.add_argument("--draws", required=True)
    p.add_argument("--logq")
    p.set_defaults(func=cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    # Fill optimizer defaults per command where argparse left None.
    if getattr(args, "step", None) is None:
        args.step = 1e-2 if getattr(args, "objective", "") == "interval" else 0.1
    if getattr(args, "max_iter", None) is None:
        args.max_iter = 5000 if getattr(args, "objective", "") == "interval" else 2000
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except _CONFIG_EXIT as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StackingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
