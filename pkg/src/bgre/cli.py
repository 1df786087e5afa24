"""Command-line interface: ``bgre <command> [options]``.

Exit status is 0 on success, 1 on validation or usage errors and 2 on
numerical failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .dgp import DgpSpec, generate
from .errors import NumericalError, ValidationError
from .estimate import fit
from .experiment import ExperimentPlan, run_experiment
from .forecast import (clustering_metrics, diagnostics, estimation_metrics, forecast_metrics,
                       format_table, hpdi_rows, point_forecast, predictive_draws)
from .gibbs import PosteriorDraws
from .panel import (ModelSpec, TrueParams, read_json, read_panel_csv, write_json,
                    write_panel_csv)
from .sgp import read_a_table

log = logging.getLogger("bgre")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out(args) -> Path:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_chain(args) -> PosteriorDraws:
    if not args.chain:
        raise ValidationError("--chain is required")
    return PosteriorDraws.from_ndjson(args.chain)


def _load_data(args):
    if not args.data:
        raise ValidationError("--data is required")
    return read_panel_csv(args.data, holdout_last=args.holdout_last)


def cmd_simulate(args) -> int:
    spec = DgpSpec(dgp_id=args.dgp, n_units=args.n_units, n_periods=args.n_periods,
                   k0=args.k0, seed=args.seed, initial=args.initial)
    from .rng import make_rng
    data, truth = generate(spec, make_rng(args.seed))
    out = _out(args)
    write_panel_csv(out / "panel.csv", data)
    write_json(out / "truth.json", {"dgp": spec.to_dict(), **truth.to_dict()})
    print(f"wrote {out / 'panel.csv'} and {out / 'truth.json'}")
    return 0


def cmd_fit(args) -> int:
    data = _load_data(args)
    spec = ModelSpec.from_name(args.estimator)
    table = read_a_table(args.a_table) if args.a_table else None
    truth = None
    if spec.membership_prior == "sgp" and table is None and args.truth:
        truth = TrueParams.from_dict(read_json(args.truth))
    draws = fit(data, spec, m_iter=args.m_iter, burn_in=args.burn_in, thin=args.thin,
                seed=args.seed, sgp_table=table, truth=truth)
    out = _out(args)
    draws.to_ndjson(out / "chain.ndjson")
    rho = np.array([s.rho for s in draws.states])
    ks = np.array([s.k_nonempty for s in draws.states])
    summary = {"estimator": spec.label, "retained": len(draws),
               "rho_mean": float(np.nanmean(rho)) if np.any(np.isfinite(rho)) else None,
               "avg_k": float(ks.mean())}
    write_json(out / "fit_summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_forecast(args) -> int:
    data = _load_data(args)
    draws = _load_chain(args)
    pred = predictive_draws(draws, data, seed=args.seed)
    iv = hpdi_rows(pred.draws, args.level)
    df = pd.DataFrame({"unit": np.arange(1, data.n_units + 1), "mean": point_forecast(pred),
                       "lower": iv[:, 0], "upper": iv[:, 1]})
    out = _out(args)
    df.to_csv(out / "forecast.csv", index=False, float_format="%.17g")
    print(f"wrote {out / 'forecast.csv'}")
    return 0


def cmd_evaluate(args) -> int:
    data = _load_data(args)
    if data.holdout is None:
        raise ValidationError("evaluate needs realised y_{T+1}; pass --holdout-last")
    draws = _load_chain(args)
    pred = predictive_draws(draws, data, seed=args.seed)
    report = forecast_metrics(pred, data.holdout, args.level)
    out = _out(args)
    if args.truth:
        truth = TrueParams.from_dict(read_json(args.truth))
        report = report.merged(estimation_metrics(draws, truth, args.level))
        acc, sim = clustering_metrics(draws, truth)
        write_json(out / "accuracy.json", {str(k + 1): v for k, v in acc.items()})
        np.savetxt(out / "similarity.csv", sim, delimiter=",", fmt="%.6g")
    label = draws.meta.get("estimator", "estimator")
    write_json(out / "metrics.json", report.to_dict())
    (out / "metrics.txt").write_text(format_table({label: report}))
    print(format_table({label: report}), end="")
    return 0


def cmd_mc_experiment(args) -> int:
    if args.plan_config is None:
        raise ValidationError("mc-experiment needs --config <plan.json>")
    plan = ExperimentPlan.from_dict(args.plan_config)
    res = run_experiment(plan, threads=args.threads, output_dir=args.output)
    print(res.table(), end="")
    if res.n_failed:
        print(f"{res.n_failed} of {plan.replications} replications failed")
    return 0


def cmd_diagnostics(args) -> int:
    draws = _load_chain(args)
    d = diagnostics(draws, args.param, args.max_lag)
    out = _out(args)
    pd.DataFrame({"iteration": np.arange(1, d.trace.size + 1), "value": d.trace,
                  "cumulative_mean": d.cumulative_mean}).to_csv(
        out / f"trace_{args.param}.csv", index=False, float_format="%.17g")
    pd.DataFrame({"lag": np.arange(d.acf.size), "acf": d.acf}).to_csv(
        out / f"acf_{args.param}.csv", index=False, float_format="%.17g")
    if d.degenerate:
        print(f"{args.param} is constant; autocorrelations reported as 0")
    print(f"wrote trace and acf tables for {args.param} to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON file; mc-experiment reads it as the plan, "
                        "other commands as option defaults")
    common.add_argument("--output", default=".")
    common.add_argument("--threads", type=int, default=1)

    p = _Parser(prog="bgre", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="generate a panel and its truth")
    s.add_argument("--dgp", type=int, default=1)
    s.add_argument("--n-units", type=int, default=100)
    s.add_argument("--n-periods", type=int, default=11)
    s.add_argument("--k0", type=int, default=4)
    s.add_argument("--initial", default=None)
    s.set_defaults(func=cmd_simulate)

    def data_opts(q):
        q.add_argument("--data")
        q.add_argument("--holdout-last", action="store_true",
                       help="treat the last period as y_{T+1}")

    f = sub.add_parser("fit", parents=[common], help="run one estimator")
    data_opts(f)
    f.add_argument("--estimator", default="ti-homo")
    f.add_argument("--m-iter", type=int, default=3000)
    f.add_argument("--burn-in", type=int, default=1000)
    f.add_argument("--thin", type=int, default=1)
    f.add_argument("--a-table", help="SGP table CSV (unit,g1..gKp)")
    f.add_argument("--truth", help="truth JSON, used for SGP scenario tables")
    f.set_defaults(func=cmd_fit)

    fc = sub.add_parser("forecast", parents=[common], help="point and HPDI forecasts")
    data_opts(fc)
    fc.add_argument("--chain")
    fc.add_argument("--level", type=float, default=0.95)
    fc.set_defaults(func=cmd_forecast)

    e = sub.add_parser("evaluate", parents=[common], help="score a chain against the holdout")
    data_opts(e)
    e.add_argument("--chain")
    e.add_argument("--truth")
    e.add_argument("--level", type=float, default=0.95)
    e.set_defaults(func=cmd_evaluate)

    m = sub.add_parser("mc-experiment", parents=[common], help="run a Monte Carlo plan")
    m.set_defaults(func=cmd_mc_experiment)

    d = sub.add_parser("diagnostics", parents=[common], help="trace, running mean, ACF")
    d.add_argument("--chain")
    d.add_argument("--param", default="rho")
    d.add_argument("--max-lag", type=int, default=50)
    d.set_defaults(func=cmd_diagnostics)
    return p


def _apply_config(parser, args, argv):
    args.plan_config = None
    if not args.config:
        return args
    cfg = read_json(args.config)
    if args.command == "mc-experiment":
        args.plan_config = cfg
        return args
    for key, val in cfg.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise UsageError(f"unknown config key {key!r}")
        # explicit command-line flags win over the config file
        if f"--{dest.replace('_', '-')}" not in argv:
            setattr(args, dest, val)
    return args


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: simulate, fit, forecast, evaluate, "
                             "mc-experiment, diagnostics")
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        args = _apply_config(parser, args, argv)
        return args.func(args)
    except UsageError as exc:
        print(f"bgre: usage error: {exc}", file=sys.stderr)
        return 1
    except ValidationError as exc:
        print(f"bgre: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"bgre: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"bgre: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
