"""Monte Carlo experiments: simulate, fit every estimator, score, aggregate.

Each replication draws from its own Philox stream keyed by
(master_seed, replication, stream), so results do not depend on the
number of worker processes or on completion order.
"""

from __future__ import annotations

import json
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dgp import DgpSpec, generate
from .errors import BgreError, ValidationError
from .estimate import fit
from .forecast import (MetricsReport, estimation_metrics, forecast_metrics, format_table,
                       predictive_draws)
from .panel import ModelSpec, write_json
from .rng import make_rng

log = logging.getLogger(__name__)

DATA_STREAM = 0
PREDICTIVE_STREAM = 1_000_000


@dataclass
class ExperimentPlan:
    dgp: DgpSpec = field(default_factory=DgpSpec)
    estimators: list = field(default_factory=lambda: [ModelSpec.from_name("ti-homo")])
    replications: int = 20
    m_iter: int = 3000
    burn_in: int = 1000
    thin: int = 1
    master_seed: int = 0
    output_dir: Optional[str] = None
    level: float = 0.95
    prior_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.replications < 1:
            raise ValidationError("replications must be at least 1")
        if self.m_iter < 1 or not 0 <= self.burn_in < self.m_iter or self.thin < 1:
            raise ValidationError("need m_iter >= 1, 0 <= burn_in < m_iter and thin >= 1")
        if not self.estimators:
            raise ValidationError("plan lists no estimators")
        self.estimators = [ModelSpec.from_name(e) if isinstance(e, str) else e
                           for e in self.estimators]
        labels = [e.label for e in self.estimators]
        if len(set(labels)) != len(labels):
            raise ValidationError(f"estimator labels must be unique, got {labels}")

    def to_dict(self) -> dict:
        return {
            "dgp": self.dgp.to_dict(),
            "estimators": [e.to_dict() for e in self.estimators],
            "replications": self.replications,
            "m_iter": self.m_iter,
            "burn_in": self.burn_in,
            "thin": self.thin,
            "master_seed": self.master_seed,
            "output_dir": self.output_dir,
            "level": self.level,
            "prior_overrides": self.prior_overrides,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        d = dict(d)
        known = {"dgp", "estimators", "replications", "m_iter", "burn_in", "thin",
                 "master_seed", "output_dir", "level", "prior_overrides"}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown plan fields: {sorted(unknown)}")
        dgp = d.pop("dgp", {})
        d["dgp"] = dgp if isinstance(dgp, DgpSpec) else DgpSpec.from_dict(dgp)
        ests = d.pop("estimators", ["ti-homo"])
        d["estimators"] = [ModelSpec.from_name(e) if isinstance(e, str)
                           else e if isinstance(e, ModelSpec) else ModelSpec.from_dict(e)
                           for e in ests]
        return cls(**d)


@dataclass
class ExperimentResult:
    plan: ExperimentPlan
    replications: list      # per replication: {"rep", "ok", "reports"|"error", "extra"}
    aggregate: dict         # label -> MetricsReport
    n_failed: int

    def per_rep(self, label: str, metric: str) -> np.ndarray:
        """Metric of one estimator across the successful replications."""
        return np.array([r["reports"][label][metric] for r in self.replications if r["ok"]],
                        dtype=float)

    def extra(self, label: str, key: str) -> list:
        return [r["extra"][label].get(key) for r in self.replications if r["ok"]]

    def aggregate_json(self) -> str:
        plan = self.plan.to_dict()
        plan.pop("output_dir")  # where results land does not change them
        body = {
            "plan": plan,
            "n_replications": self.plan.replications,
            "n_failed": self.n_failed,
            "estimators": {k: v.to_dict() for k, v in self.aggregate.items()},
        }
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        return format_table(self.aggregate)


def run_replication(plan: ExperimentPlan, rep: int) -> dict:
    """Simulate one panel, fit and score every estimator. Never raises on
    library errors: failures come back with ``ok=False``."""
    try:
        data, truth = generate(plan.dgp, make_rng(plan.master_seed, rep, DATA_STREAM))
        reports, extra = {}, {}
        for e, spec in enumerate(plan.estimators):
            draws = fit(data, spec, m_iter=plan.m_iter, burn_in=plan.burn_in, thin=plan.thin,
                        rng=make_rng(plan.master_seed, rep, 1 + e), truth=truth,
                        seed=plan.master_seed, prior_overrides=plan.prior_overrides)
            pred = predictive_draws(draws, data, spec,
                                    rng=make_rng(plan.master_seed, rep, PREDICTIVE_STREAM + e))
            rep_metrics = forecast_metrics(pred, data.holdout, plan.level).merged(
                estimation_metrics(draws, truth, plan.level, spec))
            reports[spec.label] = rep_metrics.to_dict()
            extra[spec.label] = {k: v for k, v in draws.meta.items() if k == "kmeans_k"}
        return {"rep": rep, "ok": True, "reports": reports, "extra": extra}
    except (BgreError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return {"rep": rep, "ok": False, "error": f"{type(exc).__name__}: {exc}",
                "trace": traceback.format_exc(limit=3)}


_ROOT_MEAN_SQUARE = ("rmsfe", "rho_rmse")


def aggregate_reports(reports: list) -> MetricsReport:
    """Fold per-replication reports: RMSEs as the root of the mean square,
    everything else as a plain mean; mode_k is the most frequent value
    (ties to the smaller)."""
    if not reports:
        return MetricsReport()
    out = {}
    for key in MetricsReport.__dataclass_fields__:
        vals = [r[key] for r in reports if r.get(key) is not None]
        if key == "mode_k":
            if vals:
                v, c = np.unique(np.asarray(vals, dtype=int), return_counts=True)
                out[key] = int(v[np.argmax(c)])
            else:
                out[key] = None
            continue
        if not vals:
            out[key] = float("nan")
        elif key in _ROOT_MEAN_SQUARE:
            out[key] = math.sqrt(math.fsum(float(x) ** 2 for x in vals) / len(vals))
        else:
            out[key] = math.fsum(float(x) for x in vals) / len(vals)
    return MetricsReport(**out)


def _run_one(args):
    plan_dict, rep = args
    return run_replication(ExperimentPlan.from_dict(plan_dict), rep)


def run_experiment(plan: ExperimentPlan, threads: int = 1,
                   output_dir: Optional[str] = None) -> ExperimentResult:
    """Run every replication (in parallel when ``threads`` > 1) and fold the
    reports in replication order."""
    if threads < 1:
        raise ValidationError("threads must be at least 1")
    reps = range(plan.replications)
    if threads == 1 or plan.replications == 1:
        results = [run_replication(plan, r) for r in reps]
    else:
        pd_ = plan.to_dict()
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_one, [(pd_, r) for r in reps]))
    results.sort(key=lambda r: r["rep"])
    failed = [r for r in results if not r["ok"]]
    for r in failed:
        log.warning("replication %d failed: %s", r["rep"], r["error"])
    aggregate = {}
    for spec in plan.estimators:
        aggregate[spec.label] = aggregate_reports(
            [r["reports"][spec.label] for r in results if r["ok"]])
    res = ExperimentResult(plan=plan, replications=results, aggregate=aggregate,
                           n_failed=len(failed))
    out = output_dir or plan.output_dir
    if out:
        write_results(res, out)
    return res


def write_results(res: ExperimentResult, output_dir) -> None:
    out = Path(output_dir)
    (out / "replications").mkdir(parents=True, exist_ok=True)
    for r in res.replications:
        body = {k: v for k, v in r.items() if k != "trace"}
        write_json(out / "replications" / f"rep_{r['rep']:04d}.json", body)
    (out / "aggregate.json").write_text(res.aggregate_json())
    (out / "aggregate.txt").write_text(res.table())
