"""Single entry point that fits any estimator by its :class:`ModelSpec`."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .baselines import fit_flat, fit_param, fit_pooled, fit_two_step
from .errors import ValidationError
from .gibbs import PosteriorDraws, run_chain
from .panel import ModelSpec, PanelData, PriorSpec, TrueParams, calibrate_priors


def scenario_table(spec: ModelSpec, truth: Optional[TrueParams]) -> np.ndarray:
    from .sgp import build_scenario
    if truth is None:
        raise ValidationError("SGP scenario tables need the true memberships")
    return build_scenario(spec.sgp_scenario, truth.membership, truth.k0)


def fit(data: PanelData, spec, priors: Optional[PriorSpec] = None, m_iter: int = 3000,
        burn_in: int = 1000, thin: int = 1, seed: int = 0,
        rng: Optional[np.random.Generator] = None, sgp_table: Optional[np.ndarray] = None,
        truth: Optional[TrueParams] = None, prior_overrides: Optional[dict] = None
        ) -> PosteriorDraws:
    """Fit ``spec`` (a ModelSpec or short name) and return its retained draws.

    SGP specs take their table from ``sgp_table``, else from the scenario id
    applied to ``truth``.
    """
    if isinstance(spec, str):
        spec = ModelSpec.from_name(spec)
    if priors is None:
        priors = calibrate_priors(data, spec, **(prior_overrides or {}))
    kw = dict(priors=priors, m_iter=m_iter, burn_in=burn_in, thin=thin, seed=seed, rng=rng)
    if spec.estimator == "pooled":
        return fit_pooled(data, **kw)
    if spec.estimator == "flat":
        return fit_flat(data, **kw)
    if spec.estimator == "param":
        return fit_param(data, **kw)
    if spec.estimator == "two-step-kmeans":
        return fit_two_step(data, spec, **kw)
    if spec.membership_prior == "sgp" and sgp_table is None and priors.sgp_table is None:
        if spec.sgp_scenario is None:
            raise ValidationError("SGP prior requires an a_table or a scenario id")
        sgp_table = scenario_table(spec, truth)
    return run_chain(data, spec, sgp_table=sgp_table, **kw)
