"""Comparison estimators: Pooled, Flat, Param, and the two-step Kmeans-GRE.

All of them return :class:`PosteriorDraws` made of ordinary ``GibbsState``
snapshots, so forecasting and evaluation treat every estimator alike.
Their memberships are fixed by construction (``meta["sampler"] == "fixed"``)
and the slice/stick invariants do not apply.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .errors import SingularDesign, ValidationError
from .gibbs import (GibbsState, Model, PosteriorDraws, alpha_posterior_params, update_common,
                    update_locations, update_variances, sigma2_posterior_params)
from .kmeans import silhouette_select
from .panel import ModelSpec, PanelData, PriorSpec, calibrate_priors, pooled_ols, validate_panel
from .rng import make_rng


def _check_lengths(m_iter, burn_in, thin):
    if m_iter < 1 or not 0 <= burn_in < m_iter or thin < 1:
        raise ValidationError("need m_iter >= 1, 0 <= burn_in < m_iter and thin >= 1")


def _fixed_state(model: Model, membership: np.ndarray, n_groups: int) -> GibbsState:
    ols = pooled_ols(model.data, model.spec.time_varying_alpha)
    sizes = np.bincount(membership, minlength=n_groups).astype(float)
    probs = sizes / sizes.sum()
    return GibbsState(
        rho=ols.rho,
        beta=np.zeros((model.n if model.hetero_beta else 1, model.p)) + ols.beta,
        alpha_atoms=np.tile(ols.alpha, (n_groups, 1)),
        sigma2_atoms=np.full(n_groups, ols.sigma2),
        sticks=probs.copy(),
        group_probs=probs,
        membership=np.asarray(membership, dtype=np.int64).copy(),
        slice_u=np.zeros(model.n),
        concentration=0.0,
    )


def _drive(model, state, rng, m_iter, burn_in, thin, step, meta) -> PosteriorDraws:
    states = []
    for s in range(1, m_iter + 1):
        step(state, rng)
        if s > burn_in and (s - burn_in) % thin == 0:
            states.append(state.copy())
    meta = dict(meta, sampler="fixed", spec=model.spec.to_dict(), m_iter=m_iter,
                burn_in=burn_in, thin=thin)
    return PosteriorDraws(states=states, meta=meta)


def _shared_sigma2(state, model, rng):
    shape, rate = sigma2_posterior_params(state, model, None)
    state.sigma2_atoms = np.full(state.sigma2_atoms.size, rate / rng.gamma(shape))


def _setup(data, spec_name, priors, overrides=None):
    validate_panel(data)
    spec = ModelSpec.from_name(spec_name) if isinstance(spec_name, str) else spec_name
    if priors is None:
        priors = calibrate_priors(data, spec, **(overrides or {}))
    return spec, priors, Model(data, spec, priors)


def fit_pooled(data: PanelData, priors: Optional[PriorSpec] = None, m_iter: int = 3000,
               burn_in: int = 1000, thin: int = 1, seed: int = 0,
               rng: Optional[np.random.Generator] = None) -> PosteriorDraws:
    """One intercept and one variance shared by every unit."""
    _check_lengths(m_iter, burn_in, thin)
    spec, priors, model = _setup(data, "pooled", priors)
    rng = make_rng(seed) if rng is None else rng
    state = _fixed_state(model, np.zeros(model.n, dtype=np.int64), 1)

    def step(st, r):
        mean, cov = alpha_posterior_params(st, model, 0)
        st.alpha_atoms = (mean + np.linalg.cholesky(cov) @ r.standard_normal(mean.size))[None, :]
        _shared_sigma2(st, model, r)
        update_common(st, model, r)

    return _drive(model, state, rng, m_iter, burn_in, thin, step,
                  {"estimator": "Pooled", "seed": seed})


def flat_alpha_params(ytil: np.ndarray, sigma2: float):
    """Posterior of unit intercepts under p(alpha_i) ~ 1: N(mean_t ytil_it, sigma2 / T)."""
    t = ytil.shape[1]
    return ytil.mean(axis=1), np.full(ytil.shape[0], sigma2 / t)


def fit_flat(data: PanelData, priors: Optional[PriorSpec] = None, m_iter: int = 3000,
             burn_in: int = 1000, thin: int = 1, seed: int = 0,
             rng: Optional[np.random.Generator] = None) -> PosteriorDraws:
    """Unit-specific intercepts with a flat prior (each unit is its own group)."""
    _check_lengths(m_iter, burn_in, thin)
    spec, priors, model = _setup(data, "flat", priors)
    if model.t < 2:
        raise SingularDesign("flat intercepts need at least two periods per unit")
    rng = make_rng(seed) if rng is None else rng
    state = _fixed_state(model, np.arange(model.n), model.n)

    def step(st, r):
        mean, var = flat_alpha_params(model.ytilde(st), float(st.sigma2_atoms[0]))
        st.alpha_atoms = (mean + np.sqrt(var) * r.standard_normal(model.n))[:, None]
        _shared_sigma2(st, model, r)
        update_common(st, model, r)

    return _drive(model, state, rng, m_iter, burn_in, thin, step,
                  {"estimator": "Flat", "seed": seed})


def param_mu_params(alpha: np.ndarray, pi2: float, m: float, v: float):
    """Normal posterior (mean, var) of mu given alpha and pi2."""
    n = alpha.size
    prec = 1.0 / v + n
    return (m / v + alpha.sum()) / prec, pi2 / prec


def param_pi2_params(alpha: np.ndarray, mu: float, m: float, v: float, nu: float, delta: float):
    """Inverse-gamma (shape, rate) of pi2 given alpha and mu."""
    n = alpha.size
    ss = float(np.sum((alpha - mu) ** 2))
    return (nu + n + 1.0) / 2.0, (delta + (mu - m) ** 2 / v + ss) / 2.0


def param_alpha_params(ytil: np.ndarray, sigma2: float, mu: float, pi2: float):
    t = ytil.shape[1]
    prec = 1.0 / pi2 + t / sigma2
    return (mu / pi2 + ytil.sum(axis=1) / sigma2) / prec, np.full(ytil.shape[0], 1.0 / prec)


def fit_param(data: PanelData, priors: Optional[PriorSpec] = None, m_iter: int = 3000,
              burn_in: int = 1000, thin: int = 1, seed: int = 0,
              rng: Optional[np.random.Generator] = None) -> PosteriorDraws:
    """alpha_i ~ N(mu, pi2) with mu | pi2 ~ N(m, v pi2), pi2 ~ IG(nu/2, delta/2)."""
    _check_lengths(m_iter, burn_in, thin)
    spec, priors, model = _setup(data, "param", priors)
    rng = make_rng(seed) if rng is None else rng
    state = _fixed_state(model, np.arange(model.n), model.n)
    m, v, nu, delta = priors.param_m, priors.param_v, priors.param_nu, priors.param_delta
    state.extras = {"mu": m, "pi2": delta / nu}

    def step(st, r):
        mean, var = param_alpha_params(model.ytilde(st), float(st.sigma2_atoms[0]),
                                       st.extras["mu"], st.extras["pi2"])
        alpha = mean + np.sqrt(var) * r.standard_normal(model.n)
        st.alpha_atoms = alpha[:, None]
        mu_mean, mu_var = param_mu_params(alpha, st.extras["pi2"], m, v)
        mu = mu_mean + math.sqrt(mu_var) * r.standard_normal()
        shape, rate = param_pi2_params(alpha, mu, m, v, nu, delta)
        st.extras = {"mu": float(mu), "pi2": float(rate / r.gamma(shape))}
        _shared_sigma2(st, model, r)
        update_common(st, model, r)

    return _drive(model, state, rng, m_iter, burn_in, thin, step,
                  {"estimator": "Param", "seed": seed, "k_override": 1})


FEATURES = ("levels", "residualized")


def two_step_features(data: PanelData, kind: str = "levels") -> np.ndarray:
    """Per-unit clustering features.

    ``levels`` stacks the observed path y_i with the covariates x_i;
    ``residualized`` uses the T-vector y_i - rho_OLS y_{-1,i}.
    """
    if kind == "levels":
        parts = [data.y_obs]
        if data.n_covariates:
            parts.append(data.x.reshape(data.n_units, -1))
        return np.hstack(parts)
    if kind == "residualized":
        rho = pooled_ols(data, False).rho
        return data.y_obs - rho * data.y_lag
    raise ValidationError(f"unknown feature kind {kind!r}; valid: {FEATURES}")


def fit_fixed_groups(data: PanelData, spec: ModelSpec, membership: np.ndarray,
                     priors: Optional[PriorSpec] = None, m_iter: int = 3000,
                     burn_in: int = 1000, thin: int = 1, seed: int = 0,
                     rng: Optional[np.random.Generator] = None, meta: Optional[dict] = None
                     ) -> PosteriorDraws:
    """Grouped sampler (atoms, variances, rho, beta) with memberships held fixed."""
    _check_lengths(m_iter, burn_in, thin)
    if priors is None:
        priors = calibrate_priors(data, spec)
    model = Model(validate_panel(data), spec, priors)
    membership = np.asarray(membership, dtype=np.int64)
    if membership.shape != (model.n,) or membership.min() < 0:
        raise ValidationError("membership must be a nonnegative label per unit")
    rng = make_rng(seed) if rng is None else rng
    k = int(membership.max()) + 1
    state = _fixed_state(model, membership, k)
    if model.grouped_theta:
        ols = pooled_ols(data, False)
        state.theta_atoms = np.tile(np.concatenate([ols.alpha, [ols.rho], ols.beta]), (k, 1))
        state.rho = float("nan")

    def step(st, r):
        update_locations(st, model, r)
        update_variances(st, model, r)
        update_common(st, model, r)

    return _drive(model, state, rng, m_iter, burn_in, thin, step,
                  dict(meta or {}, estimator=spec.label, seed=seed))


def fit_two_step(data: PanelData, spec: Optional[ModelSpec] = None,
                 priors: Optional[PriorSpec] = None, m_iter: int = 3000, burn_in: int = 1000,
                 thin: int = 1, seed: int = 0, rng: Optional[np.random.Generator] = None,
                 k_range=range(2, 11), features: str = "levels") -> PosteriorDraws:
    """Cluster units by k-means (silhouette-selected k), then run the grouped
    sampler with those memberships frozen."""
    spec = spec or ModelSpec.from_name("two-step-kmeans")
    feats = two_step_features(validate_panel(data), features)
    ks = [k for k in k_range if k <= data.n_units - 1]
    k, fit = silhouette_select(feats, ks, seed=seed)
    inner = ModelSpec(time_varying_alpha=spec.time_varying_alpha,
                      heteroskedastic=spec.heteroskedastic,
                      coefficient_mode=spec.coefficient_mode)
    draws = fit_fixed_groups(data, inner, fit.assignment, priors, m_iter, burn_in, thin,
                             seed, rng, meta={"kmeans_k": int(k), "kmeans_features": features})
    draws.meta["estimator"] = spec.label
    draws.meta["spec"] = spec.to_dict()
    return draws
