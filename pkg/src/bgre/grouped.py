"""Fully grouped coefficients: theta_k = (alpha_k, rho_k, beta_k) per group.

The regressor vector is x_check_it = (1, y_{it-1}, x_it). Slice, stick and
membership updates are shared with the intercept-only sampler.
"""

from __future__ import annotations

import numpy as np

from .gibbs import GibbsState, Model, gaussian_from_precision, sigma2_posterior_params


def theta_posterior_params(state: GibbsState, model: Model, k: int):
    """Normal posterior (mean, cov) of theta_k; empty groups return the prior."""
    pr = model.priors
    members = state.membership == k
    if not np.any(members):
        return pr.mu_theta.copy(), pr.sigma_theta.copy()
    s2 = float(state.sigma2_atoms[k])
    prec = model.theta_prec + model.theta_xtx[members].sum(axis=0) / s2
    rhs = model.theta_prec_mu + model.theta_xty[members].sum(axis=0) / s2
    mean, cov, _ = gaussian_from_precision(prec, rhs)
    return mean, cov


def sigma2_posterior_params_full(state: GibbsState, model: Model, k):
    """Inverse-gamma (shape, rate) with residuals y_it - theta_k' x_check_it."""
    return sigma2_posterior_params(state, model, k)


def group_rho(state: GibbsState) -> np.ndarray:
    return state.theta_atoms[:, 1]


def nonstationary_groups(state: GibbsState) -> np.ndarray:
    """Occupied labels whose autoregressive coefficient has |rho_k| >= 1."""
    occupied = np.unique(state.membership)
    return occupied[np.abs(state.theta_atoms[occupied, 1]) >= 1.0]


def theta_summary(draws) -> dict:
    """Posterior means of the occupied theta atoms, by unit and pooled."""
    unit_theta = np.stack([s.theta_atoms[s.membership] for s in draws.states])
    flagged = sum(len(nonstationary_groups(s)) > 0 for s in draws.states)
    return {
        "unit_theta_mean": unit_theta.mean(axis=0).tolist(),
        "rho_mean": float(unit_theta[:, :, 1].mean()),
        "draws_with_nonstationary_group": int(flagged),
    }
