"""Successive-conditional (Geweke) simulator on a tiny panel.

Alternates one Gibbs sweep with a fresh draw of Y given the parameters, so
the retained parameters should follow their prior marginals.
"""

import numpy as np

from bgre.gibbs import Model, gibbs_sweep, initial_state
from bgre.panel import ModelSpec, PanelData, PriorSpec
from bgre.rng import make_rng

N, T = 5, 3
SIGMA2_RHO = 0.1
A_SHAPE, A_RATE = 2.0, 1.0


def toy_priors(spec):
    L = T if spec.time_varying_alpha else 1
    kw = {}
    if spec.coefficient_mode == "fully-grouped-theta":
        kw = dict(mu_theta=np.zeros(2), sigma_theta=np.diag([1.0, SIGMA2_RHO]))
    return PriorSpec(mu_alpha=np.zeros(L), sigma_alpha=np.eye(L), sigma2_rho=SIGMA2_RHO,
                     nu_sigma=12, delta_sigma=10, a_shape=A_SHAPE, a_rate=A_RATE,
                     a_init=A_SHAPE / A_RATE, **kw)


def simulate_y(state, model, rng):
    y = np.zeros((N, T + 1))
    sd = np.sqrt(state.sigma2_atoms[state.membership])
    if model.grouped_theta:
        th = state.theta_atoms[state.membership]
        for t in range(1, T + 1):
            y[:, t] = th[:, 0] + th[:, 1] * y[:, t - 1] + sd * rng.standard_normal(N)
        return y
    paths = model.alpha_paths(state.alpha_atoms)[state.membership]
    for t in range(1, T + 1):
        y[:, t] = paths[:, t - 1] + state.rho * y[:, t - 1] + sd * rng.standard_normal(N)
    return y


def set_y(model, y):
    model.data = PanelData(y=y)
    model.y = model.data.y_obs
    model.ylag = model.data.y_lag
    model.ylag_ss = np.einsum("nt,nt->n", model.ylag, model.ylag)
    if model.grouped_theta:
        model.xcheck = np.concatenate([np.ones((N, T, 1)), model.ylag[:, :, None]], axis=2)
        model.theta_xtx = np.einsum("ntj,ntk->njk", model.xcheck, model.xcheck)
        model.theta_xty = np.einsum("ntj,nt->nj", model.xcheck, model.y)


def run(spec_name, sweeps, thin, seed=1, on_state=None):
    """Return dict of retained 'rho' (or theta rho of unit 0) and 'a' draws."""
    spec = ModelSpec.from_name(spec_name)
    rng = make_rng(seed)
    y0 = np.zeros((N, T + 1))
    y0[:, 1:] = rng.standard_normal((N, T))
    model = Model(PanelData(y=y0), spec, toy_priors(spec))
    state = initial_state(model, rng)
    rhos, conc = [], []
    for s in range(sweeps):
        gibbs_sweep(state, model, rng)
        if on_state is not None:
            on_state(state)
        set_y(model, simulate_y(state, model, rng))
        if s % thin == 0 and s >= 50 * thin:
            r = state.theta_atoms[state.membership[0], 1] if model.grouped_theta else state.rho
            rhos.append(r)
            conc.append(state.concentration)
    return {"rho": np.array(rhos), "a": np.array(conc)}
