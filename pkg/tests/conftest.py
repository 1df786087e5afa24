import numpy as np
import pytest

from bgre.gibbs import GibbsState, Model, stick_breaking
from bgre.panel import ModelSpec, PanelData, PriorSpec


def random_spd(rng, d, scale=1.0):
    a = rng.standard_normal((d, d))
    return scale * (a @ a.T + d * np.eye(d))


def random_instance(rng, spec_name=None, theta=False, n=None, t=None, p=None, k=None):
    """Small random panel, model and state with at least one empty group."""
    n = n or int(rng.integers(3, 9))
    t = t or int(rng.integers(2, 6))
    p = int(rng.integers(0, 3)) if p is None else p
    k = k or int(rng.integers(1, 5))
    if spec_name is None:
        spec_name = ["ti-homo", "ti-hetero", "tv-homo", "tv-hetero"][int(rng.integers(4))]
    spec = ModelSpec.from_name("theta-hetero" if theta else spec_name)
    y = rng.standard_normal((n, t + 1))
    x = rng.standard_normal((n, t, p)) if p else None
    data = PanelData(y=y, x=x)
    L = t if spec.time_varying_alpha else 1
    kw = {}
    if theta:
        d = 2 + p
        kw = dict(mu_theta=rng.standard_normal(d), sigma_theta=random_spd(rng, d))
    priors = PriorSpec(mu_alpha=rng.standard_normal(L), sigma_alpha=random_spd(rng, L),
                       nu_sigma=float(rng.uniform(2, 10)), delta_sigma=float(rng.uniform(1, 5)),
                       mu_rho=float(rng.normal()), sigma2_rho=float(rng.uniform(0.5, 5)),
                       sigma2_beta=float(rng.uniform(0.5, 5)), **kw)
    model = Model(data, spec, priors)
    sticks = rng.uniform(0.1, 0.9, k + 1)
    membership = rng.integers(0, k, n)
    state = GibbsState(
        rho=float(rng.normal(0, 0.5)),
        beta=rng.standard_normal((n if model.hetero_beta else 1, p)),
        alpha_atoms=rng.standard_normal((k + 1, L)),
        sigma2_atoms=rng.uniform(0.3, 2.0, k + 1),
        sticks=sticks,
        group_probs=stick_breaking(sticks),
        membership=membership,
        slice_u=np.zeros(n),
        concentration=float(rng.uniform(0.2, 3)),
    )
    if theta:
        state.theta_atoms = rng.standard_normal((k + 1, 2 + p))
        state.alpha_atoms = state.theta_atoms[:, :1].copy()
        state.rho = float("nan")
    return data, model, state


def blr_oracle(y, X, noise_var, prior_mean, prior_prec):
    """Dense Bayesian linear regression posterior by explicit inversion.

    ``noise_var`` may be a scalar or one variance per observation.
    """
    w = np.broadcast_to(1.0 / np.asarray(noise_var, dtype=float), y.shape)
    prec = prior_prec + X.T @ (w[:, None] * X)
    cov = np.linalg.inv(prec)
    mean = cov @ (prior_prec @ prior_mean + X.T @ (w * y))
    return mean, cov


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
