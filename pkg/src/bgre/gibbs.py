"""Blocked Gibbs sampler for grouped random effects under a stick-breaking DP prior.

The infinite mixture is handled with slice variables: each sweep only
materialises the K* components whose stick weight can exceed some unit's
slice variable. Conditional updates are split into pure
``*_posterior_params`` functions and thin sampling wrappers so conjugacy can
be tested without randomness.

Group labels are 0-based throughout.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg, special

from .errors import (ChainDiverged, NoFeasibleGroup, NumericalError, NumericalSingularity,
                     ValidationError)
from .panel import (ModelSpec, PanelData, PriorSpec, alpha_design, calibrate_priors,
                    pooled_ols, validate_panel)
from .rng import make_rng

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
MAX_POTENTIAL_GROUPS = 5000
JITTER = 1e-10
# sticks are kept strictly inside (0, 1); beta draws with a tiny concentration round to 1
STICK_MAX = float(np.nextafter(1.0, 0.0))
STICK_MIN = 1e-300


@dataclass
class GibbsState:
    rho: float
    beta: np.ndarray           # (N, p) heterogeneous or (1, p) homogeneous
    alpha_atoms: np.ndarray    # (K*, L)
    sigma2_atoms: np.ndarray   # (K*,)
    sticks: np.ndarray         # (K*,) stick lengths xi
    group_probs: np.ndarray    # (K*,) pi
    membership: np.ndarray     # (N,) labels in 0..K*-1
    slice_u: np.ndarray        # (N,)
    concentration: float
    theta_atoms: Optional[np.ndarray] = None   # (K*, 2+p), fully grouped model
    omega: Optional[np.ndarray] = None         # (N, K*), SGP membership probabilities
    extras: dict = field(default_factory=dict)

    @property
    def k_active(self) -> int:
        return int(self.membership.max()) + 1

    @property
    def k_potential(self) -> int:
        return self.sticks.size

    @property
    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.membership, minlength=self.k_potential)

    @property
    def k_nonempty(self) -> int:
        return int(np.count_nonzero(np.bincount(self.membership)))

    def copy(self) -> "GibbsState":
        kw = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                v = v.copy()
            elif isinstance(v, dict):
                v = {k: (x.copy() if isinstance(x, np.ndarray) else x) for k, x in v.items()}
            kw[f.name] = v
        return GibbsState(**kw)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                v = v.tolist()
            elif isinstance(v, dict):
                v = {k: (x.tolist() if isinstance(x, np.ndarray) else x) for k, x in v.items()}
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "GibbsState":
        def arr(v, dtype=float, ndim=1):
            if v is None:
                return None
            a = np.asarray(v, dtype=dtype)
            if a.size == 0:
                a = a.reshape((0,) * ndim if ndim == 1 else (0, 0))
            return a

        beta = np.asarray(d["beta"], dtype=float)
        if beta.ndim == 1:
            beta = beta.reshape(beta.shape[0], 0)
        extras = {k: (np.asarray(v, dtype=float) if isinstance(v, list) else v)
                  for k, v in d.get("extras", {}).items()}
        return cls(
            rho=float(d["rho"]),
            beta=beta,
            alpha_atoms=np.asarray(d["alpha_atoms"], dtype=float),
            sigma2_atoms=arr(d["sigma2_atoms"]),
            sticks=arr(d["sticks"]),
            group_probs=arr(d["group_probs"]),
            membership=np.asarray(d["membership"], dtype=np.int64),
            slice_u=arr(d["slice_u"]),
            concentration=float(d["concentration"]),
            theta_atoms=None if d.get("theta_atoms") is None
            else np.asarray(d["theta_atoms"], dtype=float),
            omega=None if d.get("omega") is None else np.asarray(d["omega"], dtype=float),
            extras=extras,
        )


@dataclass
class PosteriorDraws:
    states: list
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.states)

    def series(self, name: str) -> np.ndarray:
        """Scalar trace of a state attribute, e.g. ``rho`` or ``k_nonempty``."""
        return np.array([getattr(s, name) for s in self.states], dtype=float)

    def to_ndjson(self, path) -> None:
        """Metadata header line, then one JSON state per line.

        Floats are written with their shortest round-trip repr, so reading
        the file back reproduces every double exactly.
        """
        with open(path, "w") as fh:
            fh.write(json.dumps({"meta": self.meta}, sort_keys=True) + "\n")
            for s in self.states:
                fh.write(json.dumps(s.to_dict(), allow_nan=True) + "\n")

    @classmethod
    def from_ndjson(cls, path) -> "PosteriorDraws":
        with open(path) as fh:
            header = json.loads(fh.readline())
            states = [GibbsState.from_dict(json.loads(line)) for line in fh if line.strip()]
        return cls(states=states, meta=header.get("meta", {}))


class Model:
    """Data, model variant and priors bundled with the derived quantities the
    conditional updates need."""

    def __init__(self, data: PanelData, spec: ModelSpec, priors: PriorSpec):
        self.data = data
        self.spec = spec
        self.priors = priors
        self.y = data.y_obs
        self.ylag = data.y_lag
        self.x = data.x_or_empty
        self.n, self.t = self.y.shape
        self.p = self.x.shape[2]
        self.grouped_theta = spec.coefficient_mode == "fully-grouped-theta"
        self.hetero_beta = spec.coefficient_mode == "heterogeneous-beta"
        self.design = alpha_design(self.t, spec.time_varying_alpha)
        self.L = self.design.shape[1]
        if priors.mu_alpha.size != self.L:
            raise ValidationError(
                f"mu_alpha has length {priors.mu_alpha.size}, model needs {self.L}")
        self.alpha_prec = _spd_inverse(priors.sigma_alpha)
        self.alpha_prec_mu = self.alpha_prec @ priors.mu_alpha
        self.alpha_prior_chol = np.linalg.cholesky(priors.sigma_alpha)
        self.dtd = self.design.T @ self.design
        self.ylag_ss = np.einsum("nt,nt->n", self.ylag, self.ylag)
        if self.grouped_theta:
            if priors.mu_theta is None or priors.sigma_theta is None:
                raise ValidationError("fully grouped model needs mu_theta / sigma_theta")
            self.xcheck = np.concatenate(
                [np.ones((self.n, self.t, 1)), self.ylag[:, :, None], self.x], axis=2)
            self.theta_xtx = np.einsum("ntj,ntk->njk", self.xcheck, self.xcheck)
            self.theta_xty = np.einsum("ntj,nt->nj", self.xcheck, self.y)
            self.theta_prec = _spd_inverse(priors.sigma_theta)
            self.theta_prec_mu = self.theta_prec @ priors.mu_theta
            self.theta_prior_chol = np.linalg.cholesky(priors.sigma_theta)

    # -- helpers ------------------------------------------------------------
    def unit_beta(self, state: GibbsState) -> np.ndarray:
        if state.beta.shape[0] == self.n:
            return state.beta
        return np.broadcast_to(state.beta, (self.n, self.p))

    def xbeta(self, state: GibbsState) -> np.ndarray:
        if self.p == 0:
            return np.zeros((self.n, self.t))
        return np.einsum("ntp,np->nt", self.x, self.unit_beta(state))

    def ytilde(self, state: GibbsState) -> np.ndarray:
        """y_i - rho y_{-1,i} - x_i beta_i (the part explained by the intercept)."""
        return self.y - state.rho * self.ylag - self.xbeta(state)

    def alpha_paths(self, atoms: np.ndarray) -> np.ndarray:
        """K x T per-period intercepts of each atom."""
        return atoms @ self.design.T

    def unit_means(self, state: GibbsState) -> np.ndarray:
        """N x T conditional means of y."""
        g = state.membership
        if self.grouped_theta:
            return np.einsum("ntj,nj->nt", self.xcheck, state.theta_atoms[g])
        return self.alpha_paths(state.alpha_atoms)[g] + state.rho * self.ylag + self.xbeta(state)


def _spd_inverse(m: np.ndarray) -> np.ndarray:
    c = linalg.cho_factor(m, lower=True)
    return linalg.cho_solve(c, np.eye(m.shape[0]))


def _chol_with_jitter(prec: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(prec)):
        raise NumericalSingularity("precision matrix has non-finite entries")
    try:
        return np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        pass
    scale = max(1.0, float(np.max(np.abs(np.diag(prec)))))
    log.debug("cholesky failed; retrying with diagonal jitter")
    try:
        return np.linalg.cholesky(prec + JITTER * scale * np.eye(prec.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise NumericalSingularity("posterior precision is not positive definite") from exc


def gaussian_from_precision(prec: np.ndarray, rhs: np.ndarray):
    """Return (mean, cov, cov_factor) of N(prec^-1 rhs, prec^-1); cov = F F'."""
    lp = _chol_with_jitter(prec)
    linv = linalg.solve_triangular(lp, np.eye(lp.shape[0]), lower=True)
    factor = linv.T
    cov = factor @ factor.T
    mean = cov @ rhs
    return mean, cov, factor


# ----------------------------------------------------------------------------
# Conditional posterior parameters


def _group_sigma2(state: GibbsState, k: int) -> float:
    return float(state.sigma2_atoms[k])


def alpha_posterior_params(state: GibbsState, model: Model, k: int, ytil=None):
    """Normal posterior (mean, cov) of the intercept atom of group ``k``.

    Empty groups return the prior.
    """
    members = state.membership == k
    nk = int(members.sum())
    pr = model.priors
    if nk == 0:
        return pr.mu_alpha.copy(), pr.sigma_alpha.copy()
    if ytil is None:
        ytil = model.ytilde(state)
    s2 = _group_sigma2(state, k)
    prec = model.alpha_prec + nk * model.dtd / s2
    rhs = model.alpha_prec_mu + model.design.T @ ytil[members].sum(axis=0) / s2
    mean, cov, _ = gaussian_from_precision(prec, rhs)
    return mean, cov


def sigma2_posterior_params(state: GibbsState, model: Model, k: Optional[int], ytil=None):
    """Inverse-gamma posterior of a group variance as (shape, rate) = (v/2, delta/2).

    ``k=None`` pools every unit (homoskedastic model).
    """
    pr = model.priors
    members = np.ones(model.n, bool) if k is None else state.membership == k
    nk = int(members.sum())
    if nk == 0:
        return pr.nu_sigma / 2.0, pr.delta_sigma / 2.0
    resid = _residuals(state, model, ytil)[members]
    ss = float(np.sum(resid * resid))
    return (pr.nu_sigma + model.t * nk) / 2.0, (pr.delta_sigma + ss) / 2.0


def _residuals(state: GibbsState, model: Model, ytil=None) -> np.ndarray:
    if model.grouped_theta:
        return model.y - model.unit_means(state)
    if ytil is None:
        ytil = model.ytilde(state)
    return ytil - model.alpha_paths(state.alpha_atoms)[state.membership]


def rho_posterior_params(state: GibbsState, model: Model):
    """Normal posterior (mean, variance) of the common AR coefficient."""
    pr = model.priors
    g = state.membership
    inv_s2 = 1.0 / state.sigma2_atoms[g]
    yhat = model.y - model.alpha_paths(state.alpha_atoms)[g] - model.xbeta(state)
    prec = 1.0 / pr.sigma2_rho + float(np.sum(model.ylag_ss * inv_s2))
    rhs = pr.mu_rho / pr.sigma2_rho + float(np.sum(np.einsum("nt,nt->n", model.ylag, yhat) * inv_s2))
    if not prec > 0 or not np.isfinite(prec):
        raise NumericalSingularity("rho posterior precision is not positive")
    var = 1.0 / prec
    return var * rhs, var


def beta_posterior_params(state: GibbsState, model: Model, i: Optional[int]):
    """Normal posterior (mean, cov) of unit ``i``'s slopes; ``i=None`` gives
    the pooled posterior of a homogeneous slope vector."""
    pr = model.priors
    g = state.membership
    yhat = model.y - model.alpha_paths(state.alpha_atoms)[g] - state.rho * model.ylag
    prior_prec = np.eye(model.p) / pr.sigma2_beta
    if i is None:
        w = 1.0 / state.sigma2_atoms[g]
        xtx = np.einsum("n,ntj,ntk->jk", w, model.x, model.x)
        xty = np.einsum("n,ntj,nt->j", w, model.x, yhat)
    else:
        s2 = float(state.sigma2_atoms[g[i]])
        xtx = model.x[i].T @ model.x[i] / s2
        xty = model.x[i].T @ yhat[i] / s2
    mean, cov, _ = gaussian_from_precision(prior_prec + xtx, xty)
    return mean, cov


def stick_posterior_params(state: GibbsState, k: int):
    """Beta(A, B) posterior of stick length ``k``."""
    g = state.membership
    return float(np.sum(g == k) + 1), float(state.concentration + np.sum(g > k))


def stick_breaking(sticks: np.ndarray) -> np.ndarray:
    """pi_k = xi_k prod_{j<k} (1 - xi_j)."""
    sticks = np.asarray(sticks, dtype=float)
    remaining = np.concatenate([[1.0], np.cumprod(1.0 - sticks)[:-1]])
    return sticks * remaining


def sticks_from_probs(probs: np.ndarray) -> np.ndarray:
    """Inverse of :func:`stick_breaking`."""
    probs = np.asarray(probs, dtype=float)
    remaining = 1.0 - np.concatenate([[0.0], np.cumsum(probs)[:-1]])
    return probs / remaining


def concentration_mixture_weight(shape: float, rate: float, k_active: int, eta: float,
                                 n_units: int) -> float:
    """Weight of the Gamma(shape + K, .) component in the two-step update of a."""
    odds = (shape + k_active - 1.0) / (n_units * (rate - math.log(eta)))
    return odds / (1.0 + odds)


def draw_concentration(state: GibbsState, model: Model, rng: np.random.Generator,
                       eta: Optional[float] = None) -> float:
    """Auxiliary-variable update of the concentration parameter.

    The prior is Gamma(a_shape, rate=a_rate). The number of occupied groups
    plays the role of K^a.
    """
    pr = model.priors
    n = model.n
    k = state.k_nonempty
    a = state.concentration
    if eta is None:
        eta = rng.beta(a + 1.0, n)
    eta = max(float(eta), np.finfo(float).tiny)
    rate = pr.a_rate - math.log(eta)
    w = concentration_mixture_weight(pr.a_shape, pr.a_rate, k, eta, n)
    shape = pr.a_shape + k if rng.random() < w else pr.a_shape + k - 1.0
    return float(rng.gamma(shape, 1.0 / rate))


def concentration_stick_params(state: GibbsState, a: Optional[float] = None):
    """Beta parameters of the auxiliary eta_k for the labelled update of a.

    With the sticks integrated out, labelled memberships g have likelihood
    prod_{k <= K^a} a B(1 + n_k, a + m_k), where m_k counts units with a
    label above k. Writing each beta function as an integral over
    eta_k ~ Beta(a + m_k, 1 + n_k) makes a | eta a gamma draw.
    """
    a = state.concentration if a is None else a
    sizes = np.bincount(state.membership, minlength=state.k_active)[:state.k_active]
    above = state.membership.size - np.cumsum(sizes)
    return a + above, 1.0 + sizes


def draw_concentration_labelled(state: GibbsState, model: Model, rng: np.random.Generator,
                                eta: Optional[np.ndarray] = None) -> float:
    """a | eta ~ Gamma(a_shape + K^a, a_rate - sum log eta_k), K^a counting
    every label up to the highest occupied one."""
    pr = model.priors
    if eta is None:
        p, q = concentration_stick_params(state)
        eta = rng.beta(p, q)
    eta = np.maximum(np.asarray(eta, dtype=float), np.finfo(float).tiny)
    shape = pr.a_shape + eta.size
    rate = pr.a_rate - float(np.sum(np.log(eta)))
    return float(rng.gamma(shape, 1.0 / rate))


def potential_groups(probs: np.ndarray, u_star: float,
                     sticks: Optional[np.ndarray] = None) -> Optional[int]:
    """Smallest k with sum_{j<=k} pi_j > 1 - u*, or None if not reached.

    With ``sticks`` the test uses the leftover mass prod_{j<=k} (1 - xi_j) < u*,
    which stays exact when u* is below double-precision resolution near 1.
    """
    if sticks is None:
        hit = np.nonzero(np.cumsum(probs) > 1.0 - u_star)[0]
    else:
        hit = np.nonzero(np.cumprod(1.0 - np.asarray(sticks)) < u_star)[0]
    return int(hit[0]) + 1 if hit.size else None


def draw_slice_variables(state: GibbsState, rng: np.random.Generator):
    """u_i ~ U(0, pi_{g_i}); returns (u, u*, K*) where K* may be None when the
    current atoms do not yet cover 1 - u*."""
    upper = state.group_probs[state.membership]
    u = rng.random(upper.size) * upper
    u = np.maximum(u, np.finfo(float).tiny)
    u_star = float(u.min())
    return u, u_star, potential_groups(state.group_probs, u_star, state.sticks)


# ----------------------------------------------------------------------------
# Atom handling


def draw_prior_atoms(model: Model, rng: np.random.Generator, count: int,
                     shared_sigma2: Optional[float] = None):
    """``count`` fresh (alpha or theta, sigma2) atoms from the base measure."""
    pr = model.priors
    if model.grouped_theta:
        d = pr.mu_theta.size
        locs = pr.mu_theta + rng.standard_normal((count, d)) @ model.theta_prior_chol.T
    else:
        locs = pr.mu_alpha + rng.standard_normal((count, model.L)) @ model.alpha_prior_chol.T
    if shared_sigma2 is None:
        s2 = (pr.delta_sigma / 2.0) / rng.gamma(pr.nu_sigma / 2.0, 1.0, size=count)
    else:
        s2 = np.full(count, shared_sigma2)
    return locs, s2


def _set_locations(state: GibbsState, model: Model, locs: np.ndarray) -> None:
    if model.grouped_theta:
        state.theta_atoms = locs
        state.alpha_atoms = locs[:, :1].copy()
    else:
        state.alpha_atoms = locs


def _locations(state: GibbsState, model: Model) -> np.ndarray:
    return state.theta_atoms if model.grouped_theta else state.alpha_atoms


def truncate_atoms(state: GibbsState, model: Model, k: int) -> None:
    _set_locations(state, model, _locations(state, model)[:k].copy())
    state.sigma2_atoms = state.sigma2_atoms[:k].copy()
    state.sticks = state.sticks[:k].copy()
    state.group_probs = state.group_probs[:k].copy()
    if state.omega is not None:
        state.omega = state.omega[:, :k].copy()


def expand_potential_groups(state: GibbsState, model: Model, rng: np.random.Generator,
                            u_star: float) -> GibbsState:
    """Append sticks ~ Beta(1, a) with prior atoms until the stick mass exceeds
    1 - u*. Starts from the active groups.

    Coverage is tracked through the leftover mass prod (1 - xi), since
    1 - u* rounds to 1 once u* drops below about 1e-16.
    """
    k_tilde = state.sticks.size
    sticks = list(state.sticks)
    remaining = float(np.prod(1.0 - state.sticks)) if sticks else 1.0
    new = 0
    while not remaining < u_star:
        xi = min(max(rng.beta(1.0, state.concentration), STICK_MIN), STICK_MAX)
        sticks.append(xi)
        remaining *= 1.0 - xi
        new += 1
        if k_tilde + new > MAX_POTENTIAL_GROUPS:
            raise ChainDiverged("potential groups exceed the safety cap")
    if new:
        shared = None if model.spec.heteroskedastic else float(state.sigma2_atoms[0])
        locs, s2 = draw_prior_atoms(model, rng, new, shared)
        _set_locations(state, model, np.vstack([_locations(state, model), locs]))
        state.sigma2_atoms = np.concatenate([state.sigma2_atoms, s2])
        state.sticks = np.asarray(sticks)
        state.group_probs = stick_breaking(state.sticks)
    return state


def compact(state: GibbsState, model: Model) -> GibbsState:
    """Relabel so occupied groups come first (in label order).

    Atoms and stick weights travel with their labels; stick lengths are
    recomputed from the permuted weights so every slice constraint and the
    total stick mass are unchanged.
    """
    sizes = np.bincount(state.membership, minlength=state.k_potential)
    occupied = np.nonzero(sizes)[0]
    if occupied.size == occupied[-1] + 1:
        return state
    empty = np.nonzero(sizes == 0)[0]
    order = np.concatenate([occupied, empty])
    newlabel = np.empty_like(order)
    newlabel[order] = np.arange(order.size)
    state.membership = newlabel[state.membership]
    _set_locations(state, model, _locations(state, model)[order])
    state.sigma2_atoms = state.sigma2_atoms[order]
    state.group_probs = state.group_probs[order]
    state.sticks = sticks_from_probs(state.group_probs)
    if state.omega is not None:
        state.omega = state.omega[:, order]
    return state


# ----------------------------------------------------------------------------
# Memberships


def membership_log_likelihood(state: GibbsState, model: Model, ytil=None) -> np.ndarray:
    """N x K* matrix of log p(y_i | unit parameters, atom k)."""
    s2 = state.sigma2_atoms
    if model.grouped_theta:
        means = np.einsum("ntj,kj->nkt", model.xcheck, state.theta_atoms)
        resid = model.y[:, None, :] - means
    else:
        if ytil is None:
            ytil = model.ytilde(state)
        resid = ytil[:, None, :] - model.alpha_paths(state.alpha_atoms)[None, :, :]
    ss = np.einsum("nkt,nkt->nk", resid, resid)
    return -0.5 * model.t * (LOG_2PI + np.log(s2))[None, :] - 0.5 * ss / s2[None, :]


def membership_probabilities(loglik: np.ndarray, feasible: Optional[np.ndarray] = None,
                             log_prior: Optional[np.ndarray] = None) -> np.ndarray:
    """Normalise log weights row-wise (max subtraction); infeasible cells get 0."""
    logw = loglik.copy()
    if log_prior is not None:
        with np.errstate(divide="ignore"):
            logw = logw + log_prior
    if feasible is not None:
        logw = np.where(feasible, logw, -np.inf)
    top = logw.max(axis=1, keepdims=True)
    bad = ~np.isfinite(top[:, 0])
    if np.any(bad):
        raise NoFeasibleGroup(
            f"no admissible group for units {np.nonzero(bad)[0][:10].tolist()}")
    w = np.exp(logw - top)
    return w / w.sum(axis=1, keepdims=True)


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    return np.minimum((cdf < u[:, None]).sum(axis=1), probs.shape[1] - 1)


def draw_memberships(state: GibbsState, model: Model, rng: np.random.Generator,
                     ytil=None, log_prior: Optional[np.ndarray] = None) -> np.ndarray:
    """g_i ~ p(y_i | atom k) 1(u_i < pi_k), normalised over k <= K*."""
    loglik = membership_log_likelihood(state, model, ytil)
    feasible = state.slice_u[:, None] < state.group_probs[None, :]
    probs = membership_probabilities(loglik, feasible, log_prior)
    return sample_categorical(probs, rng)


# ----------------------------------------------------------------------------
# Label switching


def _swap_labels(state: GibbsState, model: Model, i: int, j: int) -> None:
    g = state.membership
    in_i, in_j = g == i, g == j
    g[in_i], g[in_j] = j, i
    locs = _locations(state, model)
    locs[[i, j]] = locs[[j, i]]
    if model.grouped_theta:
        state.alpha_atoms = locs[:, :1].copy()
    state.sigma2_atoms[[i, j]] = state.sigma2_atoms[[j, i]]


def switch_random_pair(state: GibbsState, model: Model, rng: np.random.Generator) -> bool:
    """Swap the labels of two random occupied groups, weights unchanged."""
    sizes = np.bincount(state.membership, minlength=state.k_potential)
    occupied = np.nonzero(sizes)[0]
    if occupied.size < 2:
        return False
    i, j = rng.choice(occupied, size=2, replace=False)
    pi = state.group_probs
    log_ratio = (sizes[j] - sizes[i]) * (math.log(pi[i]) - math.log(pi[j]))
    if math.log(rng.random()) < min(0.0, log_ratio):
        _swap_labels(state, model, int(i), int(j))
        return True
    return False


def switch_adjacent_sticks(state: GibbsState, model: Model, rng: np.random.Generator) -> bool:
    """Swap labels and stick lengths of adjacent groups l, l+1."""
    ka = state.k_active
    if ka < 2:
        return False
    l = int(rng.integers(ka - 1))
    sizes = np.bincount(state.membership, minlength=state.k_potential)
    nl, nl1 = sizes[l], sizes[l + 1]
    if l + 2 == ka and nl == 0:
        # the swap would shrink K^a and the reverse move could not be proposed
        return False
    new_sticks = state.sticks.copy()
    new_sticks[[l, l + 1]] = new_sticks[[l + 1, l]]
    new_pi = stick_breaking(new_sticks)
    pi = state.group_probs
    log_ratio = (nl1 * math.log(new_pi[l]) + nl * math.log(new_pi[l + 1])
                 - nl * math.log(pi[l]) - nl1 * math.log(pi[l + 1]))
    if math.log(rng.random()) < min(0.0, log_ratio):
        _swap_labels(state, model, l, l + 1)
        state.sticks = new_sticks
        state.group_probs = new_pi
        return True
    return False


def reweight_adjacent(pi_k: float, pi_k1: float, n_k: int, n_k1: int, n_tail: int, a: float):
    """Proposed weights and log acceptance ratio of the adjacent swap that
    rescales the two stick weights (their sum is preserved).

    The ratio covers the allocation term prod pi^n. The map on (pi_k, pi_k1)
    is an involution with Jacobian r1 r2 / rt^2, returned as the last item.
    """
    r1 = (1.0 + a + n_k1 + n_tail) / (a + n_k1 + n_tail)
    r2 = (a + n_k + n_tail) / (1.0 + a + n_k + n_tail)
    rt = (pi_k1 * r1 + pi_k * r2) / (pi_k + pi_k1)
    log_ratio = n_k1 * math.log(r1 / rt) + n_k * math.log(r2 / rt)
    log_jac = math.log(r1) + math.log(r2) - 2.0 * math.log(rt)
    return pi_k1 * r1 / rt, pi_k * r2 / rt, log_ratio, log_jac


def switch_adjacent_reweight(state: GibbsState, model: Model, rng: np.random.Generator) -> bool:
    """Swap labels of adjacent groups k, k+1 and reset their stick lengths."""
    ka = state.k_active
    if ka < 2:
        return False
    k = int(rng.integers(ka - 1))
    sizes = np.bincount(state.membership, minlength=state.k_potential)
    if k + 2 == ka and sizes[k] == 0:
        return False  # keeps K^a fixed so the proposal stays symmetric
    n_tail = int(sizes[k + 2:].sum())
    pi = state.group_probs
    pk_new, pk1_new, log_ratio, log_jac = reweight_adjacent(
        pi[k], pi[k + 1], int(sizes[k]), int(sizes[k + 1]), n_tail, state.concentration)
    prefix = float(np.prod(1.0 - state.sticks[:k]))
    sticks = state.sticks.copy()
    sticks[k] = pk_new / prefix
    sticks[k + 1] = pk1_new / ((1.0 - sticks[k]) * prefix)
    sticks = np.clip(sticks, STICK_MIN, STICK_MAX)
    # the sticks are explicit state, so the deterministic map needs its
    # Jacobian in stick coordinates; the Beta(1, a) prior ratio is 1 because
    # (1 - xi_k)(1 - xi_k1) is unchanged
    log_ratio += log_jac + math.log1p(-state.sticks[k]) - math.log1p(-sticks[k])
    if math.log(rng.random()) < min(0.0, log_ratio):
        _swap_labels(state, model, k, k + 1)
        state.sticks = sticks
        state.group_probs = stick_breaking(sticks)
        return True
    return False


LABEL_MOVES = (switch_random_pair, switch_adjacent_sticks, switch_adjacent_reweight)


def label_switch_moves(state: GibbsState, model: Model, rng: np.random.Generator,
                       on_move: Optional[Callable] = None) -> GibbsState:
    """Apply the three label-switching Metropolis moves in turn.

    ``on_move(name, accepted, before, after)`` is called with state copies,
    for testing.
    """
    if state.k_active < 2:
        return state
    for move in LABEL_MOVES:
        before = state.copy() if on_move else None
        accepted = move(state, model, rng)
        if on_move:
            on_move(move.__name__, accepted, before, state.copy())
    return state


# ----------------------------------------------------------------------------
# Densities


def log_likelihood(state: GibbsState, model: Model) -> float:
    resid = model.y - model.unit_means(state)
    s2 = state.sigma2_atoms[state.membership]
    return float(-0.5 * model.t * np.sum(LOG_2PI + np.log(s2))
                 - 0.5 * np.sum(np.sum(resid * resid, axis=1) / s2))


def _atom_log_prior(model: Model, locs: np.ndarray, s2: np.ndarray) -> float:
    pr = model.priors
    if model.grouped_theta:
        mu, chol = pr.mu_theta, model.theta_prior_chol
    else:
        mu, chol = pr.mu_alpha, model.alpha_prior_chol
    z = linalg.solve_triangular(chol, (locs - mu).T, lower=True)
    d = mu.size
    lp = -0.5 * np.sum(z * z) - locs.shape[0] * (0.5 * d * LOG_2PI + np.sum(np.log(np.diag(chol))))
    if model.spec.heteroskedastic:
        a, b = pr.nu_sigma / 2.0, pr.delta_sigma / 2.0
        lp += np.sum(a * math.log(b) - special.gammaln(a) - (a + 1.0) * np.log(s2) - b / s2)
    return float(lp)


def _common_log_prior(state: GibbsState, model: Model) -> float:
    pr = model.priors
    lp = 0.0
    if not model.grouped_theta:
        lp += -0.5 * (LOG_2PI + math.log(pr.sigma2_rho)) - 0.5 * (state.rho - pr.mu_rho) ** 2 / pr.sigma2_rho
        if model.p:
            b = state.beta
            lp += float(-0.5 * b.size * (LOG_2PI + math.log(pr.sigma2_beta))
                        - 0.5 * np.sum(b * b) / pr.sigma2_beta)
    return lp


def relabel_invariant_log_density(state: GibbsState, model: Model) -> float:
    """log p(Y | parameters) + priors of the occupied atoms + common priors.

    Unaffected by any relabelling that moves atoms together with their units.
    """
    occupied = np.unique(state.membership)
    return (log_likelihood(state, model)
            + _atom_log_prior(model, _locations(state, model)[occupied], state.sigma2_atoms[occupied])
            + _common_log_prior(state, model))


def joint_log_density(state: GibbsState, model: Model) -> float:
    """log p(Y, parameters, G | weights) over all K* materialised atoms."""
    pr = model.priors
    a = state.concentration
    lp_a = (pr.a_shape - 1.0) * math.log(a) - a * pr.a_rate
    return (log_likelihood(state, model)
            + float(np.sum(np.log(state.group_probs[state.membership])))
            + _atom_log_prior(model, _locations(state, model), state.sigma2_atoms)
            + _common_log_prior(state, model) + lp_a)


def check_invariants(state: GibbsState) -> list:
    """Return a list of violated state invariants (empty when all hold)."""
    problems = []
    pi, xi, u, g = state.group_probs, state.sticks, state.slice_u, state.membership
    if not np.allclose(pi, stick_breaking(xi), rtol=1e-12, atol=1e-300):
        problems.append("group_probs inconsistent with sticks")
    if np.any(pi <= 0) or np.any(pi >= 1) or np.any(xi <= 0) or np.any(xi >= 1):
        problems.append("stick weights outside (0, 1)")
    # leftover mass prod(1 - xi) = 1 - sum(pi), computed without cancellation
    tail = float(np.prod(1.0 - xi))
    if not tail < u.min():
        problems.append("stick mass does not exceed 1 - u*")
    if np.any(u <= 0) or np.any(u >= pi[g]):
        problems.append("slice variable outside (0, pi_g)")
    if state.k_active > state.k_potential:
        problems.append("K^a exceeds K*")
    if not np.all(u > tail):
        # every unseen component k > K* has pi_k <= tail < u_i
        problems.append("tail mass not dominated by slice variables")
    if np.any(state.sigma2_atoms <= 0):
        problems.append("non-positive variance atom")
    return problems


# ----------------------------------------------------------------------------
# Sweep and driver


def _sample_gaussian(mean, cov, rng) -> np.ndarray:
    chol = np.linalg.cholesky(cov + 0.0)
    return mean + chol @ rng.standard_normal(mean.size)


def update_locations(state: GibbsState, model: Model, rng: np.random.Generator) -> None:
    """Draw every active atom location from its conditional posterior."""
    ka = state.sticks.size
    if model.grouped_theta:
        from .grouped import theta_posterior_params
        locs = np.empty((ka, model.priors.mu_theta.size))
        for k in range(ka):
            mean, cov = theta_posterior_params(state, model, k)
            locs[k] = _sample_gaussian(mean, cov, rng)
        _set_locations(state, model, locs)
        return
    ytil = model.ytilde(state)
    locs = np.empty((ka, model.L))
    for k in range(ka):
        mean, cov = alpha_posterior_params(state, model, k, ytil)
        locs[k] = _sample_gaussian(mean, cov, rng)
    state.alpha_atoms = locs


def update_variances(state: GibbsState, model: Model, rng: np.random.Generator) -> None:
    ytil = None if model.grouped_theta else model.ytilde(state)
    if model.spec.heteroskedastic:
        ka = state.sticks.size
        s2 = np.empty(ka)
        for k in range(ka):
            shape, rate = sigma2_posterior_params(state, model, k, ytil)
            s2[k] = rate / rng.gamma(shape)
    else:
        shape, rate = sigma2_posterior_params(state, model, None, ytil)
        s2 = np.full(state.sticks.size, rate / rng.gamma(shape))
    state.sigma2_atoms = s2


def update_common(state: GibbsState, model: Model, rng: np.random.Generator) -> None:
    """rho then beta (skipped in the fully grouped model)."""
    if model.grouped_theta:
        return
    mean, var = rho_posterior_params(state, model)
    state.rho = float(mean + math.sqrt(var) * rng.standard_normal())
    if model.p == 0:
        return
    if model.hetero_beta:
        beta = np.empty((model.n, model.p))
        for i in range(model.n):
            mean, cov = beta_posterior_params(state, model, i)
            beta[i] = _sample_gaussian(mean, cov, rng)
    else:
        mean, cov = beta_posterior_params(state, model, None)
        beta = _sample_gaussian(mean, cov, rng)[None, :]
    state.beta = beta


def gibbs_sweep(state: GibbsState, model: Model, rng: np.random.Generator,
                sgp=None, on_move: Optional[Callable] = None) -> GibbsState:
    """One full sweep: concentration, sticks, atoms, variances, label
    switching, slice variables, potential groups, rho/beta, (omega),
    memberships.

    The concentration update integrates the stick weights out, so it runs
    before the sticks are redrawn; (a, pi) then form one block given g. It
    conditions on the labelled memberships: the partition-only update
    (``draw_concentration``) ignores label order and biases a downward here.
    """
    state.concentration = draw_concentration_labelled(state, model, rng)
    ka = state.k_active
    # sticks for the active groups; atoms beyond K^a are discarded
    truncate_atoms(state, model, ka) if state.k_potential >= ka else None
    sizes = np.bincount(state.membership, minlength=ka)
    above = state.membership.size - np.cumsum(sizes)
    state.sticks = rng.beta(sizes + 1.0, state.concentration + above)
    state.sticks = np.clip(state.sticks, STICK_MIN, STICK_MAX)
    state.group_probs = stick_breaking(state.sticks)

    update_locations(state, model, rng)
    update_variances(state, model, rng)

    if sgp is None:
        label_switch_moves(state, model, rng, on_move)

    u, u_star, _ = draw_slice_variables(state, rng)
    state.slice_u = u
    expand_potential_groups(state, model, rng, u_star)

    update_common(state, model, rng)

    log_prior = None
    if sgp is not None:
        state.omega = sgp.draw_omega(state, rng)
        with np.errstate(divide="ignore"):
            log_prior = np.log(state.omega)
    state.membership = draw_memberships(state, model, rng, log_prior=log_prior)
    return state


def initial_state(model: Model, rng: np.random.Generator, sgp=None) -> GibbsState:
    """OLS-seeded starting point; memberships drawn from likelihood weights
    without slice indicators, empty groups removed."""
    data, pr = model.data, model.priors
    n = model.n
    a = pr.a_init
    ols = pooled_ols(data, model.spec.time_varying_alpha and not model.grouped_theta)
    k0 = int(round(a * math.log((a + n) / a)))
    k0 = min(max(k0, 1), n)
    if sgp is not None:
        k0 = sgp.k_preset
    if model.grouped_theta:
        mean = np.concatenate([ols.alpha, [ols.rho], ols.beta])
        chol = np.linalg.cholesky(ols.cov)
    else:
        mean, chol = ols.alpha, np.linalg.cholesky(ols.alpha_cov)
    locs = mean + rng.standard_normal((k0, mean.size)) @ chol.T
    beta = np.zeros((n if model.hetero_beta else 1, model.p)) + ols.beta
    state = GibbsState(
        rho=ols.rho if not model.grouped_theta else float("nan"),
        beta=beta,
        alpha_atoms=np.zeros((k0, model.L)),
        sigma2_atoms=np.full(k0, ols.sigma2),
        sticks=np.full(k0, 0.5),
        group_probs=stick_breaking(np.full(k0, 0.5)),
        membership=np.zeros(n, dtype=np.int64),
        slice_u=np.zeros(n),
        concentration=a,
    )
    _set_locations(state, model, locs)
    loglik = membership_log_likelihood(state, model)
    log_prior = None
    if sgp is not None:
        with np.errstate(divide="ignore"):
            log_prior = np.log(sgp.a_table)
        if not np.all(np.isfinite(np.max(loglik + log_prior, axis=1))):
            log_prior = None
    state.membership = sample_categorical(membership_probabilities(loglik, None, log_prior), rng)
    if sgp is None:
        compact(state, model)
        truncate_atoms(state, model, state.k_active)
    return state


def run_chain(data: PanelData, spec: ModelSpec, priors: Optional[PriorSpec] = None,
              m_iter: int = 3000, burn_in: int = 1000, thin: int = 1, seed: int = 0,
              rng: Optional[np.random.Generator] = None, sgp_table: Optional[np.ndarray] = None,
              callback: Optional[Callable] = None, init: Optional[GibbsState] = None
              ) -> PosteriorDraws:
    """Run the DP blocked Gibbs sampler for ``m_iter`` sweeps (burn-in included)
    and keep every ``thin``-th post-burn-in state."""
    validate_panel(data)
    if spec.estimator != "bgre":
        raise ValidationError("run_chain drives the BGRE sampler; use estimate.fit for baselines")
    if m_iter < 1 or not 0 <= burn_in < m_iter or thin < 1:
        raise ValidationError("need m_iter >= 1, 0 <= burn_in < m_iter and thin >= 1")
    if priors is None:
        priors = calibrate_priors(data, spec)
    model = Model(data, spec, priors)
    rng = make_rng(seed) if rng is None else rng
    sgp = None
    if spec.membership_prior == "sgp":
        from .sgp import SgpPrior
        table = sgp_table if sgp_table is not None else priors.sgp_table
        if table is None:
            raise ValidationError("SGP prior requires an a_table")
        sgp = SgpPrior(table, priors.sgp_epsilon)
        if sgp.a_table.shape[0] != model.n:
            raise ValidationError("a_table must have one row per unit")
    state = init.copy() if init is not None else initial_state(model, rng, sgp)
    states = []
    for s in range(1, m_iter + 1):
        try:
            gibbs_sweep(state, model, rng, sgp)
        except NumericalError as exc:
            raise type(exc)(f"iteration {s}: {exc}") from exc
        if not (np.isfinite(state.concentration) and np.all(np.isfinite(state.alpha_atoms))
                and np.all(np.isfinite(state.sigma2_atoms))
                and (model.grouped_theta or np.isfinite(state.rho))):
            raise ChainDiverged(f"iteration {s}: non-finite parameter state")
        if s > burn_in and (s - burn_in) % thin == 0:
            kept = state.copy()
            states.append(kept)
            if callback is not None:
                callback(s, kept)
    meta = {
        "sampler": "dp-slice",
        "estimator": spec.label,
        "spec": spec.to_dict(),
        "m_iter": m_iter,
        "burn_in": burn_in,
        "thin": thin,
        "seed": seed,
    }
    return PosteriorDraws(states=states, meta=meta)
