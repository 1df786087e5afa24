"""Subjective group probability (SGP) membership prior.

Each unit carries Dirichlet membership probabilities omega_i whose prior
means come from a researcher-supplied table a (N x K^p). Labels keep their
meaning across sweeps, so SGP chains skip label switching and compaction.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
import pandas as pd

from .dgp import balanced_membership
from .errors import ValidationError
from .gibbs import GibbsState, Model, draw_memberships

SCENARIOS = (1, 2, 3, 4, 5)


def dirichlet_with_zeros(params: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Row-wise Dirichlet draws; zero parameters give exact zeros."""
    params = np.asarray(params, dtype=float)
    gam = np.zeros_like(params)
    pos = params > 0
    gam[pos] = rng.standard_gamma(params[pos])
    tot = gam.sum(axis=1, keepdims=True)
    # all-tiny gamma draws can underflow to zero; fall back to the mean
    bad = tot[:, 0] <= 0
    if np.any(bad):
        gam[bad] = params[bad]
        tot[bad] = params[bad].sum(axis=1, keepdims=True)
    return gam / tot


class SgpPrior:
    """Holds the subjective table and builds omega's conditional posterior."""

    def __init__(self, a_table, epsilon: float = 0.3):
        tab = np.asarray(a_table, dtype=float)
        if tab.ndim != 2 or tab.shape[1] < 1 or np.any(tab < 0):
            raise ValidationError("a_table must be a nonnegative N x K^p matrix")
        if np.any(np.abs(tab.sum(axis=1) - 1.0) > 1e-12):
            raise ValidationError("each a_table row must sum to 1")
        if not 0 < epsilon < 1:
            raise ValidationError("epsilon must lie in (0, 1)")
        self.a_table = tab
        self.epsilon = float(epsilon)

    @property
    def k_preset(self) -> int:
        return self.a_table.shape[1]

    def prior_table(self, k_star: int, membership: Optional[np.ndarray] = None) -> np.ndarray:
        """N x K* prior means of omega after reconciling K* with K^p.

        Always recomputed from the original table, so the epsilon rescaling
        never compounds.
        """
        kp = self.k_preset
        n = self.a_table.shape[0]
        if k_star == kp:
            return self.a_table.copy()
        if k_star > kp:
            extra = np.full((n, k_star - kp), self.epsilon / (k_star - kp))
            return np.hstack([(1.0 - self.epsilon) * self.a_table, extra])
        # fewer potential groups than preset: keep the K* most used labels
        counts = np.zeros(kp) if membership is None else np.bincount(
            membership[membership < kp], minlength=kp).astype(float)
        used = [k for k in np.argsort(-counts, kind="stable") if counts[k] > 0][:k_star]
        for k in range(k_star):
            if len(used) == k_star:
                break
            if k not in used:
                used.append(k)
        sel = np.sort(np.asarray(used[:k_star], dtype=int))
        sub = self.a_table[:, sel]
        tot = sub.sum(axis=1, keepdims=True)
        out = np.full((n, k_star), 1.0 / k_star)
        ok = tot[:, 0] > 0
        out[ok] = sub[ok] / tot[ok]
        return out

    def omega_posterior_params(self, membership: np.ndarray, k_star: int) -> np.ndarray:
        """Dirichlet parameters a_ik + 1(g_i = k) over the K* potential groups."""
        params = self.prior_table(k_star, membership)
        n = params.shape[0]
        inside = membership < k_star
        params[np.arange(n)[inside], membership[inside]] += 1.0
        return params

    def draw_omega(self, state: GibbsState, rng: np.random.Generator) -> np.ndarray:
        return dirichlet_with_zeros(
            self.omega_posterior_params(state.membership, state.k_potential), rng)


def draw_memberships_sgp(state: GibbsState, model: Model, rng: np.random.Generator,
                         omega: Optional[np.ndarray] = None) -> np.ndarray:
    """g_i proportional to likelihood x omega_ik x 1(u_i < pi_k)."""
    omega = state.omega if omega is None else omega
    if omega is None or omega.shape != (model.n, state.k_potential):
        raise ValidationError("omega must be N x K* before drawing memberships")
    with np.errstate(divide="ignore"):
        return draw_memberships(state, model, rng, log_prior=np.log(omega))


def build_scenario(scenario_id: int, true_membership: np.ndarray, k0: int) -> np.ndarray:
    """Subjective table for the five benchmark scenarios.

    1: certain and correct; 2: 70% on the truth, the rest spread evenly;
    3: uniform; 4 and 5: certain block assignment into k0-1 and k0+1 groups.
    """
    if scenario_id not in SCENARIOS:
        raise ValidationError(f"scenario_id must be one of {SCENARIOS}")
    g = np.asarray(true_membership, dtype=int)
    n = g.size
    if scenario_id == 1:
        return np.eye(k0)[g]
    if scenario_id == 2:
        if k0 == 1:
            return np.ones((n, 1))
        tab = np.full((n, k0), 0.3 / (k0 - 1))
        tab[np.arange(n), g] = 0.7
        return tab
    if scenario_id == 3:
        return np.full((n, k0), 1.0 / k0)
    k = k0 - 1 if scenario_id == 4 else k0 + 1
    if k < 1 or k > n:
        raise ValidationError(f"scenario {scenario_id} needs 1 <= K <= N, got K={k}")
    return np.eye(k)[balanced_membership(n, k)]


def read_a_table(path) -> np.ndarray:
    """Read ``unit,g1..gKp``; rows must sum to one."""
    df = pd.read_csv(path, float_precision="round_trip")
    cols = [c for c in df.columns if c != "unit"]
    if "unit" not in df.columns or not cols:
        raise ValidationError("a_table CSV needs a unit column and g1..gKp columns")
    tab = df[cols].to_numpy(dtype=float)
    SgpPrior(tab)
    return tab


def write_a_table(path, table: np.ndarray) -> None:
    table = np.asarray(table, dtype=float)
    df = pd.DataFrame(table, columns=[f"g{k + 1}" for k in range(table.shape[1])])
    df.insert(0, "unit", np.arange(1, table.shape[0] + 1))
    df.to_csv(path, index=False, float_format="%.17g")
