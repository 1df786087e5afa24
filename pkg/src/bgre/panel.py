"""Panel data containers, model configuration, priors and OLS calibration."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd

from .errors import DimensionMismatch, NonFinite, SingularDesign, ValidationError

COEFFICIENT_MODES = ("homogeneous-beta", "heterogeneous-beta", "fully-grouped-theta")
MEMBERSHIP_PRIORS = ("stick-breaking", "sgp")
ESTIMATORS = ("bgre", "pooled", "flat", "param", "two-step-kmeans")


@dataclass(frozen=True)
class PanelData:
    """Balanced panel.

    ``y`` is N x (T+1); column 0 holds the initial condition y_{i0}.
    ``x`` (optional) is N x T x p and lines up with ``y[:, 1:]``.
    ``holdout`` is the realised y_{i,T+1} and ``x_next`` the covariates for
    period T+1, both optional.
    """

    y: np.ndarray
    x: Optional[np.ndarray] = None
    holdout: Optional[np.ndarray] = None
    x_next: Optional[np.ndarray] = None

    @property
    def n_units(self) -> int:
        return self.y.shape[0]

    @property
    def n_periods(self) -> int:
        return self.y.shape[1] - 1

    @property
    def n_covariates(self) -> int:
        return 0 if self.x is None else self.x.shape[2]

    @property
    def y_obs(self) -> np.ndarray:
        return self.y[:, 1:]

    @property
    def y_lag(self) -> np.ndarray:
        return self.y[:, :-1]

    @property
    def x_or_empty(self) -> np.ndarray:
        if self.x is None:
            return np.zeros((self.n_units, self.n_periods, 0))
        return self.x


def validate_panel(data: PanelData) -> PanelData:
    """Check balance, dimensions and finiteness; return ``data`` unchanged."""
    y = np.asarray(data.y)
    if y.ndim != 2:
        raise DimensionMismatch(f"y must be a N x (T+1) matrix, got shape {y.shape}")
    n, t1 = y.shape
    if n < 1 or t1 < 2:
        raise DimensionMismatch("panel needs at least one unit and one period after y_0")
    if not np.all(np.isfinite(y)):
        raise NonFinite("y contains NaN or Inf")
    t = t1 - 1
    if data.x is not None:
        x = np.asarray(data.x)
        if x.ndim != 3 or x.shape[:2] != (n, t):
            raise DimensionMismatch(f"x must have shape ({n}, {t}, p), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise NonFinite("x contains NaN or Inf")
    if data.holdout is not None:
        h = np.asarray(data.holdout)
        if h.shape != (n,):
            raise DimensionMismatch(f"holdout must have shape ({n},), got {h.shape}")
        if not np.all(np.isfinite(h)):
            raise NonFinite("holdout contains NaN or Inf")
    if data.x_next is not None:
        if data.x is None or np.shape(data.x_next) != (n, data.x.shape[2]):
            raise DimensionMismatch("x_next must be N x p and requires x")
        if not np.all(np.isfinite(data.x_next)):
            raise NonFinite("x_next contains NaN or Inf")
    return data


@dataclass(frozen=True)
class ModelSpec:
    time_varying_alpha: bool = False
    heteroskedastic: bool = False
    coefficient_mode: str = "heterogeneous-beta"
    membership_prior: str = "stick-breaking"
    estimator: str = "bgre"
    name: str = ""
    # SGP scenario id (1..5) used by the experiment harness to build a_table
    sgp_scenario: Optional[int] = None

    def __post_init__(self):
        if self.coefficient_mode not in COEFFICIENT_MODES:
            raise ValidationError(
                f"unknown coefficient_mode {self.coefficient_mode!r}; valid: {COEFFICIENT_MODES}")
        if self.membership_prior not in MEMBERSHIP_PRIORS:
            raise ValidationError(
                f"unknown membership_prior {self.membership_prior!r}; valid: {MEMBERSHIP_PRIORS}")
        if self.estimator not in ESTIMATORS:
            raise ValidationError(
                f"unknown estimator {self.estimator!r}; valid: {ESTIMATORS}")
        if self.coefficient_mode == "fully-grouped-theta":
            if self.estimator != "bgre":
                raise ValidationError("fully-grouped-theta requires estimator bgre")
            if self.time_varying_alpha:
                raise ValidationError("fully-grouped-theta supports time-invariant alpha only")
        if self.membership_prior == "sgp" and self.estimator != "bgre":
            raise ValidationError("the SGP membership prior requires estimator bgre")
        if self.estimator in ("pooled", "flat", "param") and self.time_varying_alpha:
            raise ValidationError(f"{self.estimator} uses a time-invariant intercept")

    @property
    def label(self) -> str:
        return self.name or variant_name(self)

    @property
    def alpha_dim(self) -> int:
        """1 for a time-invariant intercept; T is resolved at fit time."""
        return 0 if self.time_varying_alpha else 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_name(cls, name: str) -> "ModelSpec":
        """Build a spec from a short name.

        Accepted: ``ti-homo``, ``ti-hetero``, ``tv-homo``, ``tv-hetero``,
        ``pooled``, ``flat``, ``param``, ``theta`` (fully grouped, Ti-Homo),
        ``theta-hetero``, ``two-step-kmeans[:variant]`` and
        ``sgp<scenario>[:variant]`` (default variant ``tv-hetero``).
        """
        key = name.strip().lower()
        base, _, variant = key.partition(":")
        if base in _VARIANTS:
            tv, het = _VARIANTS[base]
            return cls(time_varying_alpha=tv, heteroskedastic=het, name=name)
        if base in ("pooled", "flat", "param"):
            return cls(estimator=base, name=name)
        if base in ("theta", "theta-hetero"):
            return cls(coefficient_mode="fully-grouped-theta",
                       heteroskedastic=base.endswith("hetero"), name=name)
        if base in ("two-step-kmeans", "two-step"):
            tv, het = _VARIANTS[variant or "ti-homo"]
            return cls(estimator="two-step-kmeans", time_varying_alpha=tv,
                       heteroskedastic=het, name=name)
        if base.startswith("sgp") and base[3:].isdigit():
            tv, het = _VARIANTS[variant or "tv-hetero"]
            return cls(membership_prior="sgp", time_varying_alpha=tv, heteroskedastic=het,
                       sgp_scenario=int(base[3:]), name=name)
        raise ValidationError(
            f"unknown estimator name {name!r}; valid: {sorted(_VARIANTS)} + "
            "['pooled', 'flat', 'param', 'theta', 'theta-hetero', "
            "'two-step-kmeans[:variant]', 'sgp<1-5>[:variant]']")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown ModelSpec fields: {sorted(unknown)}")
        return cls(**d)


_VARIANTS = {
    "ti-homo": (False, False),
    "ti-hetero": (False, True),
    "tv-homo": (True, False),
    "tv-hetero": (True, True),
}


def variant_name(spec: ModelSpec) -> str:
    tv = "Tv" if spec.time_varying_alpha else "Ti"
    het = "Hetero" if spec.heteroskedastic else "Homo"
    if spec.estimator in ("pooled", "flat", "param"):
        return spec.estimator.capitalize()
    if spec.estimator == "two-step-kmeans":
        return f"2step-{tv}-{het}"
    if spec.coefficient_mode == "fully-grouped-theta":
        return f"Theta-{het}"
    if spec.membership_prior == "sgp":
        return f"SGP{spec.sgp_scenario or ''}-{tv}-{het}"
    return f"{tv}-{het}"


@dataclass(frozen=True)
class PriorSpec:
    """Prior hyperparameters.

    ``mu_alpha``/``sigma_alpha`` have dimension 1 for time-invariant models and
    T for time-varying ones. ``a_shape``/``a_rate`` parameterise the
    Gamma hyperprior on the concentration parameter (shape, rate), so the
    prior mean is a_shape / a_rate.
    """

    mu_alpha: np.ndarray
    sigma_alpha: np.ndarray
    sigma_alpha_scale: float = 200.0
    nu_sigma: float = 12.0
    delta_sigma: float = 10.0
    mu_rho: float = 0.0
    sigma2_rho: float = 100.0
    sigma2_beta: float = 100.0
    a_shape: float = 0.4
    a_rate: float = 10.0
    # concentration that sizes the initial partition, K0 = a log((a + N) / a)
    a_init: float = 4.0
    sgp_table: Optional[np.ndarray] = None
    sgp_epsilon: float = 0.3
    mu_theta: Optional[np.ndarray] = None
    sigma_theta: Optional[np.ndarray] = None
    # hierarchical-normal (Param) hyperprior: mu | pi2 ~ N(m, v pi2), pi2 ~ IG(nu/2, delta/2)
    param_m: float = 0.0
    param_v: float = 1.0
    param_nu: float = 6.0
    param_delta: float = 4.0

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu_alpha, dtype=float))
        sig = np.atleast_2d(np.asarray(self.sigma_alpha, dtype=float))
        object.__setattr__(self, "mu_alpha", mu)
        object.__setattr__(self, "sigma_alpha", sig)
        if sig.shape != (mu.size, mu.size):
            raise DimensionMismatch("sigma_alpha must be L x L with L = len(mu_alpha)")
        for name in ("sigma_alpha_scale", "nu_sigma", "delta_sigma", "sigma2_rho",
                     "sigma2_beta", "a_shape", "a_rate", "a_init", "param_v", "param_nu", "param_delta"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be strictly positive")
        if not 0 < self.sgp_epsilon < 1:
            raise ValidationError("sgp_epsilon must lie in (0, 1)")
        if self.sgp_table is not None:
            tab = np.asarray(self.sgp_table, dtype=float)
            object.__setattr__(self, "sgp_table", tab)
            if tab.ndim != 2 or np.any(tab < 0):
                raise ValidationError("sgp_table must be a nonnegative N x K^p matrix")
            if np.any(np.abs(tab.sum(axis=1) - 1.0) > 1e-12):
                raise ValidationError("each sgp_table row must sum to 1")

    @property
    def a_prior_mean(self) -> float:
        return self.a_shape / self.a_rate

    def replace(self, **changes) -> "PriorSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSpec":
        arrays = {"mu_alpha", "sigma_alpha", "sgp_table", "mu_theta", "sigma_theta"}
        kw = {k: (np.asarray(v, dtype=float) if k in arrays and v is not None else v)
              for k, v in d.items()}
        return cls(**kw)


@dataclass(frozen=True)
class TrueParams:
    """Ground truth of a simulated panel.

    ``alpha_paths`` is K0 x T_total over periods 1..T+1 (the holdout period
    included); ``unit_alpha`` holds unit-level intercepts when the DGP draws
    them around the group paths (DGP3, DGP4). Labels are 0-based.
    """

    rho: float
    alpha_paths: np.ndarray
    sigma2: np.ndarray
    membership: np.ndarray
    unit_alpha: Optional[np.ndarray] = None

    @property
    def k0(self) -> int:
        return self.alpha_paths.shape[0]

    def unit_alpha_paths(self) -> np.ndarray:
        """N x T_total intercept of every unit."""
        if self.unit_alpha is not None:
            return self.unit_alpha
        return self.alpha_paths[self.membership]

    def unit_sigma2(self) -> np.ndarray:
        return self.sigma2[self.membership]

    def to_dict(self) -> dict:
        return {
            "rho": self.rho,
            "alpha_paths": self.alpha_paths.tolist(),
            "sigma2": self.sigma2.tolist(),
            "membership": (self.membership + 1).tolist(),
            "unit_alpha": None if self.unit_alpha is None else self.unit_alpha.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrueParams":
        ua = d.get("unit_alpha")
        return cls(
            rho=float(d["rho"]),
            alpha_paths=np.asarray(d["alpha_paths"], dtype=float),
            sigma2=np.asarray(d["sigma2"], dtype=float),
            membership=np.asarray(d["membership"], dtype=int) - 1,
            unit_alpha=None if ua is None else np.asarray(ua, dtype=float),
        )


@dataclass
class OlsFit:
    alpha: np.ndarray       # L intercepts
    rho: float
    beta: np.ndarray        # p slopes
    alpha_cov: np.ndarray   # L x L sampling covariance of the intercepts
    cov: np.ndarray         # full coefficient covariance (L + 1 + p)
    sigma2: float
    residuals: np.ndarray = field(repr=False)


def alpha_design(n_periods: int, time_varying: bool) -> np.ndarray:
    """T x L map from the intercept atom to the per-period intercepts."""
    if time_varying:
        return np.eye(n_periods)
    return np.ones((n_periods, 1))


def pooled_ols(data: PanelData, time_varying: bool = False) -> OlsFit:
    """Pooled OLS of y_it on intercept(s), y_{it-1} and x_it, ignoring groups."""
    n, t, p = data.n_units, data.n_periods, data.n_covariates
    dmat = alpha_design(t, time_varying)
    L = dmat.shape[1]
    design = np.concatenate(
        [np.broadcast_to(dmat, (n, t, L)), data.y_lag[:, :, None], data.x_or_empty], axis=2
    ).reshape(n * t, L + 1 + p)
    target = data.y_obs.reshape(-1)
    if n * t <= design.shape[1] or np.linalg.matrix_rank(design) < design.shape[1]:
        raise SingularDesign("pooled OLS design is rank deficient")
    xtx = design.T @ design
    coef = np.linalg.solve(xtx, design.T @ target)
    resid = target - design @ coef
    s2 = float(resid @ resid) / (n * t - design.shape[1])
    if not s2 > 1e-14 * max(1.0, float(target @ target) / target.size):
        raise SingularDesign("pooled OLS has zero residual variance")
    cov = s2 * np.linalg.inv(xtx)
    cov = 0.5 * (cov + cov.T)
    return OlsFit(alpha=coef[:L], rho=float(coef[L]), beta=coef[L + 1:],
                  alpha_cov=cov[:L, :L], cov=cov, sigma2=s2, residuals=resid)


def ols_sd_matrix(cov: np.ndarray) -> np.ndarray:
    """Symmetric square root of an OLS covariance (its "standard deviation")."""
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    if np.any(w <= 0):
        raise SingularDesign("OLS intercept covariance is not positive definite")
    return (v * np.sqrt(w)) @ v.T


def calibrate_priors(data: PanelData, spec: ModelSpec, **overrides: Any) -> PriorSpec:
    """Data-based prior: mu_alpha from pooled OLS and
    Sigma_alpha = scale x standard deviation of the OLS intercept(s).

    Keyword overrides replace any PriorSpec field (scale included) before the
    OLS-derived quantities are computed.
    """
    validate_panel(data)
    ols = pooled_ols(data, spec.time_varying_alpha)
    scale = float(overrides.pop("sigma_alpha_scale", 200.0))
    sigma_alpha = scale * ols_sd_matrix(ols.alpha_cov)
    base = dict(mu_alpha=ols.alpha, sigma_alpha=sigma_alpha, sigma_alpha_scale=scale)
    if spec.time_varying_alpha:
        ti = pooled_ols(data, False)
        base["param_m"] = float(ti.alpha[0])
    else:
        ti = ols
        base["param_m"] = float(ols.alpha[0])
    base.update(overrides)
    prior = PriorSpec(**base)
    if spec.coefficient_mode == "fully-grouped-theta" and prior.mu_theta is None:
        p = data.n_covariates
        mu_theta = np.concatenate([ti.alpha, [ti.rho], ti.beta])
        var = np.concatenate([[scale * np.sqrt(ti.alpha_cov[0, 0])], [prior.sigma2_rho],
                              np.full(p, prior.sigma2_beta)])
        prior = prior.replace(mu_theta=mu_theta, sigma_theta=np.diag(var))
    return prior


# ----------------------------------------------------------------------------
# CSV / JSON I/O


def read_panel_csv(path, holdout_last: bool = False) -> PanelData:
    """Read a long-format panel with header ``unit,t,y[,x1..xp]``, t = 0..T.

    With ``holdout_last`` the final period is split off as the holdout
    (y_{i,T+1}) and its covariates become ``x_next``.
    """
    df = pd.read_csv(path, float_precision="round_trip")
    missing = {"unit", "t", "y"} - set(df.columns)
    if missing:
        raise ValidationError(f"panel CSV is missing columns {sorted(missing)}")
    xcols = [c for c in df.columns if c not in ("unit", "t", "y")]
    units = list(dict.fromkeys(df["unit"]))
    periods = sorted(df["t"].unique())
    if periods != list(range(len(periods))) or len(periods) < 2:
        raise DimensionMismatch("t must run over 0..T with T >= 1")
    counts = df.groupby("unit")["t"].nunique()
    if len(df) != len(units) * len(periods) or counts.min() != len(periods):
        raise DimensionMismatch("panel is unbalanced or has duplicate (unit, t) rows")
    df = df.set_index(["unit", "t"])
    idx = pd.MultiIndex.from_product([units, periods])
    y = df["y"].reindex(idx).to_numpy(dtype=float).reshape(len(units), len(periods))
    x = None
    if xcols:
        xa = df[xcols].reindex(idx).to_numpy(dtype=float).reshape(
            len(units), len(periods), len(xcols))
        x = xa[:, 1:, :]  # covariates of period 0 are unused
    holdout = x_next = None
    if holdout_last:
        if y.shape[1] < 3:
            raise DimensionMismatch("holdout split needs T >= 2")
        holdout = y[:, -1].copy()
        # an all-missing final period only supplies covariates for forecasting
        if np.all(np.isnan(holdout)):
            holdout = None
        y = y[:, :-1]
        if x is not None:
            x_next = x[:, -1, :].copy()
            x = x[:, :-1, :]
    return validate_panel(PanelData(y=y, x=x, holdout=holdout, x_next=x_next))


def write_panel_csv(path, data: PanelData, include_holdout: bool = True) -> None:
    n, t = data.n_units, data.n_periods
    y = data.y
    x = data.x
    if include_holdout and data.holdout is not None:
        y = np.column_stack([y, data.holdout])
        if x is not None:
            nxt = data.x_next if data.x_next is not None else np.full((n, x.shape[2]), np.nan)
            x = np.concatenate([x, nxt[:, None, :]], axis=1)
    periods = y.shape[1]
    rows = {
        "unit": np.repeat(np.arange(1, n + 1), periods),
        "t": np.tile(np.arange(periods), n),
        "y": y.reshape(-1),
    }
    if x is not None:
        # period 0 carries no covariates
        xfull = np.concatenate([np.full((n, 1, x.shape[2]), np.nan), x], axis=1)
        for j in range(x.shape[2]):
            rows[f"x{j + 1}"] = xfull[:, :, j].reshape(-1)
    pd.DataFrame(rows).to_csv(path, index=False, float_format="%.17g")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
