"""One-step-ahead predictive distribution and evaluation metrics.

Point (RMSFE), set (HPDI coverage and length), density (LPS, CRPS),
parameter recovery, clustering accuracy and chain diagnostics.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .errors import DegeneratePredictive, InvalidLevel, MissingCovariates, ValidationError
from .gibbs import PosteriorDraws
from .panel import ModelSpec, PanelData, TrueParams, alpha_design
from .rng import make_rng

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class PredictiveDraws:
    draws: np.ndarray      # N x M simulated y_{i,T+1}
    means: np.ndarray      # N x M conditional means
    variances: np.ndarray  # N x M conditional variances

    @property
    def n_draws(self) -> int:
        return self.draws.shape[1]


def _spec_of(draws: PosteriorDraws, spec: Optional[ModelSpec]) -> ModelSpec:
    if spec is not None:
        return spec
    if "spec" in draws.meta:
        return ModelSpec.from_dict(draws.meta["spec"])
    raise ValidationError("model spec missing from draws and arguments")


def conditional_moments(draws: PosteriorDraws, data: PanelData,
                        spec: Optional[ModelSpec] = None):
    """N x M means and variances of y_{i,T+1} given each retained state.

    Time-varying intercepts carry the last in-sample value forward.
    """
    spec = _spec_of(draws, spec)
    if not draws.states:
        raise ValidationError("no retained draws")
    n, t = data.n_units, data.n_periods
    p = data.n_covariates
    if p > 0 and data.x_next is None:
        raise MissingCovariates("x_{i,T+1} is required when the model has covariates")
    x_next = data.x_next if p > 0 else np.zeros((n, 0))
    y_last = data.y[:, -1]
    last_row = alpha_design(t, spec.time_varying_alpha)[-1]
    m = len(draws.states)
    means = np.empty((n, m))
    variances = np.empty((n, m))
    for j, st in enumerate(draws.states):
        g = st.membership
        if st.theta_atoms is not None:
            th = st.theta_atoms[g]
            mu = th[:, 0] + th[:, 1] * y_last + np.einsum("np,np->n", x_next, th[:, 2:])
        else:
            beta = st.beta if st.beta.shape[0] == n else np.broadcast_to(st.beta, (n, p))
            mu = (st.alpha_atoms @ last_row)[g] + st.rho * y_last
            if p > 0:
                mu = mu + np.einsum("np,np->n", x_next, beta)
        means[:, j] = mu
        variances[:, j] = st.sigma2_atoms[g]
    return means, variances


def predictive_draws(draws: PosteriorDraws, data: PanelData, spec: Optional[ModelSpec] = None,
                     rng: Optional[np.random.Generator] = None, seed: int = 0) -> PredictiveDraws:
    """One simulated y_{i,T+1} per retained state and unit."""
    means, variances = conditional_moments(draws, data, spec)
    rng = make_rng(seed, 0x70726564) if rng is None else rng
    sims = means + np.sqrt(variances) * rng.standard_normal(means.shape)
    return PredictiveDraws(draws=sims, means=means, variances=variances)


def point_forecast(pred: PredictiveDraws) -> np.ndarray:
    return pred.draws.mean(axis=1)


def _window_count(m: int, level: float) -> int:
    # guard against level * m landing a hair above an integer
    return min(m, max(1, math.ceil(level * m - 1e-9)))


def hpdi(draws, level: float = 0.95):
    """Shortest window holding ceil(level M) consecutive sorted draws.

    Ties go to the window with the lowest lower bound.
    """
    if not 0 < level < 1:
        raise InvalidLevel(f"level must lie in (0, 1), got {level}")
    s = np.sort(np.asarray(draws, dtype=float).ravel())
    m = s.size
    if m < 2:
        raise ValidationError("hpdi needs at least two draws")
    c = _window_count(m, level)
    widths = s[c - 1:] - s[:m - c + 1]
    j = int(np.argmin(widths))
    return float(s[j]), float(s[j + c - 1])


def equal_tailed(draws, level: float = 0.95):
    """Central window of the same ceil(level M) sorted draws used by :func:`hpdi`."""
    if not 0 < level < 1:
        raise InvalidLevel(f"level must lie in (0, 1), got {level}")
    s = np.sort(np.asarray(draws, dtype=float).ravel())
    m = s.size
    c = _window_count(m, level)
    j = (m - c) // 2
    return float(s[j]), float(s[j + c - 1])


def hpdi_rows(draws: np.ndarray, level: float = 0.95) -> np.ndarray:
    """Row-wise :func:`hpdi` for an N x M matrix; returns N x 2."""
    if not 0 < level < 1:
        raise InvalidLevel(f"level must lie in (0, 1), got {level}")
    s = np.sort(np.asarray(draws, dtype=float), axis=1)
    m = s.shape[1]
    if m < 2:
        raise ValidationError("hpdi needs at least two draws")
    c = _window_count(m, level)
    widths = s[:, c - 1:] - s[:, :m - c + 1]
    j = np.argmin(widths, axis=1)
    rows = np.arange(s.shape[0])
    return np.column_stack([s[rows, j], s[rows, j + c - 1]])


def log_predictive_scores(pred: PredictiveDraws, holdout) -> np.ndarray:
    """Per-unit log of the mixture-of-normals predictive density at y_{i,T+1}."""
    y = np.asarray(holdout, dtype=float)
    if y.shape != (pred.means.shape[0],):
        raise ValidationError("holdout must have one value per unit")
    mu, var = pred.means, pred.variances
    dev = y[:, None] - mu
    with np.errstate(divide="ignore", invalid="ignore"):
        logd = -0.5 * (LOG_2PI + np.log(var) + dev * dev / var)
    zero = var <= 0
    if np.any(zero):
        logd = np.where(zero, np.where(dev == 0, np.inf, -np.inf), logd)
    out = logsumexp(logd, axis=1) - math.log(mu.shape[1])
    if not np.all(np.isfinite(out)):
        raise DegeneratePredictive("zero predictive variance with outcome off the mean")
    return out


def lps(pred: PredictiveDraws, holdout) -> float:
    return float(np.mean(log_predictive_scores(pred, holdout)))


def crps(draws, y: float) -> float:
    """Energy-form estimator (1/M) sum |x_m - y| - (1/(2M^2)) sum sum |x_m - x_n|."""
    x = np.sort(np.asarray(draws, dtype=float).ravel())
    m = x.size
    if m < 2:
        raise ValidationError("crps needs at least two draws")
    first = np.mean(np.abs(x - y))
    # sum_{m,n} |x_m - x_n| = 2 sum_k (2k - M + 1) x_(k) over sorted draws
    k = np.arange(m)
    pair = 2.0 * np.sum((2 * k - m + 1) * x)
    return float(max(first - pair / (2.0 * m * m), 0.0))


def crps_rows(draws: np.ndarray, y) -> np.ndarray:
    x = np.sort(np.asarray(draws, dtype=float), axis=1)
    m = x.shape[1]
    if m < 2:
        raise ValidationError("crps needs at least two draws")
    first = np.mean(np.abs(x - np.asarray(y, dtype=float)[:, None]), axis=1)
    k = np.arange(m)
    pair = 2.0 * (x @ (2 * k - m + 1))
    return np.maximum(first - pair / (2.0 * m * m), 0.0)


# ----------------------------------------------------------------------------
# Reports

@dataclass
class MetricsReport:
    rmsfe: float = float("nan")
    mean_error: float = float("nan")
    forecast_std: float = float("nan")
    set_coverage: float = float("nan")
    avg_set_length: float = float("nan")
    lps: float = float("nan")
    crps: float = float("nan")
    rho_rmse: float = float("nan")
    rho_bias: float = float("nan")
    rho_std: float = float("nan")
    rho_avg_ci_length: float = float("nan")
    rho_coverage: float = float("nan")
    alpha_bias: float = float("nan")
    avg_k: float = float("nan")
    mode_k: Optional[int] = None

    def __post_init__(self):
        for name in ("set_coverage", "rho_coverage"):
            v = getattr(self, name)
            if not math.isnan(v) and not -1e-12 <= v <= 1 + 1e-12:
                raise ValidationError(f"{name} must lie in [0, 1]")
        for name in ("avg_set_length", "rho_avg_ci_length", "crps"):
            v = getattr(self, name)
            if not math.isnan(v) and v < 0:
                raise ValidationError(f"{name} must be nonnegative")

    def merged(self, other: "MetricsReport") -> "MetricsReport":
        """Fields of ``other`` fill the ones still missing here."""
        out = {}
        for f in dataclasses.fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            missing = a is None or (isinstance(a, float) and math.isnan(a))
            out[f.name] = b if missing else a
        return MetricsReport(**out)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        vals = {}
        for f in dataclasses.fields(cls):
            v = d.get(f.name)
            if f.name == "mode_k":
                vals[f.name] = None if v is None else int(v)
            else:
                vals[f.name] = float("nan") if v is None else float(v)
        return cls(**vals)


def forecast_metrics(pred: PredictiveDraws, holdout, level: float = 0.95) -> MetricsReport:
    """Point, set and density accuracy against the realised y_{i,T+1}.

    The forecast error is y_{i,T+1} minus the posterior predictive mean.
    """
    y = np.asarray(holdout, dtype=float)
    err = y - point_forecast(pred)
    iv = hpdi_rows(pred.draws, level)
    covered = (iv[:, 0] <= y) & (y <= iv[:, 1])
    return MetricsReport(
        rmsfe=float(np.sqrt(np.mean(err ** 2))),
        mean_error=float(np.mean(err)),
        forecast_std=float(np.std(err, ddof=1)) if err.size > 1 else 0.0,
        set_coverage=float(np.mean(covered)),
        avg_set_length=float(np.mean(iv[:, 1] - iv[:, 0])),
        lps=lps(pred, y),
        crps=float(np.mean(crps_rows(pred.draws, y))),
    )


def rho_chain(draws: PosteriorDraws) -> np.ndarray:
    """rho per retained state; the fully grouped model reports the unit average."""
    out = np.empty(len(draws.states))
    for j, st in enumerate(draws.states):
        if st.theta_atoms is not None:
            out[j] = float(np.mean(st.theta_atoms[st.membership, 1]))
        else:
            out[j] = st.rho
    return out


def k_chain(draws: PosteriorDraws) -> np.ndarray:
    """Nonempty group count per retained state (``meta['k_override']`` wins)."""
    k = draws.meta.get("k_override")
    if k is not None:
        return np.full(len(draws.states), int(k))
    return np.array([st.k_nonempty for st in draws.states])


def unit_alpha_forecast(draws: PosteriorDraws, spec: Optional[ModelSpec] = None,
                        n_periods: Optional[int] = None) -> np.ndarray:
    """Posterior mean over draws of each unit's intercept entering y_{i,T+1}."""
    spec = _spec_of(draws, spec)
    acc = None
    for st in draws.states:
        if st.theta_atoms is not None:
            a = st.theta_atoms[st.membership, 0]
        else:
            if spec.time_varying_alpha:
                a = st.alpha_atoms[st.membership, -1]
            else:
                a = st.alpha_atoms[st.membership, 0]
        acc = a.copy() if acc is None else acc + a
    return acc / len(draws.states)


def estimation_metrics(draws: PosteriorDraws, truth: TrueParams, level: float = 0.95,
                       spec: Optional[ModelSpec] = None) -> MetricsReport:
    """rho recovery, intercept bias and group counts for one chain."""
    rho = rho_chain(draws)
    est = float(np.mean(rho))
    lo, hi = hpdi(rho, level) if rho.size >= 2 else (rho[0], rho[0])
    ks = k_chain(draws)
    vals, counts = np.unique(ks, return_counts=True)
    alpha_true = truth.unit_alpha_paths()[:, -1]
    alpha_bias = float(np.mean(unit_alpha_forecast(draws, spec) - alpha_true))
    return MetricsReport(
        rho_rmse=abs(est - truth.rho),
        rho_bias=est - truth.rho,
        rho_std=float(np.std(rho, ddof=1)) if rho.size > 1 else 0.0,
        rho_avg_ci_length=float(hi - lo),
        rho_coverage=float(lo <= truth.rho <= hi),
        alpha_bias=alpha_bias,
        avg_k=float(np.mean(ks)),
        mode_k=int(vals[np.argmax(counts)]),
    )


# ----------------------------------------------------------------------------
# Clustering

def canonical_labels(membership: np.ndarray) -> np.ndarray:
    """Relabel groups 0, 1, ... in order of first appearance."""
    _, first, inv = np.unique(membership, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inv]


def similarity_matrix(draws: PosteriorDraws) -> np.ndarray:
    """Fraction of retained draws in which units i and j share a group."""
    n = draws.states[0].membership.size
    acc = np.zeros((n, n))
    for st in draws.states:
        g = st.membership
        acc += g[:, None] == g[None, :]
    return acc / len(draws.states)


def mode_partition(draws: PosteriorDraws, similarity: Optional[np.ndarray] = None) -> np.ndarray:
    """Most frequent partition among the draws.

    Ties (including the common case where every partition is distinct) are
    broken by squared distance of the co-clustering matrix to the posterior
    similarity, then by draw order.
    """
    sim = similarity_matrix(draws) if similarity is None else similarity
    parts = [canonical_labels(st.membership) for st in draws.states]
    keys = {}
    for j, g in enumerate(parts):
        keys.setdefault(g.tobytes(), []).append(j)
    top = max(len(v) for v in keys.values())
    cands = [v[0] for v in keys.values() if len(v) == top]

    def loss(j):
        g = parts[j]
        return float(np.sum(((g[:, None] == g[None, :]) - sim) ** 2))

    best = min(cands, key=lambda j: (loss(j), j))
    return parts[best]


def match_groups(estimated: np.ndarray, true: np.ndarray) -> dict:
    """Greedy maximum-overlap matching of estimated to true labels.

    Pairs are taken by descending overlap; ties go to the lower true label,
    then the lower estimated label. Returns {true_label: estimated_label}.
    """
    tl = np.unique(true)
    el = np.unique(estimated)
    overlap = np.array([[np.sum((true == a) & (estimated == b)) for b in el] for a in tl])
    pairs = sorted(((-overlap[i, j], tl[i], el[j]) for i in range(tl.size)
                    for j in range(el.size)))
    used_t, used_e, out = set(), set(), {}
    for neg, a, b in pairs:
        if neg == 0:
            break
        if a in used_t or b in used_e:
            continue
        out[int(a)] = int(b)
        used_t.add(a)
        used_e.add(b)
    return out


def clustering_metrics(draws: PosteriorDraws, truth: TrueParams):
    """(per-true-group accuracy, similarity matrix)."""
    sim = similarity_matrix(draws)
    est = mode_partition(draws, sim)
    true = np.asarray(truth.membership)
    mapping = match_groups(est, true)
    acc = {}
    for a in np.unique(true):
        members = true == a
        b = mapping.get(int(a))
        acc[int(a)] = 0.0 if b is None else float(np.mean(est[members] == b))
    return acc, sim


# ----------------------------------------------------------------------------
# Chain diagnostics

@dataclass
class Diagnostics:
    trace: np.ndarray
    cumulative_mean: np.ndarray
    acf: np.ndarray           # lags 0..L
    degenerate: bool = False  # constant chain; acf beyond lag 0 reported as 0


def autocorrelation(x, max_lag: int):
    x = np.asarray(x, dtype=float)
    if x.size < max_lag + 1:
        raise ValidationError("chain shorter than max_lag + 1")
    d = x - x.mean()
    denom = float(np.dot(d, d))
    if denom <= 0:
        out = np.zeros(max_lag + 1)
        out[0] = 1.0
        return out, True
    return np.array([np.dot(d[:x.size - k], d[k:]) / denom for k in range(max_lag + 1)]), False


def diagnostics(draws, parameter: str = "rho", max_lag: int = 50) -> Diagnostics:
    """Trace, running mean and autocorrelation of a scalar parameter.

    ``draws`` is a PosteriorDraws (parameter names as in :meth:`series`, plus
    ``k``) or a plain 1-d array.
    """
    if isinstance(draws, PosteriorDraws):
        if parameter == "k":
            x = k_chain(draws).astype(float)
        elif parameter == "rho":
            x = rho_chain(draws)
        else:
            name = "concentration" if parameter == "a" else parameter
            x = np.asarray(draws.series(name), dtype=float)
    else:
        x = np.asarray(draws, dtype=float)
    acf, flag = autocorrelation(x, max_lag)
    cm = np.cumsum(x) / np.arange(1, x.size + 1)
    return Diagnostics(trace=x, cumulative_mean=cm, acf=acf, degenerate=flag)


# ----------------------------------------------------------------------------
# Tables

TABLE_COLUMNS = (
    ("rmsfe", "RMSFE"), ("mean_error", "Error"), ("forecast_std", "Std"),
    ("avg_set_length", "AvgL"), ("set_coverage", "Cov"), ("lps", "LPS"), ("crps", "CRPS"),
    ("rho_rmse", "RMSE(rho)"), ("rho_bias", "Bias(rho)"), ("rho_std", "Std(rho)"),
    ("rho_avg_ci_length", "AvgL(rho)"), ("rho_coverage", "Cov(rho)"),
    ("alpha_bias", "Bias(alpha)"), ("avg_k", "AvgK"), ("mode_k", "ModeK"),
)


def format_table(reports: dict) -> str:
    """Aligned-column text table: one row per estimator."""
    width = max([9] + [len(n) for n in reports])
    head = f"{'':<{width}}" + "".join(f"{h:>12}" for _, h in TABLE_COLUMNS)
    lines = [head]
    for name, rep in reports.items():
        cells = []
        for key, _ in TABLE_COLUMNS:
            v = getattr(rep, key)
            if v is None or (isinstance(v, float) and math.isnan(v)):
                cells.append(f"{'-':>12}")
            elif key == "mode_k":
                cells.append(f"{int(v):>12d}")
            else:
                cells.append(f"{v:>12.4f}")
        lines.append(f"{name:<{width}}" + "".join(cells))
    return "\n".join(lines) + "\n"
