"""Monte Carlo data-generating processes (DGP1-DGP7).

All DGPs share rho = 0.7 and a balanced block partition of the units. The
generated panel spans ``n_periods`` periods after y_0; the final period is
split off as the one-step-ahead holdout.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import UnknownDgp, ValidationError
from .panel import PanelData, TrueParams
from .rng import make_rng

RHO = 0.7
# Innovation standard deviation of DGP1 and DGP4 (variance 0.64).
NOISE_SD_TI = 0.8
ALPHA_SD = 0.5
INITIAL_CONDITIONS = ("zero-start", "stationary", "zero")


@dataclass(frozen=True)
class DgpSpec:
    dgp_id: int = 1
    n_units: int = 100
    n_periods: int = 11
    k0: int = 4
    seed: int = 0
    rho: float = RHO
    # None keeps each DGP's own innovation variance; a value overrides it
    # (homoskedastic DGPs only), e.g. for the larger-variance variants.
    sigma2: Optional[float] = None
    # Levels of the DGP3/DGP7 mean paths (constant, level-shift, rising, falling).
    path_levels: tuple = (1.0, 2.0, 3.0, 2.5, 4.5)
    break_period: int = 5
    # None picks the DGP default: "zero-start" (y_0 = alpha_i1 + eps_0, the
    # process leaves 0 one period before the sample) for time-invariant
    # intercepts and "zero" (y_0 = 0) for the time-varying paths, which are
    # undefined before t = 1. "stationary" draws y_0 from the stationary law.
    initial: Optional[str] = None

    def __post_init__(self):
        if self.dgp_id not in range(1, 8):
            raise UnknownDgp(f"dgp_id must be in 1..7, got {self.dgp_id}")
        if self.k0 < 1 or self.n_units < self.k0:
            raise ValidationError("need k0 >= 1 and n_units >= k0")
        if self.n_periods < 3:
            raise ValidationError("n_periods must be at least 3 (one is the holdout)")
        if self.initial is not None and self.initial not in INITIAL_CONDITIONS:
            raise ValidationError(f"initial must be one of {INITIAL_CONDITIONS}")
        if self.sigma2 is not None and not self.sigma2 > 0:
            raise ValidationError("sigma2 override must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["path_levels"] = list(self.path_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DgpSpec":
        d = dict(d)
        if "path_levels" in d:
            d["path_levels"] = tuple(d["path_levels"])
        return cls(**d)


def initial_condition(spec: DgpSpec) -> str:
    if spec.initial is not None:
        return spec.initial
    return "zero" if spec.dgp_id in (3, 7) else "zero-start"


def balanced_membership(n_units: int, k0: int) -> np.ndarray:
    """First floor(N/K0) units in group 0, next block in group 1, ...; the last
    group absorbs the remainder."""
    size = n_units // k0
    g = np.minimum(np.arange(n_units) // size, k0 - 1)
    return g


def dgp3_mean_paths(k0: int, n_periods: int, levels=(1.0, 2.0, 3.0, 2.5, 4.5),
                    break_period: int = 5) -> np.ndarray:
    """Group mean paths over periods 1..n_periods.

    Group 1 is constant, group 2 shifts level at ``break_period``, group 3
    rises linearly and group 4 falls linearly.
    """
    if not 1 <= k0 <= 4:
        raise ValidationError("only four qualitative mean paths are defined (k0 <= 4)")
    const, before, after, low, high = levels
    t = np.arange(1, n_periods + 1)
    ramp = np.linspace(low, high, n_periods)
    paths = np.vstack([
        np.full(n_periods, const),
        np.where(t < break_period, before, after),
        ramp,
        ramp[::-1],
    ])
    return paths[:k0].astype(float)


def dgp2_sigma2(k0: int) -> np.ndarray:
    k = np.arange(1, k0 + 1)
    return 1.5 * (1.0 - (k - 1) / k0) ** 2


def generate(spec: DgpSpec, rng: Optional[np.random.Generator] = None):
    """Simulate one panel; returns ``(PanelData, TrueParams)``."""
    rng = make_rng(spec.seed) if rng is None else rng
    n, t_all, k0, rho = spec.n_units, spec.n_periods, spec.k0, spec.rho
    dgp = spec.dgp_id
    g = balanced_membership(n, k0)
    unit_alpha = None

    if dgp in (1, 2):
        alpha_k = rng.normal(np.arange(1, k0 + 1), ALPHA_SD)
        paths = np.repeat(alpha_k[:, None], t_all, axis=1)
    elif dgp in (5, 6):
        paths = np.repeat(np.arange(1.0, k0 + 1)[:, None], t_all, axis=1)
    elif dgp in (3, 7):
        paths = dgp3_mean_paths(k0, t_all, spec.path_levels, spec.break_period)
    else:  # dgp 4: no group structure
        g = np.zeros(n, dtype=int)
        paths = np.zeros((1, t_all))
        unit_alpha = np.repeat(rng.normal(0.0, ALPHA_SD, n)[:, None], t_all, axis=1)

    if dgp in (1, 4):
        s2 = NOISE_SD_TI ** 2
    else:
        s2 = 1.0
    sigma2 = np.full(paths.shape[0], s2 if spec.sigma2 is None else spec.sigma2)
    if dgp in (2, 6):
        sigma2 = dgp2_sigma2(k0)

    extra_var = 0.0
    if dgp == 3:
        unit_alpha = rng.normal(paths[g], ALPHA_SD)
        extra_var = ALPHA_SD ** 2
    alpha_it = paths[g] if unit_alpha is None else unit_alpha
    sd = np.sqrt(sigma2[g])

    y = np.empty((n, t_all + 1))
    initial = initial_condition(spec)
    if initial == "stationary":
        # stationary law implied by the unit's first-period intercept
        stat_var = (sigma2[g] + extra_var) / (1.0 - rho ** 2)
        y[:, 0] = rng.normal(alpha_it[:, 0] / (1.0 - rho), np.sqrt(stat_var))
    elif initial == "zero":
        y[:, 0] = 0.0
    else:
        y[:, 0] = alpha_it[:, 0] + sd * rng.standard_normal(n)
    eps = rng.standard_normal((n, t_all)) * sd[:, None]
    for t in range(1, t_all + 1):
        y[:, t] = alpha_it[:, t - 1] + rho * y[:, t - 1] + eps[:, t - 1]

    data = PanelData(y=y[:, :-1].copy(), holdout=y[:, -1].copy())
    truth = TrueParams(rho=rho, alpha_paths=paths, sigma2=sigma2, membership=g,
                       unit_alpha=unit_alpha)
    return data, truth
