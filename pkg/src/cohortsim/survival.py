"""Survival distributions as an algebraic tree.

Leaves are parametric families or Kaplan-Meier estimates; inner nodes apply
treatment effects or combine curves.  Every node exposes ``sf(t)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import special, stats


class SurvivalError(ValueError):
    pass


def _as_time(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(np.isnan(t)):
        raise SurvivalError("survival evaluated at a negative time")
    return t


class Distribution:
    def sf(self, t) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, t):
        return self.sf(t)


def _positive(**kw):
    for k, v in kw.items():
        if not np.isfinite(v) or v <= 0:
            raise SurvivalError(f"{k} must be positive, got {v}")


@dataclass(frozen=True)
class Exponential(Distribution):
    rate: float

    def __post_init__(self):
        _positive(rate=self.rate)

    def sf(self, t):
        return np.exp(-self.rate * _as_time(t))


@dataclass(frozen=True)
class Weibull(Distribution):
    shape: float
    scale: float

    def __post_init__(self):
        _positive(shape=self.shape, scale=self.scale)

    def sf(self, t):
        return np.exp(-((_as_time(t) / self.scale) ** self.shape))


@dataclass(frozen=True)
class LogNormal(Distribution):
    meanlog: float
    sdlog: float

    def __post_init__(self):
        _positive(sdlog=self.sdlog)

    def sf(self, t):
        t = _as_time(t)
        with np.errstate(divide="ignore"):
            z = (np.log(t) - self.meanlog) / self.sdlog
        return stats.norm.sf(z)


@dataclass(frozen=True)
class Gamma(Distribution):
    shape: float
    rate: float

    def __post_init__(self):
        _positive(shape=self.shape, rate=self.rate)

    def sf(self, t):
        return stats.gamma.sf(_as_time(t), self.shape, scale=1.0 / self.rate)


@dataclass(frozen=True)
class Gompertz(Distribution):
    """Hazard ``rate * exp(shape * t)``; ``shape`` may be negative."""

    shape: float
    rate: float

    def __post_init__(self):
        _positive(rate=self.rate)
        if not np.isfinite(self.shape):
            raise SurvivalError("shape must be finite")

    def sf(self, t):
        t = _as_time(t)
        # rate / shape * expm1(shape * t), stable as shape -> 0
        return np.exp(-self.rate * t * special.exprel(self.shape * t))


FAMILIES = {
    "exponential": (Exponential, ("rate",)),
    "exp": (Exponential, ("rate",)),
    "weibull": (Weibull, ("shape", "scale")),
    "lognormal": (LogNormal, ("meanlog", "sdlog")),
    "lnorm": (LogNormal, ("meanlog", "sdlog")),
    "gamma": (Gamma, ("shape", "rate")),
    "gompertz": (Gompertz, ("shape", "rate")),
}


def define_survival(distribution: str, **params) -> Distribution:
    try:
        cls, names = FAMILIES[distribution]
    except KeyError:
        raise SurvivalError(f"unknown distribution {distribution!r}; choose from {sorted(FAMILIES)}") from None
    missing = set(names) - set(params)
    extra = set(params) - set(names)
    if missing or extra:
        raise SurvivalError(f"{distribution} takes parameters {names}, got {sorted(params)}")
    return cls(**{k: float(params[k]) for k in names})


@dataclass(frozen=True, eq=False)
class KaplanMeier(Distribution):
    """Right-continuous product-limit step function.

    ``times`` are the distinct event times and ``surv`` the survival just
    after each of them; ``last_time`` is the largest observed time (event or
    censored).  Evaluating beyond it is an error.
    """

    times: np.ndarray
    surv: np.ndarray
    last_time: float

    def sf(self, t):
        t = _as_time(t)
        if np.any(t > self.last_time):
            raise SurvivalError(
                f"Kaplan-Meier estimate evaluated at t={float(np.max(t))} beyond last observed time {self.last_time}"
            )
        idx = np.searchsorted(self.times, t, side="right")
        return np.concatenate([[1.0], self.surv])[idx]


def km_estimate(times: Sequence[float], status: Sequence[int]) -> KaplanMeier:
    times = np.asarray(times, dtype=float)
    status = np.asarray(status)
    if times.size == 0:
        raise SurvivalError("Kaplan-Meier estimate needs at least one observation")
    if times.shape != status.shape:
        raise SurvivalError("times and status must have the same length")
    if np.any(times <= 0):
        raise SurvivalError("survival times must be positive")
    if not np.all(np.isin(status, (0, 1))):
        raise SurvivalError("status must be 0 (censored) or 1 (event)")
    event_times = np.unique(times[status == 1])
    s, surv = 1.0, []
    for u in event_times:
        at_risk = np.count_nonzero(times >= u)
        deaths = np.count_nonzero((times == u) & (status == 1))
        s *= 1.0 - deaths / at_risk
        surv.append(s)
    return KaplanMeier(event_times, np.asarray(surv), float(times.max()))


@dataclass(frozen=True)
class HazardRatio(Distribution):
    dist: Distribution
    hr: float

    def __post_init__(self):
        _positive(hr=self.hr)

    def sf(self, t):
        return self.dist.sf(t) ** self.hr


@dataclass(frozen=True)
class OddsRatio(Distribution):
    dist: Distribution
    or_: float

    def __post_init__(self):
        _positive(odds_ratio=self.or_)

    def sf(self, t):
        s = self.dist.sf(t)
        return s / (s + self.or_ * (1.0 - s))


@dataclass(frozen=True)
class AccelerationFactor(Distribution):
    dist: Distribution
    af: float

    def __post_init__(self):
        _positive(af=self.af)

    def sf(self, t):
        return self.dist.sf(_as_time(t) / self.af)


@dataclass(frozen=True)
class Joined(Distribution):
    """``dists[0]`` up to ``at[0]``, then each later curve conditioned on
    having survived to its cut time."""

    dists: tuple
    at: tuple

    def __post_init__(self):
        if len(self.dists) != len(self.at) + 1 or len(self.dists) < 2:
            raise SurvivalError("join needs n distributions and n - 1 cut times")
        at = np.asarray(self.at, dtype=float)
        if np.any(at <= 0) or np.any(np.diff(at) <= 0):
            raise SurvivalError("join cut times must be positive and strictly increasing")

    def sf(self, t):
        t = _as_time(t)
        out = self.dists[0].sf(np.minimum(t, self.at[0]))
        for i, cut in enumerate(self.at):
            nxt = self.at[i + 1] if i + 1 < len(self.at) else np.inf
            d = self.dists[i + 1]
            tt = np.clip(t, cut, nxt)
            base = d.sf(np.array([cut]))[0]
            if base <= 0:
                raise SurvivalError(f"cannot join at t={cut}: tail survival is 0 there")
            out = out * (d.sf(tt) / base)  # ratio first so tiny tails do not underflow
        return out


@dataclass(frozen=True)
class Pooled(Distribution):
    dists: tuple
    weights: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if len(w) != len(self.dists) or len(w) == 0:
            raise SurvivalError("pool needs one weight per distribution")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise SurvivalError(f"pool weights must be non-negative and sum to 1, got {w.tolist()}")

    def sf(self, t):
        return sum(w * d.sf(t) for w, d in zip(self.weights, self.dists))


@dataclass(frozen=True)
class CombinedHazards(Distribution):
    dists: tuple

    def __post_init__(self):
        if not self.dists:
            raise SurvivalError("add_hazards needs at least one distribution")

    def sf(self, t):
        out = np.ones_like(_as_time(t))
        for d in self.dists:
            out = out * d.sf(t)
        return out


@dataclass(frozen=True)
class Fitted(Distribution):
    """A parametric curve carrying the raw data it was fitted on.

    Behaves as the parametric curve; ``compute_surv(..., km_limit=x)``
    splices the Kaplan-Meier estimate in before ``x``.
    """

    parametric: Distribution
    km: KaplanMeier

    def sf(self, t):
        return self.parametric.sf(t)

    def with_km_limit(self, limit: float) -> Joined:
        return Joined((self.km, self.parametric), (float(limit),))


def apply_hr(dist: Distribution, hr: float) -> HazardRatio:
    return HazardRatio(dist, float(hr))


def apply_or(dist: Distribution, or_: float) -> OddsRatio:
    return OddsRatio(dist, float(or_))


def apply_af(dist: Distribution, af: float) -> AccelerationFactor:
    return AccelerationFactor(dist, float(af))


def join(*dists: Distribution, at) -> Joined:
    return Joined(tuple(dists), tuple(float(a) for a in np.atleast_1d(at)))


def pool(*dists: Distribution, weights) -> Pooled:
    return Pooled(tuple(dists), tuple(float(w) for w in weights))


def add_hazards(*dists: Distribution) -> CombinedHazards:
    return CombinedHazards(tuple(dists))


def survival_at(dist: Distribution, t) -> np.ndarray:
    return dist.sf(t)


def compute_surv(dist: Distribution, time, cycle_length: float = 1.0, km_limit: float = 0.0) -> np.ndarray:
    """Per-cycle conditional event probabilities.

    For each cycle index ``k`` in ``time``:
    ``1 - S(k * cycle_length) / S((k - 1) * cycle_length)``.
    """
    time = np.asarray(time, dtype=float)
    if np.any(time < 1):
        raise SurvivalError("compute_surv time values must be >= 1")
    if cycle_length <= 0:
        raise SurvivalError("cycle_length must be positive")
    if km_limit > 0:
        if not isinstance(dist, Fitted):
            raise SurvivalError("km_limit requires a distribution declared with raw survival data")
        dist = dist.with_km_limit(km_limit)
    s_prev = dist.sf((time - 1) * cycle_length)
    s_now = dist.sf(time * cycle_length)
    if np.any(s_prev <= 0):
        raise SurvivalError("conditioning on survival probability 0 in compute_surv")
    return np.clip(1.0 - s_now / s_prev, 0.0, 1.0)


def read_survival_data(path) -> tuple[np.ndarray, np.ndarray]:
    """Two-column CSV (``time``, ``status``) with a header row."""
    import pandas as pd

    df = pd.read_csv(path)
    if list(df.columns[:2]) != ["time", "status"]:
        raise SurvivalError(f"{path}: expected columns 'time,status', got {list(df.columns)}")
    return df["time"].to_numpy(float), df["status"].to_numpy(int)


def km_from_file(path, parametric: Optional[Distribution] = None) -> Distribution:
    km = km_estimate(*read_survival_data(path))
    return Fitted(parametric, km) if parametric is not None else km
