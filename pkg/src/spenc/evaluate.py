"""Model criticism and interpretation.

WAIC from posterior draws, factor/background partitioning of items by their
gate, and inversion of representation intervals into rules over raw counts.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .data import CountMatrix
from .inference import FitResult
from .model import LinkPair, decode_rate, encode, poisson_loglik

UNITS = ("entry", "user-row")


class DegenerateStrataError(ValueError):
    """Quantile thresholds do not split the representation into distinct strata."""


class EmptySupportWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# WAIC


@dataclass(frozen=True)
class WaicReport:
    """WAIC on the deviance scale with its standard error.

    ``waic = -2 (lppd - p_waic)``; ``se`` is the standard error of the sum
    of pointwise contributions.
    """

    waic: float
    se: float
    lppd: float
    p_waic: float
    unit: str
    n_points: int
    n_draws: int

    def interval(self, width: float = 2.0) -> tuple[float, float]:
        return self.waic - width * self.se, self.waic + width * self.se

    def to_json(self) -> dict:
        return {
            "waic": self.waic,
            "se": self.se,
            "lppd": self.lppd,
            "p_waic": self.p_waic,
            "unit": self.unit,
            "n_points": self.n_points,
            "n_draws": self.n_draws,
        }


def waic_from_loglik(loglik: np.ndarray, unit: str = "entry") -> WaicReport:
    """WAIC from an ``(S, n_points)`` array of pointwise log-likelihoods."""
    ll = np.asarray(loglik, dtype=np.float64)
    if ll.ndim != 2:
        raise ValueError("loglik must be a draws x points array")
    S, n = ll.shape
    if S < 2:
        raise ValueError(f"WAIC needs at least 2 draws, got {S}")
    lppd_i = logsumexp(ll, axis=0) - math.log(S)
    pw_i = ll.var(axis=0, ddof=1)
    return _report(lppd_i, pw_i, unit, S)


def _report(lppd_i, pw_i, unit, S) -> WaicReport:
    pw_i = np.maximum(pw_i, 0.0)
    elpd_i = -2.0 * (lppd_i - pw_i)
    n = elpd_i.size
    se = math.sqrt(n * elpd_i.var(ddof=1)) if n > 1 else 0.0
    return WaicReport(
        waic=float(elpd_i.sum()),
        se=float(se),
        lppd=float(lppd_i.sum()),
        p_waic=float(pw_i.sum()),
        unit=unit,
        n_points=int(n),
        n_draws=int(S),
    )


def pointwise_loglik(fit: FitResult, draw, Y, xi) -> np.ndarray:
    """Poisson log-probabilities of every entry of ``Y`` under one draw."""
    link = fit.link
    theta = encode(Y, draw.alpha, xi, link)
    rates = decode_rate(theta, draw, link, fit.model_config.eps_rate)
    return poisson_loglik(Y, rates)[0]


def waic(fit: FitResult, Y: CountMatrix, S: int = 200, unit: str = "entry", seed: int | None = None
         ) -> WaicReport:
    """WAIC of ``fit`` on ``Y`` from ``S`` variational posterior draws.

    A point is a matrix entry (``unit="entry"``) or a whole user row
    (``unit="user-row"``, log-likelihoods summed across items).  Draws are
    streamed; log-mean-exp and the variance are accumulated online so memory
    stays at a few ``U x I`` arrays.
    """
    if S < 2:
        raise ValueError(f"WAIC needs at least 2 draws, got {S}")
    if unit not in UNITS:
        raise ValueError(f"unknown pointwise unit {unit!r}; expected one of {UNITS}")
    if Y.n_cols != fit.n_items:
        raise ValueError(f"expected {fit.n_items} item columns, got {Y.n_cols}")
    Yd = Y.toarray().astype(np.float64)
    xi = fit.user_scales(Y)
    lse = mean = m2 = None
    for s, draw in enumerate(fit.draws(S, seed)):
        ll = pointwise_loglik(fit, draw, Yd, xi)
        if unit == "user-row":
            ll = ll.sum(axis=1)
        if lse is None:
            lse, mean, m2 = ll.copy(), ll.copy(), np.zeros_like(ll)
            continue
        lse = np.logaddexp(lse, ll)
        # Welford update
        delta = ll - mean
        mean += delta / (s + 1)
        m2 += delta * (ll - mean)
    lppd_i = (lse - math.log(S)).ravel()
    pw_i = (m2 / (S - 1)).ravel()
    return _report(lppd_i, pw_i, unit, S)


def waic_overlap(a: WaicReport, b: WaicReport, width: float = 2.0) -> bool:
    """True when ``|a - b|`` is within ``width`` combined standard errors."""
    return abs(a.waic - b.waic) <= width * math.hypot(a.se, b.se)


# ---------------------------------------------------------------------------
# partition


@dataclass(frozen=True)
class FeaturePartition:
    factor_items: list[int]
    background_items: list[int]
    gate_means: np.ndarray
    gate_threshold: float

    def to_json(self) -> dict:
        return {
            "factor_items": list(self.factor_items),
            "background_items": list(self.background_items),
            "gate_means": [float(v) for v in self.gate_means],
            "gate_threshold": self.gate_threshold,
        }


def feature_partition(fit: FitResult, gate_threshold: float = 0.5) -> FeaturePartition:
    """Split items by posterior-mean factor gate: factor iff gate > threshold."""
    if not 0 < gate_threshold < 1:
        raise ValueError("gate_threshold must lie in (0, 1)")
    g = np.asarray(fit.gate_mean, dtype=np.float64)
    factor = g > gate_threshold
    return FeaturePartition(
        factor_items=[int(i) for i in np.flatnonzero(factor)],
        background_items=[int(i) for i in np.flatnonzero(~factor)],
        gate_means=g.copy(),
        gate_threshold=float(gate_threshold),
    )


# ---------------------------------------------------------------------------
# rules


@dataclass(frozen=True)
class CountRule:
    """``theta_uk in (a, b]`` written as a condition on raw counts.

    The representation is ``xi_u * sum_{j in support} g_j(y_uj) alpha_jk``;
    the rule holds when that weighted count sum lies in
    ``(a / xi_u, b / xi_u]``.  Membership is decided by recomputing
    ``xi_u * sum`` in the encoder's order and comparing with ``(a, b]``, so
    with the full support the answer matches thresholding ``encode`` output
    bit for bit.
    """

    factor: int
    interval: tuple[float, float]
    support: list[tuple[int, float]]
    link: str
    eta: np.ndarray
    xi_u: float = 1.0
    support_threshold: float = 0.01
    warning: str | None = None

    @property
    def scaled_interval(self) -> tuple[float, float]:
        a, b = self.interval
        return a / self.xi_u, b / self.xi_u

    @property
    def items(self) -> list[int]:
        return [j for j, _ in self.support]

    def weighted_sum(self, y_row) -> float:
        """``sum_{j in support} g_j(y_j) alpha_jk`` accumulated in item order."""
        y = np.asarray(y_row, dtype=np.float64).ravel()
        link = LinkPair(self.link, self.eta)
        s = np.zeros(1)
        for j, a in self.support:
            if y[j] != 0:
                s += link.g_item(y[j:j + 1], j) * a
        return float(s[0])

    def value(self, y_row, xi_u: float | None = None) -> float:
        xi = self.xi_u if xi_u is None else xi_u
        return float(np.float64(xi) * np.float64(self.weighted_sum(y_row)))

    def contains(self, y_row, xi_u: float | None = None) -> bool:
        a, b = self.interval
        v = self.value(y_row, xi_u)
        return a < v <= b

    def to_json(self) -> dict:
        a, b = self.interval
        sa, sb = self.scaled_interval
        return {
            "factor": self.factor,
            "interval": [_num(a), _num(b)],
            "scaled_interval": [_num(sa), _num(sb)],
            "xi_u": self.xi_u,
            "link": self.link,
            "support_threshold": self.support_threshold,
            "support": [{"item": j, "alpha": a_} for j, a_ in self.support],
            "eta": {str(j): float(self.eta[j]) for j, _ in self.support},
            "warning": self.warning,
        }


def _num(v: float):
    # JSON has no infinities
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return float(v)


def invert_rule(fit: FitResult, k: int, interval: tuple[float, float], xi_u: float = 1.0,
                support_threshold: float = 0.01) -> CountRule:
    """Rule over raw counts equivalent to ``theta_uk in (a, b]``.

    The support keeps items with posterior-mean ``alpha_jk`` at least
    ``support_threshold`` times the column maximum (and strictly positive).
    An empty support gives a rule carrying a warning.
    """
    a, b = float(interval[0]), float(interval[1])
    if not a < b:
        raise ValueError(f"interval must satisfy a < b, got ({a}, {b})")
    if not xi_u > 0:
        raise ValueError("xi_u must be positive")
    if not 0 <= k < fit.n_factors:
        raise ValueError(f"factor index {k} out of range for K={fit.n_factors}")
    col = np.asarray(fit.alpha_mean[:, k], dtype=np.float64)
    cut = support_threshold * col.max() if col.size else 0.0
    keep = np.flatnonzero((col >= cut) & (col > 0))
    warning = None
    if keep.size == 0:
        warning = f"factor {k} has no item with alpha above the support threshold"
        warnings.warn(warning, EmptySupportWarning, stacklevel=2)
    return CountRule(
        factor=int(k),
        interval=(a, b),
        support=[(int(j), float(col[j])) for j in keep],
        link=fit.link.kind,
        eta=np.asarray(fit.eta, dtype=np.float64).copy(),
        xi_u=float(xi_u),
        support_threshold=float(support_threshold),
        warning=warning,
    )


@dataclass(frozen=True)
class Stratification:
    factor: int
    quantiles: tuple[float, ...]
    thresholds: np.ndarray
    assignment: np.ndarray
    rules: list[CountRule] = field(default_factory=list)

    @property
    def n_strata(self) -> int:
        return self.thresholds.size + 1

    def to_json(self) -> dict:
        return {
            "factor": self.factor,
            "quantiles": list(self.quantiles),
            "thresholds": [float(t) for t in self.thresholds],
            "counts": np.bincount(self.assignment, minlength=self.n_strata).tolist(),
            "strata": [r.to_json() for r in self.rules],
        }


def stratum_edges(thresholds) -> list[tuple[float, float]]:
    t = [-math.inf, *map(float, thresholds), math.inf]
    return list(zip(t[:-1], t[1:]))


def assign_strata(theta_k, thresholds) -> np.ndarray:
    """Stratum index of each value: stratum ``s`` is ``(t_s, t_{s+1}]``."""
    return np.searchsorted(np.asarray(thresholds), np.asarray(theta_k), side="left")


def stratify(fit: FitResult, theta: np.ndarray, k: int, quantiles=(1 / 3, 2 / 3), xi_u: float = 1.0,
             support_threshold: float = 0.01) -> Stratification:
    """Split users into strata by empirical quantiles of ``theta[:, k]``.

    Thresholds use linear interpolation between order statistics.  Each
    stratum ``(t_s, t_{s+1}]`` is inverted into a :class:`CountRule`.
    """
    q = tuple(float(x) for x in np.atleast_1d(quantiles))
    if not q or any(not 0 < x < 1 for x in q) or any(b <= a for a, b in zip(q, q[1:])):
        raise ValueError("quantiles must be strictly increasing values in (0, 1)")
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 2 or not 0 <= k < theta.shape[1]:
        raise ValueError(f"factor index {k} out of range")
    col = theta[:, k]
    if col.size == 0 or np.all(col == col[0]):
        raise DegenerateStrataError(f"representation column {k} is constant; strata are degenerate")
    t = np.quantile(col, q, method="linear")
    if np.any(np.diff(t) <= 0):
        raise DegenerateStrataError(f"quantile thresholds {t.tolist()} are not distinct")
    rules = [invert_rule(fit, k, edge, xi_u, support_threshold) for edge in stratum_edges(t)]
    return Stratification(factor=int(k), quantiles=q, thresholds=t, assignment=assign_strata(col, t),
                          rules=rules)
