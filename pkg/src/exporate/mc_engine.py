"""Monte-Carlo estimators over a :class:`TrajectoryBatch`.

Rates of expectation curves are estimated only where the sample mean is
trustworthy.  For heavy-tailed batches (products of uniforms, negative
wealth moments) the sample mean at large ``t`` is carried by a handful of
trajectories and its root rate is biased low; every curve estimator
therefore restricts itself to the *reliable prefix*: the longest initial
stretch ``0..t*`` on which the relative standard error of the mean stays
at or below ``max_rel_se``.  Log-regressions over that prefix are weighted
by the inverse delta-method variance of ``log(mean)``.

Reductions run in a fixed order (column-wise ``math.fsum``), so reported
numbers are identical across reruns and thread counts.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import EmptyWindow, NonPositiveWealth
from .processes import TrajectoryBatch
from .seq_analysis import (
    LOG_REGRESSION,
    TAIL_SUP_ROOT,
    FiniteSequence,
    RateEstimate,
    double_tail_sum,
    log_tail_sum,
    upper_rate,
    window_bounds,
)
from .errors import SumOverflow

UNRELIABLE_TAIL = "UnreliableTail"
DEGENERATE_CURVE = "DegenerateCurve"
ALL_CENSORED = "AllCensored"
CENSORED = -1

DEFAULT_MAX_REL_SE = 0.5
# weight floor for columns with zero sampling variance (e.g. X_0 = 1 for every path)
_EXACT_VAR = 1e-12


# --------------------------------------------------------------------------
# Expectation curves and rates
# --------------------------------------------------------------------------


def _column_means(data: np.ndarray) -> np.ndarray:
    n = data.shape[0]
    cols = np.asfortranarray(data)
    out = np.empty(data.shape[1])
    lo = cols.min(axis=0)
    hi = cols.max(axis=0)
    for t in range(data.shape[1]):
        # a constant column has that constant as its exact mean
        out[t] = lo[t] if lo[t] == hi[t] else math.fsum(cols[:, t].tolist()) / n
    return out


def _relative_se(data: np.ndarray, means: np.ndarray) -> np.ndarray:
    n = data.shape[0]
    if n < 2:
        return np.zeros(data.shape[1])
    sd = data.std(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        rse = np.where(means > 0, sd / (math.sqrt(n) * means), np.inf)
    rse[sd == 0] = np.where(means[sd == 0] > 0, 0.0, np.inf)
    return rse


def expectation_curve(batch: TrajectoryBatch) -> FiniteSequence:
    """Sample mean of ``X_t`` over trajectories, ``t = 0..T``."""
    return FiniteSequence(_column_means(batch.data))


@dataclass(frozen=True)
class CurveStats:
    """An expectation (or exceedance-frequency) curve with its sampling error."""

    means: np.ndarray
    rel_se: np.ndarray
    max_rel_se: float = DEFAULT_MAX_REL_SE

    @property
    def reliable_horizon(self) -> int:
        """Last ``t`` of the initial stretch whose relative SE is at most ``max_rel_se``."""
        bad = ~(self.rel_se <= self.max_rel_se)
        bad[0] = False
        return int(np.argmax(bad)) - 1 if bad.any() else len(self.means) - 1

    @classmethod
    def from_data(cls, data: np.ndarray, max_rel_se: float = DEFAULT_MAX_REL_SE) -> "CurveStats":
        means = _column_means(data)
        return cls(means, _relative_se(data, means), max_rel_se)


def curve_stats(batch: TrajectoryBatch, max_rel_se: float = DEFAULT_MAX_REL_SE) -> CurveStats:
    return CurveStats.from_data(batch.data, max_rel_se)


def _curve_rate(stats: CurveStats, method: str, window: float, horizon: str, weighted: bool) -> RateEstimate:
    notes = []
    n_full = len(stats.means)
    if n_full > 1 and not stats.means[1:].any():
        # the sample curve vanishes from t = 1 on: nothing to fit, limsup is 0
        return RateEstimate(0.0, 1, n_full - 1, method, 0.0, 0, (DEGENERATE_CURVE,))
    if horizon == "reliable":
        n = max(stats.reliable_horizon + 1, 2)
        if n < n_full:
            notes.append(f"reliable_horizon={n - 1}")
    elif horizon == "full":
        n = n_full
    else:
        raise ValueError(f"horizon must be 'reliable' or 'full', got {horizon!r}")
    window = max(window, 2.0 / n)
    seq = FiniteSequence(stats.means[:n])
    rse = stats.rel_se[:n]
    weights = 1.0 / (rse * rse + _EXACT_VAR) if (weighted and method == LOG_REGRESSION) else None
    if weights is not None:
        weights = np.where(np.isfinite(weights), weights, 0.0)
    est = upper_rate(seq, method, window, weights=weights)
    start = est.window_start
    if (rse[start:] > stats.max_rel_se).any():
        notes.append(UNRELIABLE_TAIL)
    return RateEstimate(est.rate, est.window_start, est.window_len, est.method, est.diagnostic, est.skipped, tuple(notes))


def estimate_A(
    batch: TrajectoryBatch,
    method: str = LOG_REGRESSION,
    window: float = 1.0,
    horizon: str = "reliable",
    max_rel_se: float = DEFAULT_MAX_REL_SE,
    weighted: bool = True,
) -> RateEstimate:
    """Root rate of the expectation curve, ``limsup E[X_t]**(1/t)``.

    Args:
        batch: simulated trajectories.
        method: ``"log_regression"`` or ``"tail_sup_root"``.
        window: tail fraction of the analysed range.
        horizon: ``"reliable"`` analyses only the reliable prefix;
            ``"full"`` analyses ``0..T`` and notes ``UnreliableTail`` when
            the window contains columns with relative SE above
            ``max_rel_se``.
        max_rel_se: reliability threshold on the relative SE of the mean.
        weighted: weight the log-regression by inverse variance of
            ``log(mean)``.
    """
    return _curve_rate(curve_stats(batch, max_rel_se), method, window, horizon, weighted)


@dataclass(frozen=True)
class TrajectoryRates:
    estimates: tuple
    method: str
    window: float

    @property
    def rates(self) -> np.ndarray:
        return np.array([e.rate for e in self.estimates])

    @property
    def max_rate(self) -> float:
        """Empirical maximum, a lower proxy of the essential supremum."""
        return float(self.rates.max())

    @property
    def mean_rate(self) -> float:
        return float(np.mean(self.rates))


def trajectory_rates(batch: TrajectoryBatch, method: str = TAIL_SUP_ROOT, window: float = 0.2) -> TrajectoryRates:
    """Per-trajectory :func:`upper_rate` over the full horizon."""
    ests = tuple(upper_rate(batch.row(j), method, window) for j in range(batch.n_traj))
    return TrajectoryRates(ests, method, window)


def exceedance_frequency(batch: TrajectoryBatch, eps: float) -> FiniteSequence:
    """Empirical ``P[X_t >= eps]`` for ``t = 0..T``."""
    return expectation_curve(batch.map(lambda x: (x >= eps).astype(float)))


def tail_prob_rate(
    batch: TrajectoryBatch,
    eps: float,
    window: float = 0.2,
    method: str = LOG_REGRESSION,
    fit_window: float = 1.0,
    max_rel_se: float = DEFAULT_MAX_REL_SE,
) -> RateEstimate:
    """Root rate of ``t -> P[X_t >= eps]``.

    When the frequency curve is identically 0 (or 1) on the tail ``window``
    of the full horizon the rate is 0 (or 1) with a ``DegenerateCurve``
    note.  Otherwise the curve, being the expectation of the indicator
    process, is handled exactly like :func:`estimate_A` with ``fit_window``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    ind = (batch.data >= eps).astype(float)
    stats = CurveStats.from_data(ind, max_rel_se)
    start, w = window_bounds(len(stats.means), window)
    tail = stats.means[start:]
    for level in (0.0, 1.0):
        if (tail == level).all():
            return RateEstimate(level, start, w, method, 0.0, 0, (DEGENERATE_CURVE,))
    return _curve_rate(stats, method, fit_window, "reliable", True)


def markov_gap(batch: TrajectoryBatch, eps: float) -> np.ndarray:
    """``eps * freq(X_t >= eps) - mean(X_t)`` per ``t``; never positive.

    Both sides use correctly rounded sums, so the inequality is exact on
    the stored sample rather than true up to rounding.
    """
    n = batch.n_traj
    cols = np.asfortranarray(batch.data)
    out = np.empty(cols.shape[1])
    for t in range(cols.shape[1]):
        col = cols[:, t]
        total = math.fsum(col.tolist())
        count = int((col >= eps).sum())
        out[t] = (eps * count) / n - total / n
    return out


# --------------------------------------------------------------------------
# Hitting, envelope and barrier times
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class HittingSummary:
    """First-passage samples per threshold; ``-1`` marks a censored trajectory."""

    kind: str  # "eps" (downward, X_t < eps) or "barrier" (upward, W_t > b)
    thresholds: tuple
    samples: np.ndarray  # shape (len(thresholds), n_traj)
    horizon: int
    notes: tuple = field(default=())

    @property
    def n_traj(self) -> int:
        return self.samples.shape[1]

    def censored_count(self, k: int) -> int:
        return int((self.samples[k] == CENSORED).sum())

    def censored_fraction(self, k: int) -> float:
        return self.censored_count(k) / self.n_traj

    def mean(self, k: int) -> Optional[float]:
        s = self.samples[k]
        s = s[s != CENSORED]
        return float(s.mean()) if s.size else None

    def mean_lower_bound(self, k: int) -> float:
        s = np.where(self.samples[k] == CENSORED, self.horizon, self.samples[k])
        return float(s.mean())

    def se(self, k: int) -> Optional[float]:
        s = self.samples[k]
        s = s[s != CENSORED]
        return float(s.std(ddof=1) / math.sqrt(s.size)) if s.size > 1 else None

    def log_scale(self, k: int) -> float:
        x = self.thresholds[k]
        return abs(math.log(x)) if self.kind == "eps" else math.log(x)

    def ratio(self, k: int) -> Optional[float]:
        m, scale = self.mean(k), self.log_scale(k)
        if m is None or scale <= 0:
            return None
        return m / scale

    def ratio_se(self, k: int) -> Optional[float]:
        se, scale = self.se(k), self.log_scale(k)
        if se is None or scale <= 0:
            return None
        return se / scale

    def rows(self):
        """``(threshold, statistic, value)`` records, one per cell."""
        for k, x in enumerate(self.thresholds):
            yield x, "censored_count", self.censored_count(k)
            yield x, "mean", self.mean(k)
            yield x, "mean_lower_bound", self.mean_lower_bound(k)
            yield x, "ratio", self.ratio(k)
            yield x, "ratio_se", self.ratio_se(k)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "horizon": self.horizon,
            "n_traj": self.n_traj,
            "notes": list(self.notes),
            "thresholds": [
                {
                    "threshold": x,
                    "censored_count": self.censored_count(k),
                    "mean": self.mean(k),
                    "mean_lower_bound": self.mean_lower_bound(k),
                    "ratio": self.ratio(k),
                    "ratio_se": self.ratio_se(k),
                }
                for k, x in enumerate(self.thresholds)
            ],
        }

    def to_csv(self) -> str:
        return _rows_to_csv(["threshold", "statistic", "value"], self.rows())


def _rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in r])
    return buf.getvalue()


def _first_true(mask: np.ndarray) -> np.ndarray:
    hit = mask.any(axis=1)
    idx = np.argmax(mask, axis=1)
    return np.where(hit, idx, CENSORED).astype(np.int64)


def hitting_times(batch: TrajectoryBatch, eps_grid: Sequence[float]) -> HittingSummary:
    """``tau_eps = min{t : X_t < eps}`` per trajectory for each ``eps``."""
    grid = tuple(float(e) for e in eps_grid)
    if not grid or any(e <= 0 for e in grid):
        raise ValueError("eps_grid must be a nonempty list of positive numbers")
    if any(b >= a for a, b in zip(grid, grid[1:])):
        raise ValueError("eps_grid must be strictly decreasing")
    samples = np.stack([_first_true(batch.data < e) for e in grid])
    summary = HittingSummary("eps", grid, samples, batch.horizon)
    return _flag_censoring(summary)


def _flag_censoring(summary: HittingSummary) -> HittingSummary:
    notes = [f"{ALL_CENSORED} at {x!r}" for k, x in enumerate(summary.thresholds) if summary.censored_count(k) == summary.n_traj]
    if not notes:
        return summary
    return HittingSummary(summary.kind, summary.thresholds, summary.samples, summary.horizon, tuple(notes))


def _ratio_matrix(data: np.ndarray, R: float) -> np.ndarray:
    t = np.arange(data.shape[1], dtype=float)
    with np.errstate(over="ignore", under="ignore", divide="ignore", invalid="ignore"):
        powers = np.power(float(R), t)
        out = data / powers
        bad = (~np.isfinite(powers) | (powers == 0))[None, :] & (data > 0)
        if bad.any():
            logr = np.log(np.where(data > 0, data, 1.0)) - t * math.log(R)
            out = np.where(bad, np.exp(logr), out)
    return out


@dataclass(frozen=True)
class EnvelopeTimes:
    """Per-trajectory ``H_R = min{t : sup_{i>=t} X_i / R^i <= 1}`` with its expectation bound."""

    R: float
    samples: np.ndarray
    horizon: int
    bound: float
    notes: tuple = ()

    def _summary(self) -> HittingSummary:
        return HittingSummary("envelope", (self.R,), self.samples[None, :], self.horizon, self.notes)

    @property
    def n_traj(self) -> int:
        return self.samples.size

    @property
    def censored_count(self) -> int:
        return self._summary().censored_count(0)

    @property
    def censored_fraction(self) -> float:
        return self.censored_count / self.n_traj

    @property
    def mean(self) -> Optional[float]:
        return self._summary().mean(0)

    @property
    def mean_lower_bound(self) -> float:
        return self._summary().mean_lower_bound(0)

    def to_dict(self) -> dict:
        return {
            "R": self.R,
            "censored_count": self.censored_count,
            "mean": self.mean,
            "mean_lower_bound": self.mean_lower_bound,
            "bound": self.bound,
            "notes": list(self.notes),
        }


def envelope_samples(data: np.ndarray, R: float) -> np.ndarray:
    """Exact ``H_R`` on the simulated range by a backward suffix-maximum scan."""
    if R <= 0:
        raise ValueError("R must be positive")
    ratios = _ratio_matrix(data, R)
    suffix_max = np.maximum.accumulate(ratios[:, ::-1], axis=1)[:, ::-1]
    ok = suffix_max <= 1.0
    h = np.argmax(ok, axis=1).astype(np.int64)
    # the terminal entry violating the envelope leaves H_R beyond the horizon
    h[~ok[:, -1]] = CENSORED
    return h


def envelope_time(batch: TrajectoryBatch, R: float) -> EnvelopeTimes:
    samples = envelope_samples(batch.data, R)
    curve = expectation_curve(batch)
    try:
        bound = double_tail_sum(curve, R)
    except SumOverflow:
        bound = math.inf if log_tail_sum(curve, R, double=True) > 0 else 0.0
    notes = (ALL_CENSORED,) if (samples == CENSORED).all() else ()
    return EnvelopeTimes(float(R), samples, batch.horizon, bound, notes)


def _require_positive(batch: TrajectoryBatch):
    if not (batch.data > 0).all():
        raise NonPositiveWealth("wealth batch must be strictly positive")


def reciprocal(wealth_batch: TrajectoryBatch) -> TrajectoryBatch:
    """``X_t = 1 / W_t``: turns barrier crossings of wealth into hitting times of ``X``."""
    _require_positive(wealth_batch)
    return wealth_batch.map(lambda w: 1.0 / w)


def barrier_times(wealth_batch: TrajectoryBatch, b_grid: Sequence[float]) -> HittingSummary:
    """``T_b = min{t : W_t > b}`` per trajectory for each barrier ``b``."""
    _require_positive(wealth_batch)
    grid = tuple(float(b) for b in b_grid)
    if not grid or any(b <= 0 for b in grid):
        raise ValueError("b_grid must be a nonempty list of positive numbers")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("b_grid must be strictly increasing")
    samples = np.stack([_first_true(wealth_batch.data > b) for b in grid])
    return _flag_censoring(HittingSummary("barrier", grid, samples, wealth_batch.horizon))


# --------------------------------------------------------------------------
# Risk-sensitive criterion and log-growth
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RiskEstimate:
    """``C_hat``: tail-window minimum of ``(1/t)(1/gamma) log mean(W_t^gamma)``."""

    gamma: float
    C_hat: float
    window_start: int  # first t of the window
    window_len: int
    curve: np.ndarray  # entries for t = 1..T
    se: float
    notes: tuple = ()

    def __post_init__(self):
        if not self.gamma < 0:
            raise ValueError("gamma must be negative")

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "C_hat": self.C_hat,
            "window_start": self.window_start,
            "window_len": self.window_len,
            "se": self.se,
            "notes": list(self.notes),
        }


def _risk_curve(log_w: np.ndarray, gamma: float, t: np.ndarray) -> np.ndarray:
    a = gamma * log_w
    log_mean = logsumexp(a, axis=0) - math.log(log_w.shape[0])
    return log_mean / (gamma * t)


def risk_criterion(
    wealth_batch: TrajectoryBatch,
    gamma: float,
    window: float = 0.2,
    groups: int = 20,
    max_rel_se: float = DEFAULT_MAX_REL_SE,
) -> RiskEstimate:
    """Estimate the long-run risk-sensitive criterion for ``gamma < 0``.

    Negative moments are accumulated in log space (log-sum-exp of
    ``gamma * log W_t``).  The standard error is a delete-a-group jackknife
    over ``groups`` contiguous blocks of trajectories.
    """
    if not gamma < 0:
        raise ValueError("gamma must be negative")
    _require_positive(wealth_batch)
    n, m = wealth_batch.data.shape
    log_w = np.log(wealth_batch.data[:, 1:])
    t = np.arange(1, m, dtype=float)
    curve = _risk_curve(log_w, gamma, t)
    start, w = window_bounds(m - 1, window)
    c_hat = float(curve[start:].min())

    notes = []
    a = gamma * log_w[:, start:]
    log_e1 = logsumexp(a, axis=0) - math.log(n)
    log_e2 = logsumexp(2 * a, axis=0) - math.log(n)
    with np.errstate(over="ignore"):
        rel_var = np.expm1(np.minimum(log_e2 - 2 * log_e1, 700.0))
    if n > 1 and (np.sqrt(np.maximum(rel_var, 0.0) / n) > max_rel_se).any():
        notes.append(UNRELIABLE_TAIL)

    g = min(groups, n)
    se = 0.0
    if g >= 2:
        edges = np.linspace(0, n, g + 1).astype(int)
        block_lse = np.stack([logsumexp(a[edges[i] : edges[i + 1]], axis=0) for i in range(g)])
        sizes = np.diff(edges)
        loo = []
        for i in range(g):
            rest = np.delete(block_lse, i, axis=0)
            lm = logsumexp(rest, axis=0) - math.log(n - sizes[i])
            loo.append(float((lm / (gamma * t[start:])).min()))
        loo = np.array(loo)
        se = float(math.sqrt((g - 1) / g * ((loo - loo.mean()) ** 2).sum()))
    return RiskEstimate(float(gamma), c_hat, int(t[start]), w, curve, se, tuple(notes))


@dataclass(frozen=True)
class GrowthRates:
    final: np.ndarray  # (1/T) log W_T
    tail_min: np.ndarray  # min over the tail window of (1/t) log W_t
    window_start: int

    def to_dict(self) -> dict:
        return {
            "mean_final": float(self.final.mean()),
            "mean_tail_min": float(self.tail_min.mean()),
            "min_tail_min": float(self.tail_min.min()),
            "window_start": self.window_start,
        }


def log_growth_rates(wealth_batch: TrajectoryBatch, window: float = 0.2) -> GrowthRates:
    _require_positive(wealth_batch)
    m = wealth_batch.data.shape[1]
    t = np.arange(1, m, dtype=float)
    per_t = np.log(wealth_batch.data[:, 1:]) / t
    start, _ = window_bounds(m - 1, window)
    return GrowthRates(per_t[:, -1].copy(), per_t[:, start:].min(axis=1), int(t[start]))


def extrapolate_gamma_zero(gammas: Sequence[float], c_hats: Sequence[float]) -> float:
    """Intercept of a least-squares line of ``C_hat`` against ``gamma`` (the gamma -> 0- proxy)."""
    g = np.asarray(gammas, dtype=float)
    c = np.asarray(c_hats, dtype=float)
    if g.size == 1:
        return float(c[0])
    slope, intercept = np.polyfit(g, c, 1)
    return float(intercept)


def rate_estimates_csv(rows) -> str:
    """CSV of ``(label, method, RateEstimate)`` triples."""
    recs = []
    for label, est in rows:
        recs.append((label, est.method, est.rate, est.window_start, est.window_len, est.diagnostic, est.skipped, ";".join(est.notes)))
    return _rows_to_csv(["spec", "method", "rate", "window_start", "window_len", "diagnostic", "skipped", "notes"], recs)


def ceil_steps(C: float, eps: float) -> int:
    """Smallest natural ``t`` with ``C**t <= eps`` for ``0 < C < 1``."""
    if not 0 < C < 1:
        raise ValueError("C must lie in (0, 1)")
    if eps >= 1:
        return 0
    t = max(0, math.ceil(math.log(eps) / math.log(C)))
    while C**t > eps:
        t += 1
    while t > 0 and C ** (t - 1) <= eps:
        t -= 1
    return t


def pathwise_tau_bound_violations(
    batch: TrajectoryBatch, eps_grid: Sequence[float], C: float, hitting: Optional[HittingSummary] = None
) -> tuple[int, int]:
    """Count trajectories violating ``tau_eps <= max(H_C, ceil_steps(C, eps)) + 1``.

    Only trajectories with an uncensored ``H_C`` whose bound falls inside
    the horizon are checkable.  Returns ``(violations, checked_pairs)``.
    """
    hit = hitting if hitting is not None else hitting_times(batch, eps_grid)
    h = envelope_samples(batch.data, C)
    violations = checked = 0
    for k, eps in enumerate(hit.thresholds):
        bound = np.maximum(h, ceil_steps(C, eps)) + 1
        ok_h = (h != CENSORED) & (bound <= batch.horizon)
        tau = hit.samples[k]
        bad = ok_h & ((tau == CENSORED) | (tau > bound))
        violations += int(bad.sum())
        checked += int(ok_h.sum())
    return violations, checked
