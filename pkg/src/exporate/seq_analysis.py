"""Deterministic computations on finite nonnegative sequences.

A :class:`FiniteSequence` is one trajectory, or one expectation curve, seen
as the numbers ``x_t`` for ``t = start .. start + len - 1``.  The functions
here estimate its root rate ``limsup x_t**(1/t)`` from a tail window, compute
geometric envelopes ``sup x_t / R**t`` and the single and double tail sums,
and find first indices below a threshold.

Conventions: ``log(0) = -inf`` and a zero entry has root value 0; the
``t = 0`` term never enters root-taking but is part of every sum and
envelope.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import EmptyWindow, NegativeValue, SumOverflow

TAIL_SUP_ROOT = "tail_sup_root"
LOG_REGRESSION = "log_regression"
RATE_METHODS = (TAIL_SUP_ROOT, LOG_REGRESSION)

_LOG_MAX = math.log(np.finfo(float).max)


@dataclass(frozen=True, eq=False)
class FiniteSequence:
    """Nonnegative values ``x_t`` indexed consecutively from ``start_index``."""

    values: np.ndarray
    start_index: int = 0

    def __post_init__(self):
        arr = np.array(self.values, dtype=float, copy=True).reshape(-1)
        if arr.size == 0:
            raise NegativeValue("sequence must have at least one value")
        if np.isnan(arr).any() or (arr < 0).any():
            raise NegativeValue("sequence values must be nonnegative numbers")
        if int(self.start_index) < 0:
            raise NegativeValue("start_index must be a natural number")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "start_index", int(self.start_index))

    def __len__(self):
        return self.values.size

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.start_index, self.start_index + len(self), dtype=np.int64)

    def scaled(self, c: float) -> "FiniteSequence":
        return FiniteSequence(self.values * c, self.start_index)

    def __eq__(self, other):
        if not isinstance(other, FiniteSequence):
            return NotImplemented
        return self.start_index == other.start_index and np.array_equal(self.values, other.values)

    @classmethod
    def from_function(cls, fn, stop: int, start: int = 0) -> "FiniteSequence":
        """Tabulate ``fn(t)`` for ``t = start .. stop`` inclusive."""
        return cls([fn(t) for t in range(start, stop + 1)], start)


@dataclass(frozen=True)
class RateEstimate:
    rate: float
    window_start: int
    window_len: int
    method: str
    diagnostic: float
    skipped: int = 0
    notes: tuple = ()

    def __post_init__(self):
        if not self.rate >= 0:
            raise NegativeValue(f"rate must be >= 0, got {self.rate}")
        if not self.diagnostic >= 0:
            raise NegativeValue("diagnostic must be >= 0")

    def to_dict(self) -> dict:
        return {
            "rate": self.rate,
            "window_start": self.window_start,
            "window_len": self.window_len,
            "method": self.method,
            "diagnostic": self.diagnostic,
            "skipped": self.skipped,
            "notes": list(self.notes),
        }


def window_bounds(n: int, window: float) -> tuple[int, int]:
    """Return ``(start_position, length)`` of the tail window of fraction ``window``."""
    if not 0 < window <= 1:
        raise ValueError(f"window must lie in (0, 1], got {window}")
    w = min(n, int(math.ceil(window * n - 1e-9)))
    if w < 2:
        raise EmptyWindow(f"window {window} of a length-{n} sequence holds fewer than 2 indices")
    return n - w, w


def _roots(values: np.ndarray, t: np.ndarray) -> np.ndarray:
    # t > 0 assumed; x = 0 gives 0, x = inf gives inf
    with np.errstate(divide="ignore"):
        logs = np.log(values)
    return np.exp(logs / t)


def weighted_slope(t: np.ndarray, y: np.ndarray, weights: Optional[np.ndarray] = None) -> float:
    """Least-squares slope of ``y`` against ``t``, optionally weighted."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(t) if weights is None else np.asarray(weights, dtype=float)
    sw = w.sum()
    tm = (w * t).sum() / sw
    ym = (w * y).sum() / sw
    dt = t - tm
    denom = (w * dt * dt).sum()
    if denom <= 0:
        raise EmptyWindow("regression window has no spread in t")
    return float((w * dt * (y - ym)).sum() / denom)


def upper_rate(
    seq: FiniteSequence,
    method: str = TAIL_SUP_ROOT,
    window: float = 0.2,
    weights: Optional[Sequence[float]] = None,
) -> RateEstimate:
    """Estimate ``limsup_t x_t**(1/t)`` from the tail window of ``seq``.

    Args:
        seq: the sequence.
        method: ``"tail_sup_root"`` returns the largest root ``x_t**(1/t)``
            in the window; ``"log_regression"`` returns ``exp(slope)`` of a
            least-squares fit of ``log x_t`` on ``t`` over the strictly
            positive window entries.
        window: tail fraction of the sequence used, in ``(0, 1]``.
        weights: optional per-entry regression weights (``log_regression``
            only), e.g. inverse variances of ``log x_t``.

    Raises:
        EmptyWindow: fewer than two usable indices (for ``log_regression``
            an all-zero tail is an error; ``tail_sup_root`` returns 0).
    """
    if method not in RATE_METHODS:
        raise ValueError(f"unknown rate method {method!r}")
    n = len(seq)
    start, w = window_bounds(n, window)
    x = seq.values[start:]
    t = seq.t[start:]
    pos = t > 0
    if not pos.any():
        raise EmptyWindow("window contains only t = 0")
    roots = _roots(x[pos], t[pos].astype(float))

    if method == TAIL_SUP_ROOT:
        rate = float(roots.max())
        diag = float(np.max(np.abs(roots - rate))) if math.isfinite(rate) else 0.0
        return RateEstimate(rate, start, w, method, diag)

    usable = x > 0
    skipped = int((~usable).sum())
    if usable.sum() < 2:
        raise EmptyWindow(f"log_regression needs 2 positive entries in the window, found {int(usable.sum())}")
    if np.isinf(x[usable]).any():
        return RateEstimate(math.inf, start, w, method, 0.0, skipped)
    wts = None
    if weights is not None:
        wts = np.asarray(weights, dtype=float)[start:][usable]
    slope = weighted_slope(t[usable], np.log(x[usable]), wts)
    rate = math.exp(slope)
    rpos = roots[usable[pos]]
    diag = float(np.max(np.abs(rpos - rate))) if rpos.size else 0.0
    return RateEstimate(rate, start, w, method, diag, skipped)


def _log_ratios(seq: FiniteSequence, R: float) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(seq.values) - seq.t * math.log(R)


def _ratios(seq: FiniteSequence, R: float) -> np.ndarray:
    """``x_t / R**t`` computed directly where ``R**t`` is representable."""
    if R <= 0:
        raise ValueError("R must be positive")
    with np.errstate(over="ignore", under="ignore", divide="ignore", invalid="ignore"):
        powers = np.power(float(R), seq.t.astype(float))
        out = seq.values / powers
    bad = ~np.isfinite(out) | (powers == 0) | ~np.isfinite(powers)
    bad &= seq.values > 0
    if bad.any():
        lr = _log_ratios(seq, R)[bad]
        with np.errstate(over="ignore"):
            out[bad] = np.exp(lr)
    out[seq.values == 0] = 0.0
    return out


def envelope_constant(seq: FiniteSequence, R: float) -> float:
    """Smallest ``M`` with ``x_t <= M * R**t`` over the finite range."""
    return float(_ratios(seq, R).max())


def log_tail_sum(seq: FiniteSequence, R: float, double: bool = False) -> float:
    """Logarithm of :func:`tail_sum` (or :func:`double_tail_sum`), never overflows."""
    if R <= 0:
        raise ValueError("R must be positive")
    lr = _log_ratios(seq, R)
    if double:
        lr = lr + np.log(np.arange(1, len(seq) + 1, dtype=float))
    return float(logsumexp(lr))


def _checked_sum(terms: np.ndarray) -> float:
    if not np.isfinite(terms).all():
        raise SumOverflow("a term x_t / R**t exceeds the float64 range; use log_space=True")
    with np.errstate(over="ignore"):
        total = float(np.cumsum(terms)[-1])
    if not math.isfinite(total):
        raise SumOverflow("partial sum exceeds the float64 range; use log_space=True")
    return total


def _from_log(value: float) -> float:
    if value > _LOG_MAX:
        raise SumOverflow(f"sum exp({value:.6g}) exceeds the float64 range")
    return math.exp(value)


def tail_sum(seq: FiniteSequence, R: float, log_space: bool = False) -> float:
    """``sum_t x_t / R**t`` over the finite range."""
    if log_space:
        return _from_log(log_tail_sum(seq, R))
    return _checked_sum(_ratios(seq, R))


def double_tail_sum(seq: FiniteSequence, R: float, log_space: bool = False) -> float:
    """``sum_t sum_{i>=t} x_i / R**i``, evaluated as ``sum_i (i+1-start) x_i / R**i``."""
    if log_space:
        return _from_log(log_tail_sum(seq, R, double=True))
    mult = np.arange(1, len(seq) + 1, dtype=float)
    return _checked_sum(mult * _ratios(seq, R))


@dataclass(frozen=True)
class EquivalenceRow:
    R: float
    sup_ratio: float
    last_decile_mean: float
    tail_sum: float
    double_tail_sum: float
    trend: float
    increasing: bool


@dataclass(frozen=True)
class EquivalenceReport:
    C: float
    rate: RateEstimate
    rows: tuple
    consistent: bool
    reasons: tuple = field(default=())


def _ratio_trend(ratios: np.ndarray, t: np.ndarray, window: float) -> float:
    start, _ = window_bounds(len(ratios), window)
    r, tt = ratios[start:], t[start:]
    pos = r > 0
    if pos.sum() < 2:
        return -math.inf
    return weighted_slope(tt[pos], np.log(r[pos]))


def check_equivalence(
    seq: FiniteSequence,
    C: float,
    R_grid: Iterable[float],
    window: float = 0.2,
    trend_tol: float = 1e-3,
) -> EquivalenceReport:
    """Finite-horizon evidence that ``C`` bounds the root rate of ``seq``.

    For each ``R > C`` the boundedness, vanishing and summability proxies of
    ``x_t / R**t`` are tabulated.  The report is inconsistent when a ratio
    trend (log-slope over the tail window) is increasing by more than
    ``trend_tol`` per step, or when the log-regression rate exceeds ``C`` by
    more than its own diagnostic.  These are trends, not proofs.
    """
    grid = [float(r) for r in R_grid]
    if not grid:
        raise ValueError("R_grid must be nonempty")
    if any(r <= C for r in grid):
        raise ValueError("every R in R_grid must exceed C")

    try:
        rate = upper_rate(seq, LOG_REGRESSION, window)
    except EmptyWindow:
        rate = upper_rate(seq, TAIL_SUP_ROOT, window)
    reasons = []
    if rate.rate > C + rate.diagnostic + 1e-9:
        reasons.append(f"rate {rate.rate:.6g} ({rate.method}) exceeds C = {C:.6g}")

    rows = []
    n = len(seq)
    dec = max(1, n // 10)
    for R in grid:
        ratios = _ratios(seq, R)
        with np.errstate(over="ignore"):
            ts = float(np.sum(ratios))
            dts = float(np.sum(np.arange(1, n + 1) * ratios))
        trend = _ratio_trend(ratios, seq.t, window)
        inc = trend > trend_tol
        if inc:
            reasons.append(f"x_t / R^t increasing for R = {R:.6g} (log-slope {trend:.3g})")
        rows.append(EquivalenceRow(R, float(ratios.max()), float(ratios[-dec:].mean()), ts, dts, trend, inc))
    return EquivalenceReport(C, rate, tuple(rows), not reasons, tuple(reasons))


def deterministic_hitting(seq: FiniteSequence, eps: float) -> Optional[int]:
    """First index ``t`` with ``x_t < eps``; ``None`` when censored by the horizon."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    hit = np.flatnonzero(seq.values < eps)
    if hit.size == 0:
        return None
    return seq.start_index + int(hit[0])


def to_csv(seq: FiniteSequence) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "value"])
    for t, v in zip(seq.t.tolist(), seq.values.tolist()):
        w.writerow([t, repr(v)])
    return buf.getvalue()


def from_csv(text: str) -> FiniteSequence:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]] != ["t", "value"]:
        raise ValueError("expected header 't,value'")
    ts, vs = [], []
    for row in rows[1:]:
        if not row:
            continue
        ts.append(int(row[0]))
        vs.append(float(row[1]))
    if not ts:
        raise ValueError("no data rows")
    if any(b != a + 1 for a, b in zip(ts, ts[1:])):
        raise ValueError("t must be consecutive increasing integers")
    return FiniteSequence(vs, ts[0])
