import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exporate.errors import EmptyWindow, NegativeValue, SumOverflow
from exporate.seq_analysis import (
    FiniteSequence,
    check_equivalence,
    deterministic_hitting,
    double_tail_sum,
    envelope_constant,
    from_csv,
    tail_sum,
    to_csv,
    upper_rate,
)


def geometric(rho, T, x0=1.0):
    return FiniteSequence(x0 * rho ** np.arange(T + 1, dtype=float))


# -- upper_rate -------------------------------------------------------------


@pytest.mark.parametrize("window", [0.05, 0.2, 0.5, 1.0])
@pytest.mark.parametrize("rho", [0.5, 0.9, 1.3])
def test_geometric_tail_sup_root_is_exact(rho, window):
    est = upper_rate(geometric(rho, 100), "tail_sup_root", window)
    assert est.rate == pytest.approx(rho, rel=1e-14)
    assert est.window_start + est.window_len == 101


def test_zero_sequence_rate_zero():
    seq = FiniteSequence(np.zeros(50))
    assert upper_rate(seq, "tail_sup_root").rate == 0.0
    with pytest.raises(EmptyWindow):
        upper_rate(seq, "log_regression")


def test_polynomially_modulated_sequence():
    # independent oracle: evaluate the roots of t * 0.8**t directly
    t = np.arange(1, 501)
    seq = FiniteSequence(t * 0.8**t, start_index=1)
    direct = max((k * 0.8**k) ** (1.0 / k) for k in range(401, 501))
    est = upper_rate(seq, "tail_sup_root", 0.2)
    assert est.rate == pytest.approx(direct, rel=1e-12)
    # tail_sup_root carries the upward t**(1/t) bias at the window start
    assert est.rate == pytest.approx(0.8 * 401 ** (1 / 401), rel=1e-12)
    lr = upper_rate(seq, "log_regression", 0.2)
    assert abs(lr.rate - 0.8) < 0.01
    assert lr.diagnostic >= 0


def test_log_regression_skips_zeros():
    vals = 0.5 ** np.arange(21, dtype=float)
    vals[[17, 19]] = 0.0
    est = upper_rate(FiniteSequence(vals), "log_regression", 0.5)
    assert est.skipped == 2
    assert est.rate == pytest.approx(0.5, rel=1e-12)


def test_window_too_small():
    with pytest.raises(EmptyWindow):
        upper_rate(geometric(0.5, 3), "tail_sup_root", 0.2)


def test_negative_rejected():
    with pytest.raises(NegativeValue):
        FiniteSequence([1.0, -0.1])
    with pytest.raises(NegativeValue):
        FiniteSequence([])


def test_unknown_method():
    with pytest.raises(ValueError):
        upper_rate(geometric(0.5, 10), "median")


@given(c=st.floats(0.01, 100.0), rho=st.floats(0.2, 0.99))
@settings(max_examples=50, deadline=None)
def test_scaling_reflected_in_diagnostic(c, rho):
    # roots of c * rho**t are c**(1/t) * rho: the shift is bounded by the window
    # start and its non-stationarity shows up as a nonzero diagnostic
    seq = geometric(rho, 200)
    a = upper_rate(seq, "tail_sup_root")
    b = upper_rate(seq.scaled(c), "tail_sup_root")
    t0 = seq.t[b.window_start]
    assert a.diagnostic == pytest.approx(0.0, abs=1e-15)
    assert abs(a.rate - b.rate) <= rho * abs(c ** (1 / t0) - 1) + 1e-12
    if abs(math.log(c)) > 1e-3:
        assert b.diagnostic > 0


# -- envelope ----------------------------------------------------------------


@pytest.mark.parametrize("R, expected", [(0.5, 1.0), (0.6, 1.0)])
def test_envelope_geometric(R, expected):
    assert envelope_constant(geometric(0.5, 60), R) == pytest.approx(expected, rel=1e-14)


def test_envelope_brute_force():
    t = np.arange(201)
    seq = FiniteSequence(t * 0.8**t)
    brute = max(k * (0.8 / 0.9) ** k for k in range(201))
    assert envelope_constant(seq, 0.9) == pytest.approx(brute, rel=1e-12)
    k_star = max(range(201), key=lambda k: k * (8 / 9) ** k)
    assert k_star in (math.floor(1 / math.log(9 / 8)), math.ceil(1 / math.log(9 / 8)))


@given(
    vals=st.lists(st.floats(0, 1e6, allow_nan=False), min_size=1, max_size=40),
    r1=st.floats(0.1, 2.0),
    dr=st.floats(1e-3, 2.0),
)
@settings(max_examples=100, deadline=None)
def test_envelope_monotone_in_R(vals, r1, dr):
    seq = FiniteSequence(vals)
    assert envelope_constant(seq, r1 + dr) <= envelope_constant(seq, r1) * (1 + 1e-12)
    assert envelope_constant(seq, r1) >= seq.values[0]


# -- tail sums ----------------------------------------------------------------


def test_tail_sum_hand_values():
    assert tail_sum(geometric(0.5, 30), 1.0) == 2 - 2.0**-30
    assert tail_sum(FiniteSequence(np.ones(10)), 1.0) == 10.0
    assert double_tail_sum(geometric(0.5, 2), 1.0) == 2.75
    assert double_tail_sum(FiniteSequence(np.zeros(7)), 0.3) == 0.0


def test_tail_sum_closed_form():
    r = 0.9 / 0.95
    closed = (1 - r**201) / (1 - r)
    assert tail_sum(geometric(0.9, 200), 0.95) == pytest.approx(closed, rel=1e-12)


def test_double_tail_sum_closed_form():
    # sum_{i=0}^{n} (i+1) r^i = (1 - (n+2) r^(n+1) + (n+1) r^(n+2)) / (1-r)^2
    r, n = 0.9 / 0.95, 300
    closed = (1 - (n + 2) * r ** (n + 1) + (n + 1) * r ** (n + 2)) / (1 - r) ** 2
    assert double_tail_sum(geometric(0.9, n), 0.95) == pytest.approx(closed, rel=1e-12)


def test_overflow_and_log_space():
    seq = geometric(1.0, 2000)
    with pytest.raises(SumOverflow):
        tail_sum(seq, 0.5)
    with pytest.raises(SumOverflow):
        tail_sum(seq, 0.5, log_space=True)
    small = geometric(0.5, 2000)
    assert tail_sum(small, 0.6, log_space=True) == pytest.approx(tail_sum(small, 0.6), rel=1e-12)


@given(vals=st.lists(st.floats(0, 1e3, allow_nan=False), min_size=1, max_size=50), R=st.floats(0.5, 3.0))
@settings(max_examples=100, deadline=None)
def test_tail_sum_le_double(vals, R):
    seq = FiniteSequence(vals)
    assert tail_sum(seq, R) <= double_tail_sum(seq, R) * (1 + 1e-12)
    # monotone in sequence length
    if len(vals) > 1:
        assert tail_sum(FiniteSequence(vals[:-1]), R) <= tail_sum(seq, R) * (1 + 1e-12)


# -- equivalence report ---------------------------------------------------------


def test_equivalence_consistent_geometric():
    rep = check_equivalence(geometric(0.5, 200), 0.5, [0.6, 0.8])
    assert rep.consistent
    assert all(math.isfinite(r.tail_sum) and r.trend < 0 for r in rep.rows)


def test_equivalence_divergent():
    rep = check_equivalence(geometric(1.1, 200), 0.5, [0.6])
    assert not rep.consistent
    assert rep.rows[0].increasing


def test_equivalence_modulated_sup_matches_envelope():
    t = np.arange(301)
    seq = FiniteSequence(t * 0.8**t)
    rep = check_equivalence(seq, 0.8, [0.85])
    assert rep.consistent
    assert rep.rows[0].sup_ratio == envelope_constant(seq, 0.85)


def test_equivalence_requires_R_above_C():
    with pytest.raises(ValueError):
        check_equivalence(geometric(0.5, 20), 0.5, [0.4])


# -- hitting -----------------------------------------------------------------------


@pytest.mark.parametrize(
    "seq, eps, expected",
    [
        (geometric(0.5, 20), 0.1, 4),
        (FiniteSequence(np.ones(30)), 0.5, None),
        (geometric(0.5, 20), 2.0, 0),
    ],
)
def test_deterministic_hitting(seq, eps, expected):
    assert deterministic_hitting(seq, eps) == expected


@given(
    vals=st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=40),
    e1=st.floats(1e-6, 5),
    e2=st.floats(1e-6, 5),
)
def test_hitting_monotone_in_eps(vals, e1, e2):
    lo, hi = sorted((e1, e2))
    seq = FiniteSequence(vals)
    a, b = deterministic_hitting(seq, lo), deterministic_hitting(seq, hi)
    inf = float("inf")
    assert (inf if a is None else a) >= (inf if b is None else b)


@pytest.mark.parametrize("rho", [0.3, 0.5, 0.9])
def test_hitting_index_geometric(rho):
    seq = geometric(rho, 20000)
    for k in (4, 8, 16, 32):
        eps = 10.0**-k
        tau = deterministic_hitting(seq, eps)
        ratio = tau * abs(math.log(rho)) / abs(math.log(eps))
        assert abs(ratio - 1) <= 2 / abs(math.log(eps))


# -- CSV -----------------------------------------------------------------------------


@given(vals=st.lists(st.floats(0, 1e300, allow_nan=False), min_size=1, max_size=30), start=st.integers(0, 5))
def test_csv_round_trip(vals, start):
    seq = FiniteSequence(vals, start)
    text = to_csv(seq)
    assert text.startswith("t,value\n")
    assert from_csv(text) == seq
