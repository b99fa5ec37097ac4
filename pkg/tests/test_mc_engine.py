import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exporate import mc_engine as mc
from exporate.errors import NonPositiveWealth
from exporate.processes import ProcessSpec, TrajectoryBatch, simulate_batch
from exporate.seq_analysis import FiniteSequence, double_tail_sum

SEED = 20261015


def det(rho, T, x0=1.0, n=3):
    return simulate_batch(ProcessSpec("DeterministicGeometric", {"rho": rho, "x0": x0}, SEED, T), n)


def det_wealth(mu, T, n=4):
    return simulate_batch(ProcessSpec("WealthIID", {"mu": mu, "sigma": 0.0}, SEED, T), n)


@pytest.fixture(scope="module")
def product():
    return simulate_batch(ProcessSpec("GeometricProduct", {"dist": "uniform", "a": 0, "b": 1}, SEED, 300), 2000)


@pytest.fixture(scope="module")
def lazy():
    return simulate_batch(ProcessSpec("IndicatorLazy", {"weights": "geometric", "q": 0.7}, SEED, 200), 10_000)


@pytest.fixture(scope="module")
def wealth():
    return simulate_batch(ProcessSpec("WealthIID", {"mu": 0.05, "sigma": 0.1}, SEED, 400), 10_000)


# -- expectation curve and A ----------------------------------------------------------------


def test_expectation_curve_deterministic():
    curve = mc.expectation_curve(det(0.9, 50))
    np.testing.assert_array_equal(curve.values, 0.9 ** np.arange(51, dtype=float))


def test_expectation_curve_lazy(lazy):
    curve = mc.expectation_curve(lazy).values
    for t in (0, 2, 5, 10):
        p = 0.7 ** (t + 1)
        se = math.sqrt(p * (1 - p) / lazy.n_traj)
        assert abs(curve[t] - p) <= 3 * se


@pytest.mark.parametrize("method", ["tail_sup_root", "log_regression"])
def test_estimate_A_deterministic(method):
    est = mc.estimate_A(det(0.9, 100), method)
    assert est.rate == pytest.approx(0.9, rel=1e-12)


def test_estimate_A_product(product):
    est = mc.estimate_A(product)
    assert abs(est.rate - 0.5) <= 0.02
    assert any(n.startswith("reliable_horizon=") for n in est.notes)


def test_estimate_A_full_horizon_flags_unreliable_tail(product):
    est = mc.estimate_A(product, "log_regression", 0.2, horizon="full")
    assert mc.UNRELIABLE_TAIL in est.notes


def test_estimate_A_lazy(lazy):
    assert abs(mc.estimate_A(lazy).rate - 0.7) <= 0.02


def test_estimate_A_powerlaw():
    b = simulate_batch(ProcessSpec("IndicatorLazy", {"weights": "powerlaw", "alpha": 2.0}, SEED, 200), 10_000)
    tail = mc.estimate_A(b, "log_regression", 0.2)
    assert tail.rate >= 0.99


def test_curve_stats_exact_for_constant_columns():
    stats = mc.curve_stats(det(0.5, 30))
    assert stats.reliable_horizon == 30
    assert (stats.rel_se == 0).all()


# -- trajectory rates ------------------------------------------------------------------------------


def test_trajectory_rates_deterministic():
    tr = mc.trajectory_rates(det(0.9, 100, n=5))
    assert np.allclose(tr.rates, 0.9, rtol=1e-12)


def test_trajectory_rates_lazy_zero(lazy):
    tr = mc.trajectory_rates(lazy)
    assert (tr.rates == 0).all()


def test_trajectory_log_regression_mean(product):
    tr = mc.trajectory_rates(product, "log_regression", 0.2)
    assert abs(tr.mean_rate - math.exp(-1)) <= 0.02


def test_theorem1_shadow(product):
    A = mc.estimate_A(product).rate
    assert mc.trajectory_rates(product).max_rate <= A + 0.05


# -- exceedance -----------------------------------------------------------------------------------


def test_tail_prob_deterministic_degenerate():
    r = mc.tail_prob_rate(det(0.9, 100), 0.5)
    assert r.rate == 0.0
    assert mc.DEGENERATE_CURVE in r.notes


def test_tail_prob_identically_one():
    r = mc.tail_prob_rate(det(1.0, 50), 0.5)
    assert r.rate == 1.0
    assert mc.DEGENERATE_CURVE in r.notes


def test_tail_prob_lazy_short_horizon():
    b = simulate_batch(ProcessSpec("IndicatorLazy", {"weights": "geometric", "q": 0.7}, SEED, 20), 10_000)
    r = mc.tail_prob_rate(b, 0.5)
    assert abs(r.rate - 0.7) <= 0.03
    freq = mc.exceedance_frequency(b, 0.5).values
    np.testing.assert_array_equal(freq, mc.expectation_curve(b).values)


def test_tail_prob_product(product):
    A = mc.estimate_A(product).rate
    assert mc.tail_prob_rate(product, 1e-6).rate <= A + 0.05


@pytest.mark.parametrize("eps", [1e-8, 1e-3, 0.1, 0.5, 0.99])
def test_markov_identity_exact(product, eps):
    gap = mc.markov_gap(product, eps)
    assert gap.shape == (product.horizon + 1,)
    assert (gap <= 0).all()


@given(
    data=st.lists(st.lists(st.floats(0, 1e6, allow_nan=False), min_size=2, max_size=2), min_size=1, max_size=30),
    eps=st.floats(1e-9, 1e6),
)
@settings(max_examples=200, deadline=None)
def test_markov_identity_property(data, eps):
    b = TrajectoryBatch(None, np.array(data))
    assert (mc.markov_gap(b, eps) <= 0).all()


# -- hitting times ---------------------------------------------------------------------------------


def test_hitting_deterministic_hand():
    h = mc.hitting_times(det(0.5, 40), [0.1])
    assert (h.samples[0] == 4).all()
    assert h.ratio(0) == pytest.approx(4 / math.log(10))


@pytest.mark.parametrize("k", range(2, 9))
def test_hitting_deterministic_ceiling(k):
    eps = 10.0**-k
    h = mc.hitting_times(det(0.5, 60), [eps])
    # first t with 2**-t < 10**-k, by exact integer arithmetic
    t = 0
    while not 10**k < 2**t:
        t += 1
    assert h.mean(0) == t
    assert h.ratio(0) == t / abs(math.log(eps))


def test_hitting_censoring():
    h = mc.hitting_times(det(0.9, 10), [0.5, 1e-3])
    assert h.censored_count(1) == 3
    assert h.mean(1) is None
    assert h.ratio(1) is None
    assert h.mean_lower_bound(1) == 10
    assert any(n.startswith(mc.ALL_CENSORED) for n in h.notes)


def test_hitting_grid_must_decrease():
    with pytest.raises(ValueError):
        mc.hitting_times(det(0.5, 10), [0.1, 0.2])


def test_hitting_lazy_mean(lazy):
    h = mc.hitting_times(lazy, [0.5])
    assert abs(h.mean(0) - 7 / 3) <= 3 * h.se(0)


def test_hitting_product_ratios(product):
    grid = [10.0**-k for k in range(2, 9)]
    h = mc.hitting_times(product, grid)
    for k in range(len(grid)):
        assert h.censored_fraction(k) <= 0.01
        assert h.ratio(k) <= 1 / math.log(2) + 0.05
    # mean tau_eps exceeds |log eps| by about one step; the ratio tends to 1 from above
    assert 1.0 < h.ratio(len(grid) - 1) < 1.1


def test_hitting_monotone_in_eps(product):
    h = mc.hitting_times(product, [1e-1, 1e-3, 1e-6])
    s = np.where(h.samples == mc.CENSORED, np.iinfo(np.int64).max, h.samples)
    assert (np.diff(s, axis=0) >= 0).all()


def test_hitting_csv_layout(product):
    text = mc.hitting_times(product, [1e-2]).to_csv()
    assert text.splitlines()[0] == "threshold,statistic,value"
    assert len(text.splitlines()) == 6


# -- envelope times ---------------------------------------------------------------------------------


def test_envelope_deterministic_zero():
    env = mc.envelope_time(det(0.9, 100), 0.95)
    assert (env.samples == 0).all()


def test_envelope_censored_when_ratio_constant_above_one():
    env = mc.envelope_time(det(0.5, 40, x0=5.0), 0.5)
    assert env.censored_count == 3
    assert mc.ALL_CENSORED in env.notes


def test_envelope_bound_closed_form():
    env = mc.envelope_time(det(0.5, 200), 0.7)
    r = 5 / 7
    n = 200
    closed = (1 - (n + 2) * r ** (n + 1) + (n + 1) * r ** (n + 2)) / (1 - r) ** 2
    assert env.bound == pytest.approx(closed, rel=1e-12)
    assert env.mean == 0


def test_envelope_brute_force():
    rng = np.random.default_rng(3)
    data = rng.random((20, 15)) * 1.5
    R = 0.9
    h = mc.envelope_samples(data, R)
    for j in range(20):
        ratios = data[j] / R ** np.arange(15)
        ok = [t for t in range(15) if ratios[t:].max() <= 1]
        expect = ok[0] if ok and ratios[-1] <= 1 else mc.CENSORED
        assert h[j] == expect


def test_envelope_monotone_in_R(product):
    hs = [mc.envelope_samples(product.data, R) for R in (0.6, 0.7, 0.8, 0.9)]
    big = np.iinfo(np.int64).max
    hs = [np.where(h == mc.CENSORED, big, h) for h in hs]
    for a, b in zip(hs, hs[1:]):
        assert (b <= a).all()


@pytest.mark.parametrize("R", [0.6, 0.7, 0.8])
def test_lemma_hc_product(product, R):
    env = mc.envelope_time(product, R)
    assert env.censored_fraction <= 0.01
    assert env.mean <= env.bound
    assert env.bound == double_tail_sum(mc.expectation_curve(product), R)


# -- barrier times and risk ----------------------------------------------------------------------


def test_barrier_deterministic():
    bar = mc.barrier_times(det_wealth(0.05, 100), [math.e])
    assert (bar.samples[0] == 21).all()


def test_barrier_lln(wealth):
    bar = mc.barrier_times(wealth, [math.exp(10)])
    assert abs(bar.ratio(0) - 20) <= 1


def test_reciprocal_duality(wealth):
    bs = [math.exp(2), math.exp(5), math.exp(10)]
    bar = mc.barrier_times(wealth, bs)
    hit = mc.hitting_times(mc.reciprocal(wealth), [1 / b for b in bs])
    np.testing.assert_array_equal(bar.samples, hit.samples)


def test_nonpositive_wealth():
    b = TrajectoryBatch(None, np.array([[1.0, 0.0, 2.0]]))
    with pytest.raises(NonPositiveWealth):
        mc.risk_criterion(b, -1.0)
    with pytest.raises(NonPositiveWealth):
        mc.barrier_times(b, [1.5])
    with pytest.raises(NonPositiveWealth):
        mc.log_growth_rates(b)


@pytest.mark.parametrize("gamma", [-3.0, -1.0, -0.1])
def test_risk_deterministic(gamma):
    r = mc.risk_criterion(det_wealth(0.05, 100), gamma)
    assert r.C_hat == pytest.approx(0.05, abs=1e-12)
    assert r.se == pytest.approx(0.0, abs=1e-12)


def test_risk_gamma_independent_on_deterministic():
    b = det_wealth(0.03, 80)
    curves = [mc.risk_criterion(b, g).curve for g in (-2.0, -0.5)]
    np.testing.assert_allclose(curves[0], curves[1], atol=1e-12, rtol=0)


def test_risk_requires_negative_gamma(wealth):
    with pytest.raises(ValueError):
        mc.risk_criterion(wealth, 0.5)


def test_risk_lognormal(wealth):
    r = mc.risk_criterion(wealth, -1.0)
    assert abs(r.C_hat - 0.045) <= 0.005
    assert r.se > 0


def test_risk_monotone_in_gamma(wealth):
    rs = [mc.risk_criterion(wealth, g) for g in (-2.0, -1.0, -0.5)]
    for a, b in zip(rs, rs[1:]):
        assert b.C_hat >= a.C_hat - 2 * math.hypot(a.se, b.se)
    for r in rs:
        assert abs(r.C_hat - (0.05 + r.gamma * 0.01 / 2)) <= 0.005


def test_risk_log_space_no_overflow():
    b = simulate_batch(ProcessSpec("WealthIID", {"mu": -1.0, "sigma": 3.0}, SEED, 400), 200)
    r = mc.risk_criterion(b, -5.0)
    assert math.isfinite(r.C_hat)


def test_log_growth(wealth):
    g = mc.log_growth_rates(wealth)
    assert abs(g.final.mean() - 0.05) <= 3 * 0.1 / math.sqrt(400 * wealth.n_traj)
    C = mc.risk_criterion(wealth, -1.0).C_hat
    assert np.mean(g.tail_min >= C - 0.01) >= 0.99
    d = mc.log_growth_rates(det_wealth(0.05, 50))
    np.testing.assert_allclose(d.final, 0.05, rtol=1e-12)


def test_extrapolation_recovers_intercept():
    gam = [-2.0, -1.0, -0.5]
    assert mc.extrapolate_gamma_zero(gam, [0.05 + g * 0.005 for g in gam]) == pytest.approx(0.05)


# -- pathwise bound --------------------------------------------------------------------------------


@pytest.mark.parametrize(
    "C, eps, t",
    [(0.5, 0.1, 4), (0.5, 0.125, 3), (0.9, 1e-3, 66), (0.5, 2.0, 0)],
)
def test_ceil_steps(C, eps, t):
    assert mc.ceil_steps(C, eps) == t


@given(C=st.floats(0.01, 0.99), eps=st.floats(1e-12, 0.999))
def test_ceil_steps_minimal(C, eps):
    t = mc.ceil_steps(C, eps)
    assert C**t <= eps
    assert t == 0 or C ** (t - 1) > eps


def test_pathwise_bound_product(product):
    A = mc.estimate_A(product).rate
    viol, checked = mc.pathwise_tau_bound_violations(product, [10.0**-k for k in range(2, 9)], A + 0.02)
    assert viol == 0
    assert checked > 0.9 * 7 * product.n_traj


def test_rate_estimates_csv(product):
    text = mc.rate_estimates_csv([("p", mc.estimate_A(product, m)) for m in ("log_regression", "tail_sup_root")])
    lines = text.splitlines()
    assert lines[0].startswith("spec,method,rate")
    assert [ln.split(",")[1] for ln in lines[1:]] == ["log_regression", "tail_sup_root"]
