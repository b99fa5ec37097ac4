"""Tolerance-parameterised checks of the rate, hitting-time and growth inequalities.

Each check returns a list of :class:`Verdict` objects (a main verdict and,
where a theorem has a second claim, sub-verdicts).  A verdict is one
inequality ``lhs <= rhs + tolerance`` with numbers substituted.

Applicability policy:

* ``vacuous``: the check's precondition fails (e.g. the expectation rate is
  not below 1).  Decided from estimates before any pass/fail is looked at.
* ``unreliable``: the data cannot support a verdict (too much censoring,
  estimator breakdown), or the inequality fails by no more than one
  resampling standard error.
* ``applicable``: ``pass`` is exactly ``lhs <= rhs + tolerance``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import mc_engine as mc
from .config import EstimatorConfig, ExperimentConfig, ProcessEntry, Tolerances
from .errors import EmptyWindow, ExpoRateError
from .processes import ProcessSpec, TrajectoryBatch, simulate_batch
from .seq_analysis import LOG_REGRESSION, RATE_METHODS, weighted_slope

APPLICABLE = "applicable"
VACUOUS = "vacuous"
UNRELIABLE = "unreliable"


@dataclass
class Verdict:
    check_name: str
    inequality: str
    lhs: Optional[float]
    rhs: Optional[float]
    tolerance: float
    passed: Optional[bool]
    applicability: str
    diagnostics: list = field(default_factory=list)
    spec: str = ""

    def to_dict(self) -> dict:
        return {
            "check_name": self.check_name,
            "spec": self.spec,
            "inequality": self.inequality,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "tolerance": self.tolerance,
            "pass": self.passed,
            "applicability": self.applicability,
            "diagnostics": list(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Verdict":
        v = cls(d["check_name"], d["inequality"], d["lhs"], d["rhs"], d["tolerance"], d["pass"], d["applicability"], list(d["diagnostics"]), d.get("spec", ""))
        v.validate()
        return v

    def validate(self):
        """Re-derive ``pass`` from the substituted numbers."""
        if self.applicability == APPLICABLE:
            expected = bool(self.lhs <= self.rhs + self.tolerance)
            if self.passed is not expected:
                raise ValueError(f"verdict {self.check_name!r}: pass={self.passed} contradicts {self.lhs} <= {self.rhs} + {self.tolerance}")
        elif self.passed is not None:
            raise ValueError(f"verdict {self.check_name!r}: {self.applicability} verdicts carry no pass/fail")

    @property
    def failed(self) -> bool:
        return self.applicability == APPLICABLE and self.passed is False


def _fmt(x) -> str:
    return "nan" if x is None else f"{x:.6g}"


def decide(name, inequality, lhs, rhs, tol, diagnostics=(), se=None) -> Verdict:
    """Build an applicable verdict, demoting failures within one SE to unreliable."""
    diags = list(diagnostics)
    text = inequality.format(lhs=_fmt(lhs), rhs=_fmt(rhs), tol=_fmt(tol))
    ok = bool(lhs <= rhs + tol)
    if not ok and se is not None and se > 0 and lhs - rhs - tol <= se:
        diags.append(f"fails by {lhs - rhs - tol:.3g}, within one resampling SE ({se:.3g})")
        return Verdict(name, text, lhs, rhs, tol, None, UNRELIABLE, diags)
    return Verdict(name, text, lhs, rhs, tol, ok, APPLICABLE, diags)


def vacuous(name, inequality, reason, lhs=None, rhs=None, tol=0.0, diagnostics=()) -> Verdict:
    text = inequality.format(lhs=_fmt(lhs), rhs=_fmt(rhs), tol=_fmt(tol))
    return Verdict(name, text, lhs, rhs, tol, None, VACUOUS, [reason, *diagnostics])


def unreliable(name, inequality, reason, lhs=None, rhs=None, tol=0.0, diagnostics=()) -> Verdict:
    text = inequality.format(lhs=_fmt(lhs), rhs=_fmt(rhs), tol=_fmt(tol))
    return Verdict(name, text, lhs, rhs, tol, None, UNRELIABLE, [reason, *diagnostics])


# --------------------------------------------------------------------------
# Shared estimates
# --------------------------------------------------------------------------


def _estimate_A(batch, est: EstimatorConfig):
    return mc.estimate_A(batch, est.A_method, est.A_window, max_rel_se=est.max_rel_se)


def rate_upper_diagnostic(batch: TrajectoryBatch, est: EstimatorConfig = EstimatorConfig()) -> float:
    """Largest expectation-rate estimate over both methods and both the fit and tail windows.

    Used to gate hitting-time checks: a polynomially decaying curve looks
    exponential to a long weighted fit but not to its tail window.
    """
    vals = []
    for method in RATE_METHODS:
        for window in (est.A_window, est.tail_window):
            try:
                vals.append(mc.estimate_A(batch, method, window, max_rel_se=est.max_rel_se).rate)
            except EmptyWindow:
                pass
    return max(vals) if vals else math.inf


def _hat(A: float) -> float:
    return 0.0 if A == 0 else -1.0 / math.log(A)


# --------------------------------------------------------------------------
# Expectation and trajectory checks (suite "section2")
# --------------------------------------------------------------------------


def check_theorem1(batch, tol: float = 0.05, est: EstimatorConfig = EstimatorConfig(), name="theorem1") -> list:
    """Trajectory rates are bounded by the expectation rate."""
    ineq = "max_j rate_j = {lhs} <= A = {rhs} + {tol}"
    try:
        A = _estimate_A(batch, est)
        tr = mc.trajectory_rates(batch, est.traj_method, est.traj_window)
    except ExpoRateError as exc:
        return [unreliable(name, ineq, f"estimator failed: {exc}")]
    lhs = tr.max_rate
    frac = float(np.mean(tr.rates > A.rate + tol))
    diags = [
        f"A proxy: {A.method} (window {est.A_window}, notes {list(A.notes)})",
        f"trajectory proxy: {est.traj_method} (window {est.traj_window})",
        f"mean trajectory rate {tr.mean_rate:.6g}",
        f"fraction of trajectories above A + tol: {frac:.6g}",
    ]
    return [decide(name, ineq, lhs, A.rate, tol, diags)]


def check_conclusion1(batch, tol: float = 0.05, est: EstimatorConfig = EstimatorConfig()) -> list:
    """Essential supremum of trajectory rates (empirical max proxy) is below the expectation rate."""
    vs = check_theorem1(batch, tol, est, name="conclusion1")
    for v in vs:
        v.inequality = v.inequality.replace("max_j rate_j", "ess sup proxy")
        v.diagnostics.append("empirical maximum over trajectories is a lower proxy of the essential supremum")
    return vs


def check_theorem2(batch, eps_grid: Sequence[float], tol: Tolerances = Tolerances(), est: EstimatorConfig = EstimatorConfig()) -> list:
    """Expected hitting times grow at most like ``|log eps| / |log A|``; pathwise bound re-asserted."""
    name = "theorem2"
    ineq = "E[tau_eps]/|log eps| = {lhs} <= -1/log A = {rhs} + {tol}"
    p_ineq = "pathwise violations of tau_eps <= max(H_C', ceil) + 1: {lhs} <= {rhs} + {tol}"
    A_up = rate_upper_diagnostic(batch, est)
    if A_up >= 1 - tol.vacuity_margin:
        reason = f"A >= 1 (largest rate proxy {A_up:.6g} not below 1 - {tol.vacuity_margin})"
        return [vacuous(name, ineq, reason), vacuous(name + ".pathwise", p_ineq, reason)]
    A = _estimate_A(batch, est)
    hit = mc.hitting_times(batch, eps_grid)
    rhs = _hat(A.rate)

    ok = [k for k in range(len(hit.thresholds)) if hit.censored_fraction(k) <= tol.censor_max and hit.mean(k) is not None and hit.thresholds[k] < 1]
    diags = [f"A = {A.rate:.6g} via {A.method}; largest rate proxy {A_up:.6g}"]
    ratios = [(hit.log_scale(k), hit.ratio(k)) for k in ok]
    if len(ratios) >= 2:
        diags.append(f"ratio trend vs |log eps|: slope {weighted_slope([r[0] for r in ratios], [r[1] for r in ratios]):.4g}")
    out = []
    if not ok:
        out.append(unreliable(name, ineq, f"{mc.ALL_CENSORED}: no threshold with censored fraction <= {tol.censor_max}", rhs=rhs))
    else:
        k = ok[-1]
        lhs = hit.ratio(k)
        t = tol.hitting_rel * rhs + 1.0 / hit.log_scale(k)
        diags.append(f"eps = {hit.thresholds[k]:g}, censored {hit.censored_count(k)}/{hit.n_traj}; tolerance includes ceiling allowance 1/|log eps|")
        out.append(decide(name, ineq, lhs, rhs, t, diags, se=hit.ratio_se(k)))

    C = A.rate + tol.pathwise_offset
    if not C < 1:
        out.append(vacuous(name + ".pathwise", p_ineq, f"C' = {C:.6g} not below 1"))
    else:
        viol, checked = mc.pathwise_tau_bound_violations(batch, eps_grid, C, hit)
        out.append(decide(name + ".pathwise", p_ineq, float(viol), 0.0, 0.0, [f"C' = {C:.6g}", f"checked (trajectory, eps) pairs: {checked}"]))
    return out


def check_e3_chain(batch, eps_grid: Sequence[float], tol: float = 0.05, est: EstimatorConfig = EstimatorConfig()) -> list:
    """Tail-probability rates are bounded by the expectation rate; empirical Markov inequality is exact."""
    name = "e3_chain"
    ineq = "max_eps rate(P[X_t >= eps]) = {lhs} <= A = {rhs} + {tol}"
    m_ineq = "max_(t,eps) eps*freq(X_t >= eps) - mean(X_t) = {lhs} <= {rhs} + {tol}"
    A = _estimate_A(batch, est)
    rates, diags = [], [f"A = {A.rate:.6g} via {A.method}"]
    for eps in eps_grid:
        r = mc.tail_prob_rate(batch, eps, est.tail_window, max_rel_se=est.max_rel_se)
        if mc.DEGENERATE_CURVE in r.notes:
            if r.rate > 0:
                diags.append(f"eps = {eps:g} skipped: {mc.DEGENERATE_CURVE} (identically 1 on the tail)")
                continue
            diags.append(f"eps = {eps:g}: {mc.DEGENERATE_CURVE}, exceedances vanish on the tail, rate 0")
            rates.append(0.0)
            continue
        rates.append(r.rate)
        diags.append(f"eps = {eps:g}: rate {r.rate:.6g} ({r.method})")
    out = []
    if rates:
        out.append(decide(name, ineq, max(rates), A.rate, tol, diags))
    else:
        out.append(vacuous(name, ineq, "every exceedance curve is identically 1 on the tail window", rhs=A.rate, tol=tol, diagnostics=diags))
    gap = max(float(mc.markov_gap(batch, eps).max()) for eps in eps_grid)
    out.append(decide(name + ".markov", m_ineq, gap, 0.0, 0.0, ["exact comparison of correctly rounded sums"]))
    return out


def check_lemma_hc(batch, R_grid: Sequence[float], tol: Tolerances = Tolerances(), est: EstimatorConfig = EstimatorConfig()) -> list:
    """``E[H_R]`` is finite and below the double-tail-sum bound for every ``R > A``."""
    ineq = "mean H_R = {lhs} <= sum_t sum_(i>=t) E[X_i]/R^i = {rhs} + {tol}"
    A_up = rate_upper_diagnostic(batch, est)
    A = _estimate_A(batch, est)
    out = []
    for R in R_grid:
        name = f"lemma_hc[R={R:g}]"
        if A_up >= 1 - tol.vacuity_margin:
            out.append(vacuous(name, ineq, f"A >= 1 (largest rate proxy {A_up:.6g})"))
            continue
        if R <= A.rate + tol.vacuity_margin:
            out.append(unreliable(name, ineq, f"R inside rate: R = {R:g} <= A = {A.rate:.6g} + margin {tol.vacuity_margin}"))
            continue
        env = mc.envelope_time(batch, R)
        diags = [f"A = {A.rate:.6g} via {A.method}", f"censored {env.censored_count}/{env.n_traj}"]
        if env.censored_fraction > tol.censor_max or env.mean is None:
            out.append(unreliable(name, ineq, f"censored fraction {env.censored_fraction:.4g} > {tol.censor_max}", rhs=env.bound, diagnostics=diags))
            continue
        out.append(decide(name, ineq, env.mean, env.bound, tol.hitting_rel * env.bound, diags))
    return out


# --------------------------------------------------------------------------
# Wealth, optimization and estimator checks (suite "section3")
# --------------------------------------------------------------------------


def check_theorem3(wealth_batch, gamma: float, b_grid: Sequence[float], tol: Tolerances = Tolerances(), window: float = 0.2) -> list:
    """Risk-sensitive criterion bounds almost-sure log-growth and barrier times."""
    g_ineq = "frac(tail-min (1/t)log W_t < C_hat - growth_tol) = {lhs} <= {rhs} + {tol}"
    b_ineq = "E[T_b]/log b = {lhs} <= 1/C_hat = {rhs} + {tol}"
    risk = mc.risk_criterion(wealth_batch, gamma, window)
    growth = mc.log_growth_rates(wealth_batch, window)
    n = wealth_batch.n_traj
    below = float(np.mean(growth.tail_min < risk.C_hat - tol.growth))
    diags = [
        f"gamma = {gamma:g}, C_hat = {risk.C_hat:.6g} (se {risk.se:.3g}, notes {list(risk.notes)})",
        f"growth_tol = {tol.growth}; mean final log-growth {float(growth.final.mean()):.6g}",
    ]
    p = tol.growth_fraction
    out = [decide("theorem3.growth", g_ineq, below, p, 0.0, diags, se=math.sqrt(p * (1 - p) / n))]

    if not risk.C_hat > tol.barrier_margin:
        out.append(vacuous("theorem3.barrier", b_ineq, f"C_hat = {risk.C_hat:.6g} not above {tol.barrier_margin}"))
        return out
    rhs = 1.0 / risk.C_hat
    bar = mc.barrier_times(wealth_batch, b_grid)
    ok = [k for k in range(len(bar.thresholds)) if bar.censored_fraction(k) <= tol.censor_max and bar.ratio(k) is not None]
    if not ok:
        out.append(unreliable("theorem3.barrier", b_ineq, f"{mc.ALL_CENSORED}: no barrier with censored fraction <= {tol.censor_max}", rhs=rhs))
        return out
    k = ok[-1]
    se = bar.ratio_se(k)
    # propagate C_hat's jackknife SE through 1/C_hat
    se_rhs = risk.se / risk.C_hat**2
    d = [f"b = {bar.thresholds[k]:.6g}, censored {bar.censored_count(k)}/{bar.n_traj}", f"C_hat = {risk.C_hat:.6g}"]
    out.append(decide("theorem3.barrier", b_ineq, bar.ratio(k), rhs, tol.barrier, d, se=math.hypot(se or 0.0, se_rhs)))
    return out


def check_gamma_monotonicity(wealth_batch, gamma_grid: Sequence[float], tol: Tolerances = Tolerances(), window: float = 0.2) -> list:
    """``C_gamma`` is nondecreasing in ``gamma < 0``; its ``gamma -> 0-`` extrapolation bounds log-growth."""
    grid = [float(g) for g in gamma_grid]
    if not grid or any(g >= 0 for g in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("gamma_grid must be strictly increasing and negative")
    risks = [mc.risk_criterion(wealth_batch, g, window) for g in grid]
    c = [r.C_hat for r in risks]
    se = [r.se for r in risks]
    diags = [f"C_hat({g:g}) = {v:.6g} (se {s:.3g})" for g, v, s in zip(grid, c, se)]
    if len(grid) >= 2:
        drops = [c[i] - c[i + 1] for i in range(len(c) - 1)]
        pair_se = [math.hypot(se[i], se[i + 1]) for i in range(len(c) - 1)]
        for i, (dc, s) in enumerate(zip(drops, pair_se)):
            if s > abs(c[i + 1] - c[i]):
                diags.append(f"resampling SE {s:.3g} exceeds increment between gamma {grid[i]:g} and {grid[i + 1]:g}")
        i = int(np.argmax(drops))
        v = decide(
            "gamma_monotonicity",
            "max decrease of C_hat along gamma = {lhs} <= {rhs} + {tol}",
            drops[i],
            0.0,
            tol.risk_se * pair_se[i],
            diags,
        )
    else:
        v = vacuous("gamma_monotonicity", "max decrease of C_hat along gamma = {lhs} <= {rhs} + {tol}", "single gamma", diagnostics=diags)
    limit = mc.extrapolate_gamma_zero(grid, c)
    growth = mc.log_growth_rates(wealth_batch, window)
    mean_growth = float(growth.final.mean())
    lim = decide(
        "gamma_limit",
        "extrapolated C_(gamma->0-) = {lhs} <= mean (1/T)log W_T = {rhs} + {tol}",
        limit,
        mean_growth,
        tol.gamma_limit,
        [f"linear extrapolation in gamma over {grid}"],
    )
    return [v, lim]


def check_optimization(batch, eps_grid: Sequence[float], tol: Tolerances = Tolerances(), est: EstimatorConfig = EstimatorConfig()) -> list:
    """Optimization hitting times of relative sublevel sets; ``eps`` is scaled by ``X_0``."""
    ineq = "max_eps E[tau_eps]/|log eps| = {lhs} <= -1/log A = {rhs} + {tol}"
    out = []
    inc = int((np.diff(batch.data, axis=1) > 0).sum())
    out.append(decide("optimization.monotone", "increasing steps across trajectories = {lhs} <= {rhs} + {tol}", float(inc), 0.0, 0.0))
    A = _estimate_A(batch, est)
    if not A.rate < 1:
        out.append(vacuous("optimization.hitting", ineq, f"A = {A.rate:.6g} not below 1"))
        return out
    scale = float(batch.data[:, 0].max())
    thresholds = [e * scale for e in eps_grid]
    hit = mc.hitting_times(batch, thresholds)
    rhs = _hat(A.rate)
    ratios, diags = [], [f"A = {A.rate:.6g} via {A.method}", f"f-scale X_0 = {scale:.6g}"]
    for k, e in enumerate(eps_grid):
        if hit.censored_fraction(k) > tol.censor_max or hit.mean(k) is None:
            diags.append(f"eps = {e:g} skipped: censored {hit.censored_count(k)}/{hit.n_traj}")
            continue
        r = hit.mean(k) / abs(math.log(e))
        ratios.append(r)
        diags.append(f"eps = {e:g}: mean tau {hit.mean(k):.6g}, ratio {r:.6g}")
    if not ratios:
        out.append(unreliable("optimization.hitting", ineq, mc.ALL_CENSORED, rhs=rhs))
    else:
        out.append(decide("optimization.hitting", ineq, max(ratios), rhs, tol.optimization, diags))
    C = A.rate + tol.pathwise_offset
    p_ineq = "pathwise violations of tau_eps <= max(H_C', ceil) + 1: {lhs} <= {rhs} + {tol}"
    if C < 1:
        viol, checked = mc.pathwise_tau_bound_violations(batch, thresholds, C, hit)
        out.append(decide("optimization.pathwise", p_ineq, float(viol), 0.0, 0.0, [f"C' = {C:.6g}", f"checked pairs: {checked}"]))
    else:
        out.append(vacuous("optimization.pathwise", p_ineq, f"C' = {C:.6g} not below 1"))
    return out


# --------------------------------------------------------------------------
# Suites
# --------------------------------------------------------------------------

_SECTION2_KINDS = ("DeterministicGeometric", "GeometricProduct", "IndicatorLazy")
_WEALTH = "WealthIID"


@dataclass
class Report:
    suite: str
    seed: int
    verdicts: list

    @property
    def exit_code(self) -> int:
        return 1 if any(v.failed for v in self.verdicts) else 0

    def to_dict(self) -> dict:
        return {"suite": self.suite, "seed": self.seed, "verdicts": [v.to_dict() for v in self.verdicts]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Report":
        """Load a report, re-deriving every verdict's pass flag."""
        d = json.loads(text)
        return cls(d["suite"], d["seed"], [Verdict.from_dict(v) for v in d["verdicts"]])

    def table(self) -> str:
        lines = [f"suite {self.suite}  seed {self.seed}"]
        w = max([len(f"{v.spec} {v.check_name}") for v in self.verdicts] + [10])
        for v in self.verdicts:
            status = {True: "PASS", False: "FAIL", None: v.applicability.upper()}[v.passed]
            lines.append(f"{(v.spec + ' ' + v.check_name).ljust(w)}  {status:<10}  {v.inequality}")
        return "\n".join(lines)


def _section2(batch, cfg: ExperimentConfig) -> list:
    t, e = cfg.tolerances, cfg.estimator
    out = []
    out += check_theorem1(batch, t.rate, e)
    out += check_conclusion1(batch, t.rate, e)
    out += check_theorem2(batch, cfg.eps_grid, t, e)
    out += check_e3_chain(batch, cfg.eps_grid, t.rate, e)
    out += check_lemma_hc(batch, cfg.R_grid, t, e)
    return out


def checks_for(entry: ProcessEntry, batch: TrajectoryBatch, cfg: ExperimentConfig) -> list:
    """Verdicts for one process under ``cfg.suite``."""
    kind = entry.spec.kind
    suite = cfg.suite
    t, e = cfg.tolerances, cfg.estimator
    out = []
    if suite in ("section2", "all") and kind in _SECTION2_KINDS:
        out += _section2(batch, cfg)
    if suite in ("section3", "all"):
        if kind == _WEALTH:
            out += check_theorem3(batch, cfg.gamma, cfg.b_grid, t, e.tail_window)
            out += check_gamma_monotonicity(batch, cfg.gamma_grid, t, e.tail_window)
        elif kind == "SphereES":
            out += check_theorem1(batch, t.rate, e)
            out += check_optimization(batch, cfg.eps_grid, t, e)
        elif kind == "SampleMeanEstimator":
            out += check_theorem1(batch, t.rate, e)
            out += check_theorem2(batch, cfg.eps_grid, t, e)
    for v in out:
        v.spec = entry.name
    return out


def run_suite(entries: Sequence, cfg: ExperimentConfig, batches: Optional[dict] = None) -> Report:
    """Simulate every configured process and collect its verdicts in config order.

    ``entries`` holds :class:`ProcessEntry` objects (or bare specs, which use
    ``cfg.n_traj``).  When ``batches`` is a dict it receives the simulated
    batches keyed by entry name.
    """
    verdicts = []
    for i, entry in enumerate(entries):
        if isinstance(entry, ProcessSpec):
            entry = ProcessEntry(entry, cfg.n_traj, f"{i}:{entry.kind}")
        batch = simulate_batch(entry.spec, entry.n_traj, cfg.memory_cap)
        if batches is not None:
            batches[entry.name] = batch
        verdicts += checks_for(entry, batch, cfg)
    return Report(cfg.suite, cfg.seed, verdicts)
