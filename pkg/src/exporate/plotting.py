"""Deterministic SVG charts for the rate, hitting and risk reports.

Every data series is drawn as one ``Line2D`` whose SVG group id is
``series-<name>``, so tests can count series structurally.  Output is made
byte-reproducible by fixing the SVG hash salt, dropping the date metadata and
keeping text as text.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOG_FLOOR = 1e-300
SERIES_PREFIX = "series-"

_RC = {
    "svg.hashsalt": "exporate",
    "svg.fonttype": "none",
    "path.simplify": False,
    "figure.figsize": (6.4, 4.0),
}


def _log10_clipped(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    return np.log10(np.maximum(v, LOG_FLOOR))


def _line(ax, x, y, name: str, **kw):
    (ln,) = ax.plot(x, y, **kw)
    ln.set_gid(SERIES_PREFIX + name)
    return ln


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def rates_svg(path, curves: Sequence[tuple], floor: float = LOG_FLOOR) -> Path:
    """Plot ``log10 E[X_t]`` against ``t`` with a fitted-slope overlay per curve.

    Args:
        curves: ``(name, means, rate, anchor_t)`` tuples; the overlay is the
            line through ``(anchor_t, log10 mean[anchor_t])`` with slope
            ``log10(rate)``.
    """
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for name, means, rate, anchor in curves:
            means = np.asarray(means, dtype=float)
            t = np.arange(means.size)
            y = np.log10(np.maximum(means, floor))
            _line(ax, t, y, f"{name}-mean", lw=1.2)
            if rate is not None and rate > 0 and math.isfinite(rate):
                y0 = y[anchor]
                _line(ax, t, y0 + (t - anchor) * math.log10(rate), f"{name}-fit", ls="--", lw=0.8)
        ax.set_xlabel("t")
        ax.set_ylabel("log10 E[X_t]")
        ax.legend([ln.get_gid()[len(SERIES_PREFIX):] for ln in ax.get_lines()], fontsize="small")
        return _save(fig, path)


def hitting_svg(path, series: Sequence[tuple]) -> Path:
    """Plot ``mean(tau_eps)/|log eps|`` against ``|log eps|`` with a reference line per spec.

    Args:
        series: ``(name, log_scales, ratios, reference)`` tuples; ratios may
            contain ``None`` for censored cells (skipped), ``reference`` is
            ``-1/log A`` or ``None`` when ``A >= 1``.
    """
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for name, scales, ratios, ref in series:
            pts = [(s, r) for s, r in zip(scales, ratios) if r is not None]
            if pts:
                xs, ys = zip(*pts)
                _line(ax, xs, ys, f"{name}-ratio", marker="o", ms=3)
            if ref is not None and math.isfinite(ref) and len(scales):
                _line(ax, [min(scales), max(scales)], [ref, ref], f"{name}-reference", ls=":", lw=1.0)
        ax.set_xlabel("|log eps|")
        ax.set_ylabel("mean tau_eps / |log eps|")
        if ax.get_lines():
            ax.legend([ln.get_gid()[len(SERIES_PREFIX):] for ln in ax.get_lines()], fontsize="small")
        return _save(fig, path)


def risk_svg(path, series: Sequence[tuple], growth: Sequence[tuple], bins: int = 40) -> Path:
    """Two panels: ``C_hat`` against ``gamma`` and a histogram of final log-growth.

    Args:
        series: ``(name, gammas, c_hats)`` tuples.
        growth: ``(name, final_log_growth_array)`` tuples; each histogram is
            drawn as a step polyline.
    """
    with plt.rc_context(_RC):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(9.6, 4.0))
        for name, gammas, c in series:
            _line(a1, gammas, c, f"{name}-C_hat", marker="o", ms=3)
        a1.set_xlabel("gamma")
        a1.set_ylabel("C_hat")
        for name, g in growth:
            g = np.asarray(g, dtype=float)
            counts, edges = np.histogram(g, bins=bins)
            _line(a2, edges, np.r_[counts, counts[-1]], f"{name}-growth", drawstyle="steps-post")
        a2.set_xlabel("(1/T) log W_T")
        a2.set_ylabel("count")
        return _save(fig, path)


def count_series(svg_text: str) -> int:
    """Number of series groups in an SVG written by this module."""
    import xml.etree.ElementTree as ET

    root = ET.fromstring(svg_text)
    return sum(1 for el in root.iter() if el.get("id", "").startswith(SERIES_PREFIX))
