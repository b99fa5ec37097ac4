"""Generative zoo of nonnegative stochastic processes with known rate constants.

Every trajectory is drawn from its own counter-based substream
(Philox keyed by ``(seed, traj_index)``), so a row of a batch depends only
on its ``ProcessSpec`` and index: batches are bit-identical across reruns and
across any number of worker threads.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from types import MappingProxyType
from typing import Callable, Mapping, Optional

import numpy as np
from scipy.special import zeta

from .errors import InvalidParams, ResourceLimit
from .seq_analysis import FiniteSequence

DEFAULT_MEMORY_CAP = 10**8
CHUNK_ROWS = 256
THREADS_ENV = "EXPO_RATE_THREADS"
XRB_MAGIC = b"XRB1"


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    n = int(raw) if raw else 0
    if n < 0:
        raise ValueError(f"{THREADS_ENV} must be >= 0")
    return n or (os.cpu_count() or 1)


def substream(seed: int, traj_index: int) -> np.random.Generator:
    if not 0 <= traj_index < 2**32:
        raise InvalidParams(f"traj_index must be in [0, 2^32), got {traj_index}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(traj_index),))
    return np.random.Generator(np.random.Philox(ss))


# --------------------------------------------------------------------------
# Per-kind models
# --------------------------------------------------------------------------


def _num(params, key, default=None, *, lo=None, hi=None, lo_open=False, hi_open=False):
    if key not in params:
        if default is None:
            raise InvalidParams(f"missing parameter {key!r}")
        return default
    v = params[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise InvalidParams(f"parameter {key!r} must be a finite number")
    v = float(v)
    if lo is not None and (v < lo or (lo_open and v == lo)):
        raise InvalidParams(f"parameter {key!r} = {v} out of range")
    if hi is not None and (v > hi or (hi_open and v == hi)):
        raise InvalidParams(f"parameter {key!r} = {v} out of range")
    return v


def _only(params, allowed):
    extra = set(params) - set(allowed)
    if extra:
        raise InvalidParams(f"unknown parameters {sorted(extra)}")


@dataclass(frozen=True)
class ReferenceConstants:
    """Analytically known constants of a process; ``None`` means unavailable."""

    A_ref: Optional[float] = None
    traj_ref: Optional[float] = None
    growth_ref: Optional[float] = None
    f_min: Optional[float] = None
    C_gamma: Optional[Callable[[float], float]] = None

    def C_gamma_ref(self, gamma: float) -> Optional[float]:
        if self.C_gamma is None:
            return None
        if gamma >= 0:
            raise ValueError("gamma must be negative")
        return self.C_gamma(gamma)

    def to_dict(self) -> dict:
        return {
            "A_ref": self.A_ref,
            "traj_ref": self.traj_ref,
            "growth_ref": self.growth_ref,
            "f_min": self.f_min,
            "C_gamma_available": self.C_gamma is not None,
        }


class _Model:
    positive = False

    def normalize(self, params: Mapping) -> dict:
        raise NotImplementedError

    def reference(self, p: dict) -> ReferenceConstants:
        return ReferenceConstants()

    def row(self, p: dict, horizon: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def rows(self, p: dict, horizon: int, seed: int, indices) -> np.ndarray:
        out = np.empty((len(indices), horizon + 1))
        for k, j in enumerate(indices):
            out[k] = self.row(p, horizon, substream(seed, j))
        return out


class DeterministicGeometric(_Model):
    def normalize(self, params):
        _only(params, ("rho", "x0"))
        return {"rho": _num(params, "rho", lo=0, lo_open=True), "x0": _num(params, "x0", 1.0, lo=0, lo_open=True)}

    def reference(self, p):
        return ReferenceConstants(A_ref=p["rho"], traj_ref=p["rho"])

    def row(self, p, horizon, rng):
        return p["x0"] * np.power(p["rho"], np.arange(horizon + 1, dtype=float))


class GeometricProduct(_Model):
    """``X_{t+1} = U_t X_t`` with i.i.d. uniform or lognormal multipliers."""

    def normalize(self, params):
        dist = params.get("dist")
        if dist == "uniform":
            _only(params, ("dist", "a", "b"))
            a = _num(params, "a", lo=0)
            b = _num(params, "b", lo=0)
            if not a < b:
                raise InvalidParams("uniform multiplier needs 0 <= a < b")
            return {"dist": dist, "a": a, "b": b}
        if dist == "lognormal":
            _only(params, ("dist", "mu", "sigma"))
            return {"dist": dist, "mu": _num(params, "mu"), "sigma": _num(params, "sigma", lo=0)}
        raise InvalidParams(f"GeometricProduct dist must be 'uniform' or 'lognormal', got {dist!r}")

    def reference(self, p):
        if p["dist"] == "uniform":
            a, b = p["a"], p["b"]

            def xlogx_minus_x(x):
                return (x * math.log(x) if x > 0 else 0.0) - x

            mean_log = (xlogx_minus_x(b) - xlogx_minus_x(a)) / (b - a)
            return ReferenceConstants(A_ref=(a + b) / 2, traj_ref=math.exp(mean_log))
        mu, s = p["mu"], p["sigma"]
        return ReferenceConstants(A_ref=math.exp(mu + s * s / 2), traj_ref=math.exp(mu))

    def row(self, p, horizon, rng):
        out = np.empty(horizon + 1)
        out[0] = 1.0
        if p["dist"] == "uniform":
            # 1 - u lies in (0, 1], so multipliers lie in (a, b]
            u = 1.0 - rng.random(horizon)
            out[1:] = np.cumprod(p["a"] + (p["b"] - p["a"]) * u)
        else:
            xi = rng.standard_normal(horizon)
            out[1:] = np.exp(np.cumsum(p["mu"] + p["sigma"] * xi))
        return out


@lru_cache(maxsize=4)
def _powerlaw_table(alpha: float, n_max: int):
    n = np.arange(1, n_max + 1, dtype=float)
    w = n ** (-alpha)
    cdf = np.cumsum(w)
    total = cdf[-1]
    cdf /= total
    truncated = max(0.0, 1.0 - total / float(zeta(alpha)))
    return cdf, truncated


class IndicatorLazy(_Model):
    """One latent integer ``n`` per trajectory; ``X_t = 1`` while ``n > t``."""

    def normalize(self, params):
        weights = params.get("weights")
        if weights == "geometric":
            _only(params, ("weights", "q"))
            return {"weights": weights, "q": _num(params, "q", lo=0, hi=1, lo_open=True, hi_open=True)}
        if weights == "powerlaw":
            _only(params, ("weights", "alpha", "n_max"))
            alpha = _num(params, "alpha", lo=1, lo_open=True)
            n_max = _num(params, "n_max", 10**7, lo=1)
            if n_max != int(n_max) or n_max > 10**8:
                raise InvalidParams("n_max must be an integer <= 1e8")
            return {"weights": weights, "alpha": alpha, "n_max": int(n_max)}
        raise InvalidParams(f"IndicatorLazy weights must be 'geometric' or 'powerlaw', got {weights!r}")

    def reference(self, p):
        if p["weights"] == "geometric":
            return ReferenceConstants(A_ref=p["q"], traj_ref=0.0)
        return ReferenceConstants(A_ref=1.0, traj_ref=0.0)

    def latent(self, p, rng) -> int:
        u = rng.random()
        if p["weights"] == "geometric":
            return int(math.floor(math.log1p(-u) / math.log(p["q"])))
        cdf, _ = _powerlaw_table(p["alpha"], p["n_max"])
        return int(min(np.searchsorted(cdf, u, side="right"), p["n_max"] - 1)) + 1

    def row(self, p, horizon, rng):
        return indicator_path(self.latent(p, rng), horizon)


def indicator_path(n: int, horizon: int) -> np.ndarray:
    """``X_t = 1`` for ``t < n`` and 0 from ``t = n`` on."""
    return (np.arange(horizon + 1) < n).astype(float)


def powerlaw_truncation_mass(alpha: float, n_max: int) -> float:
    return _powerlaw_table(float(alpha), int(n_max))[1]


class SphereES(_Model):
    """(1+1)-ES with isotropic Gaussian mutation and the one-fifth success rule on ``f(z) = |z|^2``.

    Every ``window`` steps the step size is multiplied by ``up`` when more
    than a fifth of the window's mutations improved ``f`` and by ``down``
    when fewer did.  Selection is elitist, so ``f`` never increases.
    """

    def normalize(self, params):
        _only(params, ("d", "z0", "sigma0", "up", "down", "window"))
        d = _num(params, "d", lo=1)
        if d != int(d):
            raise InvalidParams("d must be an integer")
        d = int(d)
        z0 = params.get("z0", 1.0)
        if isinstance(z0, (int, float)) and not isinstance(z0, bool):
            z0 = [float(z0)] * d
        if not isinstance(z0, (list, tuple)) or len(z0) != d:
            raise InvalidParams("z0 must be a number or a list of length d")
        z0 = [_num({"z0": v}, "z0") for v in z0]
        window = _num(params, "window", 10, lo=1)
        if window != int(window):
            raise InvalidParams("window must be an integer")
        up = _num(params, "up", 1.22, lo=1, lo_open=True)
        down = _num(params, "down", 0.82, lo=0, hi=1, lo_open=True, hi_open=True)
        return {
            "d": d,
            "z0": z0,
            "sigma0": _num(params, "sigma0", 1.0, lo=0, lo_open=True),
            "up": up,
            "down": down,
            "window": int(window),
        }

    def reference(self, p):
        return ReferenceConstants(f_min=0.0)

    @staticmethod
    def _f(z):
        # fixed summation order keeps rows bit-identical across chunk shapes
        f = z[:, 0] * z[:, 0]
        for k in range(1, z.shape[1]):
            f = f + z[:, k] * z[:, k]
        return f

    def rows(self, p, horizon, seed, indices):
        k, d = len(indices), p["d"]
        noise = np.empty((k, horizon, d))
        for r, j in enumerate(indices):
            noise[r] = substream(seed, j).standard_normal((horizon, d))
        z = np.tile(np.asarray(p["z0"], dtype=float), (k, 1))
        sigma = np.full(k, p["sigma0"])
        f = self._f(z)
        out = np.empty((k, horizon + 1))
        out[:, 0] = f
        succ = np.zeros(k, dtype=np.int64)
        w = p["window"]
        for t in range(horizon):
            cand = z + sigma[:, None] * noise[:, t, :]
            fc = self._f(cand)
            accept = fc <= f
            succ += fc < f
            z = np.where(accept[:, None], cand, z)
            f = np.where(accept, fc, f)
            out[:, t + 1] = f
            if (t + 1) % w == 0:
                # success fraction compared with 1/5 in exact integer arithmetic
                sigma = np.where(5 * succ > w, sigma * p["up"], np.where(5 * succ < w, sigma * p["down"], sigma))
                succ[:] = 0
        return out

    def row(self, p, horizon, rng):  # pragma: no cover - rows() is overridden
        raise NotImplementedError


class WealthIID(_Model):
    """Wealth with i.i.d. lognormal gross returns: ``log W_t = mu t + sigma S_t``."""

    positive = True

    def normalize(self, params):
        _only(params, ("mu", "sigma"))
        return {"mu": _num(params, "mu"), "sigma": _num(params, "sigma", lo=0)}

    def reference(self, p):
        mu, s = p["mu"], p["sigma"]
        return ReferenceConstants(
            A_ref=math.exp(mu + s * s / 2),
            traj_ref=math.exp(mu),
            growth_ref=mu,
            C_gamma=lambda g: mu + g * s * s / 2,
        )

    def row(self, p, horizon, rng):
        xi = rng.standard_normal(horizon)
        logw = np.empty(horizon + 1)
        logw[0] = 0.0
        logw[1:] = p["mu"] * np.arange(1, horizon + 1, dtype=float) + p["sigma"] * np.cumsum(xi)
        return np.exp(logw)


class SampleMeanEstimator(_Model):
    """Squared error of the running sample mean of ``theta + s * xi``.

    ``Z_t`` is the mean of the first ``t`` observations; before any
    averaging ``Z_0`` is the first observation, so ``X_0 = X_1``.
    """

    def normalize(self, params):
        _only(params, ("theta", "s"))
        return {"theta": _num(params, "theta", 0.0), "s": _num(params, "s", 1.0, lo=0, lo_open=True)}

    def reference(self, p):
        return ReferenceConstants(A_ref=1.0, traj_ref=1.0)

    def row(self, p, horizon, rng):
        xi = rng.standard_normal(max(horizon, 1))
        t = np.arange(1, horizon + 1, dtype=float)
        z = np.empty(horizon + 1)
        z[0] = p["theta"] + p["s"] * xi[0]
        z[1:] = p["theta"] + p["s"] * np.cumsum(xi[:horizon]) / t
        return (z - p["theta"]) ** 2


MODELS = {
    "DeterministicGeometric": DeterministicGeometric(),
    "GeometricProduct": GeometricProduct(),
    "IndicatorLazy": IndicatorLazy(),
    "SphereES": SphereES(),
    "WealthIID": WealthIID(),
    "SampleMeanEstimator": SampleMeanEstimator(),
}
KINDS = tuple(MODELS)


# --------------------------------------------------------------------------
# Specs and batches
# --------------------------------------------------------------------------


def _freeze(obj):
    if isinstance(obj, dict):
        return MappingProxyType({k: _freeze(v) for k, v in obj.items()})
    if isinstance(obj, list):
        return tuple(_freeze(v) for v in obj)
    return obj


def _thaw(obj):
    if isinstance(obj, Mapping):
        return {k: _thaw(v) for k, v in obj.items()}
    if isinstance(obj, tuple):
        return [_thaw(v) for v in obj]
    return obj


@dataclass(frozen=True, eq=False)
class ProcessSpec:
    """A named generative model, its parameters, master seed and horizon."""

    kind: str
    params: Mapping
    seed: int
    horizon: int

    def __post_init__(self):
        if self.kind not in MODELS:
            raise InvalidParams(f"unknown process kind {self.kind!r}; expected one of {list(KINDS)}")
        if isinstance(self.horizon, bool) or int(self.horizon) != self.horizon or self.horizon < 1:
            raise InvalidParams("horizon must be an integer >= 1")
        if isinstance(self.seed, bool) or int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            raise InvalidParams("seed must be an integer in [0, 2^64)")
        if not isinstance(self.params, Mapping):
            raise InvalidParams("params must be an object")
        p = MODELS[self.kind].normalize(_thaw(self.params))
        object.__setattr__(self, "params", _freeze(p))
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def model(self) -> _Model:
        return MODELS[self.kind]

    @property
    def reference(self) -> ReferenceConstants:
        return self.model.reference(_thaw(self.params))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": _thaw(self.params), "seed": self.seed, "horizon": self.horizon}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, obj: Mapping) -> "ProcessSpec":
        if not isinstance(obj, Mapping):
            raise InvalidParams("process spec must be a JSON object")
        extra = set(obj) - {"kind", "params", "seed", "horizon"}
        if extra:
            raise InvalidParams(f"unknown spec fields {sorted(extra)}")
        missing = {"kind", "params", "seed", "horizon"} - set(obj)
        if missing:
            raise InvalidParams(f"missing spec fields {sorted(missing)}")
        return cls(obj["kind"], obj["params"], obj["seed"], obj["horizon"])

    @classmethod
    def from_json(cls, text: str) -> "ProcessSpec":
        return cls.from_dict(json.loads(text))

    def with_seed(self, seed: int) -> "ProcessSpec":
        return ProcessSpec(self.kind, _thaw(self.params), seed, self.horizon)

    def __eq__(self, other):
        return isinstance(other, ProcessSpec) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(self.to_json())

    @property
    def label(self) -> str:
        p = _thaw(self.params)
        if self.kind == "SphereES":
            p = {k: v for k, v in p.items() if k != "z0"}
        inner = ",".join(f"{k}={v}" for k, v in p.items())
        return f"{self.kind}({inner})"


def reference_constants(spec: ProcessSpec) -> ReferenceConstants:
    return spec.reference


def sample_trajectory(spec: ProcessSpec, traj_index: int) -> FiniteSequence:
    """Trajectory ``traj_index`` of ``spec``: a pure function of (seed, index, kind, params)."""
    if not 0 <= traj_index < 2**32:
        raise InvalidParams(f"traj_index must be in [0, 2^32), got {traj_index}")
    row = spec.model.rows(_thaw(spec.params), spec.horizon, spec.seed, [traj_index])[0]
    return FiniteSequence(row)


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    """``N`` trajectories of ``X_0..X_T`` stored row-wise.

    ``spec`` is ``None`` for batches imported from files without a spec
    sidecar.  For :class:`WealthIID` the rows hold ``W_t`` itself.
    """

    spec: Optional[ProcessSpec]
    data: np.ndarray
    stream_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=float)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 2:
            raise InvalidParams("batch data must be an N x (T+1) matrix with N >= 1, T >= 1")
        if np.isnan(data).any() or (data < 0).any():
            raise InvalidParams("batch entries must be nonnegative")
        if self.spec is not None and data.shape[1] != self.spec.horizon + 1:
            raise InvalidParams("batch width does not match spec horizon")
        ids = self.stream_ids
        ids = np.arange(data.shape[0], dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        data.setflags(write=False)
        ids.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "stream_ids", ids)

    @property
    def n_traj(self) -> int:
        return self.data.shape[0]

    @property
    def horizon(self) -> int:
        return self.data.shape[1] - 1

    def row(self, j: int) -> FiniteSequence:
        return FiniteSequence(self.data[j])

    def map(self, fn) -> "TrajectoryBatch":
        """New spec-less batch with ``fn`` applied elementwise (e.g. ``1/W``)."""
        return TrajectoryBatch(None, fn(self.data), self.stream_ids)

    def equals(self, other: "TrajectoryBatch") -> bool:
        return self.data.shape == other.data.shape and self.data.tobytes() == other.data.tobytes()


def simulate_batch(
    spec: ProcessSpec,
    n_traj: int,
    memory_cap: int = DEFAULT_MEMORY_CAP,
    threads: Optional[int] = None,
) -> TrajectoryBatch:
    """Rows ``j = 0..n_traj-1`` equal :func:`sample_trajectory` ``(spec, j)``.

    Work is split into fixed chunks of :data:`CHUNK_ROWS` rows that may run
    on several threads; the chunking never depends on the thread count.
    """
    if isinstance(n_traj, bool) or int(n_traj) != n_traj or n_traj < 1:
        raise InvalidParams("n_traj must be an integer >= 1")
    if n_traj > 2**32:
        raise InvalidParams("n_traj must be <= 2^32")
    if n_traj * (spec.horizon + 1) > memory_cap:
        raise ResourceLimit(f"batch of {n_traj} x {spec.horizon + 1} exceeds the memory cap of {memory_cap} entries")
    p = _thaw(spec.params)
    chunks = [range(s, min(s + CHUNK_ROWS, n_traj)) for s in range(0, n_traj, CHUNK_ROWS)]
    data = np.empty((n_traj, spec.horizon + 1))

    def work(chunk):
        data[chunk.start : chunk.stop] = spec.model.rows(p, spec.horizon, spec.seed, list(chunk))

    nthreads = worker_count() if threads is None else max(1, threads)
    if nthreads == 1 or len(chunks) == 1:
        for c in chunks:
            work(c)
    else:
        with ThreadPoolExecutor(max_workers=nthreads) as ex:
            list(ex.map(work, chunks))
    return TrajectoryBatch(spec, data, np.arange(n_traj, dtype=np.int64))


# --------------------------------------------------------------------------
# File formats
# --------------------------------------------------------------------------


def batch_to_xrb(batch: TrajectoryBatch) -> bytes:
    """Compact binary layout: ``XRB1``, u32 N, u32 T+1, row-major little-endian float64."""
    n, m = batch.data.shape
    return XRB_MAGIC + struct.pack("<II", n, m) + batch.data.astype("<f8").tobytes(order="C")


def batch_from_xrb(blob: bytes, spec: Optional[ProcessSpec] = None) -> TrajectoryBatch:
    if blob[:4] != XRB_MAGIC:
        raise ValueError("not an XRB1 file")
    n, m = struct.unpack("<II", blob[4:12])
    body = blob[12:]
    if len(body) != 8 * n * m:
        raise ValueError(f"XRB1 payload has {len(body)} bytes, expected {8 * n * m}")
    data = np.frombuffer(body, dtype="<f8").reshape(n, m).astype(float)
    return TrajectoryBatch(spec, data)


def batch_to_csv(batch: TrajectoryBatch) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["traj", "t", "value"])
    for j, row in zip(batch.stream_ids.tolist(), batch.data.tolist()):
        for t, v in enumerate(row):
            w.writerow([j, t, repr(v)])
    return buf.getvalue()


def batch_from_csv(text: str, spec: Optional[ProcessSpec] = None) -> TrajectoryBatch:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["traj", "t", "value"]:
        raise ValueError("expected header 'traj,t,value'")
    rows: dict[int, list] = {}
    for rec in reader:
        if not rec:
            continue
        j, t, v = int(rec[0]), int(rec[1]), float(rec[2])
        series = rows.setdefault(j, [])
        if t != len(series):
            raise ValueError(f"trajectory {j}: t must run 0,1,2,... (got {t})")
        series.append(v)
    if not rows:
        raise ValueError("no data rows")
    ids = list(rows)
    lengths = {len(rows[j]) for j in ids}
    if len(lengths) != 1:
        raise ValueError("all trajectories must share one horizon")
    return TrajectoryBatch(spec, np.array([rows[j] for j in ids]), np.array(ids))
