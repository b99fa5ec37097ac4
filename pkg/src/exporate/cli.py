"""``exporate`` command line: simulate, rates, hitting, risk, verify.

Exit codes: 0 success (or every applicable verdict passes), 1 a failing
verdict or an I/O / estimator error, 2 a configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import re
import sys
from pathlib import Path

from . import mc_engine as mc
from . import plotting
from .config import FORMATS, ExperimentConfig, load_config
from .errors import ConfigError, ExpoRateError
from .processes import ProcessSpec, TrajectoryBatch, batch_from_xrb, batch_to_csv, batch_to_xrb, simulate_batch
from .verifier import run_suite

DEFAULT_OUT = "exporate-out"
MANIFEST = "manifest.json"

_WEALTH = "WealthIID"
_OPTIMIZATION = "SphereES"


class _Run:
    """Output directory, requested formats and the artifacts written so far."""

    def __init__(self, out: Path, formats):
        self.out = out
        self.formats = tuple(formats)
        self.written = []

    def wants(self, fmt: str) -> bool:
        return fmt in self.formats

    def write(self, name: str, data) -> Path:
        path = self.out / name
        if isinstance(data, str):
            data = data.encode()
        path.write_bytes(data)
        self.written.append(path)
        return path

    def track(self, path: Path):
        self.written.append(Path(path))

    def manifest(self) -> dict:
        mpath = self.out / MANIFEST
        entries = {}
        if mpath.exists():
            try:
                entries = {a["path"]: a for a in json.loads(mpath.read_text())["artifacts"]}
            except (ValueError, KeyError, TypeError):
                entries = {}
        for p in self.written:
            blob = p.read_bytes()
            rel = p.relative_to(self.out).as_posix()
            entries[rel] = {"path": rel, "sha256": hashlib.sha256(blob).hexdigest(), "bytes": len(blob)}
        doc = {"artifacts": [entries[k] for k in sorted(entries)]}
        mpath.write_text(json.dumps(doc, indent=2) + "\n")
        return doc


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name).strip("_") or "spec"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in r])
    return buf.getvalue()


def _json(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _batches(cfg: ExperimentConfig):
    for entry in cfg.processes:
        yield entry.name, entry.spec, simulate_batch(entry.spec, entry.n_traj, cfg.memory_cap)


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig, run: _Run) -> int:
    for name, spec, batch in _batches(cfg):
        stem = _slug(name)
        run.write(f"{stem}.xrb", batch_to_xrb(batch))
        run.write(f"{stem}.spec.json", spec.to_json() + "\n")
        if run.wants("csv"):
            run.write(f"{stem}.csv", batch_to_csv(batch))
    return 0


def _load_batch_file(path: Path):
    blob = path.read_bytes()
    sidecar = path.with_name(path.name[: -len(path.suffix)] + ".spec.json")
    spec = ProcessSpec.from_json(sidecar.read_text()) if sidecar.exists() else None
    return batch_from_xrb(blob, spec)


def cmd_rates(cfg, run: _Run, batch_files=()) -> int:
    if batch_files:
        est = cfg.estimator if cfg is not None else None
        sources = [(Path(p).stem, None, _load_batch_file(Path(p))) for p in batch_files]
    else:
        est = cfg.estimator
        sources = list(_batches(cfg))
    if est is None:
        from .config import EstimatorConfig

        est = EstimatorConfig()
    rows, report, curves = [], [], []
    for name, _spec, batch in sources:
        entry = {"spec": name, "expectation": [], "trajectory": None, "errors": []}
        for method in est.methods:
            try:
                r = mc.estimate_A(batch, method, est.A_window, max_rel_se=est.max_rel_se)
            except ExpoRateError as exc:
                entry["errors"].append(f"{method}: {exc}")
                rows.append((name, method, None, None, None, None, None, f"error: {exc}"))
                continue
            rows.append((name, r.method, r.rate, r.window_start, r.window_len, r.diagnostic, r.skipped, ";".join(r.notes)))
            entry["expectation"].append(r.to_dict())
        try:
            tr = mc.trajectory_rates(batch, est.traj_method, est.traj_window)
            entry["trajectory"] = {"method": est.traj_method, "window": est.traj_window, "max": tr.max_rate, "mean": tr.mean_rate}
        except ExpoRateError as exc:
            entry["errors"].append(f"trajectory: {exc}")
        report.append(entry)
        if entry["expectation"]:
            first = entry["expectation"][0]
            curves.append((name, mc.expectation_curve(batch).values, first["rate"], first["window_start"]))
    if run.wants("csv"):
        run.write("rates.csv", _csv(["spec", "method", "rate", "window_start", "window_len", "diagnostic", "skipped", "notes"], rows))
    if run.wants("json"):
        run.write("rates.json", _json({"rates": report}))
    if run.wants("svg"):
        run.track(plotting.rates_svg(run.out / "rates.svg", curves))
    return 0


def cmd_hitting(cfg: ExperimentConfig, run: _Run) -> int:
    rows, report, series = [], [], []
    for name, spec, batch in _batches(cfg):
        if spec.kind == _WEALTH:
            continue
        scale = 1.0
        if spec.kind == _OPTIMIZATION:
            # sublevel sets relative to the initial objective value
            scale = float(batch.data[:, 0].max())
        grid = [e * scale for e in cfg.eps_grid]
        hit = mc.hitting_times(batch, grid)
        A = mc.estimate_A(batch, cfg.estimator.A_method, cfg.estimator.A_window, max_rel_se=cfg.estimator.max_rel_se)
        ref = -1.0 / math.log(A.rate) if 0 < A.rate < 1 else None
        scales, ratios = [], []
        for k, eps in enumerate(cfg.eps_grid):
            m = hit.mean(k)
            s = abs(math.log(eps))
            r = None if m is None or hit.censored_count(k) else m / s
            scales.append(s)
            ratios.append(r)
            rows += [
                (name, eps, "censored_count", hit.censored_count(k)),
                (name, eps, "mean", m),
                (name, eps, "mean_lower_bound", hit.mean_lower_bound(k)),
                (name, eps, "ratio", r),
            ]
        d = hit.to_dict()
        d.update(spec=name, eps_scale=scale, A=A.rate, reference=ref)
        report.append(d)
        series.append((name, scales, ratios, ref))
    if run.wants("csv"):
        run.write("hitting.csv", _csv(["spec", "eps", "statistic", "value"], rows))
    if run.wants("json"):
        run.write("hitting.json", _json({"hitting": report}))
    if run.wants("svg"):
        run.track(plotting.hitting_svg(run.out / "hitting.svg", series))
    return 0


def cmd_risk(cfg: ExperimentConfig, run: _Run) -> int:
    rows, report, series, growth = [], [], [], []
    w = cfg.estimator.tail_window
    for name, spec, batch in _batches(cfg):
        if spec.kind != _WEALTH:
            continue
        risks = [mc.risk_criterion(batch, g, w) for g in cfg.gamma_grid]
        g = mc.log_growth_rates(batch, w)
        bar = mc.barrier_times(batch, cfg.b_grid)
        for r in risks:
            rows.append((name, r.gamma, r.C_hat, r.se, r.window_start, r.window_len, ";".join(r.notes)))
        limit = mc.extrapolate_gamma_zero(cfg.gamma_grid, [r.C_hat for r in risks])
        report.append(
            {
                "spec": name,
                "risk": [r.to_dict() for r in risks],
                "gamma_zero_extrapolation": limit,
                "growth": g.to_dict(),
                "barrier": bar.to_dict(),
            }
        )
        series.append((name, list(cfg.gamma_grid), [r.C_hat for r in risks]))
        growth.append((name, g.final))
    if run.wants("csv"):
        run.write("risk.csv", _csv(["spec", "gamma", "C_hat", "se", "window_start", "window_len", "notes"], rows))
    if run.wants("json"):
        run.write("risk.json", _json({"risk": report}))
    if run.wants("svg"):
        run.track(plotting.risk_svg(run.out / "risk.svg", series, growth))
    return 0


def cmd_verify(cfg: ExperimentConfig, run: _Run) -> int:
    report = run_suite(cfg.processes, cfg)
    run.write("report.json", report.to_json())
    if run.wants("csv"):
        rows = [(v.spec, v.check_name, v.applicability, v.passed, v.lhs, v.rhs, v.tolerance) for v in report.verdicts]
        run.write("report.csv", _csv(["spec", "check_name", "applicability", "pass", "lhs", "rhs", "tolerance"], rows))
    print(report.table())
    return report.exit_code


COMMANDS = {
    "simulate": cmd_simulate,
    "rates": cmd_rates,
    "hitting": cmd_hitting,
    "risk": cmd_risk,
    "verify": cmd_verify,
}


# --------------------------------------------------------------------------
# Argument handling
# --------------------------------------------------------------------------


def _global_flags(p: argparse.ArgumentParser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=d, help="experiment config (JSON)")
    p.add_argument("--out", metavar="DIR", default=d, help="output directory (created if missing)")
    p.add_argument("--seed", type=int, default=d, help="override the master seed and every process seed")
    p.add_argument(
        "--format",
        dest="formats",
        action="extend",
        nargs="+",
        choices=FORMATS,
        default=d,
        help="output formats (repeatable); default: config value or all",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exporate", description="Expectation and trajectory convergence-rate experiments.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "simulate every configured process and write batch files",
        "rates": "estimate expectation and trajectory rates",
        "hitting": "hitting-time ratios against |log eps|",
        "risk": "risk-sensitive criterion, log-growth and barrier times",
        "verify": "run the configured verification suite",
    }
    for name, h in helps.items():
        sp = sub.add_parser(name, help=h)
        _global_flags(sp, suppress=True)
        if name == "rates":
            sp.add_argument("--batch", nargs="+", default=[], metavar="XRB", help="analyse existing batch files instead of simulating")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = None
        if args.config is not None:
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg = cfg.with_seed(args.seed)
        elif not (args.command == "rates" and args.batch):
            raise ConfigError("a config file is required", "--config")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    formats = args.formats or (cfg.formats if cfg is not None else FORMATS)
    out = Path(args.out or (cfg.output_dir if cfg is not None and cfg.output_dir else DEFAULT_OUT))
    try:
        out.mkdir(parents=True, exist_ok=True)
        run = _Run(out, dict.fromkeys(formats))
        if args.command == "rates":
            code = cmd_rates(cfg, run, args.batch)
        else:
            code = COMMANDS[args.command](cfg, run)
        print(json.dumps(run.manifest(), indent=2))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ExpoRateError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
