"""Command-line orchestration: solve / correction / small-l / orbit /
hessian / diagnostics / sweep.

Configuration is a flat TOML document with units spelled out in the key
names (side_length_L, cutoff_Lambda, ...) so that runs stay diffable.  All
artifacts land under --out together with a manifest.json index; reports are
schema-validated JSON with floats printed to 17 significant digits (CSV
tables use 10).

Exit codes: 0 success, 1 configuration or usage error, 2 numerical
non-convergence (a partial report is still written), 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass
from importlib import metadata, resources
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import lattice as lattice_mod
from .hessian import (assemble_K, export_spectrum_csv, smalll_direct,
                      write_matrix)
from .lattice import MomentumLattice, write_field
from .orbit import gross_decompose
from .scf import (Regime, SolverFailure, gaussian_bump, load_solution,
                  minimize_pekar, save_solution)
from .sums import fit_power_law, gross_sums, ly_norm, outer_trace_sum
from .hessian import RealModeBasis

SCHEMA_VERSION = 1


class ConfigError(Exception):
    pass


_DEFAULTS = {
    "cutoff_Lambda": None,
    "weight_T": 1.0,
    "tolerance_scf": 1e-9,
    "tolerance_eigensolver": 1e-10,
    "tolerance_resolvent": 1e-10,
    "init_preset": "gaussian",
    "init_width_fraction": 0.125,
    "max_outer_iterations": 500,
    "seed": 0,
    "sweep_parameter": None,
    "sweep_values": None,
    "check_lambda_doubling": False,
    "solution_dir": None,
}
_REQUIRED = ("side_length_L", "grid_points_n")


@dataclass
class RunConfig:
    side_length_L: float
    grid_points_n: int
    cutoff_Lambda: float = None
    weight_T: float = 1.0
    tolerance_scf: float = 1e-9
    tolerance_eigensolver: float = 1e-10
    tolerance_resolvent: float = 1e-10
    init_preset: str = "gaussian"
    init_width_fraction: float = 0.125
    max_outer_iterations: int = 500
    seed: int = 0
    sweep_parameter: str = None
    sweep_values: list = None
    check_lambda_doubling: bool = False
    solution_dir: str = None

    def validate(self):
        if self.side_length_L <= 0:
            raise ConfigError("side_length_L must be positive")
        if self.grid_points_n <= 0 or self.grid_points_n % 2:
            raise ConfigError("grid_points_n must be a positive even integer")
        nyq = np.pi * self.grid_points_n / self.side_length_L
        if self.cutoff_Lambda is not None and self.cutoff_Lambda > nyq:
            raise ConfigError(f"cutoff_Lambda exceeds the Nyquist radius {nyq:.6g}")
        if self.init_preset not in ("gaussian", "constant"):
            raise ConfigError(f"unknown init_preset {self.init_preset!r}")

    def lattice(self) -> MomentumLattice:
        return MomentumLattice(self.side_length_L, self.grid_points_n)

    def echo(self) -> dict:
        return {k: getattr(self, k) for k in
                list(_REQUIRED) + list(_DEFAULTS.keys())}


def load_config(path) -> RunConfig:
    try:
        raw = tomllib.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error in {path}: {exc}")
    unknown = set(raw) - set(_DEFAULTS) - set(_REQUIRED)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    missing = [k for k in _REQUIRED if k not in raw]
    if missing:
        raise ConfigError(f"missing required config field: {missing[0]}")
    cfg = RunConfig(**{**{k: v for k, v in _DEFAULTS.items() if v is not None},
                       **raw})
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# deterministic serialization
# ---------------------------------------------------------------------------

def _format_json(obj, indent=0) -> str:
    """JSON text with floats at 17 significant digits, byte-stable."""
    pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{pad}  {json.dumps(str(k))}: {_format_json(v, indent + 1)}'
                 for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + f"\n{pad}}}"
    if isinstance(obj, (list, tuple)):
        if not len(obj):
            return "[]"
        items = [f"{pad}  {_format_json(v, indent + 1)}" for v in obj]
        return "[\n" + ",\n".join(items) + f"\n{pad}]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not np.isfinite(x):
            raise ValueError(f"non-finite value in report: {x}")
        return f"{x:.17g}"
    return json.dumps(obj)


def write_json(path, obj) -> None:
    Path(path).write_text(_format_json(obj) + "\n")


def _csv_fmt(x):
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.10g}"
    return str(x)


# ---------------------------------------------------------------------------
# report schema
# ---------------------------------------------------------------------------

def report_schema() -> dict:
    data = resources.files("pekar").joinpath("data/run_report.schema.json")
    return json.loads(data.read_text())


def validate_report(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, report_schema())


def _versions() -> dict:
    import scipy

    try:
        pkg = metadata.version("pekar")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"pekar": pkg, "numpy": np.__version__, "scipy": scipy.__version__}


def make_report(command: str, cfg: RunConfig, results: dict,
                elapsed: float) -> dict:
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": cfg.echo(),
        "results": results,
        "timing_seconds": elapsed,
        "versions": _versions(),
    }
    validate_report(report)
    return report


class _OutputDir:
    def __init__(self, root, command):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.artifacts = []

    def path(self, name) -> Path:
        self.artifacts.append(name)
        return self.root / name

    def finish(self):
        manifest_path = self.root / "manifest.json"
        entries = {}
        if manifest_path.exists():
            entries = json.loads(manifest_path.read_text())
        entries[self.command] = sorted(set(entries.get(self.command, [])
                                           + self.artifacts))
        write_json(manifest_path, entries)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _solve(cfg: RunConfig):
    lat = cfg.lattice()
    init = cfg.init_preset
    width = cfg.init_width_fraction * cfg.side_length_L
    if init == "gaussian":
        init = gaussian_bump(lat, width)
    return minimize_pekar(lat, init=init, tol=cfg.tolerance_scf,
                          max_outer=cfg.max_outer_iterations,
                          eig_tol=cfg.tolerance_eigensolver, seed=cfg.seed)


def _solution_for(cfg: RunConfig):
    if cfg.solution_dir:
        return load_solution(cfg.solution_dir)
    return _solve(cfg)


def _finite_or_none(x):
    """Reports carry only finite numerics; undefined diagnostics become null."""
    x = float(x)
    return x if np.isfinite(x) else None


def _solution_results(sol) -> dict:
    return {
        "e_L": sol.energy,
        "mu": sol.mu,
        "regime": sol.regime.value,
        "el_residual": sol.el_residual,
        "iterations": sol.iterations,
        "spectral_gap_h": _finite_or_none(sol.gap),
    }


def cmd_solve(cfg: RunConfig, out: _OutputDir) -> dict:
    t0 = time.perf_counter()
    sol = _solve(cfg)
    save_solution(out.path("solution"), sol)
    results = _solution_results(sol)
    report = make_report("solve", cfg, results, time.perf_counter() - t0)
    write_json(out.path("report.json"), report)
    return report


def cmd_correction(cfg: RunConfig, out: _OutputDir) -> dict:
    if cfg.cutoff_Lambda is None:
        raise ConfigError("missing required config field: cutoff_Lambda")
    t0 = time.perf_counter()
    sol = _solution_for(cfg)
    spec = assemble_K(sol, cfg.cutoff_Lambda, tol=cfg.tolerance_resolvent,
                      threads=cfg_threads(cfg))
    results = _solution_results(sol)
    results.update({
        "cutoff_Lambda": cfg.cutoff_Lambda,
        "modes": spec.size,
        "trace_correction": spec.trace_correction,
        "tail_estimate": _finite_or_none(spec.tail_estimate),
        "zero_mode_angle": _finite_or_none(spec.zero_mode_angle),
        "gap_one_minus_k4": _finite_or_none(1.0 - spec.eigenvalues[3])
            if spec.size > 3 else None,
        "asymmetry": spec.asymmetry,
    })
    if sol.regime is Regime.CONSTANT:
        direct, _ = smalll_direct(sol.lattice, cfg.cutoff_Lambda)
        results["small_l_crosscheck_delta"] = abs(spec.trace_correction - direct)
    if cfg.check_lambda_doubling:
        spec2 = assemble_K(sol, 2.0 * cfg.cutoff_Lambda,
                           tol=cfg.tolerance_resolvent, threads=cfg_threads(cfg))
        a = spec.trace_correction + _nan_to_zero(spec.tail_estimate)
        b = spec2.trace_correction + _nan_to_zero(spec2.tail_estimate)
        drift = abs(b - a) / max(abs(b), 1e-300)
        results["lambda_doubling_drift"] = drift
        results["lambda_stable"] = bool(drift <= 0.01)
    report = make_report("correction", cfg, results, time.perf_counter() - t0)
    export_spectrum_csv(spec, out.path("spectrum.csv"))
    write_json(out.path("report.json"), report)
    return report


def _nan_to_zero(x):
    return 0.0 if not np.isfinite(x) else x


def cmd_small_l(cfg: RunConfig, out: _OutputDir) -> dict:
    if cfg.cutoff_Lambda is None:
        raise ConfigError("missing required config field: cutoff_Lambda")
    t0 = time.perf_counter()
    lat = cfg.lattice()
    value, tail_bound = smalll_direct(lat, cfg.cutoff_Lambda)
    results = {"small_l_value": value, "tail_bound": tail_bound,
               "cutoff_Lambda": cfg.cutoff_Lambda}
    report = make_report("small-l", cfg, results, time.perf_counter() - t0)
    write_json(out.path("report.json"), report)
    return report


def cmd_orbit(cfg: RunConfig, out: _OutputDir) -> dict:
    if cfg.cutoff_Lambda is None:
        raise ConfigError("missing required config field: cutoff_Lambda")
    t0 = time.perf_counter()
    sol = _solution_for(cfg)
    if sol.regime is not Regime.LOCALIZED:
        raise SolverFailure("orbit decomposition needs the localized regime")
    rng = np.random.default_rng(cfg.seed)
    basis = RealModeBasis(sol.lattice, cfg.cutoff_Lambda)
    x = rng.standard_normal(basis.size)
    v = basis.field(x)
    v = (0.02 * sol.phi.norm() / v.norm()) * v
    y = rng.uniform(-sol.lattice.L / 2, sol.lattice.L / 2, size=3)
    from .lattice import translate
    probe = translate(sol.phi + v, y)
    dec = gross_decompose(probe, sol, cfg.weight_T)
    write_field(out.path("v.pekr"), dec.v)
    recon = translate(sol.phi + dec.v, dec.y)
    results = {
        "y": list(dec.y),
        "dist": dec.dist,
        "T": dec.T,
        "ortho_residual": dec.ortho_residual,
        "reconstruction_error": (recon - probe).norm(),
    }
    report = make_report("orbit", cfg, results, time.perf_counter() - t0)
    write_json(out.path("decomposition.json"),
               {k: results[k] for k in ("y", "dist", "T", "ortho_residual")})
    write_json(out.path("report.json"), report)
    return report


def cmd_hessian(cfg: RunConfig, out: _OutputDir) -> dict:
    if cfg.cutoff_Lambda is None:
        raise ConfigError("missing required config field: cutoff_Lambda")
    t0 = time.perf_counter()
    sol = _solution_for(cfg)
    spec = assemble_K(sol, cfg.cutoff_Lambda, tol=cfg.tolerance_resolvent,
                      threads=cfg_threads(cfg))
    export_spectrum_csv(spec, out.path("spectrum.csv"))
    write_matrix(out.path("K.pekm"), spec.matrix)
    results = _solution_results(sol)
    results.update({
        "cutoff_Lambda": cfg.cutoff_Lambda,
        "modes": spec.size,
        "trace_correction": spec.trace_correction,
        "tail_estimate": _finite_or_none(spec.tail_estimate),
        "zero_mode_angle": _finite_or_none(spec.zero_mode_angle),
        "gap_one_minus_k4": _finite_or_none(1.0 - spec.eigenvalues[3])
            if spec.size > 3 else None,
        "asymmetry": spec.asymmetry,
    })
    report = make_report("hessian", cfg, results, time.perf_counter() - t0)
    write_json(out.path("report.json"), report)
    return report


def cmd_diagnostics(cfg: RunConfig, out: _OutputDir) -> dict:
    t0 = time.perf_counter()
    L = cfg.side_length_L
    fits = {}

    lams = [2.0, 4.0, 8.0, 16.0, 32.0]
    rows = []
    for j, l in ((1, 1), (1, 2)):
        vals = [ly_norm(L, lam, j, l) for lam in lams]
        fit = fit_power_law(lams, vals)
        fits[f"ly_{j}{l}_vs_Lambda"] = {"slope": fit.slope,
                                        "residual": fit.residual}
        rows += [{"sum": f"ly_{j}{l}", "parameter": lam, "value": v}
                 for lam, v in zip(lams, vals)]

    Ks = [16.0, 32.0, 64.0, 128.0, 256.0]
    sweeps = {k: [] for k in ("g2", "f2", "vf", "gradf2")}
    for K in Ks:
        gs = gross_sums(L, 1.0, K)
        for k in sweeps:
            sweeps[k].append(gs[k])
            rows.append({"sum": f"gross_{k}_vs_K", "parameter": K, "value": gs[k]})
    for k in sweeps:
        fit = fit_power_law(Ks, sweeps[k])
        fits[f"gross_{k}_vs_K"] = {"slope": fit.slope, "residual": fit.residual}

    alphas = [2.0, 4.0, 8.0, 16.0, 32.0]
    sweeps = {k: [] for k in ("f2", "vf", "gradf2")}
    for a in alphas:
        gs = gross_sums(L, a, 8.0)
        for k in sweeps:
            sweeps[k].append(gs[k])
            rows.append({"sum": f"gross_{k}_vs_alpha", "parameter": a,
                         "value": gs[k]})
    for k in sweeps:
        fit = fit_power_law(alphas, sweeps[k])
        fits[f"gross_{k}_vs_alpha"] = {"slope": fit.slope,
                                       "residual": fit.residual}

    lat = cfg.lattice()
    lams2 = [4.0, 8.0, 16.0, 32.0, 64.0]
    vals = [outer_trace_sum(lat, lam, T=2.0, gamma=2.0, eta=0.05,
                            kappa_prime=1.0) for lam in lams2]
    fit = fit_power_law(lams2, vals)
    fits["outer_trace_vs_Lambda"] = {"slope": fit.slope, "residual": fit.residual}
    rows += [{"sum": "outer_trace", "parameter": lam, "value": v}
             for lam, v in zip(lams2, vals)]

    with open(out.path("sums.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sum", "parameter", "value"])
        for r in rows:
            w.writerow([r["sum"], _csv_fmt(r["parameter"]), _csv_fmt(r["value"])])
    write_json(out.path("fits.json"), fits)
    results = {"fits": fits}
    report = make_report("diagnostics", cfg, results, time.perf_counter() - t0)
    write_json(out.path("report.json"), report)
    return report


_SWEEP_COLUMNS = ["parameter", "status", "e_L", "mu", "regime", "el_residual",
                  "iterations", "spectral_gap_h"]


def _sweep_point(args):
    cfg_dict, param, value = args
    cfg = RunConfig(**cfg_dict)
    if param == "side_length_L":
        cfg.side_length_L = value
    elif param == "cutoff_Lambda":
        cfg.cutoff_Lambda = value
    else:
        raise ConfigError(f"unsupported sweep_parameter {param!r}")
    cfg.validate()
    try:
        sol = _solve(cfg)
        row = {"parameter": value, "status": "ok", **_solution_results(sol)}
    except SolverFailure as exc:
        row = {"parameter": value, "status": f"failed: {exc}"}
    return row


def cmd_sweep(cfg: RunConfig, out: _OutputDir, threads: int = 1) -> dict:
    if not cfg.sweep_parameter or not cfg.sweep_values:
        raise ConfigError("missing required config field: sweep_parameter/"
                          "sweep_values")
    t0 = time.perf_counter()
    csv_path = out.root / "sweep.csv"
    done = set()
    rows = []
    if csv_path.exists():
        with open(csv_path) as fh:
            for row in csv.DictReader(fh):
                if row.get("status") == "ok":
                    done.add(f"{float(row['parameter']):.10g}")
                    rows.append(row)
    todo = [v for v in cfg.sweep_values if f"{float(v):.10g}" not in done]
    base = {k: getattr(cfg, k) for k in list(_REQUIRED) + list(_DEFAULTS)}
    jobs = [(base, cfg.sweep_parameter, v) for v in todo]
    if threads > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=threads) as pool:
            new_rows = list(pool.map(_sweep_point, jobs))
    else:
        new_rows = [_sweep_point(j) for j in jobs]
    rows.extend(new_rows)
    rows.sort(key=lambda r: float(r["parameter"]))
    out.artifacts.append("sweep.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=_SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: _csv_fmt(r.get(k, "")) for k in _SWEEP_COLUMNS})
    results = {"points_total": len(rows),
               "points_failed": sum(1 for r in rows
                                    if not str(r["status"]).startswith("ok"))}
    report = make_report("sweep", cfg, results, time.perf_counter() - t0)
    write_json(out.path("report.json"), report)
    return report


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_THREADS = 1


def cfg_threads(cfg) -> int:
    return _THREADS


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pekar",
                                description="Classical polaron ground problem "
                                            "on the 3-torus")
    p.add_argument("command", choices=["solve", "correction", "small-l",
                                       "orbit", "hessian", "diagnostics",
                                       "sweep"])
    p.add_argument("--config", required=True, help="TOML config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    return p


def main(argv=None) -> int:
    global _THREADS
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        _THREADS = max(1, args.threads)
        lattice_mod.set_fft_workers(1)
        out = _OutputDir(args.out, args.command)
        handler = {
            "solve": cmd_solve,
            "correction": cmd_correction,
            "small-l": cmd_small_l,
            "orbit": cmd_orbit,
            "hessian": cmd_hessian,
            "diagnostics": cmd_diagnostics,
        }.get(args.command)
        if args.command == "sweep":
            cmd_sweep(cfg, out, threads=_THREADS)
        else:
            handler(cfg, out)
        out.finish()
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except SolverFailure as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        try:
            out = _OutputDir(args.out, args.command)
            write_json(out.path("report.json"),
                       {"schema_version": SCHEMA_VERSION,
                        "command": args.command, "status": "non-convergence",
                        "error": str(exc)})
            out.finish()
        except Exception:
            pass
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
