"""Experiment runner: ``stokes-homog run <config>`` and ``stokes-homog validate <config>``.

Configs are versioned JSON files.  Every run writes CSV tables (fixed column
order and number formatting, so that reruns are byte-identical), a JSON
summary, and prints one PASS/FAIL line per enabled check.

Exit codes: 0 success, 1 invalid config, 2 solver failure, 3 failed check.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import experiments as ex
from .cell_problem import solve_cell_problems
from .discretization import PeriodicGrid
from .effective_tensor import check_duality, check_effective_ellipticity, compute_effective
from .estimates import (
    EstimateConfig,
    liouville_rank_report,
    reports_to_csv,
    spec_hash,
    strictly_decreasing,
    sublinear_liouville_check,
    two_scale_report,
)
from .saddle import SolverError
from .stokes_solver import CompatibilityError, solve_dirichlet
from .tensor_core import FAMILIES, PRESETS, EllipticityError, make_coefficient_field

log = logging.getLogger("stokes_homog")

SCHEMA_VERSION = 1
KINDS = ("cell", "effective", "solve", "estimate-sweep", "liouville", "two-scale")
PROBLEMS = ("interior", "boundary", "w1p")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CHECK = 0, 1, 2, 3


class ConfigError(ValueError):
    def __init__(self, diagnostics):
        self.diagnostics = diagnostics
        super().__init__("; ".join(f"{p}: {m}" for p, m in diagnostics))


def _parse_eps(value):
    """Accept ``0.125``, ``"1/8"`` or ``8`` (meaning ``1/8``)."""
    if isinstance(value, str):
        return float(Fraction(value))
    return float(value)


def _eps_str(value: float) -> str:
    frac = Fraction(value).limit_denominator(1 << 20)
    return f"{frac.numerator}/{frac.denominator}" if frac.denominator != 1 else str(frac.numerator)


@dataclass
class ExperimentConfig:
    kind: str
    coefficient: dict
    dim: int = 2
    n: int = 64
    n_cell: int = 64
    eps: list = field(default_factory=list)
    problem: str = "interior"
    estimates: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    tol: float = 1e-10
    seed: int = 0
    output: str | None = None
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        diags = validate_dict(data)
        if diags:
            raise ConfigError(diags)
        data = dict(data)
        data["eps"] = [_parse_eps(e) for e in data.get("eps", [])]
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["eps"] = [_eps_str(e) for e in self.eps]
        return out

    def estimate_config(self) -> EstimateConfig:
        kw = dict(self.estimates)
        kw.setdefault("eps_list", tuple(self.eps) or EstimateConfig().eps_list)
        kw.setdefault("tol", self.tol)
        kw.setdefault("seed", self.seed)
        return EstimateConfig(dim=self.dim, **kw)

    def coefficient_field(self):
        spec = dict(self.coefficient)
        if "preset" in spec:
            spec = {**PRESETS[spec.pop("preset")], **spec}
        spec["dim"] = self.dim
        return make_coefficient_field(spec)


_FIELDS = {f for f in ExperimentConfig.__dataclass_fields__}
_ESTIMATE_KEYS = {"q", "holder_rho", "w1p_exponents", "eps_list", "band", "w1p_band", "tol",
                  "seed", "pair_limit", "all_pairs_max_n"}


def validate_dict(data) -> list[tuple[str, str]]:
    """Structured diagnostics ``(field path, message)``; empty when valid."""
    diags = []
    if not isinstance(data, dict):
        return [("$", "config must be a JSON object")]
    for key in data:
        if key not in _FIELDS:
            diags.append((key, "unknown field"))
    if data.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        diags.append(("schema_version", f"unsupported version, expected {SCHEMA_VERSION}"))
    kind = data.get("kind")
    if kind not in KINDS:
        diags.append(("kind", f"must be one of {list(KINDS)}"))
    dim = data.get("dim", 2)
    if dim not in (2, 3):
        diags.append(("dim", "must be 2 or 3"))
    coeff = data.get("coefficient")
    if not isinstance(coeff, dict):
        diags.append(("coefficient", "missing family spec"))
    elif "preset" in coeff:
        if coeff["preset"] not in PRESETS:
            diags.append(("coefficient.preset", f"unknown preset; choose from {sorted(PRESETS)}"))
    elif coeff.get("family") not in FAMILIES:
        diags.append(("coefficient.family", f"must be one of {list(FAMILIES)}"))
    for key in ("n", "n_cell"):
        v = data.get(key, 64)
        if not isinstance(v, int) or v < 4:
            diags.append((key, "must be an integer >= 4"))
    n = data.get("n", 64)
    eps_values = []
    for i, e in enumerate(data.get("eps", [])):
        try:
            v = _parse_eps(e)
        except (ValueError, ZeroDivisionError, TypeError):
            diags.append((f"eps[{i}]", f"cannot parse {e!r}"))
            continue
        if not 0 < v <= 1:
            diags.append((f"eps[{i}]", "must lie in (0, 1]"))
            continue
        eps_values.append(v)
        if isinstance(n, int) and abs(v * n - round(v * n)) > 1e-9:
            diags.append((f"eps[{i}]", f"eps = {e} does not divide the grid: eps*N = {v * n:g} is not an integer"))
    if data.get("problem", "interior") not in PROBLEMS:
        diags.append(("problem", f"must be one of {list(PROBLEMS)}"))
    est = data.get("estimates", {})
    if not isinstance(est, dict):
        diags.append(("estimates", "must be an object"))
    else:
        for key in est:
            if key not in _ESTIMATE_KEYS:
                diags.append((f"estimates.{key}", "unknown field"))
        if not [p for p in diags if p[0].startswith("estimates.")] and dim in (2, 3):
            try:
                cfg = EstimateConfig(dim=dim, **{k: v for k, v in est.items()})
                for msg in cfg.validate():
                    diags.append(("estimates", msg))
            except (TypeError, ValueError) as exc:
                diags.append(("estimates", str(exc)))
    tol = data.get("tol", 1e-10)
    if not isinstance(tol, (int, float)) or not 0 < tol < 1:
        diags.append(("tol", "must lie in (0, 1)"))
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
        diags.append(("seed", "must be an unsigned 64-bit integer"))
    if not isinstance(data.get("checks", []), list):
        diags.append(("checks", "must be a list"))
    return diags


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([("$", f"cannot read config: {exc}")]) from exc
    return ExperimentConfig.from_dict(data)


# --- outputs -----------------------------------------------------------------------------


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _f(x) -> str:
    return f"{float(x):.12e}"


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (bool, np.bool_)):
        return bool(o)
    raise TypeError(type(o))


@dataclass
class Check:
    id: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.id}: {self.detail}"


# --- experiment kinds -------------------------------------------------------------------------


def _run_cell(cfg, out, pool):
    coeff = cfg.coefficient_field()
    cset = solve_cell_problems(coeff, PeriodicGrid(cfg.dim, cfg.n_cell), cfg.tol)
    cset.save(out / "correctors")
    d = cfg.dim
    means, divs, norms = cset.mean_defects(), cset.divergence_defects(), cset.norms()
    rows = [[j, b, _f(cset.residuals[j, b]), _f(np.abs(means[j, b]).max()), _f(divs[j, b]), _f(norms[j, b])]
            for j in range(d) for b in range(d)]
    _write_csv(out / "cell.csv", ["j", "beta", "residual", "mean_defect", "divergence_defect", "norm"], rows)
    chi_norm = float(np.abs(cset.chi).max())
    pi_norm = float(np.abs(cset.pi).max())
    checks = {
        "residual": Check("residual", cset.max_residual() <= cfg.tol, f"max residual {cset.max_residual():.3e}"),
        "mean_zero": Check("mean_zero", float(np.abs(means).max()) <= cfg.tol,
                           f"max mean defect {np.abs(means).max():.3e}"),
        "divergence": Check("divergence", float(divs.max()) <= cfg.tol, f"max div defect {divs.max():.3e}"),
        "trivial": Check("trivial", (not coeff.is_constant) or max(chi_norm, pi_norm) <= 1e-12,
                         f"max |chi| {chi_norm:.3e}, max |pi| {pi_norm:.3e}"),
    }
    summary = {"max_residual": cset.max_residual(), "norms": norms, "method": cset.meta.get("method")}
    return summary, checks


def _run_effective(cfg, out, pool):
    coeff = cfg.coefficient_field()
    grid = PeriodicGrid(cfg.dim, cfg.n_cell)
    defect, eff, dual = check_duality(coeff, grid, cfg.tol)
    eff.save(out / "effective.json")
    dual.save(out / "effective_adjoint.json")
    ok, lo, hi = check_effective_ellipticity(eff, coeff.mu)
    d = cfg.dim
    rows = []
    for i in range(d):
        for j in range(d):
            for a in range(d):
                for b in range(d):
                    rows.append([i, j, a, b, _f(eff.entry(i, j, a, b))])
    _write_csv(out / "effective.csv", ["i", "j", "alpha", "beta", "value"], rows)
    checks = {
        "duality": Check("duality", defect <= 1e-8, f"max defect {defect:.3e}"),
        "ellipticity": Check("ellipticity", ok, f"mu_eff_lower {lo:.10f} vs mu {coeff.mu:.10f}"),
    }
    if coeff.is_constant:
        diff = float(np.abs(eff.matrix - coeff.evaluate(np.zeros(d))).max())
        checks["trivial"] = Check("trivial", diff <= 1e-12, f"max |A_hat - A| {diff:.3e}")
    summary = {"duality_defect": defect, "mu_eff_lower": lo, "mu_eff_upper": hi, "mu_input": coeff.mu}
    return summary, checks


_PROBLEM_BUILDERS = {"interior": ex.interior_problem, "boundary": ex.boundary_problem, "w1p": ex.w1p_problem}


def _run_solve(cfg, out, pool):
    coeff = cfg.coefficient_field()
    build = _PROBLEM_BUILDERS[cfg.problem]
    eps_list = cfg.eps or [0.0]

    def one(eps):
        problem = build(coeff, eps, cfg.n, cfg.dim)
        return eps, solve_dirichlet(problem, cfg.tol)

    results = list(pool.map(one, eps_list))
    rows = []
    for eps, sol in results:
        sol.save(out / f"solution_eps_{_eps_str(eps).replace('/', '_')}", build(coeff, eps, cfg.n, cfg.dim).grid)
        rows.append([_f(eps), _f(sol.residual), _f(sol.divergence_defect), sol.iterations, _f(sol.energy_ratio)])
    _write_csv(out / "solve.csv", ["eps", "residual", "divergence_defect", "iterations", "energy_ratio"], rows)
    worst = max(sol.residual for _, sol in results)
    ratios = [sol.energy_ratio for _, sol in results]
    checks = {
        "residual": Check("residual", worst <= cfg.tol, f"max residual {worst:.3e}"),
        "energy_ratio": Check("energy_ratio", all(np.isfinite(ratios)) and max(ratios) <= 2 * min(ratios),
                              f"energy ratios {', '.join(f'{r:.4f}' for r in ratios)}"),
    }
    return {"residuals": [s.residual for _, s in results], "energy_ratios": ratios}, checks


def _run_sweep(cfg, out, pool):
    coeff = cfg.coefficient_field()
    ecfg = cfg.estimate_config()
    reports = {}
    # independent sweeps, merged in a fixed order
    jobs = [lambda: ex.interior_sweep(coeff, ecfg, cfg.n, full=True),
            lambda: ex.boundary_sweep(coeff, ecfg, cfg.n),
            lambda: {f"w1p_q{q:.4g}": r for q, r in ex.w1p_sweep(coeff, ecfg, n=cfg.n).items()}]
    for part in pool.map(lambda job: job(), jobs):
        reports.update(part)
    prov = {"config_hash": spec_hash(cfg.to_dict())}
    for rep in reports.values():
        rep.provenance = prov
    (out / "estimates.csv").write_text(reports_to_csv(reports.values()))
    summary = {k: r.summary() for k, r in reports.items()}
    checks = {}
    for key, band in [("interior_lipschitz", ecfg.band), ("pressure_oscillation", ecfg.band),
                      ("boundary_holder", ecfg.band), ("w1p_q4", ecfg.w1p_band)]:
        if key in reports:
            rep = reports[key]
            checks[key] = Check(key, rep.uniform(band),
                                f"band variation {rep.band_variation():.4f} (limit {band:.2f})")
    return summary, checks


def _run_liouville(cfg, out, pool):
    coeff = cfg.coefficient_field()
    cset = solve_cell_problems(coeff, PeriodicGrid(cfg.dim, cfg.n_cell), cfg.tol)
    rank = liouville_rank_report(coeff, cset)
    sub = sublinear_liouville_check(cset)
    rows = [[m["member"], _f(m["momentum_residual"]), _f(m["divergence_defect"])] for m in rank["members"]]
    _write_csv(out / "liouville.csv", ["member", "momentum_residual", "divergence_defect"], rows)
    bound = 10 * max(cset.max_residual(), np.finfo(float).eps)
    worst_mom = max(m["momentum_residual"] for m in rank["members"])
    worst_div = max(m["divergence_defect"] for m in rank["members"])
    checks = {
        "rank": Check("rank", rank["rank"] == rank["expected"], f"rank {rank['rank']} (expected {rank['expected']})"),
        "momentum": Check("momentum", worst_mom <= bound, f"max residual {worst_mom:.3e} vs bound {bound:.3e}"),
        "divergence": Check("divergence", worst_div <= 1e-9, f"max |div u - tr E| {worst_div:.3e}"),
        "sublinear": Check("sublinear", sub["sublinear_rank"] == sub["expected"],
                           f"sublinear rank {sub['sublinear_rank']} (expected {sub['expected']})"),
    }
    summary = {"rank": rank["rank"], "expected": rank["expected"],
               "singular_values": rank["singular_values"], "sublinear_rank": sub["sublinear_rank"]}
    return summary, checks


def _run_two_scale(cfg, out, pool):
    coeff = cfg.coefficient_field()
    eps_list = tuple(cfg.eps) or (1 / 4, 1 / 8, 1 / 16, 1 / 32)
    errors, eff = ex.two_scale_sweep(coeff, eps_list, cfg.n, cfg.dim, cfg.tol, cfg.n_cell)
    (out / "two_scale.csv").write_text(reports_to_csv(two_scale_report(errors)))
    l2 = {e.eps: e.l2 for e in errors}
    flux_ok = []
    for k in range(len(errors[0].flux_defects)):
        flux_ok.append(strictly_decreasing({e.eps: e.flux_defects[k] for e in errors}))
    bad = [k for k, ok in enumerate(flux_ok) if not ok]
    checks = {
        "l2_decrease": Check("l2_decrease", strictly_decreasing(l2),
                             "L2 errors " + ", ".join(f"{v:.3e}" for v in l2.values())),
        "flux_decrease": Check("flux_decrease", not bad,
                               "all 10 decrease" if not bad else f"non-monotone panel members {bad}"),
    }
    summary = {"errors": [e.as_dict() for e in errors]}
    return summary, checks


RUNNERS = {
    "cell": _run_cell,
    "effective": _run_effective,
    "solve": _run_solve,
    "estimate-sweep": _run_sweep,
    "liouville": _run_liouville,
    "two-scale": _run_two_scale,
}


class _SerialPool:
    def map(self, fn, items):
        return map(fn, items)


def run_config(cfg: ExperimentConfig, out: Path, threads: int = 1) -> tuple[dict, list[Check]]:
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else _SerialPool()
    try:
        summary, checks = RUNNERS[cfg.kind](cfg, out, pool)
    finally:
        if threads > 1:
            pool.shutdown()
    enabled = [checks[c] for c in (cfg.checks or list(checks)) if c in checks]
    summary = {"kind": cfg.kind, "config_hash": spec_hash(cfg.to_dict()), "summary": summary,
               "checks": [asdict(c) for c in enabled]}
    _write_json(out / "summary.json", summary)
    return summary, enabled


def _threads(arg) -> int:
    if arg is not None:
        return max(1, int(arg))
    env = os.environ.get("STOKES_HOMOG_THREADS")
    return max(1, int(env)) if env else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="stokes-homog", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--out", help="output directory (default: config 'output' or out/<name>)")
    p_run.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: $STOKES_HOMOG_THREADS or 1)")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_val = sub.add_parser("validate", help="check a config without running it")
    p_val.add_argument("config")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        for path, msg in exc.diagnostics:
            print(f"{args.config}: {path}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        print(f"{args.config}: ok")
        return EXIT_OK

    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            print("--seed must be an unsigned 64-bit integer", file=sys.stderr)
            return EXIT_CONFIG
        cfg.seed = args.seed
    out = Path(args.out or cfg.output or Path("out") / Path(args.config).stem)
    t0 = time.perf_counter()
    try:
        _, checks = run_config(cfg, out, _threads(args.threads))
    except EllipticityError as exc:
        print(f"{args.config}: coefficient: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, CompatibilityError) as exc:
        print(f"solver failure in {cfg.kind}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    for c in checks:
        print(c.line())
    log.info("finished %s in %.1f s", cfg.kind, time.perf_counter() - t0)
    failed = [c.id for c in checks if not c.passed]
    if failed:
        print(f"failed checks: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
