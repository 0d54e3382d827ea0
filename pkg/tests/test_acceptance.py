"""Acceptance suite: thirteen criteria at their stated tolerances.

Each test prints one ``PASS``/``FAIL`` line (also collected in the terminal
summary) and asserts the criterion.  Criteria 6-10 and 13 read the outputs of
the shipped experiment configs, which are each run twice.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from stokes_homog.cell_problem import solve_cell_problems
from stokes_homog.cli import load_config, run_config
from stokes_homog.discretization import PeriodicGrid
from stokes_homog.effective_tensor import check_duality, check_effective_ellipticity
from stokes_homog.estimates import liouville_rank_report, strictly_decreasing
from stokes_homog.experiments import effective_for, w1p_problem
from stokes_homog.stokes_solver import rescale_solution, solve_dirichlet, system_residual
from stokes_homog.tensor_core import make_coefficient_field, preset, write_table_csv
from conftest import manufactured_errors

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(scope="module")
def shipped_runs(tmp_path_factory):
    """Run every shipped config twice; returns ``{stem: (dir_a, dir_b, seconds_a)}``."""
    root = tmp_path_factory.mktemp("shipped")
    out = {}
    for path in sorted(CONFIGS.glob("*.json")):
        cfg = load_config(path)
        t0 = time.perf_counter()
        run_config(cfg, root / "a" / path.stem)
        elapsed = time.perf_counter() - t0
        run_config(load_config(path), root / "b" / path.stem)
        out[path.stem] = (root / "a" / path.stem, root / "b" / path.stem, elapsed)
    return out


def _summary(run_dir):
    return json.loads((run_dir / "summary.json").read_text())["summary"]


def test_criterion_01_corrector_correctness(acceptance):
    t0 = time.perf_counter()
    cs = solve_cell_problems(preset("trig"), PeriodicGrid(2, 64), tol=1e-10)
    elapsed = time.perf_counter() - t0
    res = cs.max_residual()
    mean = float(np.abs(cs.mean_defects()).max())
    div = float(cs.divergence_defects().max())
    ok = res <= 1e-10 and mean <= 1e-10 and div <= 1e-10 and elapsed <= 30
    assert acceptance(1, "corrector correctness", ok,
                      f"residual {res:.2e}, mean {mean:.2e}, div {div:.2e}, {elapsed:.2f} s")


def test_criterion_02_trivial_corrector(acceptance):
    rng = np.random.default_rng(0)
    tensors = [np.eye(4) * v for v in (0.3, 1.0, 7.5)]
    g = rng.normal(size=(4, 4))
    tensors.append(2 * np.eye(4) + 0.3 * g)  # nonsymmetric constant
    worst_field, worst_tensor = 0.0, 0.0
    for m in tensors:
        coeff = make_coefficient_field({"family": "constant", "dim": 2, "tensor": m.tolist()})
        eff, cs = effective_for(coeff, 16)
        worst_field = max(worst_field, float(np.abs(cs.chi).max()), float(np.abs(cs.pi).max()))
        worst_tensor = max(worst_tensor, float(np.abs(eff.matrix - m).max()))
    ok = worst_field <= 1e-12 and worst_tensor <= 1e-12
    assert acceptance(2, "trivial corrector", ok,
                      f"max |chi|,|pi| {worst_field:.1e}, max |A_hat - A| {worst_tensor:.1e}")


def test_criterion_03_duality(acceptance):
    defects = []
    for spec in ({"family": "trig_tensor", "dim": 2, "seed": 3},
                 {"family": "trig", "dim": 2, "skew": 0.3}):
        coeff = make_coefficient_field(spec)
        defects.append(check_duality(coeff, PeriodicGrid(2, 32))[0])
    assert acceptance(3, "duality", max(defects) <= 1e-8,
                      "max defects " + ", ".join(f"{d:.2e}" for d in defects))


def test_criterion_04_effective_ellipticity(acceptance, tmp_path):
    table = tmp_path / "trig.csv"
    write_table_csv(table, preset("trig"), 32)
    specs = [
        {"family": "constant", "dim": 2, "value": 2.0},
        {"family": "trig", "dim": 2},
        {"family": "trig", "dim": 2, "skew": 0.3},
        {"family": "checkerboard", "dim": 2},
        {"family": "trig_tensor", "dim": 2, "seed": 0},
        {"family": "table", "dim": 2, "path": str(table)},
    ]
    details, ok = [], True
    for spec in specs:
        coeff = make_coefficient_field(spec)
        eff, _ = effective_for(coeff, 32)
        passed, lo, _ = check_effective_ellipticity(eff, coeff.mu)
        ok &= passed
        details.append(f"{spec['family']} {lo:.4f}>={coeff.mu:.4f}")
    assert acceptance(4, "effective ellipticity", ok, "; ".join(details))


def test_criterion_05_manufactured_convergence(acceptance):
    e32, _ = manufactured_errors(32, amplitude=0.0)
    e64, _ = manufactured_errors(64, amplitude=0.0)
    ratio = e32 / e64
    assert acceptance(5, "manufactured convergence", 3.3 <= ratio <= 4.7,
                      f"L2 errors {e32:.3e}, {e64:.3e}, ratio {ratio:.3f}")


@pytest.mark.slow
def test_criterion_06_homogenization_trend(acceptance, shipped_runs):
    run_dir, _, elapsed = shipped_runs["two_scale"]
    errors = _summary(run_dir)["errors"]
    assert [e["eps"] for e in errors] == [1 / 4, 1 / 8, 1 / 16, 1 / 32]
    l2_ok = strictly_decreasing({e["eps"]: e["l2"] for e in errors})
    bad = [k for k in range(10)
           if not strictly_decreasing({e["eps"]: e["flux_defects"][k] for e in errors})]
    ok = l2_ok and not bad and elapsed <= 300
    l2_text = ", ".join(f"{e['l2']:.2e}" for e in errors)
    detail = (f"L2 {l2_text}; "
              f"non-monotone flux members {bad or 'none'}; {elapsed:.0f} s")
    assert acceptance(6, "homogenization trend", ok, detail)


@pytest.mark.slow
@pytest.mark.parametrize("number,key,title,band", [
    (7, "interior_lipschitz", "uniform interior estimate", 0.25),
    (8, "pressure_oscillation", "pressure estimate", 0.25),
    (9, "boundary_holder", "boundary Holder decay", 0.25),
    (10, "w1p_q4", "W^{1,p} uniformity", 0.20),
])
def test_criteria_07_to_10_uniform_bands(acceptance, shipped_runs, number, key, title, band):
    rep = _summary(shipped_runs["sweep"][0])[key]
    var = rep["band_variation"]
    by_eps = ", ".join(f"{v:.4f}" for v in rep["max_ratio_by_eps"].values())
    assert acceptance(number, title, var <= band,
                      f"max ratios {by_eps}; variation {var:.4f} (limit {band:.2f})")


def test_criterion_11_liouville(acceptance):
    coeff = preset("checkerboard")
    cs = solve_cell_problems(coeff, PeriodicGrid(2, 32))
    rep = liouville_rank_report(coeff, cs)
    bound = 10 * max(cs.max_residual(), np.finfo(float).eps)
    mom = max(m["momentum_residual"] for m in rep["members"])
    div = max(m["divergence_defect"] for m in rep["members"])
    ok = rep["rank"] == 7 and mom <= bound and div <= 1e-9
    assert acceptance(11, "Liouville", ok,
                      f"rank {rep['rank']}, momentum {mom:.2e} (bound {bound:.2e}), div {div:.2e}")


def test_criterion_12_rescaling(acceptance):
    tol = 1e-10
    prob = w1p_problem(preset("trig"), 1 / 4, 128)
    sol = solve_dirichlet(prob, tol, energy=False)
    out = rescale_solution(prob, sol, 2)
    res = system_residual(out.problem, out.v, out.pi)
    assert acceptance(12, "rescaling covariance", res <= 10 * tol,
                      f"residual {res:.2e} at eps {out.problem.eps:g} on (0, {out.problem.grid.length:g})^2")


@pytest.mark.slow
def test_criterion_13_determinism(acceptance, shipped_runs):
    mismatched, count = [], 0
    for stem, (a, b, _) in shipped_runs.items():
        for csv_a in sorted(a.rglob("*.csv")):
            count += 1
            if csv_a.read_bytes() != (b / csv_a.relative_to(a)).read_bytes():
                mismatched.append(f"{stem}/{csv_a.name}")
    ok = count > 0 and not mismatched
    assert acceptance(13, "determinism", ok,
                      f"{count} CSVs over {len(shipped_runs)} configs; mismatches {mismatched or 'none'}")
