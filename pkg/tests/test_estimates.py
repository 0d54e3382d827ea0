import math

import numpy as np
import pytest

from stokes_homog.cell_problem import solve_cell_problems
from stokes_homog.discretization import BoxGrid, PeriodicGrid
from stokes_homog.effective_tensor import EffectiveTensor
from stokes_homog.estimates import (
    EstimateConfig,
    EstimateReport,
    Window,
    boundary_data_norm,
    boundary_holder_decay,
    caccioppoli_ratio,
    discrete_holder_seminorm,
    flux_test_panel,
    grad_magnitude,
    interior_lipschitz_ratio,
    liouville_rank_report,
    liouville_verify,
    pressure_oscillation_ratio,
    reports_to_csv,
    strictly_decreasing,
    sublinear_liouville_check,
    two_scale_error,
    w1p_norm_sweep,
    w1p_sides,
)
from stokes_homog.experiments import (
    BOUNDARY_WINDOW,
    INTERIOR_WINDOW,
    boundary_problem,
    boundary_sweep,
    interior_problem,
    interior_sweep,
    lid,
    two_scale_sweep,
    w1p_problem,
)
from stokes_homog.stokes_solver import StokesProblem, solve_dirichlet, solve_homogenized
from stokes_homog.tensor_core import preset

CFG = EstimateConfig(eps_list=(1 / 8, 1 / 16))


def test_zero_data_gives_zero_ratios():
    prob = StokesProblem(BoxGrid(2, 32), preset("trig").at_scale(1 / 8), eps=1 / 8)
    sol = solve_dirichlet(prob, energy=False)
    for rep in (interior_lipschitz_ratio(sol, prob, INTERIOR_WINDOW, CFG),
                pressure_oscillation_ratio(sol, prob, INTERIOR_WINDOW, CFG)):
        assert rep.rows and all(row[4] == 0.0 for row in rep.rows)
        assert rep.band_variation() == 0.0


def test_constant_coefficient_ratios_are_flat_in_eps():
    reports = interior_sweep(preset("identity"), CFG, n=64)
    rep = reports["interior_lipschitz"]
    assert rep.uniform(0.05)
    # the solution is the same for every eps; only the list of radii changes
    by_eps = rep.max_ratio_by_eps()
    assert set(by_eps) == {1 / 8, 1 / 16}


def test_constant_coefficient_boundary_ratios_are_flat_in_eps():
    reports = boundary_sweep(preset("identity"), EstimateConfig(eps_list=(1 / 8, 1 / 16, 1 / 32)), n=64)
    assert reports["boundary_holder"].band_variation() < 1e-12


def test_caccioppoli_identity_below_classical_constant():
    # a cutoff with |grad eta| <= 1/r gives the constant 4 for harmonic-type fields
    prob = StokesProblem(BoxGrid(2, 128), preset("identity"), h=lid())
    sol = solve_dirichlet(prob, energy=False)
    window = Window((0.5, 0.4), 0.15, "interior", (0.15, 0.1, 0.05))
    rep = caccioppoli_ratio(sol, prob, window, "interior", eps=0.0)
    assert len(rep.rows) == 3
    assert max(r[4] for r in rep.rows) < 4.0


def test_q2_reduces_to_energy_norms():
    prob = w1p_problem(preset("trig"), 1 / 4, 32)
    sol = solve_dirichlet(prob, energy=False)
    lhs, rhs = w1p_sides(sol, prob, 2.0)
    grid = prob.grid
    vol = grid.h ** 2
    p = sol.p - sol.p.mean()
    expected = math.sqrt(vol * np.sum(grad_magnitude(grid, sol.u) ** 2)) + math.sqrt(vol * np.sum(p ** 2))
    assert lhs == pytest.approx(expected, rel=1e-12)
    assert rhs > 0


def test_pressure_pairing_and_l2_trend():
    errors, _ = two_scale_sweep(preset("trig"), (1 / 4, 1 / 8, 1 / 16), n=128)
    assert strictly_decreasing({e.eps: e.pressure_pairing for e in errors})
    assert strictly_decreasing({e.eps: e.l2 for e in errors})


def test_window_validation():
    grid = BoxGrid(2, 32)
    with pytest.raises(ValueError):
        Window((0.2, 0.5), 0.3).check(grid)
    with pytest.raises(ValueError):
        Window((0.1, 0.0), 0.3, "boundary").check(grid)
    with pytest.raises(ValueError):
        Window((0.0, 0.0), 0.1, "boundary").check(grid)
    with pytest.raises(ValueError):
        Window((0.5, 0.5), 0.3, "annulus").check(grid)
    INTERIOR_WINDOW.check(grid)
    BOUNDARY_WINDOW.check(grid)


def test_radii_respect_eps():
    w = Window((0.5, 0.5), 0.4)
    radii = w.radii_for(1 / 16)
    assert radii[0] == pytest.approx(0.2) and min(radii) >= 1 / 16
    assert all(b < a for a, b in zip(radii, radii[1:]))
    with pytest.raises(ValueError):
        Window((0.5, 0.5), 0.4, radii=(0.01,)).radii_for(1 / 16)


def test_eps_must_be_below_window_radius():
    prob = interior_problem(preset("trig"), 1 / 2, 16)
    sol = solve_dirichlet(prob, energy=False)
    with pytest.raises(ValueError):
        interior_lipschitz_ratio(sol, prob, INTERIOR_WINDOW, CFG)


def test_boundary_estimates_reject_data_on_window_face():
    prob = boundary_problem(preset("trig"), 1 / 8, 32)
    sol = solve_dirichlet(prob, energy=False)
    top = Window((0.5, 1.0), 0.3, "boundary")
    with pytest.raises(ValueError):
        boundary_holder_decay(sol, prob, top, 0.5)
    with pytest.raises(ValueError):
        caccioppoli_ratio(sol, prob, top, "boundary")
    rep = boundary_holder_decay(sol, prob, BOUNDARY_WINDOW, 0.5)
    assert rep.rows and all(np.isfinite(r[4]) for r in rep.rows)


def test_discrete_holder_loop_oracle():
    rng = np.random.default_rng(0)
    pts = rng.random((30, 2))
    vals = rng.normal(size=30)
    best = 0.0
    for i in range(30):
        for j in range(30):
            if i != j:
                best = max(best, abs(vals[i] - vals[j]) / np.linalg.norm(pts[i] - pts[j]) ** 0.5)
    assert discrete_holder_seminorm(pts, vals, 0.5) == pytest.approx(best, rel=1e-13)
    assert discrete_holder_seminorm(pts, np.full(30, 2.0), 0.5) == 0.0
    sampled = discrete_holder_seminorm(pts, vals, 0.5, all_pairs=False, n_pairs=5000)
    assert sampled <= best * (1 + 1e-13)


def test_report_band_and_slope():
    rep = EstimateReport("x")
    for eps, m in [(1 / 8, 2.0), (1 / 16, 2.2), (1 / 32, 1.9)]:
        rep.add(eps, 0.1, m, 1.0)
        rep.add(eps, 0.2, m / 2, 1.0)
    assert rep.band_variation() == pytest.approx(0.1)
    assert rep.uniform(0.25) and not rep.uniform(0.05)
    slope = EstimateReport("y")
    for eps in (1 / 8, 1 / 16, 1 / 32):
        slope.add(eps, 0.0, eps ** 0.5, 1.0)
    assert slope.trend_slope() == pytest.approx(0.5)


def test_config_validation():
    assert EstimateConfig().rho == pytest.approx(0.5)
    assert EstimateConfig(q=2.0).validate()
    assert EstimateConfig(w1p_exponents=(1.0,)).validate()
    assert not EstimateConfig(q=6.0).validate()


def test_boundary_data_norm_closed_form():
    prob = StokesProblem(BoxGrid(2, 32), preset("identity"), h=lid())
    # ||sin^2(pi x)||_2 + ||pi sin(2 pi x)||_2 on the top wall
    expected = math.sqrt(3 / 8) + math.pi / math.sqrt(2)
    assert boundary_data_norm(prob, 2.0) == pytest.approx(expected, rel=1e-3)
    assert boundary_data_norm(StokesProblem(BoxGrid(2, 8), preset("identity")), 2.0) == 0.0


def test_w1p_sweep_rejects_unsampled_exponent():
    with pytest.raises(ValueError):
        w1p_norm_sweep([], q_list=(5.0,))


def test_two_scale_identity_is_exact():
    coeff = preset("identity")
    prob = interior_problem(coeff, 1 / 4, 32)
    sol = solve_dirichlet(prob, energy=False)
    hom = solve_homogenized(EffectiveTensor(np.eye(4)), prob, energy=False)
    cs = solve_cell_problems(coeff, PeriodicGrid(2, 8))
    err = two_scale_error(prob, sol, hom, EffectiveTensor(np.eye(4)), cs, 1 / 4)
    assert err.l2 < 1e-13 and err.corrected_h1 < 1e-12
    assert max(err.flux_defects) < 1e-13 and err.pressure_pairing < 1e-13
    assert not err.interpolated


def test_flux_panel_members_are_distinct():
    panel = flux_test_panel(2)
    assert len(panel) == 10
    x = np.random.default_rng(0).random((50, 2))
    vals = np.stack([phi(x).ravel() for phi in panel])
    assert np.linalg.matrix_rank(vals) == 10


def test_strictly_decreasing():
    assert strictly_decreasing({1 / 4: 3.0, 1 / 8: 2.0, 1 / 16: 1.0})
    assert not strictly_decreasing({1 / 4: 3.0, 1 / 8: 3.0})


@pytest.fixture(scope="module")
def checker16():
    coeff = preset("checkerboard")
    return coeff, solve_cell_problems(coeff, PeriodicGrid(2, 16), tol=1e-11)


def test_liouville_rank(checker16):
    coeff, cs = checker16
    rep = liouville_rank_report(coeff, cs)
    assert rep["rank"] == rep["expected"] == 7
    for m in rep["members"]:
        assert m["momentum_residual"] < 1e-9
        assert m["divergence_defect"] < 1e-9


def test_liouville_constants_solve_exactly(checker16):
    coeff, cs = checker16
    info = liouville_verify(coeff, cs, np.zeros((2, 2)), [0.3, -1.0], 2.0)
    # no affine load, so the residual is absolute and only rounding remains
    assert info["momentum_residual"] < 1e-13
    assert info["divergence_defect"] < 1e-13


def test_sublinear_members(checker16):
    _, cs = checker16
    rep = sublinear_liouville_check(cs)
    assert rep["sublinear_rank"] == rep["expected"] == 3
    assert rep["max_corrector_mean_gradient"] < 1e-12
    assert [m["sublinear"] for m in rep["members"]] == [False] * 4 + [True] * 3
    # the mean gradient of P + chi is the affine part E
    for k, m in enumerate(rep["members"][:4]):
        np.testing.assert_allclose(m["mean_gradient"], np.eye(4)[k], atol=1e-12)


def test_csv_is_deterministic():
    a = interior_sweep(preset("trig"), CFG, n=64)
    b = interior_sweep(preset("trig"), CFG, n=64)
    assert reports_to_csv(a.values()) == reports_to_csv(b.values())
    header = reports_to_csv(a.values()).splitlines()[0]
    assert header == "estimate,eps,r,lhs,rhs,ratio"
