import numpy as np
import pytest
import sympy as sy

from stokes_homog.discretization import (
    BoxGrid,
    GridMismatchError,
    PeriodicGrid,
    assemble_operator,
    bilinear_form,
    cell_gradient,
    cell_velocity,
    divergence,
    gradient,
    gradient_norm_sq,
    grid_from_descriptor,
    inner_pressure,
    inner_velocity,
    load_grid_function,
    save_grid_function,
    window_average,
)
from stokes_homog.tensor_core import check_ellipticity, make_coefficient_field, preset


def random_box_velocity(grid, rng):
    u = rng.normal(size=grid.n_velocity)
    u[~grid.interior_velocity] = 0.0
    return u


@pytest.mark.parametrize("grid", [PeriodicGrid(2, 8), PeriodicGrid(3, 4), BoxGrid(2, 8), BoxGrid(3, 4)])
def test_summation_by_parts(grid):
    rng = np.random.default_rng(0)
    u = random_box_velocity(grid, rng) if not grid.periodic else rng.normal(size=grid.n_velocity)
    p = rng.normal(size=grid.n_cells)
    lhs = inner_pressure(grid, divergence(grid, u), p)
    rhs = -inner_velocity(grid, u, gradient(grid, p))
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("grid", [PeriodicGrid(2, 8), BoxGrid(2, 8), BoxGrid(3, 5)])
def test_divergence_has_zero_mean(grid):
    rng = np.random.default_rng(1)
    u = random_box_velocity(grid, rng) if not grid.periodic else rng.normal(size=grid.n_velocity)
    assert abs(divergence(grid, u).sum()) < 1e-10


def test_identity_operator_is_five_point_laplacian():
    n = 8
    grid = PeriodicGrid(2, n)
    h = grid.h
    rng = np.random.default_rng(2)
    u = rng.normal(size=grid.n_velocity)
    ku = assemble_operator(grid, np.eye(4)) @ u
    for b in range(2):
        c = grid.component(u, b)
        expected = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                nb = c[(i + 1) % n, j] + c[(i - 1) % n, j] + c[i, (j + 1) % n] + c[i, (j - 1) % n]
                expected[i, j] = -(nb - 4 * c[i, j]) / h ** 2
        got = ku[grid.face_offsets[b]:grid.face_offsets[b + 1]].reshape(n, n) / h ** 2
        np.testing.assert_allclose(got, expected, atol=1e-10)


@pytest.mark.parametrize("name", ["trig", "trig_skew", "checkerboard"])
def test_coercivity_on_random_fields(name):
    coeff = preset(name)
    lo = check_ellipticity(coeff, 64).mu_lower
    grid = BoxGrid(2, 16)
    rng = np.random.default_rng(3)
    K = assemble_operator(grid, coeff)
    for _ in range(100):
        u = random_box_velocity(grid, rng)
        assert u @ K @ u >= lo * gradient_norm_sq(grid, u) * (1 - 1e-12)


def test_identity_form_equals_gradient_norm():
    grid = BoxGrid(2, 8)
    u = random_box_velocity(grid, np.random.default_rng(4))
    assert bilinear_form(grid, np.eye(4), u, u) == pytest.approx(gradient_norm_sq(grid, u), rel=1e-13)


def test_adjoint_form_is_transpose():
    coeff = make_coefficient_field({"family": "trig_tensor", "dim": 2, "seed": 7})
    grid = PeriodicGrid(2, 8)
    rng = np.random.default_rng(5)
    u, v = rng.normal(size=(2, grid.n_velocity))
    a = bilinear_form(grid, coeff, u, v)
    b = bilinear_form(grid, coeff.adjoint(), v, u)
    assert a == pytest.approx(b, rel=1e-12)
    K, Ks = assemble_operator(grid, coeff), assemble_operator(grid, coeff.adjoint())
    assert abs(K - Ks.T).max() < 1e-12
    assert v @ K @ u == pytest.approx(a, rel=1e-12)


def _manufactured_operator_error(n):
    """Max error of the weak operator against -div(a grad u) from symbolic differentiation."""
    y1, y2 = sy.symbols("y1 y2")
    a = 1 + sy.Rational(1, 2) * sy.sin(2 * sy.pi * y1)
    u = [sy.sin(2 * sy.pi * y2) * sy.cos(2 * sy.pi * y1), sy.cos(4 * sy.pi * y1) + sy.sin(2 * sy.pi * y2)]
    ys = (y1, y2)
    lu = [-sum(sy.diff(a * sy.diff(ub, yj), yj) for yj in ys) for ub in u]
    fu = [sy.lambdify(ys, ub, "numpy") for ub in u]
    fl = [sy.lambdify(ys, lb, "numpy") for lb in lu]
    grid = PeriodicGrid(2, n)
    vec = grid.sample_velocity(lambda x: np.stack([f(x[:, 0], x[:, 1]) + 0 * x[:, 0] for f in fu], -1))
    ku = assemble_operator(grid, preset("trig")) @ vec / grid.h ** 2
    exact = grid.sample_velocity(lambda x: np.stack([f(x[:, 0], x[:, 1]) + 0 * x[:, 0] for f in fl], -1))
    return np.abs(ku - exact).max()


def test_operator_truncation_is_second_order():
    e1, e2 = _manufactured_operator_error(16), _manufactured_operator_error(32)
    assert 3.5 < e1 / e2 < 4.5


def test_linear_fields_are_differentiated_exactly():
    M = np.array([[0.3, -1.2], [0.7, 2.0]])
    grid = BoxGrid(2, 6)
    u = grid.sample_velocity(lambda x: x @ M.T)
    g = cell_gradient(grid, u)
    np.testing.assert_allclose(g, np.broadcast_to(M, g.shape), atol=1e-12)
    np.testing.assert_allclose(divergence(grid, u), np.trace(M), atol=1e-12)
    v = cell_velocity(grid, u)
    np.testing.assert_allclose(v, grid.cell_points() @ M.T, atol=1e-12)


def test_window_average_loop_oracle():
    grid = BoxGrid(2, 16)
    vals = np.random.default_rng(6).normal(size=grid.n_cells)
    center, r = (0.3, 0.55), 0.21
    total, count = 0.0, 0
    for i in range(16):
        for j in range(16):
            x = ((i + 0.5) / 16, (j + 0.5) / 16)
            if (x[0] - center[0]) ** 2 + (x[1] - center[1]) ** 2 < r ** 2:
                total += vals[i * 16 + j]
                count += 1
    assert window_average(grid, vals, center, r) == pytest.approx(total / count, rel=1e-13)
    with pytest.raises(ValueError):
        window_average(grid, vals, (0.5, 0.5), 1e-4)


def test_window_average_symmetry_cases():
    grid = BoxGrid(2, 32)
    center = (0.5, 0.5)
    assert window_average(grid, np.full(grid.n_cells, 2.5), center, 0.2) == pytest.approx(2.5)
    pts = grid.cell_points()
    linear = 3.0 * pts[:, 0] - 1.5 * pts[:, 1] + 0.25
    # the cell set is symmetric about the centre, so the mean of a linear field is its centre value
    assert window_average(grid, linear, center, 0.2) == pytest.approx(3.0 * 0.5 - 1.5 * 0.5 + 0.25, abs=1e-13)


def test_grid_function_roundtrip(tmp_path):
    grid = BoxGrid(3, 4, 2.0)
    u = np.random.default_rng(8).normal(size=grid.n_velocity)
    save_grid_function(tmp_path / "u", grid, u, "velocity", {"note": "x"})
    header, back = load_grid_function(tmp_path / "u")
    np.testing.assert_array_equal(back, u)
    assert header["kind"] == "velocity" and header["note"] == "x"
    g2 = grid_from_descriptor(header["grid"])
    assert (type(g2), g2.dim, g2.n, g2.length) == (BoxGrid, 3, 4, 2.0)
    (tmp_path / "u.bin").write_bytes(b"\0" * 8)
    with pytest.raises(GridMismatchError):
        load_grid_function(tmp_path / "u")


def test_shape_and_scale_mismatch():
    grid = BoxGrid(2, 16)
    with pytest.raises(GridMismatchError):
        divergence(grid, np.zeros(5))
    with pytest.raises(GridMismatchError):
        gradient(grid, np.zeros(grid.n_cells + 1))
    with pytest.raises(GridMismatchError):
        assemble_operator(grid, preset("trig").at_scale(1 / 3))
    assemble_operator(grid, preset("trig").at_scale(1 / 8))


def test_grid_validation():
    with pytest.raises(ValueError):
        PeriodicGrid(4, 8)
    with pytest.raises(ValueError):
        BoxGrid(2, 2)


def test_layout_sizes():
    g = BoxGrid(2, 4)
    # faces 5x4 per component, traces (n+1) per wall and component
    assert g.n_faces == 40
    assert g.n_velocity == 40 + 4 * 5
    assert PeriodicGrid(3, 4).n_velocity == 3 * 64
