import math

import numpy as np
import pytest
import sympy as sy

from stokes_homog.discretization import BoxGrid, inner_pressure, inner_velocity
from stokes_homog.stokes_solver import StokesProblem, solve_dirichlet
from stokes_homog.tensor_core import make_coefficient_field


def _manufactured_data(amplitude):
    """Closed-form Stokes pair on the unit square for ``a(x) = 1 + amplitude * sin(2 pi x1)``.

    The velocity is the curl of ``sin^2(pi x) sin^2(pi y)`` (zero on the walls,
    divergence free) and the pressure has zero mean.  The body force is obtained
    by symbolic differentiation.
    """
    x, y = sy.symbols("x y")
    psi = sy.sin(sy.pi * x) ** 2 * sy.sin(sy.pi * y) ** 2
    u = [sy.diff(psi, y), -sy.diff(psi, x)]
    p = sy.cos(sy.pi * x) * sy.cos(sy.pi * y)
    a = 1 + sy.nsimplify(amplitude) * sy.sin(2 * sy.pi * x)
    F = [-sum(sy.diff(a * sy.diff(ub, v), v) for v in (x, y)) + sy.diff(p, c)
         for ub, c in zip(u, (x, y))]
    assert sy.simplify(sy.diff(u[0], x) + sy.diff(u[1], y)) == 0
    lam = lambda e: sy.lambdify((x, y), e, "numpy")
    return [lam(e) for e in u], lam(p), [lam(e) for e in F]


_DATA = {amp: _manufactured_data(amp) for amp in (0.0, 0.5)}


def _vec(funcs):
    return lambda pts: np.stack([f(pts[:, 0], pts[:, 1]) + 0 * pts[:, 0] for f in funcs], axis=-1)


def manufactured_errors(n, amplitude=0.5):
    """Relative discrete L2 errors ``(velocity, pressure)`` of the box solve at resolution ``n``."""
    _U, _P, _F = _DATA[amplitude]
    if amplitude == 0.0:
        coeff = make_coefficient_field({"family": "constant", "dim": 2})
    else:
        coeff = make_coefficient_field({"family": "trig", "dim": 2, "amplitude": amplitude}).at_scale(1.0)
    grid = BoxGrid(2, n)
    sol = solve_dirichlet(StokesProblem(grid, coeff, F=_vec(_F)), energy=False)
    u_ex = grid.sample_velocity(_vec(_U))
    p_ex = grid.sample_pressure(lambda pts: _P(pts[:, 0], pts[:, 1]))
    p_ex = p_ex - p_ex.mean()
    eu = sol.u - u_ex
    ep = sol.p - p_ex
    return (math.sqrt(inner_velocity(grid, eu, eu) / inner_velocity(grid, u_ex, u_ex)),
            math.sqrt(inner_pressure(grid, ep, ep) / inner_pressure(grid, p_ex, p_ex)))


@pytest.fixture(scope="session")
def manufactured():
    return manufactured_errors


ACCEPTANCE_LINES = []


def report_acceptance(number, title, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2} ({title}): {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return passed


@pytest.fixture(scope="session")
def acceptance():
    return report_acceptance


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
