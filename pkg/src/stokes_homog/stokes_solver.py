"""Dirichlet Stokes problems on boxes with oscillating or homogenized coefficients.

The discrete problem reads, for interior face unknowns ``u_I`` with the wall
entries ``u_B`` fixed by the boundary data,

    a(u, v) - (p, div v) = <F, v> - (f, grad v)     for interior v,
    div u = g,   mean(p) = 0,

so the weak ``div(f)`` source is paired with the discrete gradient on the
native lattice of each gradient component.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse.linalg as spla

from . import discretization as disc
from .cell_problem import cell_scale
from .discretization import BoxGrid
from .saddle import SaddleSystem, SolverError
from .tensor_core import ScaledField, identity_tensor

log = logging.getLogger(__name__)

DIRECT_MAX_N = 64


class CompatibilityError(ValueError):
    """Boundary flux and divergence data do not balance."""


@dataclass(frozen=True, eq=False)
class StokesProblem:
    """Data of ``-div(A grad u) + grad p = F + div(f)``, ``div u = g``, ``u = h`` on the walls.

    ``F(x) -> (n, d)``, ``f(x) -> (n, d*d)`` in flat ``alpha*d + i`` order,
    ``g(x) -> (n,)`` and ``h(x) -> (n, d)``; ``None`` means zero.
    """

    grid: BoxGrid
    coefficients: object
    F: Callable | None = None
    f: Callable | None = None
    g: Callable | None = None
    h: Callable | None = None
    eps: float = 0.0

    @property
    def dim(self) -> int:
        return self.grid.dim

    def boundary_values(self) -> np.ndarray:
        """Full velocity vector holding the wall data (zero at interior faces)."""
        grid = self.grid
        ub = np.zeros(grid.n_velocity)
        if self.h is not None:
            ub = grid.sample_velocity(self.h)
            ub[grid.interior_velocity] = 0.0
        return ub

    def divergence_data(self) -> np.ndarray:
        if self.g is None:
            return np.zeros(self.grid.n_cells)
        return self.grid.sample_pressure(self.g)

    def load(self) -> np.ndarray:
        """``<F, v> - (f, grad v)`` as a vector over all velocity entries."""
        grid = self.grid
        out = np.zeros(grid.n_velocity)
        if self.F is not None:
            out += grid.velocity_weights * grid.sample_velocity(self.F)
        if self.f is not None:
            for (b, j), gop in grid.native_gradients.items():
                lat = grid.native_lattice(b, j)
                vals = np.asarray(self.f(grid.lattice_points(lat)))[:, b * grid.dim + j]
                out -= gop.T @ (grid.lattice_weights(lat) * vals)
        return out


@dataclass
class StokesSolution:
    u: np.ndarray
    p: np.ndarray
    residual: float
    divergence_defect: float
    iterations: int
    method: str
    energy_ratio: float = float("nan")
    timings: dict = field(default_factory=dict)

    def save(self, directory, grid) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        disc.save_grid_function(directory / "u", grid, self.u, "velocity")
        disc.save_grid_function(directory / "p", grid, self.p, "pressure")
        manifest = {"residual": self.residual, "divergence_defect": self.divergence_defect,
                    "iterations": self.iterations, "method": self.method,
                    "energy_ratio": self.energy_ratio}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def check_compatibility(problem: StokesProblem) -> float:
    """Discrete ``int g - int h.n`` (cell quadrature for ``g``, wall faces for ``h``)."""
    grid = problem.grid
    vol = grid.h ** grid.dim
    total = vol * float(problem.divergence_data().sum())
    ub = problem.boundary_values()
    flux = 0.0
    for b in range(grid.dim):
        comp = grid.component(ub, b)
        lo = np.take(comp, 0, axis=b)
        hi = np.take(comp, grid.n, axis=b)
        flux += float(hi.sum() - lo.sum())
    return total - grid.h ** (grid.dim - 1) * flux


def _coefficient_label(coeff) -> str:
    if isinstance(coeff, ScaledField):
        return f"{coeff.base.family}@eps={coeff.eps:g}"
    if hasattr(coeff, "matrix"):
        return "effective"
    return getattr(coeff, "family", "array")


class _Assembled:
    """Interior saddle system for one grid and coefficient."""

    def __init__(self, grid, coeff, tol, method):
        self.grid = grid
        interior = grid.interior_velocity
        self.I = np.flatnonzero(interior)
        K = disc.assemble_operator(grid, coeff)
        B = -(grid.h ** grid.dim) * grid.divergence_matrix
        self.K_full, self.B_full = K, B
        self.K_II = K[self.I][:, self.I]
        self.B_I = B[:, self.I]
        c_p = np.full(grid.n_cells, grid.h ** grid.dim)
        self.system = SaddleSystem(self.K_II, self.B_I, c_p, method=method,
                                   precond_weights=cell_scale(grid, coeff), tol=tol)


def _choose_method(grid, method):
    if method != "auto":
        return method
    return "schur"


def _h1_norm(grid, u):
    return np.sqrt(disc.inner_velocity(grid, u, u) + disc.gradient_norm_sq(grid, u))


def _energy_ratio(problem, u, p, load, ub, g):
    """``(||u||_{H1} + ||p||_{L2}) / (||F||_{H^-1} + ||h|| + ||g||_{L2})``.

    ``H^{-1}`` is measured with the discrete Dirichlet Laplacian and the
    boundary data through the energy of its discrete harmonic extension.
    """
    grid = problem.grid
    lap = disc.assemble_operator(grid, identity_tensor(grid.dim))
    I = np.flatnonzero(grid.interior_velocity)
    L_II = lap[I][:, I].tocsc()
    lu = spla.splu(L_II)
    li = load[I]
    f_norm = float(np.sqrt(max(np.dot(li, lu.solve(li)), 0.0)))
    h_norm = 0.0
    if np.any(ub):
        ext = ub.copy()
        ext[I] = lu.solve(-(lap[I] @ ub))
        h_norm = float(_h1_norm(grid, ext))
    g_norm = float(np.sqrt(disc.inner_pressure(grid, g, g)))
    lhs = float(_h1_norm(grid, u) + np.sqrt(disc.inner_pressure(grid, p, p)))
    rhs = f_norm + h_norm + g_norm
    return lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else float("inf"))


def solve_dirichlet(problem: StokesProblem, tol: float = 1e-10, method: str = "auto",
                    compat_tol: float = 1e-10, energy: bool = True,
                    assembled: _Assembled | None = None) -> StokesSolution:
    """Solve the box problem; pressure is returned with zero mean."""
    grid = problem.grid
    if grid.periodic:
        raise disc.GridMismatchError("Dirichlet problems need a BoxGrid")
    defect = check_compatibility(problem)
    if abs(defect) > compat_tol:
        raise CompatibilityError(f"compatibility defect {defect:.3e} exceeds {compat_tol:.1e}")
    t0 = time.perf_counter()
    chosen = _choose_method(grid, method)
    if assembled is None:
        assembled = _Assembled(grid, problem.coefficients, tol, chosen)
    t1 = time.perf_counter()
    ub = problem.boundary_values()
    g = problem.divergence_data()
    load = problem.load()
    I = assembled.I
    f_I = load[I] - (assembled.K_full @ ub)[I]
    c = -(grid.h ** grid.dim) * g - assembled.B_full @ ub
    used = assembled.system.method
    try:
        r = assembled.system.solve(f_I, c)
    except SolverError:
        if method != "auto" or grid.n > DIRECT_MAX_N:
            raise
        log.warning("Schur iteration failed on N=%d; using the direct solver", grid.n)
        assembled = _Assembled(grid, problem.coefficients, tol, "direct")
        used = "direct"
        r = assembled.system.solve(f_I, c)
    if not r.residual <= tol:
        raise SolverError(f"Stokes residual {r.residual:.3e} exceeds tolerance {tol:.1e}")
    t2 = time.perf_counter()
    u = ub.copy()
    u[I] = r.u
    p = r.p - r.p.mean()
    dv = disc.divergence(grid, u) - g
    div_defect = float(np.sqrt(disc.inner_pressure(grid, dv, dv)))
    sol = StokesSolution(u, p, r.residual, div_defect, r.iterations, used,
                         timings={"assemble": t1 - t0, "solve": t2 - t1})
    if energy:
        sol.energy_ratio = _energy_ratio(problem, u, p, load, ub, g)
    log.info("solved %s on N=%d: residual %.2e, %d its", _coefficient_label(problem.coefficients),
             grid.n, r.residual, r.iterations)
    return sol


def solve_homogenized(eff, problem: StokesProblem, tol: float = 1e-10, method: str = "auto",
                      energy: bool = True) -> StokesSolution:
    """Solve with the constant tensor ``eff`` in place of the oscillating coefficients."""
    return solve_dirichlet(replace(problem, coefficients=eff, eps=0.0), tol, method, energy=energy)


def system_residual(problem: StokesProblem, u, p) -> float:
    """Relative residual of the discrete equations of ``problem`` at ``(u, p)``.

    Momentum is checked at interior faces, the divergence at every cell and
    the wall entries of ``u`` against the boundary data.  The pressure enters
    only through its gradient, so its mean is irrelevant.
    """
    grid = problem.grid
    K = disc.assemble_operator(grid, problem.coefficients)
    B = -(grid.h ** grid.dim) * grid.divergence_matrix
    I = grid.interior_velocity
    load = problem.load()
    g = problem.divergence_data()
    ub = problem.boundary_values()
    ru = (K @ u + B.T @ p - load)[I]
    rp = B @ u + grid.h ** grid.dim * g
    rb = (u - ub)[~I]
    scale = np.sqrt(np.dot(load[I] - (K @ ub)[I], load[I] - (K @ ub)[I])
                    + np.dot(grid.h ** grid.dim * g + B @ ub, grid.h ** grid.dim * g + B @ ub))
    num = np.sqrt(np.dot(ru, ru) + np.dot(rp, rp) + np.dot(rb, rb))
    return float(num / scale) if scale > 0 else float(num)


# --- dilations ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _Dilated:
    """``x -> A(r x)`` for coefficients that are not a ScaledField."""

    base: object
    r: float

    @property
    def dim(self) -> int:
        return self.base.dim

    def evaluate(self, x):
        return self.base.evaluate(self.r * np.asarray(x, dtype=float))


@dataclass
class RescaledTuple:
    problem: StokesProblem
    v: np.ndarray
    pi: np.ndarray


def _dilate_coefficients(coeff, r):
    if isinstance(coeff, ScaledField):
        return ScaledField(coeff.base, coeff.eps / r)
    if isinstance(coeff, np.ndarray) or hasattr(coeff, "matrix") or getattr(coeff, "is_constant", False):
        return coeff
    return _Dilated(coeff, r)


def _compose(func, r, power):
    if func is None:
        return None
    return lambda x: (r ** power) * np.asarray(func(r * np.asarray(x)))


def rescale_solution(problem: StokesProblem, solution: StokesSolution, r: int) -> RescaledTuple:
    """``v(x) = u(r x)``, ``pi(x) = r p(r x)``, ``G(x) = r^2 F(r x)`` on ``(0, L/r)^d``.

    The flux source and divergence data scale like the pressure
    (``r f(r x)`` and ``r g(r x)``) and the boundary data is composed with
    the dilation.  The grid keeps its resolution, so the samples nest exactly.
    """
    if r < 1 or int(r) != r or (int(r) & (int(r) - 1)):
        raise ValueError("dilation factor must be a power of two")
    grid = problem.grid
    new_grid = BoxGrid(grid.dim, grid.n, grid.length / r)
    new_problem = StokesProblem(
        new_grid,
        _dilate_coefficients(problem.coefficients, r),
        F=_compose(problem.F, r, 2),
        f=_compose(problem.f, r, 1),
        g=_compose(problem.g, r, 1),
        h=_compose(problem.h, r, 0),
        eps=problem.eps / r,
    )
    return RescaledTuple(new_problem, solution.u.copy(), r * solution.p)
