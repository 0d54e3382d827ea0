"""Standard problems and sweep drivers shared by the runner and the acceptance suite."""

from __future__ import annotations

import logging
import math
import time

import numpy as np

from .cell_problem import solve_cell_problems
from .discretization import BoxGrid, PeriodicGrid
from .effective_tensor import compute_effective
from .estimates import (
    EstimateConfig,
    Window,
    boundary_holder_decay,
    caccioppoli_ratio,
    full_lipschitz_ratio,
    interior_lipschitz_ratio,
    pressure_oscillation_ratio,
    two_scale_error,
    w1p_norm_sweep,
)
from .stokes_solver import StokesProblem, solve_dirichlet, solve_homogenized

log = logging.getLogger(__name__)

INTERIOR_WINDOW = Window((0.5, 0.5), 0.45, "interior")
BOUNDARY_WINDOW = Window((0.5, 0.0), 0.4, "boundary")


def _zeros_like_points(x):
    return np.zeros(len(x))


def smooth_force(x):
    """Body force used by the interior sweeps."""
    f = np.zeros_like(x)
    f[:, 0] = np.sin(math.pi * x[:, 1]) + 0.5
    f[:, 1] = np.cos(math.pi * x[:, 0]) * np.sin(math.pi * x[:, 1])
    return f


def smooth_flux(x):
    """Tensor source ``f`` for the ``div(f)`` form, flat ``alpha*d + i`` order."""
    d = x.shape[1]
    out = np.zeros((len(x), d * d))
    out[:, 0] = np.sin(math.pi * x[:, 0]) * np.cos(math.pi * x[:, 1])
    out[:, 1] = 0.5 * np.cos(2 * math.pi * x[:, 1])
    out[:, d] = np.sin(2 * math.pi * x[:, 0] * x[:, 1])
    out[:, d + 1] = 0.25
    return out


def smooth_divergence(x):
    """Divergence data with zero mean on the unit box."""
    return 0.5 * np.prod(np.cos(math.pi * x), axis=1)


def lid(length: float = 1.0):
    """Tangential velocity ``sin^2(pi x_1 / L)`` on the top wall ``x_d = L``, zero elsewhere."""

    def h(x):
        out = np.zeros_like(x)
        top = np.isclose(x[:, -1], length)
        out[:, 0] = np.where(top, np.sin(math.pi * x[:, 0] / length) ** 2, 0.0)
        return out

    return h


def interior_problem(coeff, eps, n, dim=2):
    grid = BoxGrid(dim, n)
    return StokesProblem(grid, coeff.at_scale(eps) if eps > 0 else coeff, F=smooth_force, eps=eps)


def boundary_problem(coeff, eps, n, dim=2):
    grid = BoxGrid(dim, n)
    return StokesProblem(grid, coeff.at_scale(eps) if eps > 0 else coeff, h=lid(), eps=eps)


def w1p_problem(coeff, eps, n, dim=2):
    grid = BoxGrid(dim, n)
    return StokesProblem(grid, coeff.at_scale(eps) if eps > 0 else coeff, f=smooth_flux,
                         g=smooth_divergence, h=lid(), eps=eps)


def interior_sweep(coeff, config: EstimateConfig, n=256, window=INTERIOR_WINDOW, full=False):
    """Interior Lipschitz, pressure and Caccioppoli reports over ``config.eps_list``."""
    reports = {}
    for eps in config.eps_list:
        problem = interior_problem(coeff, eps, n, config.dim)
        sol = solve_dirichlet(problem, config.tol, energy=False)
        parts = [interior_lipschitz_ratio(sol, problem, window, config),
                 pressure_oscillation_ratio(sol, problem, window, config),
                 caccioppoli_ratio(sol, problem, Window(window.center, window.R / 2, "interior",
                                                        (window.R / 2, window.R / 4)), "interior")]
        if full:
            parts.append(full_lipschitz_ratio(sol, problem, window, config))
        for rep in parts:
            if rep.estimate in reports:
                reports[rep.estimate].extend(rep)
            else:
                rep.band = config.band
                reports[rep.estimate] = rep
    return reports


def boundary_sweep(coeff, config: EstimateConfig, n=256, window=BOUNDARY_WINDOW):
    reports = {}
    for eps in config.eps_list:
        problem = boundary_problem(coeff, eps, n, config.dim)
        sol = solve_dirichlet(problem, config.tol, energy=False)
        parts = [boundary_holder_decay(sol, problem, window, config.holder_rho, band=config.band),
                 caccioppoli_ratio(sol, problem, Window(window.center, window.R, "boundary",
                                                        (window.R, window.R / 2)), "boundary")]
        for rep in parts:
            if rep.estimate in reports:
                reports[rep.estimate].extend(rep)
            else:
                reports[rep.estimate] = rep
    return reports


def w1p_sweep(coeff, config: EstimateConfig, eps_list=(1 / 4, 1 / 8, 1 / 16, 1 / 32), n=256):
    sols = []
    for eps in eps_list:
        problem = w1p_problem(coeff, eps, n, config.dim)
        sols.append((eps, problem, solve_dirichlet(problem, config.tol, energy=False)))
    return w1p_norm_sweep(sols, config.w1p_exponents, config.w1p_band)


def effective_for(coeff, n_cell=64, dim=2, tol=1e-10):
    cset = solve_cell_problems(coeff, PeriodicGrid(dim, n_cell), tol)
    return compute_effective(coeff, cset), cset


def two_scale_sweep(coeff, eps_list=(1 / 4, 1 / 8, 1 / 16, 1 / 32), n=256, dim=2, tol=1e-10,
                    n_cell_effective=64):
    """Errors between oscillating and homogenized solutions on a common grid.

    The homogenized tensor comes from a cell solve at ``n_cell_effective``;
    the correctors used for the first-order term are solved with the cell
    grid that nests into the macroscopic grid at each ``eps``.
    """
    t0 = time.perf_counter()
    eff, _ = effective_for(coeff, n_cell_effective, dim, tol)
    base = interior_problem(coeff, 0.0, n, dim)
    hom = solve_homogenized(eff, base, tol, energy=False)
    errors = []
    for eps in eps_list:
        problem = interior_problem(coeff, eps, n, dim)
        sol = solve_dirichlet(problem, tol, energy=False)
        n_cell = int(round(eps * n))
        cset = solve_cell_problems(coeff, PeriodicGrid(dim, n_cell), tol)
        errors.append(two_scale_error(problem, sol, hom, eff, cset, eps))
    log.info("two-scale sweep finished in %.1f s", time.perf_counter() - t0)
    return errors, eff
