"""Periodic corrector problems on the unit cell.

For every pair ``(j, beta)`` the corrector ``chi_j^beta`` with pressure
``pi_j^beta`` solves, on the torus,

    a(chi + P_j^beta, phi) - (pi, div phi) = 0,   div chi = 0,

with ``P_j^beta(y) = y_j e^beta`` and both ``chi`` and ``pi`` of mean zero.
The affine field never appears as a grid function: its gradient is the
constant unit matrix at flat slot ``beta*d + j`` and enters as a load vector.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator

from . import discretization as disc
from .discretization import Lattice, PeriodicGrid
from .saddle import SaddleSystem, SolverError
from .tensor_core import EllipticityError

log = logging.getLogger(__name__)

DIRECT_MAX_N = 64


def unit_gradient(d: int, j: int, beta: int) -> np.ndarray:
    """Flat gradient of ``P_j^beta``: one at slot ``beta*d + j``."""
    e = np.zeros(d * d)
    e[beta * d + j] = 1.0
    return e


def affine_load(grid, coeff, grad) -> np.ndarray:
    """Vector ``b`` with ``b @ v = a(affine, v)`` for the affine field of constant gradient ``grad``."""
    grad = np.asarray(grad, dtype=float).reshape(-1)
    nd = grid.dim * grid.dim
    b = np.zeros(grid.n_velocity)
    for cls, blocks in disc.class_coefficient_blocks(grid, coeff).items():
        gs = grid.class_gradients[cls]
        for r in range(nd):
            flux = None
            for s in range(nd):
                if blocks[r][s] is None or grad[s] == 0.0:
                    continue
                term = blocks[r][s] * grad[s]
                flux = term if flux is None else flux + term
            if flux is not None:
                b += gs[r].T @ flux
    return b


def mean_constraints(grid) -> sp.csr_matrix:
    """Rows ``h^d * 1`` on each velocity component (velocity means)."""
    rows = []
    for b in range(grid.dim):
        r = np.zeros(grid.n_velocity)
        r[grid.face_offsets[b]:grid.face_offsets[b + 1]] = grid.h ** grid.dim
        rows.append(r)
    return sp.csr_matrix(np.vstack(rows))


def cell_scale(grid, coeff) -> np.ndarray:
    """Per-cell scalar size of the coefficient (mean diagonal), used as a preconditioner weight."""
    a = disc.sample_coefficient(grid, coeff, grid.center)
    return np.einsum("nii->n", a) / a.shape[-1]


def build_cell_system(grid, coeff, tol=1e-10, method="auto") -> SaddleSystem:
    K = disc.assemble_operator(grid, coeff)
    B = -(grid.h ** grid.dim) * grid.divergence_matrix
    c_p = np.full(grid.n_cells, grid.h ** grid.dim)
    if method == "auto":
        method = "schur"
    return SaddleSystem(K, B, c_p, C_u=mean_constraints(grid), method=method,
                        precond_weights=cell_scale(grid, coeff), tol=tol)


@dataclass
class CorrectorSet:
    """Correctors ``chi[j, beta]``, pressures ``pi[j, beta]`` and the samples of ``P_j^beta``."""

    grid: PeriodicGrid
    chi: np.ndarray  # (d, d, n_velocity)
    pi: np.ndarray  # (d, d, n_cells)
    residuals: np.ndarray  # (d, d) relative saddle residuals
    iterations: np.ndarray = None
    adjoint: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.grid.dim

    @property
    def P(self) -> np.ndarray:
        """Face samples of ``P_j^beta(y) = y_j e^beta``, shape ``(d, d, n_velocity)``."""
        d = self.dim
        out = np.zeros_like(self.chi)
        for j in range(d):
            for b in range(d):
                out[j, b] = self.grid.sample_velocity(
                    lambda x, j=j, b=b: np.eye(d)[b][None, :] * x[:, j:j + 1])
        return out

    def max_residual(self) -> float:
        return float(self.residuals.max())

    def mean_defects(self) -> np.ndarray:
        """``(d, d, d + 1)``: velocity component means then the pressure mean."""
        g, d = self.grid, self.dim
        out = np.zeros((d, d, d + 1))
        for j in range(d):
            for b in range(d):
                for c in range(d):
                    out[j, b, c] = g.component(self.chi[j, b], c).mean()
                out[j, b, d] = self.pi[j, b].mean()
        return out

    def divergence_defects(self) -> np.ndarray:
        """Discrete ``L^2`` norm of ``div chi_j^beta``."""
        g, d = self.grid, self.dim
        out = np.zeros((d, d))
        for j in range(d):
            for b in range(d):
                dv = disc.divergence(g, self.chi[j, b])
                out[j, b] = np.sqrt(disc.inner_pressure(g, dv, dv))
        return out

    def norms(self) -> np.ndarray:
        """``||chi||_{H^1} + ||pi||_{L^2}`` per ``(j, beta)``."""
        g, d = self.grid, self.dim
        out = np.zeros((d, d))
        for j in range(d):
            for b in range(d):
                u = self.chi[j, b]
                h1 = np.sqrt(disc.inner_velocity(g, u, u) + disc.gradient_norm_sq(g, u))
                out[j, b] = h1 + np.sqrt(disc.inner_pressure(g, self.pi[j, b], self.pi[j, b]))
        return out

    # --- serialization ------------------------------------------------------------
    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        d = self.dim
        for j in range(d):
            for b in range(d):
                disc.save_grid_function(directory / f"chi_{j}_{b}", self.grid, self.chi[j, b],
                                        "velocity", {"j": j, "beta": b})
                disc.save_grid_function(directory / f"pi_{j}_{b}", self.grid, self.pi[j, b],
                                        "pressure", {"j": j, "beta": b})
        manifest = {
            "grid": self.grid.descriptor(),
            "adjoint": self.adjoint,
            "index_order": "j,beta",
            "residuals": self.residuals.tolist(),
            "norms": self.norms().tolist(),
            "meta": self.meta,
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "CorrectorSet":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        grid = disc.grid_from_descriptor(manifest["grid"])
        d = grid.dim
        chi = np.zeros((d, d, grid.n_velocity))
        pi = np.zeros((d, d, grid.n_cells))
        for j in range(d):
            for b in range(d):
                chi[j, b] = disc.load_grid_function(directory / f"chi_{j}_{b}")[1]
                pi[j, b] = disc.load_grid_function(directory / f"pi_{j}_{b}")[1]
        return cls(grid, chi, pi, np.asarray(manifest["residuals"]), adjoint=manifest["adjoint"],
                   meta=manifest.get("meta", {}))


def solve_cell_problems(coeff, grid: PeriodicGrid, tol: float = 1e-10, method: str = "auto",
                        adjoint: bool = False) -> CorrectorSet:
    """Solve all ``d^2`` corrector problems with one shared factorization.

    ``method`` is ``"schur"``, ``"direct"`` or ``"auto"`` (Schur complement
    iteration, falling back to the bordered direct solve on small grids).
    """
    if not grid.periodic:
        raise disc.GridMismatchError("corrector problems live on a PeriodicGrid")
    if coeff.dim != grid.dim:
        raise disc.GridMismatchError("coefficient and grid dimensions differ")
    if getattr(coeff, "mu", 1.0) <= 0:
        raise EllipticityError("coefficient is not elliptic")
    d = grid.dim
    chi = np.zeros((d, d, grid.n_velocity))
    pi = np.zeros((d, d, grid.n_cells))
    res = np.zeros((d, d))
    its = np.zeros((d, d), dtype=int)
    loads = {(j, b): affine_load(grid, coeff, unit_gradient(d, j, b))
             for j in range(d) for b in range(d)}
    if all(not np.any(v) for v in loads.values()):
        # affine fields already solve the system (constant coefficients)
        return CorrectorSet(grid, chi, pi, res, its, adjoint, {"method": "none", "tol": tol})
    system = build_cell_system(grid, coeff, tol, method)
    used = system.method
    for j in range(d):
        for b in range(d):
            f = -loads[(j, b)]
            try:
                r = system.solve(f)
            except SolverError:
                if method != "auto" or grid.n > DIRECT_MAX_N:
                    raise
                log.warning("Schur iteration failed; switching to the direct solver")
                system = build_cell_system(grid, coeff, tol, "direct")
                used = "direct"
                r = system.solve(f)
            if r.residual > tol:
                raise SolverError(f"cell problem ({j},{b}) residual {r.residual:.3e} exceeds {tol:.1e}")
            chi[j, b], pi[j, b], res[j, b], its[j, b] = r.u, r.p, r.residual, r.iterations
    log.info("cell problems solved on N=%d (%s), max residual %.2e", grid.n, used, res.max())
    return CorrectorSet(grid, chi, pi, res, its, adjoint, {"method": used, "tol": tol})


def _adjoint_coefficient(coeff):
    if isinstance(coeff, np.ndarray):
        return coeff.T
    return coeff.adjoint()


def solve_adjoint_cell_problems(coeff, grid: PeriodicGrid, tol: float = 1e-10,
                                method: str = "auto") -> CorrectorSet:
    """Correctors of the adjoint tensor ``a*_ij^{alpha beta} = a_ji^{beta alpha}``."""
    return solve_cell_problems(_adjoint_coefficient(coeff), grid, tol, method, adjoint=True)


# --- correctors on a macroscopic grid ---------------------------------------------


def _tile_velocity(cgrid, u_cell, target):
    """Periodic tiling of a cell velocity onto the faces and wall traces of ``target``.

    Wall traces sit on nodes of the wall axis where the component lives at
    half points; they take the mean of the two neighbouring values.
    """
    m = cgrid.n
    out = np.zeros(target.n_velocity)
    comps = [cgrid.component(u_cell, c) for c in range(target.dim)]
    for c in range(target.dim):
        idx = [np.arange(s) % m for s in target.lattice_shape(Lattice((c,)))]
        out[target.face_offsets[c]:target.face_offsets[c + 1]] = comps[c][np.ix_(*idx)].ravel()
    for key, (s, e) in target.trace_offsets.items():
        c, wall, side = key
        node = 0 if side == 0 else target.n
        idx = [np.array([node % m]) if k == wall else np.arange(size) % m
               for k, size in enumerate(target.trace_shape(key))]
        lo = list(idx)
        lo[wall] = (idx[wall] - 1) % m
        out[s:e] = 0.5 * (comps[c][np.ix_(*idx)] + comps[c][np.ix_(*lo)]).ravel()
    return out


def _nests(cset, eps, target) -> bool:
    m = eps / target.h
    return abs(m - round(m)) < 1e-9 and int(round(m)) == cset.grid.n


def corrector_field_at_scale(cset: CorrectorSet, eps: float, target):
    """Sample ``x -> eps * chi_j^beta(x / eps)`` on ``target``.

    Returns ``(values, interpolated)`` with ``values`` of shape
    ``(d, d, target.n_velocity)``.  When one period of the target grid holds
    exactly the cell grid the values are a periodic tiling (no interpolation);
    otherwise they are interpolated linearly and ``interpolated`` is True.
    """
    d = cset.dim
    if target.dim != d:
        raise disc.GridMismatchError("target and cell grids have different dimensions")
    out = np.zeros((d, d, target.n_velocity))
    cg = cset.grid
    if eps == 1.0 and target.periodic and target.n == cg.n and target.length == 1.0:
        return cset.chi.copy(), False
    if _nests(cset, eps, target):
        for j in range(d):
            for b in range(d):
                out[j, b] = eps * _tile_velocity(cg, cset.chi[j, b], target)
        return out, False
    # non-nesting grids: periodic linear interpolation of each component
    for j in range(d):
        for b in range(d):
            interps = []
            for c in range(d):
                comp = cg.component(cset.chi[j, b], c)
                axes = [np.concatenate([[a[0] - cg.h], a, [a[-1] + cg.h]])
                        for a in cg.lattice_axes(Lattice((c,)))]
                interps.append(RegularGridInterpolator(axes, np.pad(comp, [(1, 1)] * d, mode="wrap")))

            def func(x, interps=interps):
                y = np.mod(x / eps, 1.0)
                return eps * np.stack([f(y) for f in interps], axis=-1)

            out[j, b] = target.sample_velocity(func)
    return out, True
