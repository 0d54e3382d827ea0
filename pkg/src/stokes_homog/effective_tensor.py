"""Homogenized tensor from the cell correctors.

``A_hat[(alpha, i), (beta, j)] = a(chi_j^beta + P_j^beta, chi_i^alpha + P_i^alpha)``
evaluated with exactly the split quadrature used to assemble the cell
operator, so that the entries are the discrete energies of the corrected
affine fields.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import discretization as disc
from .cell_problem import CorrectorSet, solve_adjoint_cell_problems, solve_cell_problems, unit_gradient
from .tensor_core import tensor_from_ijab, tensor_to_ijab


@dataclass
class EffectiveTensor:
    """Constant tensor in the flattened ``(alpha*d + i, beta*d + j)`` layout."""

    matrix: np.ndarray
    mu_lower: float = float("nan")
    mu_upper: float = float("nan")
    provenance: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return math.isqrt(self.matrix.shape[0])

    def entry(self, i, j, alpha, beta) -> float:
        d = self.dim
        return float(self.matrix[alpha * d + i, beta * d + j])

    def adjoint(self) -> "EffectiveTensor":
        return EffectiveTensor(self.matrix.T.copy(), self.mu_lower, self.mu_upper,
                               {**self.provenance, "adjoint": True})

    def evaluate(self, y) -> np.ndarray:
        n = len(np.atleast_2d(y))
        return np.broadcast_to(self.matrix, (n,) + self.matrix.shape).copy()

    def to_json(self) -> str:
        payload = {
            "dim": self.dim,
            "index_order": "i,j,alpha,beta",
            "entries": tensor_to_ijab(self.matrix).ravel().tolist(),
            "mu_lower": self.mu_lower,
            "mu_upper": self.mu_upper,
            "provenance": self.provenance,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EffectiveTensor":
        data = json.loads(text)
        d = data["dim"]
        m = tensor_from_ijab(np.asarray(data["entries"], dtype=float).reshape(d, d, d, d))
        return cls(m, data["mu_lower"], data["mu_upper"], data.get("provenance", {}))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "EffectiveTensor":
        return cls.from_json(Path(path).read_text())


def effective_matrix(coeff, cset: CorrectorSet) -> np.ndarray:
    grid = cset.grid
    d = grid.dim
    nd = d * d
    if coeff.dim != d:
        raise disc.GridMismatchError("coefficient and corrector grid dimensions differ")
    blocks = disc.class_coefficient_blocks(grid, coeff)
    # gradients of chi_j^beta + P_j^beta on every class lattice, slot beta*d + j
    grads = {}
    for j in range(d):
        for b in range(d):
            grads[b * d + j] = disc._full_gradient_blocks(grid, cset.chi[j, b], unit_gradient(d, j, b))
    out = np.zeros((nd, nd))
    for row in range(nd):
        for col in range(nd):
            total = 0.0
            gv, gu = grads[row], grads[col]
            for cls, bl in blocks.items():
                for r in range(nd):
                    for s in range(nd):
                        if bl[r][s] is not None:
                            total += float(np.dot(gv[cls][r] * bl[r][s], gu[cls][s]))
            out[row, col] = total
    return out


def compute_effective(coeff, cset: CorrectorSet) -> EffectiveTensor:
    m = effective_matrix(coeff, cset)
    lo, hi = effective_bounds(m)
    prov = {"n": cset.grid.n, "max_corrector_residual": cset.max_residual(),
            "adjoint": cset.adjoint}
    return EffectiveTensor(m, lo, hi, prov)


def effective_bounds(matrix) -> tuple[float, float]:
    """Extreme eigenvalues of the symmetric part: the sharp quadratic-form bounds."""
    m = np.asarray(matrix, dtype=float)
    ev = np.linalg.eigvalsh(0.5 * (m + m.T))
    return float(ev[0]), float(ev[-1])


def check_effective_ellipticity(eff, mu_input: float, tol: float = 1e-8):
    """``(passed, mu_lower, mu_upper)`` with ``passed`` iff ``mu_lower >= mu_input - tol``."""
    m = eff.matrix if hasattr(eff, "matrix") else eff
    lo, hi = effective_bounds(m)
    return bool(lo >= mu_input - tol and np.isfinite(hi)), lo, hi


def check_duality(coeff, grid, tol: float = 1e-10, method: str = "auto"):
    """Max entry of ``|adjoint(A_hat(A)) - A_hat(A*)|``, plus both tensors."""
    primal = compute_effective(coeff, solve_cell_problems(coeff, grid, tol, method))
    adj_coeff = coeff.T if isinstance(coeff, np.ndarray) else coeff.adjoint()
    dual = compute_effective(adj_coeff, solve_adjoint_cell_problems(coeff, grid, tol, method))
    defect = float(np.abs(primal.matrix.T - dual.matrix).max())
    return defect, primal, dual
