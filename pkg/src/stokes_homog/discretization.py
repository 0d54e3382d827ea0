"""Staggered (MAC) grids on the periodic cell and on boxes.

Velocity component ``beta`` lives on faces normal to ``e_beta`` and pressure at
cell centres.  Every grid function lives on a tensor-product *lattice* that is
described by the set of axes along which it sits on grid nodes (``k h``)
rather than at half-integers (``(k + 1/2) h``):

* pressure / cell centres: ``frozenset()``
* velocity component ``beta``: ``{beta}``
* derivative ``d_j u^beta``: ``{}`` if ``j == beta`` else ``{beta, j}``

All operators are sparse Kronecker products of one-dimensional factors, so the
same code serves ``d = 2`` and ``d = 3``.

Box velocities carry, after the face values, the tangential boundary traces
of each component on the walls normal to the other axes.  These trace values
are data (Dirichlet values) and close the one-sided wall derivatives.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from functools import cached_property, reduce
from pathlib import Path

import numpy as np
import scipy.sparse as sp

Lattice = frozenset


def _kron_all(factors):
    return reduce(lambda a, b: sp.kron(a, b, format="csr"), factors).tocsr()


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class _Grid:
    dim: int
    n: int
    length: float = 1.0

    periodic = False

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dimension must be 2 or 3")
        if self.n < 4:
            raise ValueError("grid resolution must be at least 4")

    @property
    def h(self) -> float:
        return self.length / self.n

    @property
    def nodes_per_axis(self) -> int:
        return self.n if self.periodic else self.n + 1

    # --- lattices ---------------------------------------------------------
    def lattice_shape(self, lat) -> tuple[int, ...]:
        return tuple(self.nodes_per_axis if k in lat else self.n for k in range(self.dim))

    def lattice_size(self, lat) -> int:
        return int(np.prod(self.lattice_shape(lat)))

    def lattice_axes(self, lat) -> list[np.ndarray]:
        h = self.h
        return [
            (np.arange(self.nodes_per_axis) * h) if k in lat else (np.arange(self.n) + 0.5) * h
            for k in range(self.dim)
        ]

    def lattice_points(self, lat) -> np.ndarray:
        mesh = np.meshgrid(*self.lattice_axes(lat), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def lattice_weights(self, lat) -> np.ndarray:
        """Quadrature weights: ``h^d``, halved per axis on which a node sits on a wall."""
        w1 = []
        for k in range(self.dim):
            if k in lat and not self.periodic:
                w = np.ones(self.n + 1)
                w[[0, -1]] = 0.5
            else:
                w = np.ones(self.lattice_shape(lat)[k])
            w1.append(w)
        return self.h ** self.dim * reduce(np.multiply.outer, w1).ravel()

    @property
    def center(self) -> frozenset:
        return Lattice()

    @property
    def n_cells(self) -> int:
        return self.n ** self.dim

    def cell_points(self) -> np.ndarray:
        return self.lattice_points(self.center)

    @staticmethod
    def native_lattice(beta: int, j: int) -> frozenset:
        return Lattice() if beta == j else Lattice((beta, j))

    @property
    def gradient_classes(self) -> list[frozenset]:
        return [Lattice()] + [Lattice(p) for p in itertools.combinations(range(self.dim), 2)]

    @property
    def components(self) -> list[tuple[int, int]]:
        """Gradient components ``(beta, j)`` in flat order ``beta*d + j``."""
        return [(b, j) for b in range(self.dim) for j in range(self.dim)]

    # --- velocity layout --------------------------------------------------
    @cached_property
    def face_sizes(self) -> list[int]:
        return [self.lattice_size(Lattice((b,))) for b in range(self.dim)]

    @cached_property
    def face_offsets(self) -> list[int]:
        return list(np.concatenate([[0], np.cumsum(self.face_sizes)]).astype(int))

    @property
    def n_faces(self) -> int:
        return self.face_offsets[-1]

    @cached_property
    def trace_keys(self) -> list[tuple[int, int, int]]:
        if self.periodic:
            return []
        return [(b, j, s) for b in range(self.dim) for j in range(self.dim) if j != b for s in (0, 1)]

    def trace_shape(self, key) -> tuple[int, ...]:
        b, j, _ = key
        return tuple(1 if k == j else (self.n + 1 if k == b else self.n) for k in range(self.dim))

    @cached_property
    def trace_offsets(self) -> dict:
        off, out = self.n_faces, {}
        for key in self.trace_keys:
            size = int(np.prod(self.trace_shape(key)))
            out[key] = (off, off + size)
            off += size
        return out

    @property
    def n_velocity(self) -> int:
        """Length of a velocity vector (faces plus wall traces on boxes)."""
        if not self.trace_keys:
            return self.n_faces
        return max(e for _, e in self.trace_offsets.values())

    def trace_points(self, key) -> np.ndarray:
        b, j, s = key
        axes = []
        for k in range(self.dim):
            if k == j:
                axes.append(np.array([s * self.length]))
            elif k == b:
                axes.append(np.arange(self.n + 1) * self.h)
            else:
                axes.append((np.arange(self.n) + 0.5) * self.h)
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def component(self, u: np.ndarray, beta: int) -> np.ndarray:
        """Face values of component ``beta`` reshaped to its lattice."""
        o = self.face_offsets
        return u[o[beta]:o[beta + 1]].reshape(self.lattice_shape(Lattice((beta,))))

    def sample_velocity(self, func) -> np.ndarray:
        """Sample ``func(points) -> (n, d)`` at faces and wall traces."""
        u = np.zeros(self.n_velocity)
        o = self.face_offsets
        for b in range(self.dim):
            u[o[b]:o[b + 1]] = np.asarray(func(self.lattice_points(Lattice((b,)))))[:, b]
        for key, (s, e) in self.trace_offsets.items():
            u[s:e] = np.asarray(func(self.trace_points(key)))[:, key[0]]
        return u

    def sample_pressure(self, func) -> np.ndarray:
        return np.asarray(func(self.cell_points()), dtype=float).reshape(-1)

    # --- 1D factors -------------------------------------------------------
    def _eye(self, node: bool):
        return sp.identity(self.nodes_per_axis if node else self.n, format="csr")

    def _diff_node_to_half(self):
        n, h = self.n, self.h
        if self.periodic:
            m = sp.diags([-np.ones(n), np.ones(n - 1)], [0, 1], shape=(n, n), format="lil")
            m[n - 1, 0] = 1.0
        else:
            m = sp.diags([-np.ones(n), np.ones(n)], [0, 1], shape=(n, n + 1), format="lil")
        return (m / h).tocsr()

    def _diff_half_to_node(self):
        n, h = self.n, self.h
        if self.periodic:
            m = sp.diags([np.ones(n), -np.ones(n - 1)], [0, -1], shape=(n, n), format="lil")
            m[0, n - 1] = -1.0
            return (m / h).tocsr()
        m = sp.diags([np.ones(n), -np.ones(n)], [0, -1], shape=(n + 1, n), format="lil")
        m[0, 0] = 2.0
        m[n, n - 1] = -2.0
        return (m / h).tocsr()

    def _trace_injector(self, side: int):
        col = np.zeros((self.n + 1, 1))
        col[0 if side == 0 else self.n, 0] = (-2.0 if side == 0 else 2.0) / self.h
        return sp.csr_matrix(col)

    def _avg_node_to_half(self):
        n = self.n
        if self.periodic:
            m = sp.diags([np.ones(n), np.ones(n - 1)], [0, 1], shape=(n, n), format="lil")
            m[n - 1, 0] = 1.0
        else:
            m = sp.diags([np.ones(n), np.ones(n)], [0, 1], shape=(n, n + 1), format="lil")
        return (0.5 * m).tocsr()

    def _avg_half_to_node(self):
        n = self.n
        if self.periodic:
            m = sp.diags([np.ones(n), np.ones(n - 1)], [0, -1], shape=(n, n), format="lil")
            m[0, n - 1] = 1.0
            return (0.5 * m).tocsr()
        m = sp.diags([np.full(n, 0.5), np.full(n, 0.5)], [0, -1], shape=(n + 1, n), format="lil")
        m[0, 0] = 1.0
        m[n, n - 1] = 1.0
        return m.tocsr()

    # --- operators on the full velocity vector ----------------------------
    @cached_property
    def native_gradients(self) -> dict:
        """``(beta, j) -> sparse`` map from velocity vectors to native lattice values."""
        out = {}
        for b, j in self.components:
            factors = []
            for k in range(self.dim):
                if k == j:
                    factors.append(self._diff_node_to_half() if j == b else self._diff_half_to_node())
                else:
                    factors.append(self._eye(k == b))
            face_op = _kron_all(factors)
            rows = face_op.shape[0]
            op = sp.hstack([
                sp.csr_matrix((rows, self.face_offsets[b])),
                face_op,
                sp.csr_matrix((rows, self.n_velocity - self.face_offsets[b + 1])),
            ], format="csr")
            if j != b and not self.periodic:
                for s in (0, 1):
                    t0, t1 = self.trace_offsets[(b, j, s)]
                    inj = _kron_all([
                        self._trace_injector(s) if k == j else self._eye(k == b)
                        for k in range(self.dim)
                    ])
                    op = op + sp.hstack([
                        sp.csr_matrix((rows, t0)), inj,
                        sp.csr_matrix((rows, self.n_velocity - t1)),
                    ], format="csr")
            out[(b, j)] = op.tocsr()
        return out

    def averaging(self, src, dst):
        """Arithmetic averaging from lattice ``src`` to lattice ``dst``."""
        factors = []
        for k in range(self.dim):
            if (k in src) == (k in dst):
                factors.append(self._eye(k in src))
            elif k in src:
                factors.append(self._avg_node_to_half())
            else:
                factors.append(self._avg_half_to_node())
        return _kron_all(factors)

    @cached_property
    def class_gradients(self) -> dict:
        """Full gradient tensor (native or averaged components) on each class lattice.

        Maps a class lattice to a list of ``d*d`` sparse blocks in flat
        component order.
        """
        out = {}
        for cls in self.gradient_classes:
            blocks = []
            for b, j in self.components:
                nat = self.native_lattice(b, j)
                g = self.native_gradients[(b, j)]
                blocks.append(g if nat == cls else (self.averaging(nat, cls) @ g).tocsr())
            out[cls] = blocks
        return out

    @cached_property
    def divergence_matrix(self):
        return sum(self.native_gradients[(b, b)] for b in range(self.dim)).tocsr()

    # --- masks ------------------------------------------------------------
    @cached_property
    def interior_velocity(self) -> np.ndarray:
        """Boolean mask of unknown velocity entries (all faces on the torus)."""
        mask = np.zeros(self.n_velocity, dtype=bool)
        for b in range(self.dim):
            m = np.ones(self.lattice_shape(Lattice((b,))), dtype=bool)
            if not self.periodic:
                idx = [slice(None)] * self.dim
                idx[b] = [0, self.n]
                m[tuple(idx)] = False
            mask[self.face_offsets[b]:self.face_offsets[b + 1]] = m.ravel()
        return mask

    @cached_property
    def velocity_weights(self) -> np.ndarray:
        """L2 quadrature weights on faces (zero on trace entries)."""
        w = np.zeros(self.n_velocity)
        for b in range(self.dim):
            w[self.face_offsets[b]:self.face_offsets[b + 1]] = self.lattice_weights(Lattice((b,)))
        return w

    def descriptor(self) -> dict:
        return {
            "kind": "periodic" if self.periodic else "box",
            "dim": self.dim,
            "n": self.n,
            "length": self.length,
            "layout": "staggered-mac",
            "n_velocity": int(self.n_velocity),
            "n_pressure": int(self.n_cells),
        }


@dataclass(frozen=True, eq=False)
class PeriodicGrid(_Grid):
    """Staggered grid on the unit torus ``[0, 1)^d`` (or a scaled torus)."""

    periodic = True


@dataclass(frozen=True, eq=False)
class BoxGrid(_Grid):
    """Staggered grid on ``(0, L)^d`` with no-slip walls."""

    periodic = False

    @property
    def boundary_velocity(self) -> np.ndarray:
        return ~self.interior_velocity


def _check(grid, arr, size, what):
    arr = np.asarray(arr, dtype=float)
    if arr.shape != (size,):
        raise GridMismatchError(f"{what} has shape {arr.shape}, grid expects ({size},)")
    return arr


def divergence(grid, u) -> np.ndarray:
    """Centred staggered divergence at cell centres."""
    u = _check(grid, u, grid.n_velocity, "velocity")
    return grid.divergence_matrix @ u


def gradient(grid, p) -> np.ndarray:
    """Pressure gradient on faces; zero on box wall faces and trace entries.

    On the torus this is exactly ``-div^T``; on boxes the adjoint relation
    holds against velocities vanishing on the wall mask.
    """
    p = _check(grid, p, grid.n_cells, "pressure")
    g = -(grid.divergence_matrix.T @ p)
    g[~grid.interior_velocity] = 0.0
    return g


def inner_velocity(grid, u, v) -> float:
    return float(np.dot(grid.velocity_weights * u, v))


def inner_pressure(grid, p, q) -> float:
    return float(grid.h ** grid.dim * np.dot(p, q))


# --- coefficient sampling and the bilinear form --------------------------------


def _check_scale(grid, coeff):
    eps = getattr(coeff, "eps", None)
    if eps is None:
        return
    ratio = eps / grid.h
    if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
        raise GridMismatchError(
            f"eps = {eps:g} is not an integer multiple of the grid spacing h = {grid.h:g}"
        )


def sample_coefficient(grid, coeff, lat) -> np.ndarray:
    """Coefficient matrices at the points of ``lat``; constants broadcast."""
    n = grid.lattice_size(lat)
    if isinstance(coeff, np.ndarray):
        return np.broadcast_to(coeff, (n,) + coeff.shape)
    if hasattr(coeff, "matrix"):  # EffectiveTensor
        return np.broadcast_to(coeff.matrix, (n,) + coeff.matrix.shape)
    _check_scale(grid, coeff)
    return coeff.evaluate(grid.lattice_points(lat))


def _coupling_factor(grid, cls, r, s) -> float:
    nr = grid.native_lattice(*grid.components[r])
    ns = grid.native_lattice(*grid.components[s])
    if nr == cls and ns == cls:
        return 1.0
    if nr != ns and (nr == cls or ns == cls):
        return 0.5
    return 0.0


def class_coefficient_blocks(grid, coeff) -> dict:
    """Per class, the ``(d*d, d*d)`` grid of diagonal weight vectors (or None)."""
    nd = grid.dim * grid.dim
    out = {}
    for cls in grid.gradient_classes:
        a = sample_coefficient(grid, coeff, cls)
        w = grid.lattice_weights(cls)
        blocks = [[None] * nd for _ in range(nd)]
        for r in range(nd):
            for s in range(nd):
                f = _coupling_factor(grid, cls, r, s)
                if f == 0.0:
                    continue
                vals = a[:, r, s]
                if not np.any(vals):
                    continue
                blocks[r][s] = f * w * vals
        out[cls] = blocks
    return out


def assemble_operator(grid, coeff):
    """Sparse matrix of the form ``a(u, v) = v @ K @ u`` on full velocity vectors.

    ``K = sum_c G_c^T M_c G_c`` where ``G_c`` stacks the full gradient on the
    class lattice ``c`` and ``M_c`` carries ``A`` sampled there.  Pairs of
    components native to the same lattice are integrated there; pairs native
    to different lattices are split half and half between them.
    """
    nd = grid.dim * grid.dim
    K = sp.csr_matrix((grid.n_velocity, grid.n_velocity))
    for cls, blocks in class_coefficient_blocks(grid, coeff).items():
        gs = grid.class_gradients[cls]
        for r in range(nd):
            row = None
            for s in range(nd):
                if blocks[r][s] is None:
                    continue
                term = sp.diags(blocks[r][s]) @ gs[s]
                row = term if row is None else row + term
            if row is not None:
                K = K + (gs[r].T @ row)
    return K.tocsr()


def apply_operator(grid, coeff, u) -> np.ndarray:
    """Discrete ``-div(A grad u)`` in weak (quadrature-weighted) form."""
    u = _check(grid, u, grid.n_velocity, "velocity")
    return assemble_operator(grid, coeff) @ u


def bilinear_form(grid, coeff, u, v, grad_u=None, grad_v=None) -> float:
    """``a(u, v)``; optional constant gradient matrices are added to each argument.

    The constant parts represent affine fields such as ``P_j^beta`` which are
    not periodic grid functions.
    """
    nd = grid.dim * grid.dim
    total = 0.0
    gu_c = _full_gradient_blocks(grid, u, grad_u)
    gv_c = _full_gradient_blocks(grid, v, grad_v)
    for cls, blocks in class_coefficient_blocks(grid, coeff).items():
        for r in range(nd):
            for s in range(nd):
                if blocks[r][s] is not None:
                    total += float(np.dot(gv_c[cls][r] * blocks[r][s], gu_c[cls][s]))
    return total


def _full_gradient_blocks(grid, u, const=None) -> dict:
    out = {}
    const = None if const is None else np.asarray(const, dtype=float).reshape(-1)
    for cls in grid.gradient_classes:
        gs = grid.class_gradients[cls]
        n = grid.lattice_size(cls)
        vals = []
        for r in range(grid.dim * grid.dim):
            g = gs[r] @ u if u is not None else np.zeros(n)
            if const is not None:
                g = g + const[r]
            vals.append(g)
        out[cls] = vals
    return out


def flux_pairing(grid, coeff, u, phi, grad_u=None) -> float:
    """``<A grad u, Phi>`` with the same split quadrature as the bilinear form.

    ``phi(points) -> (n, d*d)`` gives the test tensor field in flat
    ``alpha*d + i`` order.
    """
    nd = grid.dim * grid.dim
    gu = _full_gradient_blocks(grid, u, grad_u)
    total = 0.0
    for cls, blocks in class_coefficient_blocks(grid, coeff).items():
        ph = np.asarray(phi(grid.lattice_points(cls)))
        for r in range(nd):
            for s in range(nd):
                if blocks[r][s] is not None:
                    total += float(np.dot(ph[:, r] * blocks[r][s], gu[cls][s]))
    return total


def gradient_norm_sq(grid, u) -> float:
    """``sum`` over native components of ``w |d_j u^beta|^2`` (discrete H1 seminorm squared)."""
    total = 0.0
    for (b, j), g in grid.native_gradients.items():
        v = g @ u
        total += float(np.dot(grid.lattice_weights(grid.native_lattice(b, j)) * v, v))
    return total


def cell_gradient(grid, u) -> np.ndarray:
    """Full velocity gradient at cell centres, shape ``(n_cells, d, d)`` indexed ``[beta, j]``."""
    blocks = grid.class_gradients[grid.center]
    return np.stack([g @ u for g in blocks], axis=-1).reshape(-1, grid.dim, grid.dim)


def cell_velocity(grid, u) -> np.ndarray:
    """Velocity averaged to cell centres, shape ``(n_cells, d)``."""
    out = []
    for b in range(grid.dim):
        lat = Lattice((b,))
        face = u[grid.face_offsets[b]:grid.face_offsets[b + 1]]
        out.append(grid.averaging(lat, grid.center) @ face)
    return np.stack(out, axis=-1)


def window_mask(grid, center, radius) -> np.ndarray:
    """Cells whose centres lie in ``B(center, radius)``."""
    pts = grid.cell_points()
    return np.linalg.norm(pts - np.asarray(center, dtype=float), axis=1) < radius


def window_average(grid, values, center, radius):
    """Mean of cell-centred ``values`` over cells with centres in the ball."""
    mask = window_mask(grid, center, radius)
    if not mask.any():
        raise ValueError(f"window B({list(center)}, {radius}) contains no cell centres")
    return np.asarray(values)[mask].mean(axis=0)


# --- serialization -------------------------------------------------------------


def save_grid_function(path, grid, values, kind: str, extra: dict | None = None) -> None:
    """Write ``<path>.bin`` (little-endian float64) and ``<path>.json`` header."""
    path = Path(path)
    values = np.ascontiguousarray(values, dtype="<f8")
    values.tofile(path.with_suffix(".bin"))
    header = {"grid": grid.descriptor(), "kind": kind, "length": int(values.size),
              "dtype": "float64-le", **(extra or {})}
    path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_grid_function(path) -> tuple[dict, np.ndarray]:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    values = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    if values.size != header["length"]:
        raise GridMismatchError("grid function length does not match its header")
    return header, values


def grid_from_descriptor(desc: dict):
    cls = PeriodicGrid if desc["kind"] == "periodic" else BoxGrid
    return cls(desc["dim"], desc["n"], desc.get("length", 1.0))
