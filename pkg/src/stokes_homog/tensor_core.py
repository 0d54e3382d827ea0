"""Periodic coefficient tensors for the oscillating Stokes operator.

A coefficient field is evaluated as a dense ``(d*d, d*d)`` matrix per point.
Rows are indexed by the test-gradient component ``(alpha, i)`` and columns by
the trial-gradient component ``(beta, j)``, both flattened as ``comp*d + deriv``,
so that ``a_ij^{alpha beta} = M[alpha*d + i, beta*d + j]`` and the bilinear form
density reads ``grad(v) : A grad(u) = g_v @ M @ g_u``.  With this layout the
tensor adjoint ``a*_ij^{alpha beta} = a_ji^{beta alpha}`` is a matrix transpose.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

FAMILIES = ("constant", "trig", "checkerboard", "trig_tensor", "table")


class EllipticityError(ValueError):
    """Raised when a coefficient family is not uniformly elliptic on its samples."""


@dataclass(frozen=True)
class EllipticityReport:
    mu_lower: float
    mu_upper: float
    passed: bool

    def __iter__(self):
        return iter((self.mu_lower, self.mu_upper, self.passed))


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """A 1-periodic coefficient tensor ``A(y)`` on ``[0, 1)^d``.

    ``evaluator`` maps points of shape ``(n, d)`` to matrices of shape
    ``(n, d*d, d*d)``; it is only ever called with points reduced mod 1.
    """

    dim: int
    evaluator: Callable[[np.ndarray], np.ndarray]
    mu: float
    family: str
    params: dict = field(default_factory=dict)
    holder_exponent: float | None = None
    holder_seminorm: float | None = None

    def evaluate(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        single = y.ndim == 1
        pts = np.atleast_2d(y)
        if pts.shape[-1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}, got {pts.shape[-1]}")
        out = self.evaluator(np.mod(pts, 1.0))
        return out[0] if single else out

    def adjoint(self) -> "CoefficientField":
        base = self.evaluator
        return CoefficientField(
            dim=self.dim,
            evaluator=lambda y: np.swapaxes(base(y), -1, -2),
            mu=self.mu,
            family=self.family,
            params={**self.params, "adjoint": not self.params.get("adjoint", False)},
            holder_exponent=self.holder_exponent,
            holder_seminorm=self.holder_seminorm,
        )

    def scaled(self, c: float) -> "CoefficientField":
        """Field ``c * A``; ellipticity constant becomes ``min(c mu, mu / c)``."""
        if c <= 0:
            raise ValueError("scale factor must be positive")
        base = self.evaluator
        return CoefficientField(
            dim=self.dim,
            evaluator=lambda y: c * base(y),
            mu=min(c * self.mu, self.mu / c),
            family=self.family,
            params={**self.params, "scale": c * self.params.get("scale", 1.0)},
            holder_exponent=self.holder_exponent,
            holder_seminorm=None if self.holder_seminorm is None else c * self.holder_seminorm,
        )

    @property
    def is_constant(self) -> bool:
        return self.family == "constant"

    def at_scale(self, eps: float) -> "ScaledField":
        return ScaledField(self, eps)


@dataclass(frozen=True, eq=False)
class ScaledField:
    """``x -> A(x / eps)`` for a periodic base field."""

    base: CoefficientField
    eps: float

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @property
    def dim(self) -> int:
        return self.base.dim

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.base.evaluate(np.mod(x / self.eps, 1.0))


def identity_tensor(d: int) -> np.ndarray:
    """``delta_ij delta^{alpha beta}`` in the flattened gradient layout."""
    return np.eye(d * d)


def tensor_from_ijab(t) -> np.ndarray:
    """Convert a ``t[i, j, alpha, beta]`` array to the flattened matrix layout."""
    t = np.asarray(t, dtype=float)
    d = t.shape[0]
    # M[alpha*d+i, beta*d+j] = t[i, j, alpha, beta]
    return np.transpose(t, (2, 0, 3, 1)).reshape(d * d, d * d)


def tensor_to_ijab(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    d = math.isqrt(m.shape[-1])
    t = m.reshape(m.shape[:-2] + (d, d, d, d))  # [alpha, i, beta, j]
    return np.moveaxis(t, (-4, -3, -2, -1), (-2, -4, -1, -3))


def _sym_eigs(mats: np.ndarray) -> np.ndarray:
    sym = 0.5 * (mats + np.swapaxes(mats, -1, -2))
    return np.linalg.eigvalsh(sym)


def sample_points(d: int, resolution: int) -> np.ndarray:
    """Node points ``k / resolution`` of the periodic cell, shape ``(resolution**d, d)``."""
    axes = [np.arange(resolution) / resolution] * d
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def check_ellipticity(coeff: CoefficientField, sample_resolution: int = 64) -> EllipticityReport:
    """Extreme eigenvalues of the symmetric part of ``A(y)`` over a node grid.

    Never raises for indefinite fields; ``passed`` is False instead.
    """
    if sample_resolution < 2:
        raise ValueError("sample_resolution must be at least 2")
    lo, hi = np.inf, -np.inf
    pts = sample_points(coeff.dim, sample_resolution)
    # fixed chunk order keeps min/max reductions deterministic
    for start in range(0, len(pts), 65536):
        ev = _sym_eigs(coeff.evaluate(pts[start:start + 65536]))
        lo = min(lo, float(ev[:, 0].min()))
        hi = max(hi, float(ev[:, -1].max()))
    return EllipticityReport(lo, hi, lo > 0)


def _periodic_offsets(d: int, n: int) -> np.ndarray:
    """Half of the minimal-image integer offsets (one of each +-pair), excluding zero."""
    rng = np.arange(-(n // 2), n - n // 2)
    grid = np.stack(np.meshgrid(*([rng] * d), indexing="ij"), axis=-1).reshape(-1, d)
    keep = []
    for k in grid:
        nz = np.flatnonzero(k)
        if nz.size and k[nz[0]] > 0:
            keep.append(k)
    return np.array(keep, dtype=int)


def holder_seminorm_estimate(
    coeff: CoefficientField,
    exponent: float,
    sample_resolution: int = 32,
    max_pairs: int = 100_000,
    seed: int = 0,
) -> float:
    """Discrete Holder seminorm ``max |A(x) - A(y)| / |x - y|^exponent``.

    ``|.|`` is the operator norm on gradient matrices and distances use the
    minimal periodic image.  All pairs are visited when ``sample_resolution``
    is at most 64 in 2D (or the node count is at most 4096); above that
    ``max_pairs`` random pairs are drawn.
    """
    if not 0 < exponent <= 1:
        raise ValueError("Holder exponent must lie in (0, 1]")
    n = sample_resolution
    d = coeff.dim
    if n < 2:
        raise ValueError("sample_resolution must be at least 2")
    pts = sample_points(d, n)
    vals = coeff.evaluate(pts).reshape((n,) * d + (d * d, d * d))
    best = 0.0
    if n ** d <= 4096:
        for k in _periodic_offsets(d, n):
            shifted = np.roll(vals, tuple(-k), axis=tuple(range(d)))
            diff = (shifted - vals).reshape(-1, d * d, d * d)
            dist = float(np.linalg.norm(k / n)) ** exponent
            fro = np.linalg.norm(diff, axis=(-2, -1)) / dist
            cand = fro > best
            if not cand.any():
                continue
            op = np.linalg.norm(diff[cand], ord=2, axis=(-2, -1)) / dist
            best = max(best, float(op.max()))
        return best
    rng = np.random.default_rng(seed)
    flat = vals.reshape(-1, d * d, d * d)
    a = rng.integers(0, len(pts), max_pairs)
    b = rng.integers(0, len(pts), max_pairs)
    b = np.where(a == b, (b + 1) % len(pts), b)
    delta = pts[a] - pts[b]
    delta -= np.round(delta)
    dist = np.linalg.norm(delta, axis=1) ** exponent
    op = np.linalg.norm(flat[a] - flat[b], ord=2, axis=(-2, -1))
    return float((op / dist).max())


# --- families -----------------------------------------------------------------


def _constant_field(d: int, params: dict) -> CoefficientField:
    if "tensor" in params:
        m = np.asarray(params["tensor"], dtype=float)
        if m.shape == (d, d, d, d):
            m = tensor_from_ijab(m)
        if m.shape != (d * d, d * d):
            raise ValueError(f"constant tensor must have shape ({d*d}, {d*d}) or {(d,) * 4}")
    else:
        m = float(params.get("value", 1.0)) * identity_tensor(d)

    def ev(y):
        return np.broadcast_to(m, (len(y),) + m.shape).copy()

    ev_s = _sym_eigs(m[None])[0]
    mu = float(min(ev_s[0], 1.0 / ev_s[-1])) if ev_s[0] > 0 else float(ev_s[0])
    return CoefficientField(d, ev, mu, "constant", dict(params), 1.0, 0.0)


def _skew_part(d: int, params: dict) -> np.ndarray:
    s = params.get("skew")
    if s is None:
        return np.zeros((d * d, d * d))
    s = np.asarray(s, dtype=float)
    if s.ndim == 0:
        # default skew coupling between the (0,0) and (d-1,d-1) gradient slots
        m = np.zeros((d * d, d * d))
        m[0, -1], m[-1, 0] = float(s), -float(s)
        return m
    if not np.allclose(s, -s.T):
        raise ValueError("skew part must be antisymmetric")
    return s


def _trig_field(d: int, params: dict) -> CoefficientField:
    amp = float(params.get("amplitude", 0.5))
    mean = float(params.get("mean", 1.0))
    axis = int(params.get("axis", 0))
    k = int(params.get("wavenumber", 1))
    if not 0 <= axis < d:
        raise ValueError("axis out of range")
    skew = _skew_part(d, params)
    ident = identity_tensor(d)

    def ev(y):
        a = mean + amp * np.sin(2 * np.pi * k * y[:, axis])
        return a[:, None, None] * ident + skew

    lo, hi = mean - abs(amp), mean + abs(amp)
    mu = min(lo, 1.0 / hi) if lo > 0 else lo
    return CoefficientField(d, ev, mu, "trig", dict(params), 1.0, 2 * np.pi * k * abs(amp))


def _checkerboard_field(d: int, params: dict) -> CoefficientField:
    a_min = float(params.get("a_min", 0.5))
    contrast = float(params.get("contrast", 4.0))
    kappa = float(params.get("sharpness", 4.0))
    a_max = a_min * contrast
    ident = identity_tensor(d)
    tk = np.tanh(kappa)

    def ev(y):
        f = np.prod(np.sin(2 * np.pi * y), axis=1)
        s = 0.5 * (1.0 + np.tanh(kappa * f) / tk)
        return (a_min + (a_max - a_min) * s)[:, None, None] * ident

    tau = (a_max - a_min) * kappa / (2 * tk) * 2 * np.pi * math.sqrt(d - 1)
    field_ = CoefficientField(d, ev, 0.0, "checkerboard", dict(params), 1.0, tau)
    rep = check_ellipticity(field_, int(params.get("certify_resolution", 256 if d == 2 else 32)))
    mu = min(rep.mu_lower, 1.0 / rep.mu_upper) if rep.passed else rep.mu_lower
    return CoefficientField(d, ev, mu, "checkerboard", dict(params), 1.0, tau)


def _trig_tensor_field(d: int, params: dict) -> CoefficientField:
    """``A0 + sum_k B_k sin(2 pi k.y + phi_k)`` with explicit or seeded matrices."""
    n2 = d * d
    if "base" in params:
        a0 = np.asarray(params["base"], dtype=float)
        modes = [
            (np.asarray(m["wavevector"], dtype=float), float(m.get("phase", 0.0)),
             np.asarray(m["matrix"], dtype=float))
            for m in params.get("modes", [])
        ]
    else:
        rng = np.random.default_rng(int(params.get("seed", 0)))
        strength = float(params.get("strength", 0.3))
        g = rng.normal(size=(n2, n2))
        a0 = np.eye(n2) + 0.1 * g  # mildly nonsymmetric base
        modes = []
        for _ in range(int(params.get("n_modes", 2))):
            kv = rng.integers(-1, 2, size=d).astype(float)
            if not kv.any():
                kv[0] = 1.0
            b = rng.normal(size=(n2, n2))
            b = 0.5 * (b + b.T)
            b *= strength / np.linalg.norm(b, 2)
            modes.append((kv, float(rng.uniform(0, 2 * np.pi)), b))

    def ev(y):
        out = np.broadcast_to(a0, (len(y), n2, n2)).copy()
        for kv, ph, b in modes:
            out += np.sin(2 * np.pi * (y @ kv) + ph)[:, None, None] * b
        return out

    tau = float(sum(2 * np.pi * np.linalg.norm(kv) * np.linalg.norm(b, 2) for kv, _, b in modes))
    field_ = CoefficientField(d, ev, 0.0, "trig_tensor", dict(params), 1.0, tau)
    rep = check_ellipticity(field_, int(params.get("certify_resolution", 64 if d == 2 else 16)))
    mu = min(rep.mu_lower, 1.0 / rep.mu_upper) if rep.passed else rep.mu_lower
    return CoefficientField(d, ev, mu, "trig_tensor", dict(params), 1.0, tau)


def read_table_csv(path, d: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Read a row-major grid table ``y1..yd, a_{i j alpha beta}...``.

    Returns ``(points, matrices)`` with matrices in the flattened layout.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = np.array([[float(v) for v in row] for row in reader if row])
    ycols = [h for h in header if h.startswith("y")]
    dim = len(ycols) if d is None else d
    if len(header) != dim + dim ** 4:
        raise ValueError(f"table header must have {dim} coordinates and {dim ** 4} entries")
    pts = rows[:, :dim]
    t = rows[:, dim:].reshape(-1, dim, dim, dim, dim)  # [i, j, alpha, beta]
    mats = np.stack([tensor_from_ijab(ti) for ti in t])
    return pts, mats


def write_table_csv(path, coeff: CoefficientField, resolution: int) -> None:
    d = coeff.dim
    pts = sample_points(d, resolution)
    mats = tensor_to_ijab(coeff.evaluate(pts))
    names = [f"y{k + 1}" for k in range(d)]
    names += [f"a_{i + 1}{j + 1}{a + 1}{b + 1}" for i in range(d) for j in range(d)
              for a in range(d) for b in range(d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for p, m in zip(pts, mats):
            w.writerow([repr(float(v)) for v in p] + [repr(float(v)) for v in m.ravel()])


def _table_field(d: int, params: dict) -> CoefficientField:
    pts, mats = read_table_csv(Path(params["path"]), d)
    n = round(len(pts) ** (1.0 / d))
    if n ** d != len(pts):
        raise ValueError("table must sample a full tensor-product grid")
    # row-major: last coordinate varies fastest
    order = np.lexsort(tuple(pts[:, k] for k in reversed(range(d))))
    mats = mats[order].reshape((n,) * d + mats.shape[1:])

    def ev(y):
        # piecewise constant on the cell [k/n, (k+1)/n)
        idx = np.floor(y * n + 1e-12).astype(int) % n
        return mats[tuple(idx[:, k] for k in range(d))]

    field_ = CoefficientField(d, ev, 0.0, "table", dict(params))
    rep = check_ellipticity(field_, n)
    mu = min(rep.mu_lower, 1.0 / rep.mu_upper) if rep.passed else rep.mu_lower
    return CoefficientField(d, ev, mu, "table", dict(params))


_BUILDERS = {
    "constant": _constant_field,
    "trig": _trig_field,
    "checkerboard": _checkerboard_field,
    "trig_tensor": _trig_tensor_field,
    "table": _table_field,
}


def make_coefficient_field(spec: dict[str, Any]) -> CoefficientField:
    """Build a field from a family spec such as ``{"family": "trig", "dim": 2}``.

    Raises :class:`EllipticityError` when the sampled lower ellipticity bound
    is not positive.
    """
    spec = dict(spec)
    family = spec.pop("family", "constant")
    d = int(spec.pop("dim", 2))
    if d not in (2, 3):
        raise ValueError("dimension must be 2 or 3")
    if family not in _BUILDERS:
        raise ValueError(f"unknown coefficient family {family!r}; choose from {FAMILIES}")
    coeff = _BUILDERS[family](d, spec)
    if not coeff.mu > 0:
        raise EllipticityError(f"{family} field has non-positive ellipticity bound {coeff.mu:.3g}")
    return coeff


# named presets used by the shipped experiment configs
PRESETS: dict[str, dict] = {
    "identity": {"family": "constant", "value": 1.0},
    "trig": {"family": "trig", "amplitude": 0.5, "axis": 0},
    "trig_skew": {"family": "trig", "amplitude": 0.5, "axis": 0, "skew": 0.3},
    "checkerboard": {"family": "checkerboard", "a_min": 0.5, "contrast": 4.0, "sharpness": 4.0},
}


def preset(name: str, dim: int = 2) -> CoefficientField:
    return make_coefficient_field({**PRESETS[name], "dim": dim})
