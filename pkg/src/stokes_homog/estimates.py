"""Measured left and right sides of the uniform regularity estimates.

Every quantity is computed from cell-centred data: the full velocity gradient
at cell centres (native diagonal derivatives, averaged off-diagonal ones),
the pressure, and the data sampled at cell centres.  Balls are represented
by the cells whose centres lie inside them, so averages over a ball are plain
means over those cells.

Reports hold one row per ``(estimate, eps, r)`` with the two sides and their
ratio.  Uniformity in ``eps`` is judged by the spread of the per-``eps``
maximum ratio relative to its value at the largest ``eps``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import discretization as disc
from .cell_problem import CorrectorSet, affine_load, corrector_field_at_scale, unit_gradient
from .discretization import BoxGrid, Lattice
from .tensor_core import ScaledField

# --- configuration and windows ----------------------------------------------------


@dataclass
class EstimateConfig:
    dim: int = 2
    q: float | None = None  # default 2d, so rho = 1/2
    holder_rho: float = 0.5
    w1p_exponents: tuple = (4.0 / 3.0, 2.0, 3.0, 4.0)
    eps_list: tuple = (1 / 8, 1 / 16, 1 / 32)
    band: float = 0.25
    w1p_band: float = 0.20
    tol: float = 1e-10
    seed: int = 0
    pair_limit: int = 100_000
    all_pairs_max_n: int = 64

    def __post_init__(self):
        if self.q is None:
            self.q = 2.0 * self.dim
        self.w1p_exponents = tuple(float(x) for x in self.w1p_exponents)
        self.eps_list = tuple(float(x) for x in self.eps_list)

    @property
    def rho(self) -> float:
        return 1.0 - self.dim / self.q

    def validate(self) -> list[str]:
        errors = []
        if not 0.0 < self.rho < 1.0:
            errors.append(f"q={self.q:g}: rho = 1 - d/q = {self.rho:g} out of (0,1)")
        if not 0.0 < self.holder_rho < 1.0:
            errors.append(f"holder_rho={self.holder_rho:g} out of (0,1)")
        bad = [p for p in self.w1p_exponents if not 1.0 < p < math.inf]
        if bad:
            errors.append(f"W^1,p exponents must lie in (1, inf): {bad}")
        if any(e <= 0 for e in self.eps_list):
            errors.append("eps values must be positive")
        return errors


@dataclass(frozen=True)
class Window:
    """Ball ``B(center, R)`` (interior) or half-ball on a flat face (boundary).

    ``radii`` fixes the inner radii; when empty they are generated per
    ``eps`` as ``R/2 * 2^{-k/2}`` down to ``eps``.
    """

    center: tuple
    R: float
    kind: str = "interior"
    radii: tuple = ()

    def check(self, grid) -> None:
        c = np.asarray(self.center, dtype=float)
        L = grid.length
        dist = np.minimum(c, L - c)
        if self.kind == "interior":
            if not dist.min() > self.R:
                raise ValueError(f"interior window B({list(c)}, {self.R}) leaves the domain")
        elif self.kind == "boundary":
            on_face = np.isclose(dist, 0.0)
            if on_face.sum() != 1:
                raise ValueError("boundary window must be centred on exactly one face")
            tangential = dist[~on_face]
            if not tangential.min() > self.R:
                raise ValueError("boundary window reaches a corner or edge of the box")
        else:
            raise ValueError(f"unknown window kind {self.kind!r}")

    def radii_for(self, eps: float, upper: float | None = None) -> list[float]:
        if self.radii:
            if any(r < eps * (1 - 1e-12) for r in self.radii):
                raise ValueError(f"radius below eps = {eps:g} requested")
            return [float(r) for r in self.radii]
        top = self.R / 2 if upper is None else upper
        out, k = [], 0
        while True:
            r = top * 2.0 ** (-k / 2)
            if r < eps * (1 - 1e-12):
                break
            out.append(r)
            k += 1
        return out


# --- reports ------------------------------------------------------------------------


@dataclass
class EstimateReport:
    estimate: str
    rows: list = field(default_factory=list)  # (eps, r, lhs, rhs, ratio)
    provenance: dict = field(default_factory=dict)
    band: float = 0.25

    def add(self, eps, r, lhs, rhs):
        ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else math.inf)
        self.rows.append((float(eps), float(r), float(lhs), float(rhs), float(ratio)))

    def extend(self, other: "EstimateReport") -> "EstimateReport":
        self.rows.extend(other.rows)
        return self

    def max_ratio_by_eps(self) -> dict:
        out = {}
        for eps, _, _, _, ratio in self.rows:
            out[eps] = max(out.get(eps, 0.0), ratio)
        return dict(sorted(out.items(), reverse=True))

    def band_variation(self) -> float:
        """``max_eps |M(eps) / M(eps_max) - 1|`` for the per-eps maximum ratio ``M``."""
        m = self.max_ratio_by_eps()
        if not m:
            return 0.0
        ref = m[max(m)]
        if ref == 0:
            return 0.0 if all(v == 0 for v in m.values()) else math.inf
        return max(abs(v / ref - 1.0) for v in m.values())

    def trend_slope(self) -> float:
        """Least-squares slope of ``log M(eps)`` against ``log eps``."""
        m = {e: v for e, v in self.max_ratio_by_eps().items() if v > 0}
        if len(m) < 2:
            return 0.0
        x = np.log(list(m.keys()))
        y = np.log(list(m.values()))
        return float(np.polyfit(x, y, 1)[0])

    def uniform(self, band: float | None = None) -> bool:
        return self.band_variation() <= (self.band if band is None else band)

    def summary(self) -> dict:
        return {
            "estimate": self.estimate,
            "max_ratio": max((r[4] for r in self.rows), default=0.0),
            "max_ratio_by_eps": {f"{k:.10g}": v for k, v in self.max_ratio_by_eps().items()},
            "band": self.band,
            "band_variation": self.band_variation(),
            "uniform": self.uniform(),
            "trend_slope": self.trend_slope(),
            "provenance": self.provenance,
        }

    def csv_rows(self) -> list[list[str]]:
        return [[self.estimate, _fmt(e), _fmt(r), _fmt(lhs), _fmt(rhs), _fmt(ratio)]
                for e, r, lhs, rhs, ratio in self.rows]


CSV_COLUMNS = ["estimate", "eps", "r", "lhs", "rhs", "ratio"]


def _fmt(x: float) -> str:
    return f"{x:.12e}"


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rep in reports:
        w.writerows(rep.csv_rows())
    return buf.getvalue()


def spec_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# --- discrete norms ----------------------------------------------------------------------


def grad_magnitude(grid, u) -> np.ndarray:
    """``|grad u|`` (Frobenius) at cell centres."""
    g = disc.cell_gradient(grid, u)
    return np.sqrt(np.einsum("nij,nij->n", g, g))


def _avg(values, mask, power=2.0):
    return float(np.mean(np.abs(values[mask]) ** power) ** (1.0 / power))


def _cell_data(grid, func, width=None):
    if func is None:
        return np.zeros(grid.n_cells) if width is None else np.zeros((grid.n_cells, width))
    return np.asarray(func(grid.cell_points()), dtype=float)


def discrete_holder_seminorm(points, values, rho, all_pairs=True, n_pairs=100_000, seed=0) -> float:
    """``max |v(x) - v(y)| / |x - y|^rho`` over grid pairs (all, or seeded random pairs)."""
    values = np.asarray(values, dtype=float)
    n = len(values)
    if n < 2 or not np.any(values - values[0]):
        return 0.0
    best = 0.0
    if all_pairs:
        for i in range(n - 1):
            dv = np.abs(values[i + 1:] - values[i])
            dx = np.linalg.norm(points[i + 1:] - points[i], axis=1)
            best = max(best, float(np.max(dv / dx ** rho)))
        return best
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, n_pairs)
    j = rng.integers(0, n, n_pairs)
    keep = i != j
    i, j = i[keep], j[keep]
    dv = np.abs(values[i] - values[j])
    dx = np.linalg.norm(points[i] - points[j], axis=1)
    return float(np.max(dv / dx ** rho))


def _data_terms(problem, mask, R, config):
    """``||g||_inf + R^rho [g]_rho`` and ``R (avg |F|^q)^{1/q}`` over the window cells."""
    grid = problem.grid
    g = _cell_data(grid, problem.g)
    pts = grid.cell_points()[mask]
    gi = g[mask]
    g_sup = float(np.abs(gi).max()) if gi.size else 0.0
    g_semi = discrete_holder_seminorm(pts, gi, config.rho, grid.n <= config.all_pairs_max_n,
                                      config.pair_limit, config.seed)
    F = _cell_data(grid, problem.F, grid.dim)
    fmag = np.linalg.norm(F, axis=1)
    f_term = R * _avg(fmag, mask, config.q)
    return g_sup + R ** config.rho * g_semi, f_term


def _require_eps_window(eps, radii):
    if eps > 0 and any(r < eps * (1 - 1e-12) for r in radii):
        raise ValueError("radius below eps requested")


# --- interior estimates ---------------------------------------------------------------------


def _interior_sides(solution, problem, window, config, eps):
    grid = problem.grid
    window.check(grid)
    if eps >= window.R:
        raise ValueError(f"eps = {eps:g} is not below the window radius {window.R:g}")
    gm = grad_magnitude(grid, solution.u)
    p = solution.p
    maskR = disc.window_mask(grid, window.center, window.R)
    p_bar = float(p[maskR].mean())
    grad_R = _avg(gm, maskR)
    g_term, f_term = _data_terms(problem, maskR, window.R, config)
    radii = window.radii_for(eps)
    _require_eps_window(eps, radii)
    out = []
    for r in radii:
        m = disc.window_mask(grid, window.center, r)
        if not m.any():
            raise ValueError(f"ball of radius {r:g} contains no cells")
        out.append((r, _avg(gm, m), _avg(p - p_bar, m)))
    return out, grad_R, g_term, f_term


def interior_lipschitz_ratio(solution, problem, window: Window, config: EstimateConfig,
                             eps: float | None = None) -> EstimateReport:
    """Gradient-plus-pressure averages on ``B(x0, r)`` against the data on ``B(x0, R)``."""
    eps = problem.eps if eps is None else eps
    sides, grad_R, g_term, f_term = _interior_sides(solution, problem, window, config, eps)
    rep = EstimateReport("interior_lipschitz", band=config.band)
    for r, gr, pr in sides:
        rep.add(eps, r, gr + pr, grad_R + g_term + f_term)
    return rep


def pressure_oscillation_ratio(solution, problem, window: Window, config: EstimateConfig,
                               eps: float | None = None) -> EstimateReport:
    eps = problem.eps if eps is None else eps
    sides, grad_R, g_term, f_term = _interior_sides(solution, problem, window, config, eps)
    rep = EstimateReport("pressure_oscillation", band=config.band)
    for r, _, pr in sides:
        rep.add(eps, r, pr, grad_R + f_term + g_term)
    return rep


def full_lipschitz_ratio(solution, problem, window: Window, config: EstimateConfig,
                         eps: float | None = None, min_cells: int = 4) -> EstimateReport:
    """Sup norms on ``B(x0, R'/2)`` against data on ``B(x0, R')`` for ``R' = R 2^{-k}`` down to the grid scale."""
    coeff = problem.coefficients
    base = coeff.base if isinstance(coeff, ScaledField) else coeff
    if getattr(base, "holder_exponent", None) is None or getattr(base, "holder_seminorm", None) is None:
        raise ValueError("coefficient field carries no Hoelder metadata")
    eps = problem.eps if eps is None else eps
    grid = problem.grid
    window.check(grid)
    gm = grad_magnitude(grid, solution.u)
    p = solution.p
    rep = EstimateReport("full_lipschitz", band=config.band)
    Rk = window.R
    while Rk >= min_cells * grid.h:
        maskR = disc.window_mask(grid, window.center, Rk)
        half = disc.window_mask(grid, window.center, Rk / 2)
        if not half.any():
            break
        p_bar = float(p[maskR].mean())
        lhs = float(gm[half].max() + np.abs(p[half] - p_bar).max())
        g_term, f_term = _data_terms(problem, maskR, Rk, config)
        rep.add(eps, Rk, lhs, _avg(gm, maskR) + g_term + f_term)
        Rk /= 2
    return rep


# --- boundary estimates -----------------------------------------------------------------------


def _check_boundary_window(problem, window):
    window.check(problem.grid)
    if window.kind != "boundary":
        raise ValueError("boundary estimates need a window centred on a face")


def _boundary_data_in_window(problem, window) -> float:
    """Largest wall value of the boundary data inside the window."""
    grid = problem.grid
    ub = problem.boundary_values()
    c = np.asarray(window.center, dtype=float)
    best = 0.0
    for b in range(grid.dim):
        pts = grid.lattice_points(Lattice((b,)))
        vals = grid.component(ub, b).ravel()
        m = (~grid.interior_velocity[grid.face_offsets[b]:grid.face_offsets[b + 1]]) & (
            np.linalg.norm(pts - c, axis=1) < window.R)
        if m.any():
            best = max(best, float(np.abs(vals[m]).max()))
    for key, (s, e) in grid.trace_offsets.items():
        pts = grid.trace_points(key)
        m = np.linalg.norm(pts - c, axis=1) < window.R
        if m.any():
            best = max(best, float(np.abs(ub[s:e][m]).max()))
    return best


def boundary_holder_decay(solution, problem, window: Window, rho: float,
                          eps: float | None = None, band: float = 0.25) -> EstimateReport:
    """``(avg_{D_r} |grad u|^2)^{1/2}`` against ``(r/R)^{rho-1} (avg_{D_R} |grad u|^2)^{1/2}``."""
    _check_boundary_window(problem, window)
    if _boundary_data_in_window(problem, window) > 0:
        raise ValueError("boundary data does not vanish on the window face")
    eps = problem.eps if eps is None else eps
    grid = problem.grid
    gm = grad_magnitude(grid, solution.u)
    maskR = disc.window_mask(grid, window.center, window.R)
    grad_R = _avg(gm, maskR)
    rep = EstimateReport("boundary_holder", band=band)
    radii = window.radii_for(eps)
    _require_eps_window(eps, radii)
    for r in radii:
        m = disc.window_mask(grid, window.center, r)
        rep.add(eps, r, _avg(gm, m), (r / window.R) ** (rho - 1.0) * grad_R)
    return rep


def caccioppoli_ratio(solution, problem, window: Window, kind: str = "interior",
                      eps: float | None = None) -> EstimateReport:
    """Energy on a ball against ``r^-2 ||u||^2 + ||f||^2 + ||g||^2 + r^2 ||F||^2`` on the doubled ball.

    For boundary windows the balls are intersected with the box; the inner
    ball has radius ``r/2`` and the outer one ``r``, and the boundary data
    must vanish on the window face.
    """
    eps = problem.eps if eps is None else eps
    grid = problem.grid
    window.check(grid)
    if kind == "boundary":
        _check_boundary_window(problem, window)
        if _boundary_data_in_window(problem, window) > 0:
            raise ValueError("boundary data does not vanish on the window face")
    vol = grid.h ** grid.dim
    gm2 = grad_magnitude(grid, solution.u) ** 2
    u2 = np.sum(disc.cell_velocity(grid, solution.u) ** 2, axis=1)
    F2 = np.sum(_cell_data(grid, problem.F, grid.dim) ** 2, axis=1)
    f2 = np.sum(_cell_data(grid, problem.f, grid.dim ** 2) ** 2, axis=1)
    g2 = _cell_data(grid, problem.g) ** 2
    p = solution.p
    rep = EstimateReport(f"caccioppoli_{kind}")
    radii = window.radii or tuple(window.R * 2.0 ** (-k) for k in range(4))
    for r in radii:
        inner_r, outer_r = (r, 2 * r) if kind == "interior" else (r / 2, r)
        if kind == "interior" and not np.min(np.minimum(window.center, grid.length - np.asarray(window.center))) > outer_r:
            raise ValueError("doubled ball leaves the domain")
        m_in = disc.window_mask(grid, window.center, inner_r)
        m_out = disc.window_mask(grid, window.center, outer_r)
        if not m_in.any():
            continue
        lhs = vol * gm2[m_in].sum()
        if kind == "interior":
            pin = p[m_in]
            lhs += vol * float(np.sum((pin - pin.mean()) ** 2))
        rhs = vol * (u2[m_out].sum() / r ** 2 + f2[m_out].sum() + g2[m_out].sum()
                     + r ** 2 * F2[m_out].sum())
        rep.add(eps, r, lhs, rhs)
    return rep


# --- W^{1,p} sweeps -----------------------------------------------------------------------------


def boundary_data_norm(problem, q: float, refine: int = 4) -> float:
    """``||h||_{L^q(dOmega)} + ||d_tau h||_{L^q(dOmega)}`` from wall samples.

    A ``W^{1,q}`` bound on the trace that dominates the fractional norm of
    the boundary data.
    """
    if problem.h is None:
        return 0.0
    grid = problem.grid
    d, L = grid.dim, grid.length
    m = grid.n * refine
    t = (np.arange(m) + 0.5) * L / m
    dA = (L / m) ** (d - 1)
    val_sum = der_sum = 0.0
    for axis in range(d):
        for side in (0.0, L):
            tang = [k for k in range(d) if k != axis]
            mesh = np.meshgrid(*([t] * (d - 1)), indexing="ij")
            pts = np.zeros((mesh[0].size, d))
            pts[:, axis] = side
            for k, mk in zip(tang, mesh):
                pts[:, k] = mk.ravel()
            vals = np.asarray(problem.h(pts), dtype=float).reshape(mesh[0].shape + (d,))
            val_sum += dA * float(np.sum(np.linalg.norm(vals, axis=-1) ** q))
            grads = np.gradient(vals, L / m, axis=tuple(range(d - 1)))
            if d - 1 == 1:
                grads = [grads]
            gmag = np.sqrt(sum(np.sum(gk ** 2, axis=-1) for gk in grads))
            der_sum += dA * float(np.sum(gmag ** q))
    return val_sum ** (1 / q) + der_sum ** (1 / q)


def w1p_sides(solution, problem, q: float) -> tuple[float, float]:
    grid = problem.grid
    vol = grid.h ** grid.dim
    gm = grad_magnitude(grid, solution.u)
    p = solution.p - solution.p.mean()
    lhs = (vol * np.sum(gm ** q)) ** (1 / q) + (vol * np.sum(np.abs(p) ** q)) ** (1 / q)
    f = _cell_data(grid, problem.f, grid.dim ** 2)
    g = _cell_data(grid, problem.g)
    rhs = ((vol * np.sum(np.linalg.norm(f, axis=1) ** q)) ** (1 / q)
           + (vol * np.sum(np.abs(g) ** q)) ** (1 / q)
           + boundary_data_norm(problem, q))
    return float(lhs), float(rhs)


def w1p_norm_sweep(solutions, q_list=(4.0 / 3.0, 2.0, 3.0, 4.0), band: float = 0.20) -> dict:
    """Reports per exponent for ``[(eps, problem, solution), ...]``.

    The rows use ``r = 0`` since the estimate is global.
    """
    for q in q_list:
        if not any(math.isclose(q, s, rel_tol=1e-9) for s in (4.0 / 3.0, 2.0, 3.0, 4.0)):
            raise ValueError(f"q = {q:g} outside the sampled exponents {{4/3, 2, 3, 4}}")
    out = {}
    for q in q_list:
        rep = EstimateReport(f"w1p_q{q:.4g}", band=band)
        for eps, problem, sol in solutions:
            lhs, rhs = w1p_sides(sol, problem, q)
            rep.add(eps, 0.0, lhs, rhs)
        out[q] = rep
    return out


# --- two-scale comparison ---------------------------------------------------------------------------


def flux_test_panel(d: int, count: int = 10) -> list:
    """Fixed smooth test tensors ``Phi_k(x)`` in flat ``alpha*d + i`` order."""
    panel = []
    for k in range(count):
        slot = k % (d * d)
        freqs = [1 + (k + m) % 2 + (k // (d * d)) for m in range(d)]
        phase = 0.25 * math.pi * (k % 3)

        def phi(x, slot=slot, freqs=freqs, phase=phase):
            vals = np.ones(len(x))
            for m, fr in enumerate(freqs):
                vals = vals * np.cos(math.pi * fr * x[:, m] + phase * (m == 0))
            out = np.zeros((len(x), d * d))
            out[:, slot] = vals
            return out

        panel.append(phi)
    return panel


def pressure_test_function(d: int):
    def phi(x):
        return np.prod(np.cos(math.pi * x), axis=1)
    return phi


@dataclass
class TwoScaleErrors:
    eps: float
    l2: float
    h1: float
    corrected_h1: float
    flux_defects: list
    pressure_pairing: float
    interpolated: bool = False

    def as_dict(self) -> dict:
        return asdict(self)


def first_order_term(grid, u0, cset: CorrectorSet, eps: float):
    """``eps chi_j^beta(x/eps) d_j u0^beta`` on ``grid`` (faces and wall traces)."""
    d = grid.dim
    chi_eps, interpolated = corrector_field_at_scale(cset, eps, grid)
    grad0 = disc.cell_gradient(grid, u0)  # (n_cells, beta, j)
    out = np.zeros(grid.n_velocity)
    for a in range(d):
        lat = Lattice((a,))
        s0, s1 = grid.face_offsets[a], grid.face_offsets[a + 1]
        avg = grid.averaging(grid.center, lat)
        for j in range(d):
            for b in range(d):
                out[s0:s1] += chi_eps[j, b, s0:s1] * (avg @ grad0[:, b, j])
    for key, (s, e) in grid.trace_offsets.items():
        a, wall, side = key
        lat = Lattice((a, wall))
        avg = grid.averaging(grid.center, lat)
        shape = grid.lattice_shape(lat)
        for j in range(d):
            for b in range(d):
                gvals = (avg @ grad0[:, b, j]).reshape(shape)
                gvals = np.take(gvals, [0 if side == 0 else grid.n], axis=wall).ravel()
                out[s:e] += chi_eps[j, b, s:e] * gvals
    return out, interpolated


def two_scale_error(problem, sol_eps, sol_hom, eff, cset: CorrectorSet, eps: float,
                    panel=None) -> TwoScaleErrors:
    grid = problem.grid
    if eps > 0:
        m = eps / grid.h
        if abs(m - round(m)) > 1e-9:
            raise disc.GridMismatchError("eps is not a multiple of the grid spacing")
    diff = sol_eps.u - sol_hom.u
    l2 = math.sqrt(disc.inner_velocity(grid, diff, diff))
    h1 = math.sqrt(l2 ** 2 + disc.gradient_norm_sq(grid, diff))
    corr, interpolated = first_order_term(grid, sol_hom.u, cset, eps)
    w = diff - corr
    corrected = math.sqrt(disc.inner_velocity(grid, w, w) + disc.gradient_norm_sq(grid, w))
    panel = flux_test_panel(grid.dim) if panel is None else panel
    defects = [abs(disc.flux_pairing(grid, problem.coefficients, sol_eps.u, phi)
                   - disc.flux_pairing(grid, eff, sol_hom.u, phi)) for phi in panel]
    phi_p = grid.sample_pressure(pressure_test_function(grid.dim))
    pp = abs(disc.inner_pressure(grid, sol_eps.p - sol_hom.p, phi_p))
    return TwoScaleErrors(eps, l2, h1, corrected, defects, pp, interpolated)


def two_scale_report(errors: list) -> list:
    reports = []
    names = ["two_scale_l2", "two_scale_h1", "two_scale_corrected_h1", "two_scale_pressure"]
    for name in names:
        rep = EstimateReport(name)
        attr = name.replace("two_scale_", "")
        attr = {"pressure": "pressure_pairing", "corrected_h1": "corrected_h1"}.get(attr, attr)
        for e in errors:
            rep.add(e.eps, 0.0, getattr(e, attr), 1.0)
        reports.append(rep)
    for k in range(len(errors[0].flux_defects) if errors else 0):
        rep = EstimateReport(f"two_scale_flux_{k}")
        for e in errors:
            rep.add(e.eps, 0.0, e.flux_defects[k], 1.0)
        reports.append(rep)
    return reports


def strictly_decreasing(values_by_eps: dict) -> bool:
    """True when the values decrease strictly as ``eps`` decreases."""
    seq = [values_by_eps[e] for e in sorted(values_by_eps, reverse=True)]
    return all(b < a for a, b in zip(seq, seq[1:]))


# --- Liouville structure -------------------------------------------------------------------------


@dataclass
class LiouvilleSolution:
    E: np.ndarray
    H: np.ndarray
    H_tilde: float
    u: np.ndarray  # on the patch box grid
    p: np.ndarray
    patch: BoxGrid


def _combine(cset, E):
    d = cset.dim
    # E[beta, j] multiplies chi[j, beta]
    chi = sum(E[b, j] * cset.chi[j, b] for j in range(d) for b in range(d))
    pi = sum(E[b, j] * cset.pi[j, b] for j in range(d) for b in range(d))
    return chi, pi


def assemble_liouville(cset: CorrectorSet, E, H, H_tilde, periods: int = 2) -> LiouvilleSolution:
    """``u = H + (P_j^beta + chi_j^beta) E_j^beta``, ``p = H~ + pi_j^beta E_j^beta`` on ``periods^d`` cells.

    ``E[beta, j]`` is the coefficient of ``P_j^beta`` so that ``grad u`` has
    mean ``E``.
    """
    d = cset.dim
    E = np.asarray(E, dtype=float).reshape(d, d)
    H = np.asarray(H, dtype=float).reshape(d)
    patch = BoxGrid(d, periods * cset.grid.n, float(periods))
    chi_t, _ = corrector_field_at_scale(cset, 1.0, patch)
    u = patch.sample_velocity(lambda x: H[None, :] + x @ E.T)
    for j in range(d):
        for b in range(d):
            if E[b, j] != 0.0:
                u += E[b, j] * chi_t[j, b]
    _, pi = _combine(cset, E)
    shape = (cset.grid.n,) * d
    p = H_tilde + np.tile(pi.reshape(shape), (periods,) * d).ravel()
    return LiouvilleSolution(E, H, float(H_tilde), u, p, patch)


def liouville_verify(coeff, cset: CorrectorSet, E, H, H_tilde, periods: int = 2) -> dict:
    """Momentum residual on the torus, divergence defect and the assembled fields.

    The momentum residual is ``|K chi_E + B^T pi_E + b_E| / |b_E|`` where
    ``b_E`` is the load of the affine part; constants contribute exactly
    nothing.  The divergence is taken on the assembled multi-period patch.
    """
    grid = cset.grid
    d = grid.dim
    E = np.asarray(E, dtype=float).reshape(d, d)
    K = disc.assemble_operator(grid, coeff)
    B = -(grid.h ** d) * grid.divergence_matrix
    chi, pi = _combine(cset, E)
    const = np.full(grid.n_velocity, 0.0)
    for b in range(d):
        const[grid.face_offsets[b]:grid.face_offsets[b + 1]] = np.asarray(H, dtype=float).reshape(d)[b]
    load = affine_load(grid, coeff, E.reshape(-1))
    res = K @ (chi + const) + B.T @ (pi + H_tilde) + load
    scale = np.linalg.norm(load)
    momentum = float(np.linalg.norm(res) / scale) if scale > 0 else float(np.linalg.norm(res))
    sol = assemble_liouville(cset, E, H, H_tilde, periods)
    div = disc.divergence(sol.patch, sol.u)
    div_defect = float(np.abs(div - np.trace(E)).max())
    return {"momentum_residual": momentum, "divergence_defect": div_defect, "solution": sol}


def liouville_family(cset: CorrectorSet):
    """The ``d^2 + d + 1`` generators: unit ``E``, unit ``H`` and ``H~ = 1``."""
    d = cset.dim
    members = []
    for b in range(d):
        for j in range(d):
            E = np.zeros((d, d))
            E[b, j] = 1.0
            members.append((f"E[{b},{j}]", E, np.zeros(d), 0.0))
    for b in range(d):
        H = np.zeros(d)
        H[b] = 1.0
        members.append((f"H[{b}]", np.zeros((d, d)), H, 0.0))
    members.append(("H~", np.zeros((d, d)), np.zeros(d), 1.0))
    return members


def numerical_rank(rows, rtol: float = 1e-8) -> tuple[int, np.ndarray]:
    s = np.linalg.svd(np.asarray(rows), compute_uv=False)
    return int(np.sum(s > rtol * s[0])), s


def liouville_rank_report(coeff, cset: CorrectorSet, periods: int = 2) -> dict:
    rows, members = [], []
    for name, E, H, Ht in liouville_family(cset):
        info = liouville_verify(coeff, cset, E, H, Ht, periods)
        sol = info.pop("solution")
        rows.append(np.concatenate([sol.u, sol.p]))
        members.append({"member": name, **info})
    rank, sv = numerical_rank(rows)
    d = cset.dim
    return {"rank": rank, "expected": d * d + d + 1, "singular_values": sv.tolist(),
            "members": members, "corrector_residual": cset.max_residual()}


def mean_gradient(grid, u, E=None) -> np.ndarray:
    """Cell-averaged gradient of a periodic field plus the constant part ``E``."""
    g = disc.cell_gradient(grid, u).mean(axis=0)
    return g if E is None else g + np.asarray(E).reshape(grid.dim, grid.dim)


def sublinear_liouville_check(cset: CorrectorSet, tol: float = 1e-10) -> dict:
    """Members whose mean gradient over a period vanishes, and their rank.

    The mean gradient of ``P + chi`` is ``grad P`` because periodic fields
    have gradients of mean zero, so only the constants survive.
    """
    grid = cset.grid
    d = grid.dim
    chi_means = np.array([[np.abs(mean_gradient(grid, cset.chi[j, b])).max() for b in range(d)]
                          for j in range(d)])
    zero_rows, entries = [], []
    for name, E, H, Ht in liouville_family(cset):
        chi, pi = _combine(cset, E)
        mg = mean_gradient(grid, chi, E)
        sublinear = bool(np.abs(mg).max() <= tol)
        entries.append({"member": name, "mean_gradient": mg.ravel().tolist(), "sublinear": sublinear})
        if sublinear:
            const = np.zeros(grid.n_velocity)
            for b in range(d):
                const[grid.face_offsets[b]:grid.face_offsets[b + 1]] = H[b]
            zero_rows.append(np.concatenate([chi + const, pi + Ht]))
    rank = numerical_rank(zero_rows)[0] if zero_rows else 0
    return {"members": entries, "sublinear_rank": rank, "expected": d + 1,
            "max_corrector_mean_gradient": float(chi_means.max())}
