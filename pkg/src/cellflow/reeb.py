"""Reeb graph of a cellular stream function and its averaged edge coefficients.

Each cell ``U_i`` becomes an edge ``I_i`` parametrized by ``y = |H|`` running from
the interior vertex ``O`` (``y = 0``, the separatrix) to the exterior vertex at the
cell's extremum (``y = h_max``).  On edge ``i`` the projected diffusion has
generator ``(a^2/2) d^2/dy^2 + b d/dy`` with

    T   = closed-orbit integral of dl/|grad H|           (flow period)
    a^2 = (integral of |grad H| dl) / T
    b   = sgn * (integral of lap H / |grad H| dl) / (2 T)

where ``sgn`` is the sign of ``H`` inside the cell.  Contour integrals are
computed by tracing the Hamiltonian flow ``x' = v(x)`` over one period, which
turns ``dl/|grad H|`` into ``dt``.
"""

from __future__ import annotations

import math
from collections import namedtuple
from dataclasses import dataclass

import numpy as np
from numba import njit
from numba.extending import is_jitted
from scipy.interpolate import PchipInterpolator

from .errors import CoefficientRange, QuadNoClosure
from .hamiltonian import SEPARATRIX, HamiltonianField

DEFAULT_LEVELS = 256
DEFAULT_QUAD_TOL = 1e-8
RICHARDSON_LEVELS = (1e-3, 5e-4, 2.5e-4)
_CLOSURE_TOL = 1e-6
_MAX_STEPS = 20_000_000

GraphPoint = namedtuple("GraphPoint", ["edge", "y"])


@njit
def _one(x1, x2):
    return 1.0


# --------------------------------------------------------------------------
# contour tracer
# --------------------------------------------------------------------------

@njit(inline="always")
def _rhs(kernel, integrand, x1, x2):
    _, g1, g2, lap = kernel(x1, x2)
    return -g2, g1, g1 * g1 + g2 * g2, lap, integrand(x1, x2)


@njit(inline="always")
def _rk4(kernel, integrand, x1, x2, h):
    # returns position update and increments of (t, flux, lap, user) integrals
    a1, a2, f1, l1, u1 = _rhs(kernel, integrand, x1, x2)
    b1, b2, f2, l2, u2 = _rhs(kernel, integrand, x1 + 0.5 * h * a1, x2 + 0.5 * h * a2)
    c1, c2, f3, l3, u3 = _rhs(kernel, integrand, x1 + 0.5 * h * b1, x2 + 0.5 * h * b2)
    d1, d2, f4, l4, u4 = _rhs(kernel, integrand, x1 + h * c1, x2 + h * c2)
    w = h / 6.0
    return (x1 + w * (a1 + 2 * b1 + 2 * c1 + d1),
            x2 + w * (a2 + 2 * b2 + 2 * c2 + d2),
            w * (f1 + 2 * f2 + 2 * f3 + f4),
            w * (l1 + 2 * l2 + 2 * l3 + l4),
            w * (u1 + 2 * u2 + 2 * u3 + u4))


@njit(inline="always")
def _project(kernel, x1, x2, level):
    h, g1, g2, _ = kernel(x1, x2)
    g = g1 * g1 + g2 * g2
    if g > 0.0:
        x1 += (level - h) * g1 / g
        x2 += (level - h) * g2 / g
    return x1, x2


@njit
def trace_contour(kernel, integrand, x01, x02, tol, lscale):
    """Integrate ``x' = v`` around the closed orbit through ``x0``.

    ``lscale`` bounds the displacement per step (a fraction of the orbit size).
    Returns ``(T, flux, lap_int, user_int, closure_gap, nsteps)`` where the three
    integrals are time integrals of ``|grad H|^2``, ``lap H`` and ``integrand``.
    """
    level = kernel(x01, x02)[0]
    _, g1, g2, _ = kernel(x01, x02)
    v01 = -g2
    v02 = g1
    vn = math.sqrt(v01 * v01 + v02 * v02)
    x1 = x01
    x2 = x02
    t = 0.0
    fl = 0.0
    la = 0.0
    us = 0.0
    h = 1e-3 / max(vn, 1e-3)
    s_prev = 0.0
    maxd = 0.0
    accepted = 0
    for _ in range(_MAX_STEPS):
        _, g1, g2, _ = kernel(x1, x2)
        sp = math.sqrt(g1 * g1 + g2 * g2)
        if h * sp > lscale:
            h = lscale / sp
        # step doubling: one full step vs two half steps
        y1, y2, df, dl, du = _rk4(kernel, integrand, x1, x2, h)
        z1, z2, ef, el, eu = _rk4(kernel, integrand, x1, x2, 0.5 * h)
        z1, z2, ef2, el2, eu2 = _rk4(kernel, integrand, z1, z2, 0.5 * h)
        ef += ef2
        el += el2
        eu += eu2
        err = max(abs(z1 - y1), abs(z2 - y2)) / 15.0
        if err > tol and h > 1e-14:
            h *= max(0.2, 0.9 * (tol / err) ** 0.2)
            continue
        n1 = z1 + (z1 - y1) / 15.0
        n2 = z2 + (z2 - y2) / 15.0
        nf = ef + (ef - df) / 15.0
        nl = el + (el - dl) / 15.0
        nu = eu + (eu - du) / 15.0
        s_new = (n1 - x01) * v01 + (n2 - x02) * v02
        d_new = math.sqrt((n1 - x01) ** 2 + (n2 - x02) ** 2)
        if s_prev < 0.0 and s_new >= 0.0 and d_new < 0.3 * maxd:
            # closing step: find the partial step landing on the start hyperplane
            tau = h * (-s_prev) / (s_new - s_prev)
            for _k in range(30):
                q1, q2, qf, ql, qu = _rk4(kernel, integrand, x1, x2, tau)
                s = (q1 - x01) * v01 + (q2 - x02) * v02
                _, r1, r2, _ = kernel(q1, q2)
                ds = -r2 * v01 + r1 * v02
                if ds == 0.0:
                    break
                step = s / ds
                tau -= step
                if abs(step) < 1e-15 * (1.0 + abs(tau)):
                    break
            q1, q2, qf, ql, qu = _rk4(kernel, integrand, x1, x2, tau)
            gap = math.sqrt((q1 - x01) ** 2 + (q2 - x02) ** 2)
            return t + tau, fl + qf, la + ql, us + qu, gap, accepted
        x1 = n1
        x2 = n2
        t += h
        fl += nf
        la += nl
        us += nu
        s_prev = s_new
        if d_new > maxd:
            maxd = d_new
        accepted += 1
        if accepted % 16 == 0:
            x1, x2 = _project(kernel, x1, x2, level)
        if err > 0.0:
            h *= min(4.0, 0.9 * (tol / err) ** 0.2)
        else:
            h *= 4.0
    return t, fl, la, us, math.inf, accepted


@njit
def _level_point(kernel, e1, e2, d1, d2, target, scan):
    """First point on the ray ``e + r d`` with ``|H| = target`` (scan then bisect)."""
    r_lo = 0.0
    r_hi = 0.0
    found = False
    for k in range(1, 1_000_000):
        r = k * scan
        if abs(kernel(e1 + r * d1, e2 + r * d2)[0]) <= target:
            r_hi = r
            r_lo = r - scan
            found = True
            break
    if not found:
        return math.nan, math.nan
    for _ in range(200):
        m = 0.5 * (r_lo + r_hi)
        if abs(kernel(e1 + m * d1, e2 + m * d2)[0]) > target:
            r_lo = m
        else:
            r_hi = m
        if r_hi - r_lo < 1e-16:
            break
    x1 = e1 + r_hi * d1
    x2 = e2 + r_hi * d2
    sgn = 1.0 if kernel(e1, e2)[0] > 0 else -1.0
    for _ in range(5):
        x1, x2 = _project(kernel, x1, x2, sgn * target)
    return x1, x2


def _as_integrand(fn):
    if fn is None:
        return _one
    return fn if is_jitted(fn) else njit(fn)


def _trace(field: HamiltonianField, cell, h, integrand=None, quad_tol=DEFAULT_QUAD_TOL):
    hmax = field.h_max[cell]
    if not 0.0 < h < hmax:
        raise CoefficientRange(f"level {h!r} outside (0, {hmax!r}) for cell {cell}")
    e = field.extrema[cell]
    scan = 1e-3 * float(min(field.period))
    x1, x2 = _level_point(field.kernel, float(e[0]), float(e[1]), 1.0, 0.0, float(h), scan)
    if not np.isfinite(x1):
        raise QuadNoClosure(f"no point at level {h} found from extremum of cell {cell}")
    # local step tolerance well below the requested relative accuracy
    tol = max(quad_tol * 1e-4, 1e-14)
    lscale = 0.05 * math.hypot(x1 - e[0], x2 - e[1])
    T, fl, la, us, gap, _ = trace_contour(field.kernel, _as_integrand(integrand),
                                          x1, x2, tol, lscale)
    if not gap < _CLOSURE_TOL:
        raise QuadNoClosure(f"contour at level {h} in cell {cell} did not close "
                            f"(gap {gap:g})")
    return T, fl, la, us


# --------------------------------------------------------------------------
# public quadrature API
# --------------------------------------------------------------------------

def gamma_project(field: HamiltonianField, x):
    """``Gamma(x) = (cell, |H(x)|)``; separatrix points map to ``O = (SEPARATRIX, 0)``."""
    c = field.cell_of(x)
    if c == SEPARATRIX:
        return GraphPoint(SEPARATRIX, 0.0)
    return GraphPoint(c, abs(field.H(x)))


def contour_quadrature(field, cell, h, integrand, quad_tol=DEFAULT_QUAD_TOL):
    """Closed-orbit integral of ``integrand * dl / |grad H|`` on ``{|H| = h}`` in ``cell``.

    ``integrand(x1, x2)`` must be numba-compilable.
    """
    return _trace(field, cell, h, integrand, quad_tol)[3]


def edge_coefficients(field, edge, y, quad_tol=DEFAULT_QUAD_TOL):
    """Direct quadrature of ``(a^2, b, T)`` at level ``y`` on ``edge``."""
    T, fl, la, _ = _trace(field, edge, y, None, quad_tol)
    sgn = float(field.cell_signs[edge])
    return fl / T, sgn * la / (2.0 * T), T


def boundary_flux(field, cell, levels=RICHARDSON_LEVELS):
    """Separatrix limit of the closed-orbit flux integral by three-level Richardson.

    ``levels`` must be a geometric sequence with ratio 1/2 (relative to h_max).
    """
    hmax = field.h_max[cell]
    f = [_trace(field, cell, lv * hmax)[1] for lv in levels]
    # eliminates the O(h) and O(h^2) terms
    return (8.0 * f[2] - 6.0 * f[1] + f[0]) / 3.0


def gluing_weights(field, unnormalized=False):
    """Vertex weights ``alpha_i`` proportional to the boundary flux of each cell."""
    w = np.array([boundary_flux(field, k) for k in range(field.n_cells)])
    return w if unnormalized else w / w.sum()


# --------------------------------------------------------------------------
# Reeb graph with interpolated coefficient tables
# --------------------------------------------------------------------------

CoefTables = namedtuple("CoefTables", [
    "kind",     # 0: tabulated, 1: constant coefficients
    "hmax",     # (E,)
    "u0",       # (E,) log of lowest grid level
    "du",       # (E,) log spacing
    "coef",     # (E, 3, 4, n-1) PCHIP pieces for a2, b, T in log y
    "below",    # (E, 5) T = c0 + c1 log(1/y), flux const, b = b0 + b1 y
    "top",      # (E, 6) last grid level values (a2, b, T) and limits at h_max
    "const",    # (E, 2) constant (a2, b)
])


@njit(inline="always")
def _pchip_eval(c, q, k, s):
    return ((c[q, 0, k] * s + c[q, 1, k]) * s + c[q, 2, k]) * s + c[q, 3, k]


@njit
def coef_lookup(tab, edge, y):
    """``(a^2, b)`` on ``edge`` at level ``y``; NaNs outside ``[0, h_max]``."""
    hmax = tab.hmax[edge]
    if not (0.0 <= y <= hmax):
        return math.nan, math.nan
    if tab.kind == 1:
        return tab.const[edge, 0], tab.const[edge, 1]
    nint = tab.coef.shape[3]
    ylo = math.exp(tab.u0[edge])
    yhi = math.exp(tab.u0[edge] + nint * tab.du[edge])
    if y < ylo:
        bl = tab.below[edge]
        if y <= 0.0:
            return 0.0, bl[3]
        return bl[2] / (bl[0] + bl[1] * math.log(1.0 / y)), bl[3] + bl[4] * y
    if y > yhi:
        tp = tab.top[edge]
        w = (y - yhi) / (hmax - yhi)
        return (1 - w) * tp[0] + w * tp[3], (1 - w) * tp[1] + w * tp[4]
    u = (math.log(y) - tab.u0[edge]) / tab.du[edge]
    k = int(u)
    if k >= nint:
        k = nint - 1
    s = (u - k) * tab.du[edge]
    return _pchip_eval(tab.coef[edge], 0, k, s), _pchip_eval(tab.coef[edge], 1, k, s)


@njit
def period_lookup(tab, edge, y):
    hmax = tab.hmax[edge]
    if not (0.0 < y <= hmax) or tab.kind == 1:
        return math.nan
    nint = tab.coef.shape[3]
    ylo = math.exp(tab.u0[edge])
    yhi = math.exp(tab.u0[edge] + nint * tab.du[edge])
    if y < ylo:
        bl = tab.below[edge]
        return bl[0] + bl[1] * math.log(1.0 / y)
    if y > yhi:
        tp = tab.top[edge]
        w = (y - yhi) / (hmax - yhi)
        return (1 - w) * tp[2] + w * tp[5]
    u = (math.log(y) - tab.u0[edge]) / tab.du[edge]
    k = min(int(u), nint - 1)
    return _pchip_eval(tab.coef[edge], 2, k, (u - k) * tab.du[edge])


@dataclass(frozen=True, eq=False)
class ReebGraph:
    """Star graph: one edge per cell glued at the interior vertex ``O``.

    ``levels``, ``a2``, ``b``, ``T`` hold the raw quadrature samples (one row per
    edge); ``tables`` carries the interpolation data consumed by numba kernels.
    """

    name: str
    n_edges: int
    h_max: np.ndarray
    alpha: np.ndarray
    boundary_flux: np.ndarray
    levels: np.ndarray
    a2: np.ndarray
    b: np.ndarray
    T: np.ndarray
    tables: CoefTables

    interior_vertex = GraphPoint(SEPARATRIX, 0.0)

    @property
    def edges(self):
        return [(i, float(self.h_max[i])) for i in range(self.n_edges)]

    def _check(self, edge, y):
        if not 0 <= edge < self.n_edges:
            raise CoefficientRange(f"edge {edge} out of range")
        if not 0.0 <= y <= self.h_max[edge]:
            raise CoefficientRange(f"level {y!r} outside [0, {self.h_max[edge]!r}]")

    def coefficients(self, edge, y):
        """Interpolated ``(a^2, b)``."""
        self._check(edge, y)
        return coef_lookup(self.tables, int(edge), float(y))

    def period(self, edge, y):
        self._check(edge, y)
        return period_lookup(self.tables, int(edge), float(y))

    @classmethod
    def constant(cls, n_edges=1, h_max=1e6, a2=1.0, b=0.0, alpha=None):
        """Graph with constant coefficients on every edge (reference problems)."""
        hm = np.full(n_edges, float(h_max))
        al = np.full(n_edges, 1.0 / n_edges) if alpha is None else np.asarray(alpha, float)
        al = al / al.sum()
        z1 = np.zeros(n_edges)
        tables = CoefTables(
            kind=1, hmax=hm, u0=z1.copy(), du=np.ones(n_edges),
            coef=np.zeros((n_edges, 3, 4, 1)), below=np.zeros((n_edges, 5)),
            top=np.zeros((n_edges, 6)),
            const=np.column_stack([np.full(n_edges, float(a2)), np.full(n_edges, float(b))]))
        empty = np.zeros((n_edges, 0))
        return cls(name="constant", n_edges=n_edges, h_max=hm, alpha=al,
                   boundary_flux=al.copy(), levels=empty, a2=empty, b=empty, T=empty,
                   tables=tables)


def level_grid(h_max, n=DEFAULT_LEVELS):
    return np.geomspace(1e-4 * h_max, (1.0 - 1e-4) * h_max, n)


def build_reeb_graph(field: HamiltonianField, n_levels=DEFAULT_LEVELS,
                     quad_tol=DEFAULT_QUAD_TOL):
    """Tabulate the edge coefficients of ``field`` and assemble the graph."""
    E = field.n_cells
    levels = np.empty((E, n_levels))
    A2 = np.empty_like(levels)
    B = np.empty_like(levels)
    TT = np.empty_like(levels)
    FL = np.empty_like(levels)
    coef = np.empty((E, 3, 4, n_levels - 1))
    below = np.empty((E, 5))
    top = np.empty((E, 6))
    u0 = np.empty(E)
    du = np.empty(E)
    for i in range(E):
        hmax = float(field.h_max[i])
        ys = level_grid(hmax, n_levels)
        sgn = float(field.cell_signs[i])
        for j, y in enumerate(ys):
            T, fl, la, _ = _trace(field, i, y, None, quad_tol)
            TT[i, j], FL[i, j] = T, fl
            A2[i, j] = fl / T
            B[i, j] = sgn * la / (2.0 * T)
        levels[i] = ys
        u = np.log(ys)
        u0[i] = u[0]
        du[i] = (u[-1] - u[0]) / (n_levels - 1)
        # evaluate on the exact uniform grid in log y used by the lookup
        ug = u0[i] + du[i] * np.arange(n_levels)
        for q, vals in enumerate((A2[i], B[i], TT[i])):
            coef[i, q] = PchipInterpolator(ug, vals).c
        # below the grid: fit T on the last decade, keep the flux, b linear in y
        m = ys <= 10.0 * ys[0]
        c1, c0 = np.polyfit(np.log(1.0 / ys[m]), TT[i, m], 1)
        b1, b0 = np.polyfit(ys[m], B[i, m], 1)
        below[i] = (c0, c1, FL[i, 0], b0, b1)
        e = field.extrema[i]
        hess = field.hessian(e)
        T_top = 2.0 * math.pi / math.sqrt(abs(np.linalg.det(hess)))
        b_top = sgn * field.eval(e)[2] / 2.0
        top[i] = (A2[i, -1], B[i, -1], TT[i, -1], 0.0, b_top, T_top)
    flux0 = gluing_weights(field, unnormalized=True)
    tables = CoefTables(kind=0, hmax=np.asarray(field.h_max, float), u0=u0, du=du,
                        coef=coef, below=below, top=top, const=np.zeros((E, 2)))
    return ReebGraph(name=field.name, n_edges=E, h_max=np.asarray(field.h_max, float),
                     alpha=flux0 / flux0.sum(), boundary_flux=flux0, levels=levels,
                     a2=A2, b=B, T=TT, tables=tables)


_GRAPH_CACHE = {}


def reeb_graph(field: HamiltonianField):
    """Cached default-resolution graph for ``field``."""
    key = id(field)
    if key not in _GRAPH_CACHE:
        _GRAPH_CACHE[key] = (field, build_reeb_graph(field))
    return _GRAPH_CACHE[key][1]


def reeb_table_rows(field, n_levels):
    """Rows ``(edge, y, a2, b, T)`` on the default geometric grid by direct quadrature."""
    rows = []
    for i in range(field.n_cells):
        for y in level_grid(float(field.h_max[i]), n_levels):
            a2, b, T = edge_coefficients(field, i, y)
            rows.append((i, y, a2, b, T))
    return rows
