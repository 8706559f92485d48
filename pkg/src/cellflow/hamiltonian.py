"""Periodic cellular stream functions and their critical-point structure.

A field is described by a numba-compiled kernel ``kernel(x1, x2) -> (H, dH/dx1,
dH/dx2, laplacian H)``.  The canonical flow ``H = sin x1 sin x2`` (period 2*pi in
both directions) is built in with closed-form derivatives; other fields are
registered through :meth:`HamiltonianField.from_function`.

Cells are the connected components of the torus minus the separatrix
``{H = 0}``.  Each cell holds exactly one extremum and is identified by it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np
from numba import njit
from numba.extending import is_jitted

from .errors import StructureViolation

SEPARATRIX = -1
SEPARATRIX_TOL = 1e-12
TWO_PI = 2.0 * math.pi


@njit(cache=True)
def canonical_kernel(x1, x2):
    s1 = math.sin(x1)
    c1 = math.cos(x1)
    s2 = math.sin(x2)
    c2 = math.cos(x2)
    h = s1 * s2
    return h, c1 * s2, s1 * c2, -2.0 * h


@njit(cache=True)
def canonical_cell(x1, x2):
    # quadrant of the 2*pi torus: id = 2*j + i with i, j the half-period indices
    i = int(math.floor(x1 / math.pi)) % 2
    j = int(math.floor(x2 / math.pi)) % 2
    return 2 * j + i


@njit(cache=True)
def canonical_theta(x1, x2):
    # grad(theta) is orthogonal to grad(H) on {H = 0} with equal norm there
    return math.cos(x1) - math.cos(x2)


def _make_ascent_cell(kernel, extrema, signs, period):
    """Cell lookup by normalized gradient ascent of |H| to the cell's extremum."""
    ext = np.ascontiguousarray(extrema, dtype=np.float64)
    sg = np.ascontiguousarray(signs, dtype=np.float64)
    p1 = float(period[0])
    p2 = float(period[1])
    n = ext.shape[0]
    dmin = min(p1, p2)
    for a in range(n):
        for b in range(a + 1, n):
            d1 = (ext[a, 0] - ext[b, 0]) - p1 * round((ext[a, 0] - ext[b, 0]) / p1)
            d2 = (ext[a, 1] - ext[b, 1]) - p2 * round((ext[a, 1] - ext[b, 1]) / p2)
            dmin = min(dmin, math.hypot(d1, d2))
    r_id = 0.25 * dmin
    step = 0.02 * dmin

    @njit
    def cell(x1, x2):
        h, g1, g2, _ = kernel(x1, x2)
        s = 1.0 if h >= 0.0 else -1.0
        for _ in range(20000):
            best = -1
            for k in range(n):
                if sg[k] != s:
                    continue
                d1 = x1 - ext[k, 0]
                d1 -= p1 * math.floor(d1 / p1 + 0.5)
                d2 = x2 - ext[k, 1]
                d2 -= p2 * math.floor(d2 / p2 + 0.5)
                if d1 * d1 + d2 * d2 < r_id * r_id:
                    best = k
            if best >= 0:
                return best
            h, g1, g2, _ = kernel(x1, x2)
            g = math.sqrt(g1 * g1 + g2 * g2)
            if g < 1e-300:
                break
            x1 += s * step * g1 / g
            x2 += s * step * g2 / g
        # fallback: nearest extremum of the right sign
        best = 0
        bd = 1e300
        for k in range(n):
            if sg[k] != s:
                continue
            d1 = x1 - ext[k, 0]
            d1 -= p1 * math.floor(d1 / p1 + 0.5)
            d2 = x2 - ext[k, 1]
            d2 -= p2 * math.floor(d2 / p2 + 0.5)
            dd = d1 * d1 + d2 * d2
            if dd < bd:
                bd = dd
                best = k
        return best

    return cell


@dataclass(frozen=True, eq=False)
class HamiltonianField:
    """Immutable description of a periodic cellular stream function.

    Attributes
    ----------
    name : str
    period : ndarray, shape (2,)
        Period lengths along each axis (not normalized).
    kernel : numba dispatcher
        ``kernel(x1, x2) -> (H, H_x1, H_x2, lap H)``.
    saddles : ndarray, shape (n, 2)
        Saddle points on the periodicity cell.
    extrema : ndarray, shape (n, 2)
        One extremum per cell; row ``k`` belongs to cell ``k``.
    extremum_values : ndarray, shape (n,)
    cell_kernel : numba dispatcher
        ``cell_kernel(x1, x2) -> int`` cell index of a point off the separatrix.
    theta_kernel : numba dispatcher or None
        Global transversal coordinate when one is known in closed form.
    """

    name: str
    period: np.ndarray
    kernel: Callable
    saddles: np.ndarray
    extrema: np.ndarray
    extremum_values: np.ndarray
    cell_kernel: Callable
    theta_kernel: Callable | None = None
    hessian_fn: Callable | None = dc_field(default=None, repr=False)

    @property
    def n_cells(self):
        return len(self.extrema)

    @property
    def h_max(self):
        """``|H|`` at each cell's extremum (top of the corresponding graph edge)."""
        return np.abs(self.extremum_values)

    @property
    def cell_signs(self):
        return np.sign(self.extremum_values)

    # --- point evaluations -------------------------------------------------

    def eval(self, x):
        """Return ``(H, grad, laplacian)`` at ``x``."""
        h, g1, g2, lap = self.kernel(float(x[0]), float(x[1]))
        return h, np.array([g1, g2]), lap

    def H(self, x):
        return self.kernel(float(x[0]), float(x[1]))[0]

    def velocity(self, x):
        """``v = (-dH/dx2, dH/dx1)``."""
        _, g1, g2, _ = self.kernel(float(x[0]), float(x[1]))
        return np.array([-g2, g1])

    def hessian(self, x, step=1e-5):
        if self.hessian_fn is not None:
            return self.hessian_fn(x)
        x = np.asarray(x, dtype=float)
        out = np.empty((2, 2))
        for j in range(2):
            e = np.zeros(2)
            e[j] = step
            gp = self.eval(x + e)[1]
            gm = self.eval(x - e)[1]
            out[:, j] = (gp - gm) / (2 * step)
        return 0.5 * (out + out.T)

    def reduce(self, x):
        """Map a point of the plane onto the periodicity cell ``[0, p1) x [0, p2)``."""
        x = np.asarray(x, dtype=float)
        return np.mod(x, self.period)

    def cell_of(self, x, tol=SEPARATRIX_TOL):
        """Cell index of ``x`` or :data:`SEPARATRIX` when ``|H(x)| <= tol``."""
        if abs(self.H(x)) <= tol:
            return SEPARATRIX
        r = self.reduce(x)
        return int(self.cell_kernel(float(r[0]), float(r[1])))

    def critical_points(self):
        """Validate and return ``(saddles, extrema)``.

        ``extrema`` is a list of ``(position, H value, cell id)``.  Raises
        :class:`StructureViolation` on degenerate critical points, saddles off the
        zero level, a cell/saddle count mismatch or a one-saddle loop.
        """
        check_structure(self)
        extrema = [(self.extrema[k].copy(), float(self.extremum_values[k]), k)
                   for k in range(self.n_cells)]
        return self.saddles.copy(), extrema

    # --- construction ------------------------------------------------------

    @classmethod
    def from_function(cls, name, fn, period=(TWO_PI, TWO_PI), seed_grid=32,
                      dedup=1e-6):
        """Build a field from ``fn(x1, x2) -> (H, H_x1, H_x2, lap H)``.

        ``fn`` must be numba-compilable (plain arithmetic and ``math``); it is
        compiled here unless it is already a numba dispatcher.  Critical points are
        found by Newton iteration from a ``seed_grid x seed_grid`` grid.
        """
        kernel = fn if is_jitted(fn) else njit(fn)
        period = np.asarray(period, dtype=float)
        crit = _newton_critical_points(kernel, period, seed_grid, dedup)
        saddles, extrema, values = [], [], []
        for x in crit:
            hess = _fd_hessian(kernel, x)
            det = float(np.linalg.det(hess))
            if abs(det) <= 1e-8:
                raise StructureViolation(f"degenerate critical point at {x}")
            h = kernel(x[0], x[1])[0]
            if det < 0:
                saddles.append(x)
            else:
                extrema.append(x)
                values.append(h)
        saddles = np.array(saddles).reshape(-1, 2)
        extrema = np.array(extrema).reshape(-1, 2)
        values = np.array(values)
        order = np.lexsort((extrema[:, 0], extrema[:, 1]))
        extrema, values = extrema[order], values[order]
        saddles = saddles[np.lexsort((saddles[:, 0], saddles[:, 1]))]
        cell = _make_ascent_cell(kernel, extrema, np.sign(values), period)
        f = cls(name=name, period=period, kernel=kernel, saddles=saddles,
                extrema=extrema, extremum_values=values, cell_kernel=cell)
        check_structure(f)
        return f


def _fd_hessian(kernel, x, step=1e-5):
    out = np.empty((2, 2))
    for j in range(2):
        e = np.zeros(2)
        e[j] = step
        gp = np.array(kernel(x[0] + e[0], x[1] + e[1])[1:3])
        gm = np.array(kernel(x[0] - e[0], x[1] - e[1])[1:3])
        out[:, j] = (gp - gm) / (2 * step)
    return 0.5 * (out + out.T)


def _newton_critical_points(kernel, period, seed_grid, dedup):
    found = []
    g1s = (np.arange(seed_grid) + 0.5) / seed_grid * period[0]
    g2s = (np.arange(seed_grid) + 0.5) / seed_grid * period[1]
    for a in g1s:
        for b in g2s:
            x = np.array([a, b])
            ok = False
            for _ in range(50):
                _, d1, d2, _ = kernel(x[0], x[1])
                g = np.array([d1, d2])
                if np.hypot(*g) < 1e-13:
                    ok = True
                    break
                hess = _fd_hessian(kernel, x)
                try:
                    dx = np.linalg.solve(hess, -g)
                except np.linalg.LinAlgError:
                    break
                nrm = np.hypot(*dx)
                if nrm > 0.25 * min(period):
                    dx *= 0.25 * min(period) / nrm
                x = x + dx
            if not ok:
                _, d1, d2, _ = kernel(x[0], x[1])
                ok = np.hypot(d1, d2) < 1e-10
            if not ok:
                continue
            x = np.mod(x, period)
            # snap values within rounding of the period back to zero
            x[np.abs(x - period) < dedup] = 0.0
            dup = False
            for y in found:
                d = x - y
                d -= period * np.round(d / period)
                if np.hypot(*d) < dedup:
                    dup = True
                    break
            if not dup:
                found.append(x)
    return found


def check_structure(f):
    """Raise :class:`StructureViolation` unless ``f`` is an admissible cellular field."""
    for x in f.saddles:
        h, g1, g2, _ = f.kernel(x[0], x[1])
        if abs(h) >= 1e-10:
            raise StructureViolation(f"saddle at {x} off the zero level (H={h:g})")
        if math.hypot(g1, g2) >= 1e-10:
            raise StructureViolation(f"listed saddle {x} is not critical")
        if abs(np.linalg.det(f.hessian(x))) <= 1e-8:
            raise StructureViolation(f"degenerate saddle at {x}")
    for x in f.extrema:
        _, g1, g2, _ = f.kernel(x[0], x[1])
        if math.hypot(g1, g2) >= 1e-10:
            raise StructureViolation(f"listed extremum {x} is not critical")
        if abs(np.linalg.det(f.hessian(x))) <= 1e-8:
            raise StructureViolation(f"degenerate extremum at {x}")
    if len(f.saddles) != len(f.extrema):
        raise StructureViolation(
            f"{len(f.extrema)} cells but {len(f.saddles)} saddles on the torus")
    adj = saddle_cell_adjacency(f)
    for k in range(f.n_cells):
        touching = {s for s, cells in enumerate(adj) if k in cells}
        if len(touching) < 2:
            raise StructureViolation(f"cell {k} is bounded by a one-saddle loop")


def saddle_cell_adjacency(f, probe=1e-3):
    """For each saddle, the set of cells met by its four separatrix sectors."""
    out = []
    for x in f.saddles:
        w, v = np.linalg.eigh(f.hessian(x))
        cells = set()
        for col in range(2):
            for sgn in (-1.0, 1.0):
                p = x + sgn * probe * v[:, col]
                r = np.mod(p, f.period)
                cells.add(int(f.cell_kernel(r[0], r[1])))
        out.append(cells)
    return out


def _canonical_hessian(x):
    s1, c1 = math.sin(x[0]), math.cos(x[0])
    s2, c2 = math.sin(x[1]), math.cos(x[1])
    return np.array([[-s1 * s2, c1 * c2], [c1 * c2, -s1 * s2]])


def canonical_field():
    """``H = sin x1 sin x2`` on the 2*pi torus: 4 saddles, 4 cells."""
    pi = math.pi
    saddles = np.array([[0.0, 0.0], [pi, 0.0], [0.0, pi], [pi, pi]])
    extrema = np.array([[pi / 2, pi / 2], [3 * pi / 2, pi / 2],
                        [pi / 2, 3 * pi / 2], [3 * pi / 2, 3 * pi / 2]])
    values = np.array([1.0, -1.0, -1.0, 1.0])
    return HamiltonianField(
        name="canonical", period=np.array([TWO_PI, TWO_PI]), kernel=canonical_kernel,
        saddles=saddles, extrema=extrema, extremum_values=values,
        cell_kernel=canonical_cell, theta_kernel=canonical_theta,
        hessian_fn=_canonical_hessian)


def _skewed(x1, x2):
    a = 0.3
    s1 = math.sin(x1)
    c1 = math.cos(x1)
    s2 = math.sin(x2)
    c2 = math.cos(x2)
    m = 1.0 + a * s1
    h = s1 * s2 * m
    h1 = c1 * s2 * m + s1 * s2 * a * c1
    h2 = s1 * c2 * m
    # lap = d11 + d22 with d11 = s2*(-s1*m + 2*a*c1^2 - a*s1^2), d22 = -h
    lap = s2 * (-s1 * m + 2.0 * a * (c1 * c1 - s1 * s1)) - h
    return h, h1, h2, lap


_REGISTRY = {
    "canonical": canonical_field,
    "skewed": lambda: HamiltonianField.from_function("skewed", _skewed),
}
_CACHE = {}


def register_field(name, factory):
    """Register a zero-argument factory returning a :class:`HamiltonianField`."""
    _REGISTRY[name] = factory
    _CACHE.pop(name, None)


def get_field(name):
    if name not in _REGISTRY:
        raise KeyError(f"unknown field {name!r}; known: {sorted(_REGISTRY)}")
    if name not in _CACHE:
        _CACHE[name] = _REGISTRY[name]()
    return _CACHE[name]


def field_names():
    return sorted(_REGISTRY)
