"""Simulation of ``dX = (1/eps) v(X) dt + dW`` with excursion instrumentation.

Time stepping is Strang splitting: half a step of the Hamiltonian flow (RK4
substeps followed by a Newton projection back onto the starting level of H),
the exact Brownian increment, and another half step of the flow.  Because the
flow preserves H, the value of H at the end of a step is the value at the
post-noise point, so level-set events are decided on exact H values.

Stopping times are located by dyadic refinement of the macro step.  A macro
step whose endpoints show a crossing of an active target, or whose endpoints
are close enough that the Brownian bridge could have crossed, is split at its
midpoint.  The midpoint increment is a Brownian-bridge draw addressed by the
heap index of the sub-interval, so the refined path is a deterministic
function of ``(seed, path, step)``.  Events are declared on intervals of
length ``dt / 2**MAX_DEPTH`` (below ``1e-3 * dt``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, replace

import numpy as np
from numba import njit, prange

from .errors import CflViolation, ConfigError, MaxTimeExceeded
from .hamiltonian import HamiltonianField
from .rng import STREAM_BRIDGE, STREAM_START, STREAM_STEP, normal_pair, uniform_pair

# event kinds
EV_SEPARATRIX = 0
EV_SHELL = 1
EV_GATE = 2
EV_DOMAIN = 3
EV_END = 4
EV_MAXTIME = 5
EVENT_NAMES = ("separatrix", "shell", "gate", "domain", "end", "max_time")

# target bits
T_SEP = 1
T_SHELL = 2
T_GATE = 4
T_DOMAIN = 8

# run modes
MODE_FIRST = 0      # stop at the first event among the active targets
MODE_EXCURSION = 1  # alternate separatrix / shell hits
MODE_GATES = 2      # beta (separatrix) / alpha (shell or foreign gate) ledger

MAX_DEPTH = 10
_SPLIT_SIGMAS2 = 9.0  # bridge crossing probability below exp(-18) when skipped
_BEHIND_RADIUS = 0.1

STOP_RULES = {"time": 0, "separatrix": T_SEP, "shell": T_SHELL, "domain": T_DOMAIN}


@dataclass(frozen=True)
class Domain:
    """Scaled domain ``D_R = R * D`` with ``D`` a centered disk or square."""

    kind: str = "disk"  # "disk" (size = radius) or "square" (size = half side)
    size: float = 1.0
    R: float = 1.0

    @property
    def code(self):
        return {"disk": 1, "square": 2}[self.kind]

    @property
    def scaled(self):
        return self.size * self.R

    def contains(self, x):
        x = np.asarray(x, float)
        if self.kind == "disk":
            return np.hypot(x[..., 0], x[..., 1]) < self.scaled
        return np.max(np.abs(x), axis=-1) < self.scaled

    @classmethod
    def parse(cls, text, R=1.0):
        """``"disk:r"`` or ``"square:a"``."""
        try:
            kind, size = text.split(":")
            d = cls(kind.strip(), float(size), R)
            d.code
        except (ValueError, KeyError):
            raise ConfigError(f"bad domain {text!r}; expected disk:r or square:a") from None
        return d


@dataclass(frozen=True)
class SdeConfig:
    """Integrator settings.

    ``epsilon = inf`` or ``drift=False`` removes the advection; ``noise=False``
    removes the Brownian increment.  ``dt_macro=None`` picks ``epsilon / 10``
    (capped at 1e-3).
    """

    epsilon: float
    dt_macro: float | None = None
    delta_shell: float = 0.2
    theta_gate_halfwidth: float = 0.05
    seed: int = 0
    max_time: float = 1e4
    cfl_limit: float = 0.1
    drift: bool = True
    noise: bool = True
    h_tol_rel: float = 1e-3
    max_substeps: int = 1000

    @property
    def has_drift(self):
        return self.drift and math.isfinite(self.epsilon)

    @property
    def dt(self):
        if self.dt_macro is not None:
            return float(self.dt_macro)
        if not self.has_drift:
            return 1e-3
        return min(self.epsilon / 10.0, 1e-3)

    @property
    def h_tol(self):
        return self.delta_shell * self.h_tol_rel

    def substeps(self, vmax):
        """RK4 substeps per half step so that flow time * sup|v| <= cfl_limit."""
        if not self.has_drift:
            return 0
        n = max(1, math.ceil(0.5 * self.dt / self.epsilon * vmax / self.cfl_limit))
        if n > self.max_substeps:
            raise CflViolation(f"{n} substeps per half step exceed {self.max_substeps}")
        return n

    def validate(self, field: HamiltonianField):
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if not self.dt > 0:
            raise ConfigError("dt_macro must be positive")
        if not 0 < self.delta_shell < float(np.min(field.h_max)) / 4:
            raise ConfigError("delta_shell must lie in (0, min h_max / 4)")
        if not 0 <= self.seed < 2**63:
            raise ConfigError("seed must be in [0, 2**63)")
        self.substeps(max_speed(field))


_VMAX = {}


def max_speed(field: HamiltonianField, n=256):
    """``sup |v|`` estimated on a grid over the periodicity cell."""
    key = id(field)
    if key not in _VMAX:
        g1 = np.linspace(0, field.period[0], n, endpoint=False)
        g2 = np.linspace(0, field.period[1], n, endpoint=False)
        best = 0.0
        for a in g1:
            for b in g2:
                _, d1, d2, _ = field.kernel(a, b)
                best = max(best, math.hypot(d1, d2))
        _VMAX[key] = (field, 1.02 * best)
    return _VMAX[key][1]


def gate_geometry(field: HamiltonianField):
    """Gate lines through each saddle: the Hessian eigenvectors, shape ``(n, 2, 2)``.

    The eigenvectors of the Hessian bisect the separatrix branches at a saddle,
    so each one points into the corner of an adjacent cell.  For the canonical
    field they are the diagonals, which are exactly the level sets
    ``cos x1 -/+ cos x2 = 0`` of the transversal coordinate.
    """
    out = np.empty((len(field.saddles), 2, 2))
    for k, s in enumerate(field.saddles):
        _, vecs = np.linalg.eigh(field.hessian(s))
        out[k] = vecs.T
    return out


# --------------------------------------------------------------------------
# numba core
# --------------------------------------------------------------------------

@njit(inline="always")
def _rk4v(kernel, x1, x2, h):
    _, g1, g2, _ = kernel(x1, x2)
    a1, a2 = -g2, g1
    _, g1, g2, _ = kernel(x1 + 0.5 * h * a1, x2 + 0.5 * h * a2)
    b1, b2 = -g2, g1
    _, g1, g2, _ = kernel(x1 + 0.5 * h * b1, x2 + 0.5 * h * b2)
    c1, c2 = -g2, g1
    _, g1, g2, _ = kernel(x1 + h * c1, x2 + h * c2)
    d1, d2 = -g2, g1
    w = h / 6.0
    return x1 + w * (a1 + 2 * b1 + 2 * c1 + d1), x2 + w * (a2 + 2 * b2 + 2 * c2 + d2)


@njit(inline="always")
def _advect(kernel, x1, x2, tflow, nsub, level):
    """Flow for time ``tflow`` then project back onto ``H = level``."""
    if nsub == 0:
        return x1, x2
    h = tflow / nsub
    for _ in range(nsub):
        x1, x2 = _rk4v(kernel, x1, x2, h)
    H, g1, g2, _ = kernel(x1, x2)
    g = g1 * g1 + g2 * g2
    if g > 0.0:
        c = (level - H) / g
        # skip corrections that are not small (degenerate gradient near a saddle)
        if abs(c) * math.sqrt(g) < 1e-6:
            x1 += c * g1
            x2 += c * g2
    return x1, x2


@njit(inline="always")
def _nearest_saddle(saddles, p1, p2, x1, x2):
    best = 0
    bd = 1e300
    a1 = 0.0
    a2 = 0.0
    for k in range(saddles.shape[0]):
        d1 = x1 - saddles[k, 0]
        d1 -= p1 * math.floor(d1 / p1 + 0.5)
        d2 = x2 - saddles[k, 1]
        d2 -= p2 * math.floor(d2 / p2 + 0.5)
        dd = d1 * d1 + d2 * d2
        if dd < bd:
            bd = dd
            best = k
            a1 = x1 - d1
            a2 = x2 - d2
    return best, a1, a2, math.sqrt(bd)


@njit
def behind_saddle(kernel, saddles, p1, p2, x1, x2, radius):
    """Index of the saddle reached first by the backward flow from ``x``."""
    for _ in range(200000):
        k, _, _, d = _nearest_saddle(saddles, p1, p2, x1, x2)
        if d < radius:
            return k
        _, g1, g2, _ = kernel(x1, x2)
        sp = math.sqrt(g1 * g1 + g2 * g2)
        h = -min(0.05, 0.2 * d) / max(sp, 1e-3)
        x1, x2 = _rk4v(kernel, x1, x2, h)
    return -1


@njit(inline="always")
def _domain_dist(dom, dsize, x1, x2):
    if dom == 1:
        return dsize - math.sqrt(x1 * x1 + x2 * x2)
    if dom == 2:
        return dsize - max(abs(x1), abs(x2))
    return 1e300


@njit(inline="always")
def _domain_project(dom, dsize, x1, x2):
    if dom == 1:
        r = math.sqrt(x1 * x1 + x2 * x2)
        if r > 0:
            return x1 * dsize / r, x2 * dsize / r
    elif dom == 2:
        return min(max(x1, -dsize), dsize), min(max(x2, -dsize), dsize)
    return x1, x2


@njit(inline="always")
def _f_eval(fkind, fpar, R, x1, x2):
    if fkind == 0:
        return 1.0
    if fkind == 1:
        return math.cos(fpar[0] * x1 / R + fpar[1] * x2 / R)
    return 0.0


@njit(inline="always")
def _level_project(kernel, x1, x2, level):
    for _ in range(3):
        H, g1, g2, _ = kernel(x1, x2)
        g = g1 * g1 + g2 * g2
        if g <= 0.0:
            break
        x1 += (level - H) * g1 / g
        x2 += (level - H) * g2 / g
    return x1, x2


@njit(inline="always")
def _gate_cross(saddles, gdir, p1, p2, behind, rgate, delta,
                xa1, xa2, Ha, xb1, xb2, Hb, band):
    """Return (crossed, near, saddle) for the gate lines around ``x_b``'s saddle."""
    k, A1, A2, d = _nearest_saddle(saddles, p1, p2, xb1, xb2)
    if k == behind or d > rgate or abs(Ha) > delta or abs(Hb) > delta:
        return False, False, k
    ra1 = xa1 - A1
    ra2 = xa2 - A2
    if ra1 * ra1 + ra2 * ra2 > rgate * rgate:
        return False, False, k
    rb1 = xb1 - A1
    rb2 = xb2 - A2
    crossed = False
    near = False
    for j in range(2):
        e1 = gdir[k, j, 0]
        e2 = gdir[k, j, 1]
        ga = e1 * ra2 - e2 * ra1
        gb = e1 * rb2 - e2 * rb1
        if ga * gb < 0.0 or gb == 0.0:
            crossed = True
        elif abs(ga) * abs(gb) < band:
            near = True
    return crossed, near, k


@njit(parallel=True)
def _run_paths(kernel, x0, path_ids, seed, dt, eps_inv, nsub, noise, horizon,
               mode, targets0, delta, h_tol, halfwidth,
               saddles, gdir, p1, p2, rgate,
               dom, dsize, fkind, fpar, R,
               max_events, ev_kind, ev_t, ev_x, ev_H, ev_aux, ev_disp,
               out_x, out_t, out_fint, out_status, out_nev):
    npaths = x0.shape[0]
    sdt = math.sqrt(dt)
    for ip in prange(npaths):
        path = path_ids[ip]
        # dyadic stack: node, depth, ta, tb, Wa1, Wa2, Wb1, Wb2
        st_node = np.empty(2 * MAX_DEPTH + 4, np.int64)
        st_depth = np.empty(2 * MAX_DEPTH + 4, np.int64)
        st_f = np.empty((2 * MAX_DEPTH + 4, 6))
        x1 = x0[ip, 0]
        x2 = x0[ip, 1]
        xs1 = x1
        xs2 = x2
        Ha, ga1, ga2, _ = kernel(x1, x2)
        sa = math.sqrt(ga1 * ga1 + ga2 * ga2)
        t = 0.0
        nev = 0
        status = 0
        targets = targets0
        behind = -1
        maxdisp = 0.0
        fint = 0.0
        fa = _f_eval(fkind, fpar, R, x1, x2)
        done = False
        # events already satisfied at time 0
        if (targets & T_DOMAIN) and _domain_dist(dom, dsize, x1, x2) <= 0.0:
            ev_kind[ip, 0] = EV_DOMAIN
            ev_t[ip, 0] = 0.0
            ev_x[ip, 0, 0] = x1
            ev_x[ip, 0, 1] = x2
            ev_H[ip, 0] = Ha
            ev_aux[ip, 0] = -1
            ev_disp[ip, 0] = 0.0
            nev = 1
            done = True
        elif (targets & T_SEP) and abs(Ha) <= h_tol:
            ev_kind[ip, 0] = EV_SEPARATRIX
            ev_t[ip, 0] = 0.0
            ev_x[ip, 0, 0] = x1
            ev_x[ip, 0, 1] = x2
            ev_H[ip, 0] = Ha
            ev_aux[ip, 0] = -1
            ev_disp[ip, 0] = 0.0
            nev = 1
            if mode == MODE_FIRST or nev >= max_events:
                done = True
            elif mode == MODE_EXCURSION:
                targets = T_SHELL
            else:
                behind = behind_saddle(kernel, saddles, p1, p2, x1, x2, _BEHIND_RADIUS)
                ev_aux[ip, 0] = behind
                targets = T_SHELL | T_GATE
        elif mode == MODE_GATES and abs(Ha) < delta:
            # a start inside V^delta counts as just after a separatrix visit
            behind = behind_saddle(kernel, saddles, p1, p2, x1, x2, _BEHIND_RADIUS)
            targets = T_SHELL | T_GATE
        nstep = 0
        while not done:
            if t >= horizon:
                if mode == MODE_FIRST and targets != 0:
                    status = 1
                    kind = EV_MAXTIME
                else:
                    kind = EV_END
                if nev < max_events:
                    ev_kind[ip, nev] = kind
                    ev_t[ip, nev] = t
                    ev_x[ip, nev, 0] = x1
                    ev_x[ip, nev, 1] = x2
                    ev_H[ip, nev] = Ha
                    ev_aux[ip, nev] = -1
                    ev_disp[ip, nev] = maxdisp
                    nev += 1
                break
            hstep = min(dt, horizon - t)
            z1, z2 = normal_pair(seed, path, nstep, STREAM_STEP)
            sp = 0
            st_node[0] = 1
            st_depth[0] = 0
            st_f[0, 0] = 0.0
            st_f[0, 1] = hstep
            st_f[0, 2] = 0.0
            st_f[0, 3] = 0.0
            st_f[0, 4] = noise * sdt * math.sqrt(hstep / dt) * z1
            st_f[0, 5] = noise * sdt * math.sqrt(hstep / dt) * z2
            sp = 1
            while sp > 0:
                sp -= 1
                node = st_node[sp]
                depth = st_depth[sp]
                ta = st_f[sp, 0]
                tb = st_f[sp, 1]
                wa1 = st_f[sp, 2]
                wa2 = st_f[sp, 3]
                wb1 = st_f[sp, 4]
                wb2 = st_f[sp, 5]
                h = tb - ta
                tf = 0.5 * h * eps_inv
                y1, y2 = _advect(kernel, x1, x2, tf, nsub, Ha)
                y1 += wb1 - wa1
                y2 += wb2 - wa2
                Hb, gb1, gb2, _ = kernel(y1, y2)
                sb = math.sqrt(gb1 * gb1 + gb2 * gb2)
                xb1, xb2 = _advect(kernel, y1, y2, tf, nsub, Hb)
                # targets
                cross = 0
                maybe = False
                var = _SPLIT_SIGMAS2 * h * noise
                if targets & T_DOMAIN:
                    da = _domain_dist(dom, dsize, x1, x2)
                    db = _domain_dist(dom, dsize, xb1, xb2)
                    if db <= 0.0:
                        cross = EV_DOMAIN + 1
                    elif da * db < var:
                        maybe = True
                if cross == 0 and (targets & T_SEP):
                    if Ha * Hb <= 0.0 or abs(Hb) <= h_tol:
                        cross = EV_SEPARATRIX + 1
                    elif abs(Ha) * abs(Hb) < var * sa * sa:
                        maybe = True
                if cross == 0 and (targets & T_SHELL):
                    da = delta - abs(Ha)
                    db = delta - abs(Hb)
                    if db <= delta * 1e-3:
                        cross = EV_SHELL + 1
                    elif da * db < var * sa * sa:
                        maybe = True
                gk = -1
                if cross == 0 and (targets & T_GATE):
                    c, near, gk = _gate_cross(saddles, gdir, p1, p2, behind, rgate, delta,
                                              x1, x2, Ha, xb1, xb2, Hb,
                                              max(var, halfwidth * halfwidth))
                    if c:
                        cross = EV_GATE + 1
                    elif near:
                        maybe = True
                if (cross > 0 or maybe) and depth < MAX_DEPTH:
                    # split: bridge midpoint addressed by the heap index
                    m1, m2 = normal_pair(seed, path, nstep, STREAM_BRIDGE | node)
                    sm = noise * math.sqrt(0.25 * h)
                    wm1 = 0.5 * (wa1 + wb1) + sm * m1
                    wm2 = 0.5 * (wa2 + wb2) + sm * m2
                    tm = 0.5 * (ta + tb)
                    st_node[sp] = 2 * node + 1
                    st_depth[sp] = depth + 1
                    st_f[sp, 0] = tm
                    st_f[sp, 1] = tb
                    st_f[sp, 2] = wm1
                    st_f[sp, 3] = wm2
                    st_f[sp, 4] = wb1
                    st_f[sp, 5] = wb2
                    sp += 1
                    st_node[sp] = 2 * node
                    st_depth[sp] = depth + 1
                    st_f[sp, 0] = ta
                    st_f[sp, 1] = tm
                    st_f[sp, 2] = wa1
                    st_f[sp, 3] = wa2
                    st_f[sp, 4] = wm1
                    st_f[sp, 5] = wm2
                    sp += 1
                    continue
                # accept the interval
                if cross == EV_DOMAIN + 1:
                    xb1, xb2 = _domain_project(dom, dsize, xb1, xb2)
                elif cross == EV_SEPARATRIX + 1 and abs(Hb) > h_tol:
                    xb1, xb2 = _level_project(kernel, xb1, xb2, 0.0)
                    Hb = kernel(xb1, xb2)[0]
                elif cross == EV_SHELL + 1 and abs(abs(Hb) - delta) > delta * 1e-3:
                    lv = delta if Hb > 0 else -delta
                    xb1, xb2 = _level_project(kernel, xb1, xb2, lv)
                    Hb = kernel(xb1, xb2)[0]
                fb = _f_eval(fkind, fpar, R, xb1, xb2)
                fint += 0.5 * h * (fa + fb)
                fa = fb
                x1 = xb1
                x2 = xb2
                Ha = Hb
                sa = sb
                dd = math.sqrt((x1 - xs1) ** 2 + (x2 - xs2) ** 2)
                if dd > maxdisp:
                    maxdisp = dd
                if cross > 0:
                    kind = cross - 1
                    ev_kind[ip, nev] = kind
                    ev_t[ip, nev] = t + tb
                    ev_x[ip, nev, 0] = x1
                    ev_x[ip, nev, 1] = x2
                    ev_H[ip, nev] = Ha
                    ev_aux[ip, nev] = gk if kind == EV_GATE else -1
                    ev_disp[ip, nev] = maxdisp
                    nev += 1
                    if mode == MODE_FIRST or nev >= max_events:
                        done = True
                        t = t + tb
                        break
                    if mode == MODE_EXCURSION:
                        targets = T_SHELL if kind == EV_SEPARATRIX else T_SEP
                    else:
                        if kind == EV_SEPARATRIX:
                            behind = behind_saddle(kernel, saddles, p1, p2, x1, x2,
                                                   _BEHIND_RADIUS)
                            ev_aux[ip, nev - 1] = behind
                            targets = T_SHELL | T_GATE
                        else:
                            targets = T_SEP
            if not done:
                t += hstep
                nstep += 1
        out_x[ip, 0] = x1
        out_x[ip, 1] = x2
        out_t[ip] = t
        out_fint[ip] = fint
        out_status[ip] = status
        out_nev[ip] = nev


# --------------------------------------------------------------------------
# records
# --------------------------------------------------------------------------

@dataclass
class TrajectoryRecord:
    """Stopping-time ledger of one path.

    ``events`` is a structured array with fields ``kind, t, x1, x2, H, aux,
    maxdisp``; ``aux`` holds the crossed saddle for gate events and the saddle
    behind the landing point for separatrix events in gate mode.
    """

    path_id: int
    events: np.ndarray
    x_end: np.ndarray
    t_end: float
    flagged: bool = False
    f_integral: float = 0.0

    def times(self, kind):
        return self.events["t"][self.events["kind"] == kind]

    def states(self, kind):
        e = self.events[self.events["kind"] == kind]
        return np.column_stack([e["x1"], e["x2"]])

    @property
    def sigma(self):
        return self.times(EV_SEPARATRIX)

    @property
    def mu(self):
        return self.times(EV_SHELL)

    @property
    def S(self):
        """Displacements between successive separatrix visits."""
        return np.diff(self.states(EV_SEPARATRIX), axis=0)

    @property
    def T(self):
        """``T_0 = sigma_0`` followed by downcrossing durations ``sigma_n - mu_n``."""
        sig, mu = self.sigma, self.mu
        n = min(len(sig) - 1, len(mu))
        if len(sig) == 0:
            return np.empty(0)
        return np.concatenate([[sig[0]], sig[1:n + 1] - mu[:n]])

    @property
    def exit_time(self):
        t = self.times(EV_DOMAIN)
        return float(t[0]) if len(t) else math.inf

    @property
    def exit_point(self):
        s = self.states(EV_DOMAIN)
        return s[0] if len(s) else None


_EVENT_DTYPE = np.dtype([("kind", "i1"), ("t", "f8"), ("x1", "f8"), ("x2", "f8"),
                         ("H", "f8"), ("aux", "i4"), ("maxdisp", "f8")])


@dataclass
class EnsembleRecord:
    """Event ledgers of many paths stored as ``(paths, max_events)`` arrays."""

    path_ids: np.ndarray
    x0: np.ndarray
    kind: np.ndarray
    t: np.ndarray
    x: np.ndarray
    H: np.ndarray
    aux: np.ndarray
    maxdisp: np.ndarray
    n_events: np.ndarray
    x_end: np.ndarray
    t_end: np.ndarray
    f_integral: np.ndarray
    status: np.ndarray
    config: SdeConfig = dc_field(repr=False, default=None)

    def __len__(self):
        return len(self.path_ids)

    @property
    def flagged(self):
        return self.status != 0

    def __getitem__(self, i):
        n = int(self.n_events[i])
        ev = np.empty(n, dtype=_EVENT_DTYPE)
        ev["kind"] = self.kind[i, :n]
        ev["t"] = self.t[i, :n]
        ev["x1"] = self.x[i, :n, 0]
        ev["x2"] = self.x[i, :n, 1]
        ev["H"] = self.H[i, :n]
        ev["aux"] = self.aux[i, :n]
        ev["maxdisp"] = self.maxdisp[i, :n]
        return TrajectoryRecord(int(self.path_ids[i]), ev, self.x_end[i].copy(),
                                float(self.t_end[i]), bool(self.status[i]),
                                float(self.f_integral[i]))

    def event_rows(self):
        """Iterate ``(path_id, kind_name, t, x1, x2, H)`` in path order."""
        for i in range(len(self)):
            for j in range(int(self.n_events[i])):
                yield (int(self.path_ids[i]), EVENT_NAMES[self.kind[i, j]],
                       self.t[i, j], self.x[i, j, 0], self.x[i, j, 1], self.H[i, j])

    def excursion_table(self, m):
        """Per-path ``(T_0, S_1, T_1, ..., S_m)`` for paths run in excursion mode.

        Returns ``(T, S, complete)`` with ``T`` of shape ``(paths, m)`` holding
        ``T_0..T_{m-1}``, ``S`` of shape ``(paths, m, 2)`` and a mask of paths
        whose ledger reached ``sigma_m``.
        """
        P = len(self)
        T = np.full((P, m), np.nan)
        S = np.full((P, m, 2), np.nan)
        ok = np.zeros(P, bool)
        # excursion ledgers alternate sep, shell, sep, ... from the first event
        need = 2 * m + 1
        for i in range(P):
            k = self.kind[i, :self.n_events[i]]
            if len(k) < need or k[0] != EV_SEPARATRIX:
                continue
            sig_idx = np.arange(0, need, 2)
            mu_idx = np.arange(1, need, 2)
            if np.any(k[sig_idx] != EV_SEPARATRIX) or np.any(k[mu_idx] != EV_SHELL):
                continue
            ts = self.t[i, sig_idx]
            tm = self.t[i, mu_idx]
            xs = self.x[i, sig_idx]
            T[i, 0] = ts[0]
            T[i, 1:] = ts[1:m] - tm[:m - 1]
            S[i] = np.diff(xs, axis=0)
            ok[i] = True
        return T, S, ok

    def eta(self, field):
        """Cell of ``X(mu_1)``, the cell entered at the first upcrossing (-1 if none)."""
        out = np.full(len(self), -1)
        for i in range(len(self)):
            k = self.kind[i, :self.n_events[i]]
            w = np.nonzero(k == EV_SHELL)[0]
            if len(w):
                out[i] = field.cell_of(self.x[i, w[0]])
        return out


def _geometry(field):
    gdir = gate_geometry(field)
    sad = np.ascontiguousarray(field.saddles, dtype=np.float64)
    if len(sad) > 1:
        dmin = min(np.hypot(*((a - b) - field.period * np.round((a - b) / field.period)))
                   for i, a in enumerate(sad) for b in sad[i + 1:])
    else:
        dmin = float(min(field.period))
    return sad, gdir, 0.5 * dmin


def simulate(field: HamiltonianField, config: SdeConfig, x0, *, mode=MODE_FIRST,
             targets=0, horizon=None, max_events=8, domain: Domain | None = None,
             f="one", f_par=(0.0, 0.0), path_ids=None):
    """Run many independent paths; the workhorse behind every public entry point.

    ``x0`` has shape ``(paths, 2)``.  ``horizon`` defaults to ``config.max_time``.
    """
    config.validate(field)
    x0 = np.ascontiguousarray(np.atleast_2d(np.asarray(x0, dtype=np.float64)))
    P = x0.shape[0]
    if path_ids is None:
        path_ids = np.arange(P, dtype=np.int64)
    path_ids = np.ascontiguousarray(path_ids, dtype=np.int64)
    if (targets & T_DOMAIN) and domain is None:
        raise ConfigError("domain stop requested without a domain")
    horizon = config.max_time if horizon is None else float(horizon)
    nsub = config.substeps(max_speed(field))
    eps_inv = 1.0 / config.epsilon if config.has_drift else 0.0
    sad, gdir, rgate = _geometry(field)
    dom = domain.code if domain is not None else 0
    dsize = domain.scaled if domain is not None else 0.0
    R = domain.R if domain is not None else 1.0
    fkind = {"one": 0, "cosine": 1, "zero": 2}[f]
    fpar = np.asarray(f_par, dtype=np.float64)
    K = int(max_events)
    kind = np.full((P, K), -1, np.int8)
    t = np.zeros((P, K))
    xx = np.zeros((P, K, 2))
    H = np.zeros((P, K))
    aux = np.full((P, K), -1, np.int32)
    disp = np.zeros((P, K))
    out_x = np.zeros((P, 2))
    out_t = np.zeros(P)
    out_f = np.zeros(P)
    out_s = np.zeros(P, np.int8)
    out_n = np.zeros(P, np.int64)
    _run_paths(field.kernel, x0, path_ids, np.uint64(config.seed), config.dt, eps_inv,
               nsub, 1.0 if config.noise else 0.0, horizon, mode, targets,
               config.delta_shell, config.h_tol, config.theta_gate_halfwidth,
               sad, gdir, float(field.period[0]), float(field.period[1]), rgate,
               dom, dsize, fkind, fpar, R, K, kind, t, xx, H, aux, disp,
               out_x, out_t, out_f, out_s, out_n)
    return EnsembleRecord(path_ids, x0, kind, t, xx, H, aux, disp, out_n, out_x, out_t,
                          out_f, out_s, config)


def _stop_mask(stop):
    if isinstance(stop, str):
        stop = [stop]
    mask = 0
    for s in stop:
        if s not in STOP_RULES:
            raise ConfigError(f"unknown stop rule {s!r}")
        mask |= STOP_RULES[s]
    return mask


def integrate(field, config, x0, stop="time", horizon=None, domain=None, path_id=0):
    """Single path until the first event of ``stop`` (a rule name or a list of them).

    With ``stop="time"`` the path runs to ``horizon``.  A path that reaches
    ``config.max_time`` before its stopping event comes back flagged.
    """
    mask = _stop_mask(stop)
    if mask == 0 and horizon is None:
        raise ConfigError("stop='time' needs a horizon")
    hz = horizon if horizon is not None else config.max_time
    rec = simulate(field, config, [x0], mode=MODE_FIRST, targets=mask, horizon=hz,
                   max_events=2, domain=domain, path_ids=[path_id])
    return rec[0]


def excursion_decompose(field, config, x0, horizon, max_events=4096, path_id=0):
    """Full ``(mu_n, sigma_n)`` ledger of one path up to ``horizon``."""
    rec = simulate(field, config, [x0], mode=MODE_EXCURSION, targets=T_SEP,
                   horizon=horizon, max_events=max_events, path_ids=[path_id])
    return rec[0]


def excursion_ensemble(field, config, x0s, n_excursions, horizon=None, path_ids=None):
    """Many paths, each stopped at ``sigma_{n_excursions}``."""
    return simulate(field, config, x0s, mode=MODE_EXCURSION, targets=T_SEP,
                    horizon=horizon, max_events=2 * n_excursions + 1, path_ids=path_ids)


def saddle_gates(field, config, x0, horizon, max_events=4096, path_id=0):
    """Ledger of ``beta_n`` (separatrix) and ``alpha_n`` (shell or foreign-gate) events."""
    rec = simulate(field, config, [x0], mode=MODE_GATES, targets=T_SEP, horizon=horizon,
                   max_events=max_events, path_ids=[path_id])
    return rec[0]


def exit_time(field, config, x0, domain: Domain, path_id=0):
    """First exit from ``domain``; raises :class:`MaxTimeExceeded` past ``max_time``."""
    r = integrate(field, config, x0, stop="domain", domain=domain, path_id=path_id)
    if r.flagged:
        raise MaxTimeExceeded(f"no exit before t = {config.max_time}")
    return r.exit_time, r.exit_point


def exit_ensemble(field, config, x0s, domain, f="one", f_par=(0.0, 0.0), path_ids=None):
    return simulate(field, config, x0s, mode=MODE_FIRST, targets=T_DOMAIN, domain=domain,
                    max_events=2, f=f, f_par=f_par, path_ids=path_ids)


def displacement_ensemble(field, config, x0s, horizon, path_ids=None):
    """``X_horizon - x0`` for each path (no events)."""
    rec = simulate(field, config, x0s, mode=MODE_FIRST, targets=0, horizon=horizon,
                   max_events=1, path_ids=path_ids)
    return rec.x_end - rec.x0


# --------------------------------------------------------------------------
# starting points
# --------------------------------------------------------------------------

@njit
def _uniforms_for(seed, n, stream, out):
    for i in range(n):
        u, v = uniform_pair(seed, i, 0, stream)
        out[i, 0] = u
        out[i, 1] = v


def start_uniforms(seed, n, stream=STREAM_START):
    out = np.empty((n, 2))
    _uniforms_for(np.uint64(seed), n, stream, out)
    return out


def uniform_torus_points(field, n, seed):
    """Points uniform on the periodicity cell (the invariant law of X on the torus)."""
    return start_uniforms(seed, n) * field.period


def separatrix_points(field, n, seed):
    """Points on the separatrix of the periodicity cell.

    For the canonical field the separatrix is the union of the lines
    ``x1 in {0, pi}`` and ``x2 in {0, pi}`` and the points are uniform in arc
    length.  Other fields use Newton projection of uniform points onto
    ``H = 0`` (not arc-length uniform).
    """
    u = start_uniforms(seed, n)
    if field.name == "canonical":
        line = np.floor(u[:, 0] * 4).astype(int)  # which of the 4 lines
        pos = u[:, 1] * field.period[0]
        out = np.empty((n, 2))
        half = 0.5 * field.period[0]
        vert = line < 2
        out[vert, 0] = half * line[vert]
        out[vert, 1] = pos[vert]
        out[~vert, 0] = pos[~vert]
        out[~vert, 1] = half * (line[~vert] - 2)
        return out
    out = []
    pts = u * field.period
    for p in pts:
        x = p.copy()
        for _ in range(60):
            h, grad, _ = field.eval(x)
            g2 = grad @ grad
            if g2 < 1e-12:
                break
            step = h * grad / g2
            nrm = np.hypot(*step)
            if nrm > 0.2:
                step *= 0.2 / nrm
            x = x - step
            if abs(h) < 1e-14:
                break
        if abs(field.H(x)) < 1e-12:
            out.append(x)
    return np.array(out)[:n]


def with_seed(config: SdeConfig, seed):
    return replace(config, seed=int(seed))
