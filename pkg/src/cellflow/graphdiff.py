"""Diffusion on the Reeb graph, vertex local time, and subordinated Brownian motion.

On edge ``i`` the process follows ``dY = b(i, Y) dt + a(i, Y) dW`` (Euler-Maruyama
with interpolated coefficients).  Near the interior vertex the step is reduced
to ``kappa * y^2 / a^2(y)`` so the logarithmic decay of ``a^2`` is resolved.

Vertex rule: when the path enters ``[0, s)`` (``s`` the vertex shell) it is at
``O``; an edge is drawn with probabilities ``alpha_i`` and the path restarts at
level ``2 s`` after an overshoot time ``(2 s)^2 / a^2 * tau_1``, where ``tau_1``
is the exit time of a standard Brownian motion from ``(-1, 1)``.  The exterior
vertex ``y = h_max`` reflects.

Hits of the levels ``delta`` (for downcrossing counts), of the vertex shell and
of the occupation-grid levels use the Brownian-bridge crossing probability
``exp(-2 d_a d_b / (a^2 dt))`` in addition to endpoint crossings.

Local time is normalized so that ``int_0^t f(Y) a^2(Y) ds = 2 int_G f L_t dy``;
for reflected Brownian motion this makes ``L_t(O)`` the semimartingale local
time of ``B`` at 0 (``E L_1 = sqrt(2/pi)``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange
from scipy import optimize

from .errors import CoefficientRange, NotSPD
from .reeb import GraphPoint, ReebGraph, coef_lookup
from .rng import STREAM_EXTRA, STREAM_STEP, STREAM_VERTEX, normal_pair, uniform_pair

DEFAULT_KAPPA = 0.04
_STREAM_LEVELS = 16      # + k // 2 for delta level k
_STREAM_W = 8            # subordinated Brownian increments
_STREAM_W_BRIDGE = 9
_STREAM_OCC = 1024       # + j // 2 for occupation level j


# --------------------------------------------------------------------------
# exit time of standard Brownian motion from (-1, 1)
# --------------------------------------------------------------------------

def exit_time_sf(t):
    """``P(tau_1 > t)`` for standard BM started at 0 leaving ``(-1, 1)``."""
    t = float(t)
    if t <= 0:
        return 1.0
    if t < 1.0:
        # image series, fast for small t
        s = 0.0
        for k in range(50):
            term = (-1) ** k * math.erfc((2 * k + 1) / math.sqrt(2 * t))
            s += term
            if abs(term) < 1e-18:
                break
        return 1.0 - 2.0 * s
    s = 0.0
    for k in range(50):
        term = (-1) ** k / (2 * k + 1) * math.exp(-((2 * k + 1) ** 2) * math.pi ** 2 * t / 8)
        s += term
        if abs(term) < 1e-18:
            break
    return 4.0 / math.pi * s


def _exit_quantile_table(n=4097):
    u = np.linspace(0.0, 1.0, n)
    q = np.empty(n)
    q[0] = 0.0
    for i in range(1, n - 1):
        q[i] = optimize.brentq(lambda t: (1.0 - exit_time_sf(t)) - u[i], 1e-6, 60.0,
                               xtol=1e-14)
    q[-1] = optimize.brentq(lambda t: exit_time_sf(t) - 1e-12, 1.0, 60.0)
    return q


_TAU1_Q = _exit_quantile_table()


@njit(inline="always")
def _tau1(u, table):
    x = u * (table.shape[0] - 1)
    k = int(x)
    if k >= table.shape[0] - 1:
        return table[-1]
    w = x - k
    return (1 - w) * table[k] + w * table[k + 1]


# --------------------------------------------------------------------------
# ensemble kernel
# --------------------------------------------------------------------------

@njit(inline="always")
def _pick_edge(cum, u):
    for i in range(cum.shape[0]):
        if u < cum[i]:
            return i
    return cum.shape[0] - 1


@njit(inline="always")
def _bridge_p(da, db, var):
    if var <= 0.0:
        return 0.0
    return math.exp(-2.0 * da * db / var)


@njit(parallel=True)
def _graph_kernel(tab, cum_alpha, tau_q, seed, path_ids, edge0, y0, dt, kappa, shell,
                  horizon, stop_at_vertex, deltas, obs_times, clock_target,
                  occ_lo, occ_hi, levels, sub_on, sub_chol, dom, dsize, fkind, fpar,
                  out_D, out_L, out_e, out_N, out_first, out_edge_time, out_choice,
                  out_hits, out_occ, out_ldown, out_y, out_edge, out_t, out_sub,
                  out_fint, out_exit):
    P = path_ids.shape[0]
    K = deltas.shape[0]
    M = obs_times.shape[0]
    NL = levels.shape[0]
    E = cum_alpha.shape[0]
    for ip in prange(P):
        path = path_ids[ip]
        edge = edge0
        y = y0
        t = 0.0
        step = 0
        hits = 0
        first = -1.0
        # delta ledgers: phase 0 before tau_0, 1 upcrossing, 2 downcrossing
        phase = np.zeros(K, np.int64)
        D = np.zeros(K, np.int64)
        N = np.zeros(K, np.int64)
        clock = np.zeros(K)
        e_at = np.full(K, -1.0)
        N_at = np.zeros(K, np.int64)
        armed = np.zeros(NL, np.bool_)
        iobs = 0
        w1 = 0.0
        w2 = 0.0
        fint = 0.0
        exited = False
        vertex_now = False
        if y < shell:
            vertex_now = True
        while True:
            # observation times use the count state at t
            while iobs < M and obs_times[iobs] <= t:
                for k in range(K):
                    out_D[ip, k, iobs] = D[k]
                out_L[ip, iobs] = hits * shell
                iobs += 1
            if vertex_now:
                # O: record, choose edge, restart at 2 * shell
                if first < 0.0:
                    first = t
                    if stop_at_vertex:
                        break
                hits += 1
                for k in range(K):
                    if phase[k] == 0:
                        phase[k] = 1
                    elif phase[k] == 2:
                        phase[k] = 1
                        D[k] += 1
                u1, u2 = uniform_pair(seed, path, step, STREAM_VERTEX)
                u3, u4 = uniform_pair(seed, path, step, STREAM_EXTRA)
                edge = _pick_edge(cum_alpha, u2)
                out_choice[ip, edge] += 1
                y = 2.0 * shell
                a2r, _ = coef_lookup(tab, edge, y)
                tov = y * y / a2r * _tau1(u3, tau_q)
                # clocks are stopped on upcrossings, which include this overshoot
                if sub_on:
                    fint += tov * (1.0 if fkind == 0 else math.cos(fpar[0] * w1 + fpar[1] * w2))
                t += tov
                out_edge_time[ip, edge] += tov
                vertex_now = False
                if sub_on and hits > 1:
                    z1, z2 = normal_pair(seed, path, hits, _STREAM_W)
                    sq = math.sqrt(shell)
                    n1 = w1 + sq * (sub_chol[0, 0] * z1)
                    n2 = w2 + sq * (sub_chol[1, 0] * z1 + sub_chol[1, 1] * z2)
                    da = dsize - (math.sqrt(w1 * w1 + w2 * w2) if dom == 1
                                  else max(abs(w1), abs(w2)))
                    db = dsize - (math.sqrt(n1 * n1 + n2 * n2) if dom == 1
                                  else max(abs(n1), abs(n2)))
                    w1 = n1
                    w2 = n2
                    if db <= 0.0:
                        exited = True
                    else:
                        # bridge correction with the normal variance along the radius
                        if dom == 1:
                            r = math.sqrt(w1 * w1 + w2 * w2)
                            e1 = w1 / r if r > 0 else 1.0
                            e2 = w2 / r if r > 0 else 0.0
                        elif abs(w1) >= abs(w2):
                            e1 = 1.0 if w1 >= 0 else -1.0
                            e2 = 0.0
                        else:
                            e1 = 0.0
                            e2 = 1.0 if w2 >= 0 else -1.0
                        q11 = sub_chol[0, 0] ** 2
                        q12 = sub_chol[0, 0] * sub_chol[1, 0]
                        q22 = sub_chol[1, 0] ** 2 + sub_chol[1, 1] ** 2
                        var = shell * (e1 * e1 * q11 + 2 * e1 * e2 * q12 + e2 * e2 * q22)
                        ub, _ = uniform_pair(seed, path, hits, _STREAM_W_BRIDGE)
                        if ub < _bridge_p(da, db, var):
                            exited = True
                    if exited:
                        break
                if t >= horizon and not sub_on:
                    # clock targets may still be pending
                    pass
            # termination
            if t >= horizon and iobs >= M:
                done = True
                for k in range(K):
                    if clock_target > 0.0 and e_at[k] < 0.0:
                        done = False
                if done:
                    break
            if t > 1e9:
                break
            a2, b = coef_lookup(tab, edge, y)
            h = dt
            lim = kappa * y * y / a2
            if lim < h:
                h = lim
            # cap at the next observation time
            if iobs < M and t + h > obs_times[iobs]:
                h = max(obs_times[iobs] - t, 1e-15)
            z, _ = normal_pair(seed, path, step, STREAM_STEP)
            yn = y + b * h + math.sqrt(a2 * h) * z
            hm = tab.hmax[edge]
            if yn > hm:
                yn = 2.0 * hm - yn
                if yn < 0.0:
                    yn = hm
            var = a2 * h
            # occupation side (left-point rule)
            if NL > 0 and occ_lo <= y <= occ_hi:
                out_occ[ip] += a2 * h
            # special clocks run except on upcrossings
            for k in range(K):
                if phase[k] != 1 and e_at[k] < 0.0 and clock_target > 0.0:
                    if clock[k] + h >= clock_target:
                        e_at[k] = t + (clock_target - clock[k])
                        N_at[k] = N[k]
                    clock[k] += h
            if sub_on:
                fint += h * (1.0 if fkind == 0 else math.cos(fpar[0] * w1 + fpar[1] * w2))
            out_edge_time[ip, edge] += h
            # delta-level hits on upcrossings
            for k in range(K):
                if phase[k] != 1:
                    continue
                # levels are measured from the shell, which plays the role of O
                dl = deltas[k] + shell
                hit = yn >= dl
                if not hit:
                    ua, ub = uniform_pair(seed, path, step, _STREAM_LEVELS + k // 2)
                    u = ua if k % 2 == 0 else ub
                    hit = u < _bridge_p(dl - y, dl - yn, var)
                if hit:
                    phase[k] = 2
                    N[k] += 1
            # occupation-grid level touches, processed in the direction of motion
            if NL > 0:
                lo = min(y, yn)
                hi = max(y, yn)
                reach = 6.0 * math.sqrt(var)
                for jj in range(NL):
                    j = jj if yn >= y else NL - 1 - jj
                    lv = levels[j]
                    if lv < lo - reach or lv > hi + reach:
                        continue
                    touched = lo <= lv <= hi
                    if not touched:
                        ua, ub = uniform_pair(seed, path, step, _STREAM_OCC + j // 2)
                        u = ua if j % 2 == 0 else ub
                        touched = u < _bridge_p(abs(y - lv), abs(yn - lv), var)
                    if touched:
                        if j + 1 < NL:
                            if armed[j]:
                                out_ldown[ip, j] += 1
                                armed[j] = False
                        if j >= 1:
                            armed[j - 1] = True
            # vertex shell
            if yn < shell:
                vertex_now = True
            else:
                u1, _ = uniform_pair(seed, path, step, STREAM_VERTEX)
                if u1 < _bridge_p(y - shell, yn - shell, var):
                    vertex_now = True
            y = yn
            t += h
            step += 1
        # observation times beyond the end of the loop
        while iobs < M:
            for k in range(K):
                out_D[ip, k, iobs] = D[k]
            out_L[ip, iobs] = hits * shell
            iobs += 1
        for k in range(K):
            out_e[ip, k] = e_at[k]
            out_N[ip, k] = N_at[k]
        out_first[ip] = first
        out_hits[ip] = hits
        out_y[ip] = y
        out_edge[ip] = edge
        out_t[ip] = t
        out_sub[ip, 0] = w1
        out_sub[ip, 1] = w2
        out_fint[ip] = fint
        out_exit[ip] = exited


@dataclass
class GraphEnsemble:
    """Per-path summaries of a graph-diffusion ensemble.

    ``D[p, k, m]`` downcrossing counts for ``deltas[k]`` at ``obs_times[m]``;
    ``L_shell[p, m]`` the vertex-shell local time (``shell * hits``);
    ``e_clock[p, k]`` and ``N[p, k]`` the special clock ``e^delta(clock_target)``
    and the upcrossings before it.
    """

    deltas: np.ndarray
    obs_times: np.ndarray
    D: np.ndarray
    L_shell: np.ndarray
    e_clock: np.ndarray
    N: np.ndarray
    first_hit: np.ndarray
    edge_time: np.ndarray
    edge_choices: np.ndarray
    vertex_hits: np.ndarray
    occupation: np.ndarray
    level_downcrossings: np.ndarray
    levels: np.ndarray
    y_end: np.ndarray
    edge_end: np.ndarray
    t_end: np.ndarray
    w_end: np.ndarray
    f_integral: np.ndarray
    exited: np.ndarray
    shell: float

    def local_time(self, k, m=-1):
        """``delta_k * D`` at observation ``m`` for every path."""
        return self.deltas[k] * self.D[:, k, m]


def default_shell(graph: ReebGraph):
    return min(1e-3 * float(np.min(graph.h_max)), 1e-3)


def graph_ensemble(graph: ReebGraph, y0: GraphPoint, horizon, dt, seed, paths, *,
                   deltas=(), obs_times=None, clock_target=0.0, occ_band=None,
                   level_spacing=None, stop_at_vertex=False, subordinate=None,
                   kappa=DEFAULT_KAPPA, shell=None, path_offset=0):
    """Simulate ``paths`` independent graph diffusions from ``y0``.

    ``subordinate = (Qs, domain)`` additionally runs ``W^{Qs}`` at the vertex
    local time and stops each path when ``W`` leaves ``domain`` (unscaled,
    ``domain.R`` ignored); ``f_integral`` then holds ``int f(W_{L_t}) dt``.
    """
    edge, yv = int(y0[0]), float(y0[1])
    if yv < 0 or (yv > 0 and not 0 <= edge < graph.n_edges) or \
            (edge >= 0 and yv > graph.h_max[edge]):
        raise CoefficientRange(f"invalid start point {y0!r}")
    if edge < 0:
        edge = 0
    shell = default_shell(graph) if shell is None else float(shell)
    deltas = np.asarray(deltas, dtype=np.float64)
    obs = np.asarray([horizon] if obs_times is None else obs_times, dtype=np.float64)
    if occ_band is not None:
        lo, hi = occ_band
        dl = level_spacing if level_spacing is not None else 0.01
        nlev = int(round((hi - lo) / dl)) + 1
        levels = lo + dl * np.arange(nlev)
    else:
        lo, hi = 0.0, -1.0
        levels = np.zeros(0)
    if subordinate is not None:
        Qs, domain = subordinate[:2]
        chol = spd_cholesky(Qs)
        dom = domain.code
        dsize = float(domain.size)
        fkind = 0
        fpar = np.zeros(2)
        if len(subordinate) > 2 and subordinate[2] is not None:
            fkind = 1
            fpar = np.asarray(subordinate[2], float)
        sub_on = True
    else:
        chol = np.eye(2)
        dom, dsize, fkind, fpar, sub_on = 0, 0.0, 0, np.zeros(2), False
    cum = np.cumsum(graph.alpha)
    cum[-1] = 1.0
    P = int(paths)
    K = len(deltas)
    M = len(obs)
    E = graph.n_edges
    out = dict(
        D=np.zeros((P, K, M), np.int64), L=np.zeros((P, M)), e=np.zeros((P, K)),
        N=np.zeros((P, K), np.int64), first=np.zeros(P), et=np.zeros((P, E)),
        ch=np.zeros((P, E), np.int64), hits=np.zeros(P, np.int64), occ=np.zeros(P),
        ld=np.zeros((P, max(len(levels) - 1, 0)), np.int64), y=np.zeros(P),
        edge=np.zeros(P, np.int64), t=np.zeros(P), sub=np.zeros((P, 2)),
        fint=np.zeros(P), exit=np.zeros(P, np.bool_))
    ids = np.arange(path_offset, path_offset + P, dtype=np.int64)
    _graph_kernel(graph.tables, cum, _TAU1_Q, np.uint64(seed), ids, edge, yv, float(dt),
                  float(kappa), shell, float(horizon), bool(stop_at_vertex), deltas, obs,
                  float(clock_target), float(lo), float(hi), levels, sub_on, chol, dom,
                  dsize, fkind, fpar, out["D"], out["L"], out["e"], out["N"],
                  out["first"], out["et"], out["ch"], out["hits"], out["occ"], out["ld"],
                  out["y"], out["edge"], out["t"], out["sub"], out["fint"], out["exit"])
    return GraphEnsemble(deltas, obs, out["D"], out["L"], out["e"], out["N"],
                         out["first"], out["et"], out["ch"], out["hits"], out["occ"],
                         out["ld"], levels, out["y"], out["edge"], out["t"], out["sub"],
                         out["fint"], out["exit"], shell)


# --------------------------------------------------------------------------
# single path with full ledger
# --------------------------------------------------------------------------

@njit
def _graph_path(tab, cum_alpha, tau_q, seed, path, edge, y, dt, kappa, shell, horizon,
                delta, sample_dt, s_t, s_edge, s_y, th, ta):
    t = 0.0
    step = 0
    ns = 0
    nth = 0
    nta = 0
    phase = 0
    next_sample = 0.0
    vertex_now = y < shell
    while True:
        while ns < s_t.shape[0] and next_sample <= t:
            s_t[ns] = t
            s_edge[ns] = edge
            s_y[ns] = y
            ns += 1
            next_sample += sample_dt
        if vertex_now:
            if phase == 0 or phase == 2:
                if nta < ta.shape[0]:
                    ta[nta] = t
                nta += 1
                phase = 1
            u1, u2 = uniform_pair(seed, path, step, STREAM_VERTEX)
            u3, u4 = uniform_pair(seed, path, step, STREAM_EXTRA)
            edge = _pick_edge(cum_alpha, u2)
            y = 2.0 * shell
            a2r, _ = coef_lookup(tab, edge, y)
            t += y * y / a2r * _tau1(u3, tau_q)
            vertex_now = False
        if t >= horizon:
            break
        a2, b = coef_lookup(tab, edge, y)
        h = min(dt, kappa * y * y / a2)
        z, _ = normal_pair(seed, path, step, STREAM_STEP)
        yn = y + b * h + math.sqrt(a2 * h) * z
        hm = tab.hmax[edge]
        if yn > hm:
            yn = 2.0 * hm - yn
            if yn < 0.0:
                yn = hm
        var = a2 * h
        if phase == 1:
            dl = delta + shell
            hit = yn >= dl
            if not hit:
                ua, _ = uniform_pair(seed, path, step, _STREAM_LEVELS)
                hit = ua < _bridge_p(dl - y, dl - yn, var)
            if hit:
                if nth < th.shape[0]:
                    th[nth] = t + h
                nth += 1
                phase = 2
        if yn < shell:
            vertex_now = True
        else:
            u1, _ = uniform_pair(seed, path, step, STREAM_VERTEX)
            if u1 < _bridge_p(y - shell, yn - shell, var):
                vertex_now = True
        y = yn
        t += h
        step += 1
    return ns, nth, nta


@dataclass
class GraphPath:
    """One graph-diffusion path sampled on a time grid, with its crossing ledger.

    ``theta`` and ``tau`` follow the recursion ``tau_0`` = first vertex visit,
    ``theta_n`` = first hit of ``delta`` after ``tau_{n-1}``, ``tau_n`` = next
    vertex visit.
    """

    t: np.ndarray
    edge: np.ndarray
    y: np.ndarray
    delta: float
    theta: np.ndarray
    tau: np.ndarray
    horizon: float

    def D(self, t):
        """Downcrossings completed by time ``t`` (counting starts after ``tau_0``)."""
        return int(max(np.searchsorted(self.tau, t, side="right") - 1, 0))

    @property
    def L_est(self):
        return self.delta * self.D(self.horizon)


def simulate_graph(graph: ReebGraph, y0: GraphPoint, horizon, dt, seed, delta=0.1,
                   sample_dt=None, kappa=DEFAULT_KAPPA, shell=None, path_id=0):
    """Single path with its sampled trajectory and full ``(theta_n, tau_n)`` ledger."""
    if dt > 1e-3 * horizon * (1 + 1e-12):
        raise CoefficientRange("dt must not exceed 1e-3 * horizon")
    edge, yv = int(y0[0]), float(y0[1])
    if edge < 0:
        edge = 0
    if not 0 <= yv <= graph.h_max[edge]:
        raise CoefficientRange(f"invalid start point {y0!r}")
    shell = default_shell(graph) if shell is None else float(shell)
    sample_dt = dt * 10 if sample_dt is None else sample_dt
    ns = int(horizon / sample_dt) + 2
    cap = 1024
    cum = np.cumsum(graph.alpha)
    cum[-1] = 1.0
    while True:
        s_t = np.zeros(ns)
        s_e = np.zeros(ns, np.int64)
        s_y = np.zeros(ns)
        th = np.zeros(cap)
        ta = np.zeros(cap)
        n, nth, nta = _graph_path(graph.tables, cum, _TAU1_Q, np.uint64(seed), path_id,
                                  edge, yv, float(dt), float(kappa), shell, float(horizon),
                                  float(delta), float(sample_dt), s_t, s_e, s_y, th, ta)
        if nth <= cap and nta <= cap:
            break
        cap = 2 * max(nth, nta)
    return GraphPath(s_t[:n], s_e[:n], s_y[:n], float(delta), th[:nth], ta[:nta],
                     float(horizon))


def local_time_downcrossing(path: GraphPath, t, delta):
    """``delta * D_t^delta`` from the path ledger."""
    if not np.isclose(delta, path.delta):
        raise ValueError("delta does not match the path ledger")
    return delta * path.D(t)


def special_clock(path: GraphPath, t, delta):
    """``(e^delta(t), N)``: wall time when the clock (stopped on upcrossings) reads ``t``.

    The clock runs on ``[0, tau_0)`` and ``[theta_n, tau_n)``; ``N`` counts the
    upcrossings completed before ``e^delta(t)``.  Returns ``(nan, N)`` when the
    ledger ends before the clock reaches ``t``.
    """
    if not np.isclose(delta, path.delta):
        raise ValueError("delta does not match the path ledger")
    tau, th = path.tau, path.theta
    # running intervals: [0, tau_0), [theta_1, tau_1), ...
    starts = np.concatenate([[0.0], th])
    ends = np.concatenate([tau[:len(starts)], np.full(max(len(starts) - len(tau), 0),
                                                      path.horizon)])
    ends = ends[:len(starts)]
    clock = 0.0
    for s, e in zip(starts, ends):
        if clock + (e - s) >= t:
            wall = s + (t - clock)
            return wall, int(np.searchsorted(th, wall, side="right"))
        clock += e - s
    return math.nan, len(th)


# --------------------------------------------------------------------------
# oracles
# --------------------------------------------------------------------------

@njit
def _coef_many(tab, edge, ys):
    a2 = np.empty(ys.shape[0])
    b = np.empty(ys.shape[0])
    for i in range(ys.shape[0]):
        a2[i], b[i] = coef_lookup(tab, edge, ys[i])
    return a2, b


_GL_N = 16
_GL_X, _GL_W = np.polynomial.legendre.leggauss(_GL_N)


def _gl_integration_matrix():
    # S[k, j]: integral from -1 to x_k of the interpolant through unit data at x_j
    V = np.polynomial.legendre.legvander(_GL_X, _GL_N - 1)
    A = np.empty((_GL_N, _GL_N))
    for j in range(_GL_N):
        e = np.zeros(_GL_N)
        e[j] = 1.0
        A[:, j] = np.polynomial.legendre.legval(_GL_X, np.polynomial.legendre.legint(e, lbnd=-1))
    return A @ np.linalg.inv(V)


_GL_S = _gl_integration_matrix()


def _cumulative(panels, f_nodes):
    """Indefinite integral from ``panels[0]`` at every node (panel-wise spectral rule)."""
    half = 0.5 * np.diff(panels)[:, None]
    inner = half * (f_nodes @ _GL_S.T)
    total = half[:, 0] * (f_nodes @ _GL_W)
    start = np.concatenate([[0.0], np.cumsum(total)[:-1]])
    return start[:, None] + inner, start, total


def mean_hitting_time(graph: ReebGraph, y0: GraphPoint):
    """Expected time to reach ``O`` from ``y0``.

    Solves ``(a^2/2) m'' + b m' = -1`` with ``m(0) = 0`` and no flux at the
    exterior vertex:
    ``m(y0) = 2 int_0^{h_max} e^{B(u)} / a^2(u) * Phi(min(u, y0)) du`` with
    ``B' = 2 b / a^2`` and ``Phi(w) = int_0^w e^{-B}``.  All three integrals use
    16-point Gauss-Legendre panels graded geometrically toward both vertices,
    where ``1/a^2`` has logarithmic and algebraic endpoint behaviour.
    """
    edge, y = int(y0[0]), float(y0[1])
    if y == 0.0:
        return 0.0
    if not 0 <= edge < graph.n_edges or not 0 < y <= graph.h_max[edge]:
        raise CoefficientRange(f"invalid start point {y0!r}")
    hmax = float(graph.h_max[edge])
    grade = np.geomspace(1e-16, 0.5, 160) * hmax
    top = np.geomspace(1e-13, 0.5, 130) * hmax
    panels = np.unique(np.concatenate([[0.0, y, hmax], grade, hmax - top]))
    panels = panels[(panels >= 0) & (panels <= hmax)]
    mid = 0.5 * (panels[:-1] + panels[1:])
    half = 0.5 * np.diff(panels)
    u = mid[:, None] + half[:, None] * _GL_X[None, :]
    a2, b = _coef_many(graph.tables, edge, u.ravel())
    a2 = a2.reshape(u.shape)
    b = b.reshape(u.shape)
    B, _, _ = _cumulative(panels, 2.0 * b / a2)
    Phi, start, total = _cumulative(panels, np.exp(-B))
    iy = int(np.searchsorted(panels, y))
    phi_y = start[iy - 1] + total[iy - 1] if iy > 0 else 0.0
    Phi = np.where(u >= y, phi_y, Phi)
    integrand = np.exp(B) / a2 * Phi
    return float(2.0 * np.sum(half[:, None] * integrand * _GL_W[None, :]))


def spd_cholesky(Q):
    Q = np.asarray(Q, dtype=float)
    if Q.shape != (2, 2) or not np.allclose(Q, Q.T, rtol=0, atol=1e-12 * np.abs(Q).max()):
        raise NotSPD("Q must be a symmetric 2x2 matrix")
    try:
        return np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        raise NotSPD("Q is not positive definite") from None


def subordinated_brownian(Q, localtime, seed, path_id=0):
    """``W^Q`` evaluated along a nondecreasing clock ``localtime`` (array of L values).

    Increments over ``[t_k, t_{k+1}]`` are ``N(0, (L_{k+1} - L_k) Q)``; the path
    starts at the origin.
    """
    chol = spd_cholesky(Q)
    L = np.asarray(localtime, dtype=float)
    if L.ndim != 1 or (len(L) and L[0] < 0) or np.any(np.diff(L) < 0):
        raise ValueError("local time must be a nondecreasing, nonnegative sequence")
    n = len(L)
    z = _normals_2d(np.uint64(seed), path_id, n)
    dL = np.diff(L, prepend=0.0)
    inc = (z @ chol.T) * np.sqrt(dL)[:, None]
    return np.cumsum(inc, axis=0)


@njit
def _normals_2d(seed, path, n):
    out = np.empty((n, 2))
    for i in range(n):
        a, b = normal_pair(seed, path, i, _STREAM_W)
        out[i, 0] = a
        out[i, 1] = b
    return out
