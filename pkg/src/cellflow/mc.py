"""Monte Carlo estimators for the cellular-flow experiments.

Covers the excursion covariance ``Q``, the effective diffusivity and its
``epsilon^{-1/2}`` scaling, the Feynman-Kac functional
``u(x) = E int_0^tau f(X_s / R) ds`` and the three scaling regimes for ``R``,
plus a distance-correlation check of asymptotic independence of excursions.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats as sps

from .errors import ConfigError
from .graphdiff import graph_ensemble, mean_hitting_time
from .hamiltonian import HamiltonianField
from .reeb import GraphPoint, reeb_graph
from .sde2d import (Domain, SdeConfig, displacement_ensemble, excursion_ensemble,
                    exit_ensemble, separatrix_points, uniform_torus_points)
from .stats import bootstrap_ci, dcor_permutation_test, laplace_ad_pvalue, rotate45


# --------------------------------------------------------------------------
# excursion covariance
# --------------------------------------------------------------------------

def excursion_sample(field: HamiltonianField, epsilon, delta, samples, seed, m=1,
                     x0=None, dt=None):
    """``(T, eps^{1/4} S, eta)`` for ``samples`` paths run through ``m`` excursions.

    Paths start on the separatrix unless ``x0`` (shape ``(samples, 2)``) is
    given; incomplete ledgers are dropped.
    """
    cfg = SdeConfig(epsilon=epsilon, delta_shell=delta, seed=seed, dt_macro=dt)
    if x0 is None:
        x0 = separatrix_points(field, samples, seed)
    ex = excursion_ensemble(field, cfg, x0, m)
    T, S, ok = ex.excursion_table(m)
    eta = ex.eta(field)
    return T[ok], epsilon ** 0.25 * S[ok], eta[ok]


@dataclass
class CovarianceEstimate:
    """``Q_hat`` with elementwise 95% bootstrap half-widths ``ci``."""

    Q_hat: np.ndarray
    n: int
    ci: np.ndarray
    per_delta: dict = field(default_factory=dict)

    @property
    def isotropic(self):
        """``(q, ci)`` for the mean diagonal entry."""
        return 0.5 * np.trace(self.Q_hat), 0.5 * (self.ci[0, 0] + self.ci[1, 1])


def _second_moment(s):
    return s.T @ s / len(s)


def _extrapolate(deltas, Qs):
    """Linear extrapolation of ``Q(delta)`` to ``delta = 0`` (single value: no-op)."""
    if len(deltas) == 1:
        return Qs[0]
    d = np.asarray(deltas, float)
    A = np.column_stack([np.ones_like(d), d])
    flat = np.array([q.ravel() for q in Qs])
    coef = np.linalg.lstsq(A, flat, rcond=None)[0]
    return coef[0].reshape(2, 2)


def estimate_Q(field: HamiltonianField, epsilon, deltas=(0.2, 0.1), samples=4000,
               seed=0, noise_scale=1.0, n_boot=200, dt=None):
    """Excursion estimate of ``Q`` from ``Cov(eps^{1/4} S_1) / delta``.

    The ``(1 + a(delta))`` correction is removed by linear extrapolation in
    ``delta``.  ``noise_scale = s`` simulates ``dX = v/eps dt + s dW`` through
    the time change ``t -> s^2 t`` (an ``epsilon * s^2`` run), while the
    displacement is still scaled by ``epsilon^{1/4}``.
    """
    deltas = tuple(float(d) for d in deltas)
    eps_run = epsilon * noise_scale ** 2
    rescale = (epsilon / eps_run) ** 0.25
    data = []
    for k, d in enumerate(deltas):
        _, S, _ = excursion_sample(field, eps_run, d, samples, seed + 7919 * k, dt=dt)
        data.append(rescale * S[:, 0, :])
    Qs = [_second_moment(s) / d for s, d in zip(data, deltas)]
    Q = _extrapolate(deltas, Qs)
    rng = np.random.default_rng(seed)
    reps = []
    for _ in range(n_boot):
        Qb = [_second_moment(s[rng.integers(0, len(s), len(s))]) / d
              for s, d in zip(data, deltas)]
        reps.append(_extrapolate(deltas, Qb))
    lo, hi = np.quantile(np.array(reps), [0.025, 0.975], axis=0)
    Q = 0.5 * (Q + Q.T)
    return CovarianceEstimate(Q, int(min(len(s) for s in data)), 0.5 * (hi - lo),
                              {d: q for d, q in zip(deltas, Qs)})


def excursion_law_report(field, epsilon, delta=0.2, samples=10000, seed=0, dt=None):
    """Laplace fit of the scaled first displacement and the first-entry cell law.

    The marginals are tested in the frame of the cell diagonals: along the
    axes, separatrix-to-separatrix displacements carry atoms at lattice
    multiples, while the diagonal projections are continuous.
    """
    _, S, eta = excursion_sample(field, epsilon, delta, samples, seed, dt=dt)
    s = rotate45(S[:, 0, :])
    n = len(s)
    cells = field.n_cells
    freq = np.bincount(eta[eta >= 0], minlength=cells) / n
    return {
        "samples": n,
        "ad_p": [laplace_ad_pvalue(s[:, j], seed=seed + j) for j in range(2)],
        "laplace_scale": [float(np.mean(np.abs(s[:, j]))) for j in range(2)],
        "skewness": [float(sps.skew(s[:, j])) for j in range(2)],
        "eta_freq": freq.tolist(),
        "eta_se": np.sqrt(freq * (1 - freq) / n).tolist(),
    }


# --------------------------------------------------------------------------
# effective diffusivity
# --------------------------------------------------------------------------

@dataclass
class DiffusivityEstimate:
    D: np.ndarray
    se: np.ndarray
    n: int

    @property
    def scalar(self):
        """Mean diagonal entry and its standard error."""
        c = self._c
        return 0.5 * np.trace(self.D), float(np.std(0.5 * (c[:, 0] ** 2 + c[:, 1] ** 2)) /
                                             math.sqrt(len(c)))

    _c: np.ndarray = field(default=None, repr=False)


def effective_diffusivity(field: HamiltonianField, epsilon, horizon, paths, seed, dt=None,
                          drift=True):
    """``Cov(X_horizon - x) / horizon`` from stationary (torus-uniform) starts."""
    cfg = SdeConfig(epsilon=epsilon, seed=seed, dt_macro=dt, drift=drift,
                    max_time=horizon)
    x0 = uniform_torus_points(field, paths, seed)
    d = displacement_ensemble(field, cfg, x0, horizon) / math.sqrt(horizon)
    D = d.T @ d / len(d)
    prods = np.einsum("ni,nj->nij", d, d)
    se = prods.std(0) / math.sqrt(len(d))
    return DiffusivityEstimate(D, se, len(d), d)


def scaling_slope(field, eps_list, horizon, paths, seed, dt=None, horizon_power=0.5):
    """Weighted log-log fit of the mean diagonal diffusivity against epsilon.

    ``horizon`` applies at the largest epsilon; smaller ones run for
    ``horizon * (eps / eps_max) ** horizon_power``.  The cell-crossing time
    scales like ``eps^{1/2}``, so the default keeps the finite-horizon bias
    the same at every epsilon.  Returns ``(slope, slope_se, estimates)``.
    """
    top = max(eps_list)
    ests = [effective_diffusivity(field, e, horizon * (e / top) ** horizon_power, paths,
                                  seed + 104729 * k, dt=dt)
            for k, e in enumerate(eps_list)]
    d = np.array([e.scalar for e in ests])
    x = np.log(np.asarray(eps_list, float))
    y = np.log(d[:, 0])
    w = (d[:, 0] / d[:, 1]) ** 2
    A = np.column_stack([np.ones_like(x), x])
    cov = np.linalg.inv(A.T @ (w[:, None] * A))
    coef = cov @ A.T @ (w * y)
    return float(coef[1]), float(math.sqrt(cov[1, 1])), ests


# --------------------------------------------------------------------------
# Feynman-Kac functional and regimes
# --------------------------------------------------------------------------

def estimate_u(field, epsilon, R, domain: Domain, f="one", x=(0.0, 0.0), paths=1000,
               seed=0, f_par=(1.0, 0.0), dt=None, drift=True, max_time=1e4):
    """``E int_0^tau f(X_s / R) ds`` over the exit time ``tau`` of ``R * domain``.

    Returns ``(u_hat, se, flagged_fraction)``; paths still inside at
    ``max_time`` contribute their truncated integral and are counted as flagged.
    """
    dom = replace(domain, R=float(R))
    x = np.asarray(x, float)
    if not dom.contains(x) and not np.isclose(
            np.hypot(*x) if dom.kind == "disk" else np.max(np.abs(x)), dom.scaled):
        raise ConfigError("start point outside the domain")
    if f == "zero":
        return 0.0, 0.0, 0.0
    cfg = SdeConfig(epsilon=epsilon, seed=seed, dt_macro=dt, drift=drift,
                    max_time=max_time)
    rec = exit_ensemble(field, cfg, np.tile(x, (paths, 1)), dom, f=f, f_par=f_par)
    v = rec.f_integral
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v))), float(
        rec.flagged.mean())


def bm_exit_mean(domain: Domain, q):
    """Mean exit time from the unscaled ``domain`` of BM with covariance ``q I`` (center start)."""
    a = domain.size
    if domain.kind == "disk":
        return a * a / (2.0 * q)
    k = np.arange(1, 200, 2)
    c = 32.0 * (-1.0) ** ((k - 1) // 2) / (np.pi ** 3 * k ** 3)
    return a * a / q * (1.0 - np.sum(c / np.cosh(k * np.pi / 2)))


RULES = ("fixed", "averaging", "transition", "homogenization")


@dataclass
class RegimeConfig:
    """A sweep over ``epsilon`` with ``R`` following one of the scaling rules.

    ``averaging``/``homogenization`` use ``R = epsilon^{-gamma}`` (``param`` is
    ``gamma``), ``transition`` uses ``R = C epsilon^{-1/4}`` (``param`` is
    ``C``) and ``fixed`` uses ``R = param``.
    """

    eps_list: tuple
    rule: str
    param: float
    domain: Domain = Domain("disk", 1.0)
    f: str = "one"
    f_par: tuple = (1.0, 0.0)
    paths: int = 1000
    seed: int = 0
    x: tuple | None = None
    q_samples: int = 4000
    oracle_paths: int | None = None
    Q: tuple | None = None
    diffusivity_horizon: float = 10.0
    dt: float | None = None

    def __post_init__(self):
        if self.rule not in RULES:
            raise ConfigError(f"unknown rule {self.rule!r}")
        e = list(self.eps_list)
        if any(a <= b for a, b in zip(e, e[1:])):
            raise ConfigError("eps_list must be decreasing")
        if self.paths < 100:
            raise ConfigError("at least 100 paths per point")

    def R(self, eps):
        if self.rule == "fixed":
            return float(self.param)
        if self.rule == "transition":
            return float(self.param) * eps ** -0.25
        return eps ** -float(self.param)

    def start(self, field):
        if self.x is not None:
            return np.asarray(self.x, float)
        if self.rule == "averaging":
            # first extremum: an informative start, the separatrix gives 0
            return np.asarray(field.extrema[0], float)
        return np.zeros(2)

    def as_dict(self):
        d = asdict(self)
        d["domain"] = f"{self.domain.kind}:{self.domain.size}"
        return d


def _f0(cfg: RegimeConfig):
    return {"one": 1.0, "cosine": 1.0, "zero": 0.0}[cfg.f]


def regime_row(field, cfg: RegimeConfig, eps, k=0):
    """One sweep point: ``dict(epsilon, R, u_hat, se, oracle, oracle_se, ratio, ...)``."""
    R = cfg.R(eps)
    x = cfg.start(field)
    seed = cfg.seed + 15485863 * k
    u, se, flag = estimate_u(field, eps, R, cfg.domain, cfg.f, x, cfg.paths, seed,
                             cfg.f_par, dt=cfg.dt)
    row = {"epsilon": eps, "R": R, "u_hat": u, "se": se, "flagged": flag}
    opaths = cfg.oracle_paths or cfg.paths
    if cfg.rule in ("averaging", "fixed"):
        g = reeb_graph(field)
        e, y = field.cell_of(x), abs(float(field.H(x)))
        m = mean_hitting_time(g, GraphPoint(e, min(y, g.h_max[e]))) if y > 0 else 0.0
        oracle, ose = _f0(cfg) * m, 0.0
    elif cfg.rule == "transition":
        Q = np.asarray(cfg.Q, float) if cfg.Q is not None else \
            estimate_Q(field, eps, samples=cfg.q_samples, seed=seed + 1).Q_hat
        row["Q"] = Q.tolist()
        g = reeb_graph(field)
        e, y = field.cell_of(x), abs(float(field.H(x)))
        Qs = Q / cfg.param ** 2
        fpar = None if cfg.f == "one" else tuple(cfg.f_par)
        res = graph_ensemble(g, GraphPoint(e if y > 0 else -1, y), 1e6, 1e-4, seed + 2,
                             opaths, subordinate=(Qs, replace(cfg.domain, R=1.0), fpar))
        v = res.f_integral
        oracle, ose = float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))
    else:
        est = effective_diffusivity(field, eps, cfg.diffusivity_horizon, opaths, seed + 3,
                                    dt=cfg.dt)
        dbar, dse = est.scalar
        cq = math.sqrt(eps) * dbar
        row["cq"] = cq
        scale = 1.0 / (math.sqrt(eps) * R * R)
        row["u_hat"], row["se"] = u * scale, se * scale
        u, se = row["u_hat"], row["se"]
        if cfg.f == "one":
            oracle = bm_exit_mean(cfg.domain, cq)
            ose = oracle * dse / dbar
        else:
            # time change: W^{cq} at time t is standard BM at time cq t
            ub, sb, _ = estimate_u(field, math.inf, 1.0, cfg.domain, cfg.f, x, opaths,
                                   seed + 4, cfg.f_par, drift=False)
            oracle = ub / cq
            ose = math.hypot(sb / cq, oracle * dse / dbar)
    row.update(oracle=oracle, oracle_se=ose, ratio=u / oracle if oracle else math.nan)
    return row


def regime_sweep(field, cfg: RegimeConfig):
    """Rows for every ``epsilon`` in ``cfg.eps_list`` (see :func:`regime_row`)."""
    return [regime_row(field, cfg, e, k) for k, e in enumerate(cfg.eps_list)]


# --------------------------------------------------------------------------
# independence of successive excursions
# --------------------------------------------------------------------------

def independence_test(field, epsilon, delta=0.2, m=2, samples=1500, seed=0, n_perm=499,
                      x0=None, dt=None):
    """Pairwise distance-correlation permutation tests of ``(T_0, S_1, T_1, S_2, ...)``.

    Paths start off the separatrix (default: on the level ``|H| = h_max / 2``
    of the first cell) so ``T_0`` is nondegenerate.
    """
    if not 1 <= m <= 4:
        raise ConfigError("m must be between 1 and 4")
    if x0 is None:
        c = np.asarray(field.extrema[0], float)
        x0 = np.tile(_half_level_point(field, c), (samples, 1))
    T, S, _ = excursion_sample(field, epsilon, delta, samples, seed, m=m, x0=x0, dt=dt)
    blocks = []
    for k in range(m):
        blocks.append((f"T{k}", T[:, k]))
        blocks.append((f"S{k + 1}", S[:, k, :]))
    out = {"samples": len(T), "pairs": {}}
    for i in range(len(blocks)):
        for j in range(i + 1, len(blocks)):
            (a, xa), (b, xb) = blocks[i], blocks[j]
            dc, p = dcor_permutation_test(xa, xb, n_perm=n_perm, seed=seed + 31 * i + j)
            out["pairs"][f"{a}-{b}"] = {"dcor": dc, "p": p}
    out["T"] = T
    out["S"] = S
    return out


def _half_level_point(field, c):
    """Point on the ray ``c + t (1, 0)`` with ``|H| = |H(c)| / 2``."""
    from scipy.optimize import brentq
    h0 = abs(field.H(c))
    return np.array([brentq(lambda t: abs(field.H(c + [t, 0.0])) - 0.5 * h0, 0.0,
                            0.25 * field.period[0] * 0.999) + c[0], c[1]])


def null_calibration(n_rep=100, n=200, seed=0, n_perm=199):
    """Permutation p-values of independent columns (should be uniform)."""
    rng = np.random.default_rng(seed)
    ps = []
    for r in range(n_rep):
        a = rng.standard_normal((n, 2))
        b = rng.exponential(size=n)
        ps.append(dcor_permutation_test(a, b, n_perm=n_perm, seed=seed + r)[1])
    return np.array(ps)


__all__ = [
    "CovarianceEstimate", "DiffusivityEstimate", "RegimeConfig", "bm_exit_mean",
    "bootstrap_ci", "effective_diffusivity", "estimate_Q", "estimate_u",
    "excursion_law_report", "excursion_sample", "independence_test", "null_calibration",
    "regime_row", "regime_sweep", "scaling_slope",
]
