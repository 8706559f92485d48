"""Finite-state killed Markov chains with exactly computable limit laws.

A chain on ``m`` states moves by ``P0`` and, from state ``x``, is killed with
probability ``sqrt(eps) * J(x)`` into label ``i`` with share ``h_i(x) / J(x)``.
The scaled additive functional ``eps^{1/4} * sum g(Z_k)`` then converges to
``sqrt(xi / J0) * N(0, Qbar)`` with ``xi ~ Exp(1)``, independently of the label,
whose law is ``p_i = int h_i dlambda0 / J0``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange
from scipy import stats as sps

from .errors import ConfigError, DoeblinFail, SingularPoisson
from .rng import STREAM_START, STREAM_STEP, uniform_pair
from .stats import chisquare_pvalue, dcor_permutation_test, laplace_ad_pvalue


def _doeblin(P):
    """True when some power ``P^k`` (``k <= m``) has a strictly positive column."""
    m = P.shape[0]
    Pk = np.eye(m)
    for _ in range(m):
        Pk = Pk @ P
        if np.any(np.all(Pk > 0, axis=0)):
            return True
    return False


def invariant_measure(P):
    """Stationary law of the stochastic matrix ``P`` by a direct linear solve."""
    P = np.asarray(P, dtype=float)
    m = P.shape[0]
    if P.shape != (m, m) or np.any(P < 0) or not np.allclose(P.sum(1), 1.0, atol=1e-12):
        raise ConfigError("P must be a square stochastic matrix")
    if not _doeblin(P):
        raise DoeblinFail("no power P^k, k <= m, has a strictly positive column")
    A = np.vstack([(np.eye(m) - P).T, np.ones(m)])
    rhs = np.zeros(m + 1)
    rhs[-1] = 1.0
    lam = np.linalg.lstsq(A, rhs, rcond=None)[0]
    # one refinement pass keeps the residual at rounding level
    lam = lam + np.linalg.lstsq(A, rhs - A @ lam, rcond=None)[0]
    lam = np.clip(lam, 0.0, None)
    return lam / lam.sum()


@dataclass(frozen=True)
class LimitLawParams:
    J0: float
    label_probs: np.ndarray
    Qbar: np.ndarray

    @property
    def component_variance(self):
        """Variance of each coordinate of the limit law (``E xi = 1``)."""
        return np.diag(self.Qbar) / self.J0


@dataclass(frozen=True)
class KilledChainSpec:
    """``P0`` (m x m), ``g`` (m x 2) and ``h`` (n x m); ``g`` is centered under ``lambda0``.

    ``x0`` is the start state; None draws it from ``lambda0``.
    """

    P0: np.ndarray
    g: np.ndarray
    h: np.ndarray
    lambda0: np.ndarray = field(repr=False)
    x0: int | None = None

    @classmethod
    def build(cls, P0, g, h, x0=None, center=True):
        P0 = np.asarray(P0, float)
        g = np.asarray(g, float)
        h = np.asarray(h, float)
        if g.ndim == 1:
            g = g[:, None]
        m = P0.shape[0]
        if g.shape[0] != m or h.ndim != 2 or h.shape[1] != m:
            raise ConfigError("g must have m rows and h shape (n_labels, m)")
        if np.any(h < 0):
            raise ConfigError("killing rates must be nonnegative")
        if np.any(h.sum(0) <= 0):
            raise ConfigError("J(x) = sum_i h_i(x) must be positive on every state")
        lam = invariant_measure(P0)
        if center:
            g = g - lam @ g
        return cls(P0, g, h, lam, None if x0 is None else int(x0))

    @property
    def m(self):
        return self.P0.shape[0]

    @property
    def J(self):
        return self.h.sum(0)

    def kernel(self, epsilon):
        """``(P_eps, kill)`` with ``kill[x, i] = sqrt(eps) h_i(x)``."""
        s = np.sqrt(epsilon)
        if s * self.J.max() > 1.0:
            raise ConfigError("sqrt(epsilon) * max J exceeds 1")
        return (1.0 - s * self.J)[:, None] * self.P0, s * self.h.T

    def to_json(self):
        return {"P0": self.P0.tolist(), "g": self.g.tolist(), "h": self.h.tolist(),
                "x0": self.x0}

    @classmethod
    def from_json(cls, data):
        if isinstance(data, str):
            data = json.loads(data)
        try:
            return cls.build(data["P0"], data["g"], data["h"], data.get("x0"),
                             data.get("center", True))
        except KeyError as exc:
            raise ConfigError(f"chain spec missing key {exc}") from None


def four_cycle_spec():
    """Lazy walk on a 4-cycle with two killing labels of unequal state profiles.

    ``J - J0`` is proportional to ``sin(pi x / 2)``, an eigenfunction of ``P0``
    orthogonal to both components of ``g``, so the killing time carries no
    first-order correlation with the sums.
    """
    m = 4
    P0 = np.zeros((m, m))
    for x in range(m):
        P0[x, x] = 0.2
        P0[x, (x + 1) % m] = 0.4
        P0[x, (x - 1) % m] = 0.4
    xs = np.arange(m)
    g = np.column_stack([(-1.0) ** xs, np.cos(np.pi * xs / 2)])
    h = np.array([[1.0, 2.0, 1.0, 0.5], [1.0, 0.5, 1.0, 1.0]])
    return KilledChainSpec.build(P0, g, h)


def clt_covariance(spec: KilledChainSpec):
    """Asymptotic covariance of ``sum g(Z_k) / sqrt(k)`` under ``P0``.

    With the fundamental matrix ``Z = (I - P0 + 1 lambda)^{-1}`` and
    ``G = Z g``: ``Qbar = E_lambda[g G^T + G g^T - g g^T]``.
    """
    P, lam, g = spec.P0, spec.lambda0, spec.g
    m = P.shape[0]
    M = np.eye(m) - P + np.outer(np.ones(m), lam)
    if np.linalg.cond(M) > 1e12:
        raise SingularPoisson("I - P0 is singular on the centered subspace")
    G = np.linalg.solve(M, g)
    W = lam[:, None] * g
    Q = W.T @ G + G.T @ W - W.T @ g
    return 0.5 * (Q + Q.T)


def limit_params(spec: KilledChainSpec):
    J0 = float(spec.lambda0 @ spec.J)
    probs = spec.h @ spec.lambda0 / J0
    return LimitLawParams(J0, probs, clt_covariance(spec))


def quasi_stationary(spec: KilledChainSpec, epsilon):
    """Law of ``Z`` conditioned to survive: left Perron vector of the sub-stochastic kernel."""
    Pe, _ = spec.kernel(epsilon)
    w, V = np.linalg.eig(Pe.T)
    v = np.real(V[:, np.argmax(np.real(w))])
    return v / v.sum()


def survivor_mean_g(spec: KilledChainSpec, epsilon):
    """``int g d(lambda~^eps)``: the centering defect under the conditioned chain."""
    return quasi_stationary(spec, epsilon) @ spec.g


@njit(parallel=True)
def _killed_kernel(cumP, cumK, g, x0, cum0, seed, path_ids, out_sum, out_label, out_steps):
    m = cumP.shape[0]
    nl = cumK.shape[1]
    for ip in prange(path_ids.shape[0]):
        path = path_ids[ip]
        x = x0
        if x < 0:
            u0, _ = uniform_pair(seed, path, 0, STREAM_START)
            x = m - 1
            for j in range(m):
                if u0 < cum0[j]:
                    x = j
                    break
        s0 = 0.0
        s1 = 0.0
        k = 0
        while True:
            k += 1
            u, _ = uniform_pair(seed, path, k, STREAM_STEP)
            # cumK[x] holds the cumulative killing masses, P_eps continues above
            lab = -1
            for i in range(nl):
                if u < cumK[x, i]:
                    lab = i
                    break
            if lab >= 0:
                out_label[ip] = lab
                break
            nx = m - 1
            for j in range(m):
                if u < cumP[x, j]:
                    nx = j
                    break
            x = nx
            s0 += g[x, 0]
            s1 += g[x, 1]
        out_sum[ip, 0] = s0
        out_sum[ip, 1] = s1
        out_steps[ip] = k


def run_killed_chain(spec: KilledChainSpec, epsilon, seed, samples=1, path_offset=0):
    """Raw (unscaled) sums ``g(Z_1) + ... + g(Z_tau)`` (``g = 0`` on the labels).

    Returns arrays ``(sum_g (n, 2), label (n,), steps (n,))`` with ``steps = tau``
    and 0-based labels.  The chain starts at ``spec.x0``, or from ``lambda0``
    when ``spec.x0`` is None.
    """
    Pe, K = spec.kernel(epsilon)
    cumK = np.cumsum(K, axis=1)
    cumP = cumK[:, -1:] + np.cumsum(Pe, axis=1)
    cumP[:, -1] = 1.0
    n = int(samples)
    sums = np.zeros((n, 2))
    labels = np.zeros(n, np.int64)
    steps = np.zeros(n, np.int64)
    g = np.zeros((spec.m, 2))
    g[:, :spec.g.shape[1]] = spec.g[:, :2]
    ids = np.arange(path_offset, path_offset + n, dtype=np.int64)
    x0 = -1 if spec.x0 is None else int(spec.x0)
    cum0 = np.cumsum(spec.lambda0)
    cum0[-1] = 1.0
    _killed_kernel(cumP, cumK, g, x0, cum0, np.uint64(seed), ids, sums, labels, steps)
    return sums, labels, steps


def lattice_span(values, rtol=1e-9):
    """Common spacing of ``values`` if they lie on a lattice, else 0.

    Spacings below ``rtol`` times the magnitude of the values are rounding noise.
    """
    u = np.unique(values)
    scale = max(np.abs(u).max() if len(u) else 0.0, 1.0)
    tol = rtol * scale
    gaps = np.diff(u)
    gaps = gaps[gaps > tol]
    if len(gaps) == 0:
        return 0.0
    d = gaps.min()
    k = (u - u[0]) / d
    if np.all(np.abs(k - np.round(k)) * d <= 1e3 * tol):
        return float(d)
    return 0.0


@dataclass
class LimitLawReport:
    epsilon: float
    samples: int
    params: LimitLawParams
    label_freq: np.ndarray
    label_se: np.ndarray
    label_p: float
    var_hat: np.ndarray
    var_se: np.ndarray
    ad_p: np.ndarray
    ks_by_label: dict
    dcor: float
    dcor_p: float
    mean_steps: float

    def as_dict(self):
        return {
            "epsilon": self.epsilon, "samples": self.samples, "J0": self.params.J0,
            "label_probs": self.params.label_probs.tolist(),
            "Qbar": self.params.Qbar.tolist(),
            "label_freq": self.label_freq.tolist(), "label_se": self.label_se.tolist(),
            "label_chisq_p": self.label_p,
            "var_hat": self.var_hat.tolist(), "var_se": self.var_se.tolist(),
            "var_limit": self.params.component_variance.tolist(),
            "ad_p": self.ad_p.tolist(),
            "ks_by_label": {f"{a}-{b}": p for (a, b), p in self.ks_by_label.items()},
            "dcor": self.dcor, "dcor_p": self.dcor_p, "mean_steps": self.mean_steps,
        }


def limit_law_test(spec: KilledChainSpec, epsilon, samples, seed=0, n_perm=499):
    """Monte Carlo check of the killed-chain limit law against the exact parameters."""
    par = limit_params(spec)
    sums, labels, steps = run_killed_chain(spec, epsilon, seed, samples)
    x = epsilon ** 0.25 * sums
    n = len(labels)
    nl = spec.h.shape[0]
    counts = np.bincount(labels, minlength=nl)
    freq = counts / n
    se = np.sqrt(freq * (1 - freq) / n)
    var = np.var(x, axis=0)
    # SE of the sample variance from the fourth central moment
    c = x - x.mean(0)
    var_se = np.sqrt(np.maximum(np.mean(c ** 4, 0) - var ** 2, 0) / n)
    lv = par.component_variance
    rng = np.random.default_rng(seed)
    ad = np.full(x.shape[1], np.nan)
    for j in range(x.shape[1]):
        if lv[j] <= 0:
            continue
        # lattice-valued sums get a uniform within-cell jitter before the
        # continuous-law test (randomized continuity correction)
        span = lattice_span(sums[:, j])
        xj = x[:, j] + epsilon ** 0.25 * span * (rng.random(n) - 0.5)
        ad[j] = laplace_ad_pvalue(xj, scale=np.sqrt(lv[j] / 2), seed=seed + j)
    ks = {}
    for a in range(nl):
        for b in range(a + 1, nl):
            xa, xb = x[labels == a, 0], x[labels == b, 0]
            if len(xa) and len(xb):
                ks[(a, b)] = float(sps.ks_2samp(xa, xb).pvalue)
    onehot = np.eye(nl)[labels]
    dc, dp = dcor_permutation_test(x, onehot, n_perm=n_perm, seed=seed)
    return LimitLawReport(float(epsilon), n, par, freq, se,
                          chisquare_pvalue(counts, par.label_probs), var, var_se, ad,
                          ks, dc, dp, float(steps.mean()))
