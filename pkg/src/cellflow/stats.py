"""Goodness-of-fit and dependence statistics shared by the estimators."""

from __future__ import annotations

import numpy as np
from numba import njit
from scipy import stats


def laplace_ad_pvalue(x, scale=None, seed=0, n_mc=999):
    """Anderson-Darling p-value of ``x`` against a centered Laplace law.

    With ``scale=None`` the scale is fitted (maximum likelihood) and the null
    distribution accounts for the fit; otherwise the law is fully specified.
    """
    known = {"loc": 0.0}
    if scale is not None:
        known["scale"] = float(scale)
    res = stats.goodness_of_fit(stats.laplace, np.asarray(x, float), known_params=known,
                                statistic="ad", n_mc_samples=n_mc,
                                random_state=np.random.default_rng(seed))
    return float(res.pvalue)


def chisquare_pvalue(counts, probs):
    counts = np.asarray(counts, float)
    probs = np.asarray(probs, float)
    return float(stats.chisquare(counts, counts.sum() * probs / probs.sum()).pvalue)


def laplace_scale(x):
    """Maximum-likelihood scale of a centered Laplace sample."""
    return float(np.mean(np.abs(x)))


def rotate45(s):
    """Coordinates of 2-vectors in the frame of the diagonals ``(1, 1)/sqrt 2, (1, -1)/sqrt 2``."""
    s = np.asarray(s, float)
    r = np.sqrt(0.5)
    return np.column_stack([r * (s[:, 0] + s[:, 1]), r * (s[:, 0] - s[:, 1])])


@njit(cache=True)
def _centered_distances(x):
    n = x.shape[0]
    d = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            s = 0.0
            for k in range(x.shape[1]):
                t = x[i, k] - x[j, k]
                s += t * t
            d[i, j] = d[j, i] = np.sqrt(s)
    row = np.empty(n)
    for i in range(n):
        row[i] = d[i].mean()
    tot = row.mean()
    for i in range(n):
        for j in range(n):
            d[i, j] = d[i, j] - row[i] - row[j] + tot
    return d


@njit(cache=True)
def _dcov2(A, B, perm):
    n = A.shape[0]
    s = 0.0
    for i in range(n):
        pi = perm[i]
        for j in range(n):
            s += A[i, j] * B[pi, perm[j]]
    return s / (n * n)


def distance_correlation(x, y):
    """Sample distance correlation of ``x`` (n, p) and ``y`` (n, q)."""
    A = _centered_distances(_as2d(x))
    B = _centered_distances(_as2d(y))
    ident = np.arange(A.shape[0])
    vxy = _dcov2(A, B, ident)
    vxx = _dcov2(A, A, ident)
    vyy = _dcov2(B, B, ident)
    if vxx <= 0 or vyy <= 0:
        return 0.0
    return float(np.sqrt(max(vxy, 0.0) / np.sqrt(vxx * vyy)))


def dcor_permutation_test(x, y, n_perm=499, seed=0, max_n=2000):
    """Permutation p-value for independence based on distance covariance.

    Only the first ``max_n`` rows are used; the statistic needs two dense
    ``n x n`` matrices.
    """
    x = _as2d(x)[:max_n]
    y = _as2d(y)[:max_n]
    A = _centered_distances(x)
    B = _centered_distances(y)
    n = A.shape[0]
    rng = np.random.default_rng(seed)
    obs = _dcov2(A, B, np.arange(n))
    ge = 1
    for _ in range(n_perm):
        if _dcov2(A, B, rng.permutation(n)) >= obs:
            ge += 1
    vxx = _dcov2(A, A, np.arange(n))
    vyy = _dcov2(B, B, np.arange(n))
    dcor = float(np.sqrt(max(obs, 0.0) / np.sqrt(vxx * vyy))) if vxx > 0 and vyy > 0 else 0.0
    return dcor, ge / (n_perm + 1)


def _as2d(x):
    x = np.asarray(x, float)
    return x[:, None] if x.ndim == 1 else x


def bootstrap_ci(samples, statistic, n_boot=200, seed=0, level=0.95):
    """Percentile half-widths of ``statistic`` over row resamples."""
    samples = np.asarray(samples)
    rng = np.random.default_rng(seed)
    n = samples.shape[0]
    reps = np.array([statistic(samples[rng.integers(0, n, n)]) for _ in range(n_boot)])
    lo, hi = np.quantile(reps, [(1 - level) / 2, (1 + level) / 2], axis=0)
    return 0.5 * (hi - lo)
