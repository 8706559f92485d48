import numpy as np
import pytest
from scipy import stats

from cellflow.stats import (
    bootstrap_ci, chisquare_pvalue, distance_correlation, dcor_permutation_test,
    laplace_ad_pvalue, laplace_scale, rotate45,
)


def test_dcor_of_affine_copy_is_one():
    x = np.random.default_rng(0).standard_normal((100, 2))
    assert distance_correlation(x, 3 * x + 1) == pytest.approx(1.0)


def test_dcor_constant_column():
    x = np.random.default_rng(1).standard_normal(50)
    assert distance_correlation(x, np.ones(50)) == 0.0


def test_dcor_permutation_independent():
    rng = np.random.default_rng(2)
    _, p = dcor_permutation_test(rng.standard_normal(300), rng.standard_normal((300, 2)),
                                 n_perm=199)
    assert p > 0.01


def test_laplace_ad_accepts_laplace_rejects_normal():
    rng = np.random.default_rng(3)
    assert laplace_ad_pvalue(rng.laplace(0, 2.0, 2000), n_mc=199) > 0.01
    assert laplace_ad_pvalue(rng.laplace(0, 2.0, 2000), scale=2.0, n_mc=199) > 0.01
    assert laplace_ad_pvalue(rng.standard_normal(2000), n_mc=199) < 0.01


def test_laplace_scale_mle():
    x = np.random.default_rng(4).laplace(0, 0.7, 20000)
    assert laplace_scale(x) == pytest.approx(0.7, rel=0.03)


def test_rotate45_is_orthogonal():
    s = np.random.default_rng(5).standard_normal((10, 2))
    r = rotate45(s)
    assert np.allclose(np.linalg.norm(r, axis=1), np.linalg.norm(s, axis=1))
    assert np.allclose(rotate45(np.array([[1.0, 1.0]])), [[np.sqrt(2), 0.0]])


def test_chisquare_normalises_probs():
    assert chisquare_pvalue([25, 25, 50], [1, 1, 2]) == pytest.approx(1.0)


def test_bootstrap_matches_normal_theory():
    x = np.random.default_rng(6).standard_normal(2000)
    hw = bootstrap_ci(x, np.mean, n_boot=400)
    assert hw == pytest.approx(stats.norm.ppf(0.975) / np.sqrt(2000), rel=0.2)
