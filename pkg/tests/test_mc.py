import math

import numpy as np
import pytest
from scipy import stats

from cellflow.errors import ConfigError
from cellflow.mc import (
    RegimeConfig, bm_exit_mean, effective_diffusivity, estimate_Q, estimate_u,
    independence_test, null_calibration, regime_row,
)
from cellflow.sde2d import Domain

# stationary vertex local-time rate of the canonical graph diffusion:
# per edge a^2 T / (2 * area) -> 8 / (8 pi^2), four edges
LOCAL_TIME_RATE = 4 / math.pi ** 2


@pytest.fixture(scope="module")
def q_estimate(canonical):
    return estimate_Q(canonical, 1e-3, samples=3000, seed=1)


def test_q_is_diagonal_and_isotropic(q_estimate):
    Q, ci = q_estimate.Q_hat, q_estimate.ci
    assert np.allclose(Q, Q.T)
    assert np.all(np.diag(Q) > 0)
    assert abs(Q[0, 1]) <= ci[0, 1]
    rel = math.hypot(ci[0, 0] / Q[0, 0], ci[1, 1] / Q[1, 1])
    assert abs(Q[0, 0] / Q[1, 1] - 1) <= rel


def test_noise_scale_control(canonical, q_estimate):
    # dX = v/eps dt + s dW is an eps * s^2 run in rescaled time, so Q_s = Q / s
    s = math.sqrt(2.0)
    qs = estimate_Q(canonical, 1e-3, samples=3000, seed=2, noise_scale=s)
    q, qci = q_estimate.isotropic
    r, rci = qs.isotropic
    assert abs(r * s - q) <= math.hypot(rci * s, qci)


def test_consistency_triangle(canonical, q_estimate):
    q, qci = q_estimate.isotropic
    est = effective_diffusivity(canonical, 1e-3, 3.0, 1000, seed=3)
    d, dse = est.scalar
    cq = math.sqrt(1e-3) * d
    assert abs(cq - LOCAL_TIME_RATE * q) <= math.hypot(1.96 * math.sqrt(1e-3) * dse,
                                                       LOCAL_TIME_RATE * qci)


def test_diffusivity_without_drift(canonical):
    est = effective_diffusivity(canonical, 1e-3, 1.0, 5000, seed=4, drift=False)
    assert np.all(np.abs(est.D - np.eye(2)) < 3 * est.se)


def test_diffusivity_isotropic(canonical):
    est = effective_diffusivity(canonical, 1e-2, 5.0, 1000, seed=5)
    D, se = est.D, est.se
    assert abs(D[0, 0] - D[1, 1]) < 3 * math.hypot(se[0, 0], se[1, 1])
    assert abs(D[0, 1]) < 3 * se[0, 1]
    assert D[0, 0] > 5.0


def test_u_disk_without_drift(canonical):
    u, se, flag = estimate_u(canonical, math.inf, 1.0, Domain("disk", 1.0), paths=4000,
                             seed=6, drift=False)
    assert abs(u - 0.5) < 3 * se and flag == 0.0


def test_u_square_oracle(canonical):
    u, se, _ = estimate_u(canonical, math.inf, 1.0, Domain("square", 1.0), paths=4000,
                          seed=7, drift=False)
    assert abs(u - bm_exit_mean(Domain("square", 1.0), 1.0)) < 3 * se
    assert bm_exit_mean(Domain("disk", 2.0), 4.0) == pytest.approx(0.5)


def test_u_trivial_cases(canonical):
    u, se, _ = estimate_u(canonical, 1e-3, 5.0, Domain("disk", 1.0), f="zero", paths=100, seed=8)
    assert u == 0.0 and se == 0.0
    u, _, _ = estimate_u(canonical, 1e-3, 5.0, Domain("disk", 1.0), x=(5.0, 0.0), paths=100,
                         seed=8)
    assert u == 0.0


def test_u_cosine_without_drift(canonical):
    # cos(1) <= cos(x1) <= 1 on the unit disk, pathwise on shared noise
    u, se, _ = estimate_u(canonical, math.inf, 1.0, Domain("disk", 1.0), f="cosine",
                          f_par=(1.0, 0.0), paths=4000, seed=9, drift=False)
    one, _, _ = estimate_u(canonical, math.inf, 1.0, Domain("disk", 1.0), paths=4000, seed=9,
                           drift=False)
    assert math.cos(1.0) * one - 1e-9 <= u <= one + 1e-9


def test_regime_config_validation():
    with pytest.raises(ConfigError):
        RegimeConfig(eps_list=(1e-4, 1e-3), rule="averaging", param=0.125)
    with pytest.raises(ConfigError):
        RegimeConfig(eps_list=(1e-3,), rule="averaging", param=0.125, paths=10)
    with pytest.raises(ConfigError):
        RegimeConfig(eps_list=(1e-3,), rule="diagonal", param=1.0)
    cfg = RegimeConfig(eps_list=(1e-4,), rule="transition", param=2.0)
    assert cfg.R(1e-4) == pytest.approx(20.0)
    assert RegimeConfig(eps_list=(1e-4,), rule="homogenization", param=0.375).R(1e-4) == \
        pytest.approx(1e-4 ** -0.375)


def test_averaging_row_structure(canonical):
    cfg = RegimeConfig(eps_list=(1e-2,), rule="averaging", param=0.125,
                       domain=Domain("square", 1.0), paths=200, seed=10)
    row = regime_row(canonical, cfg, 1e-2)
    for key in ("epsilon", "R", "u_hat", "se", "oracle", "oracle_se", "ratio"):
        assert key in row
    assert row["oracle"] == pytest.approx(1.45670307, rel=1e-6)


def test_permutation_null_is_uniform():
    ps = null_calibration(n_rep=100, n=200, seed=11)
    assert stats.kstest(ps, "uniform").pvalue > 0.01


def test_independence_detects_dependence():
    from cellflow.stats import dcor_permutation_test
    rng = np.random.default_rng(12)
    x = rng.standard_normal(300)
    _, p = dcor_permutation_test(x, x ** 2 + 0.1 * rng.standard_normal(300), n_perm=199)
    assert p < 0.01
