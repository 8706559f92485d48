import json

import numpy as np
import pytest

from cellflow.chainlab import (
    KilledChainSpec, clt_covariance, four_cycle_spec, invariant_measure, lattice_span,
    limit_law_test, limit_params, run_killed_chain, survivor_mean_g,
)
from cellflow.errors import ConfigError, DoeblinFail, SingularPoisson


def lazy_cycle():
    return four_cycle_spec().P0


def test_invariant_uniform_rows():
    P = np.full((5, 5), 0.2)
    assert np.allclose(invariant_measure(P), 0.2, atol=1e-15)


def test_invariant_two_state():
    lam = invariant_measure(np.array([[0.9, 0.1], [0.2, 0.8]]))
    assert np.allclose(lam, [2 / 3, 1 / 3], atol=1e-14)


def test_invariant_power_and_residual():
    rng = np.random.default_rng(0)
    P = rng.random((6, 6))
    P /= P.sum(1, keepdims=True)
    lam = invariant_measure(P)
    assert np.max(np.abs(lam @ P - lam)) < 1e-12
    assert np.allclose(invariant_measure(P @ P), lam, atol=1e-12)


def test_periodic_chain_fails_doeblin():
    with pytest.raises(DoeblinFail):
        invariant_measure(np.array([[0.0, 1.0], [1.0, 0.0]]))


def test_clt_iid_rows_equals_covariance():
    rng = np.random.default_rng(1)
    row = rng.random(4)
    row /= row.sum()
    P = np.tile(row, (4, 1))
    g = rng.normal(size=(4, 2))
    spec = KilledChainSpec.build(P, g, np.ones((1, 4)))
    gc = spec.g
    cov = (row[:, None] * gc).T @ gc
    assert np.allclose(clt_covariance(spec), cov, atol=1e-13)


def test_clt_alternating_cycle_against_simulation():
    P = lazy_cycle()
    xs = np.arange(4)
    spec = KilledChainSpec.build(P, np.column_stack([(-1.0) ** xs, 0 * xs]), np.ones((1, 4)))
    q = clt_covariance(spec)[0, 0]
    # 4e4 stationary chains of 250 steps (1e7 steps in total)
    rng = np.random.default_rng(2)
    n, k = 40_000, 250
    x = rng.integers(0, 4, n)
    s = np.zeros(n)
    moves = np.array([0, 1, -1])
    for _ in range(k):
        x = (x + moves[np.searchsorted([0.2, 0.6], rng.random(n), side="right")]) % 4
        s += (-1.0) ** x
    assert abs(np.var(s / np.sqrt(k)) / q - 1) < 0.02


def test_clt_bilinear():
    spec = four_cycle_spec()
    doubled = KilledChainSpec.build(spec.P0, 2 * spec.g, spec.h)
    assert np.allclose(clt_covariance(doubled), 4 * clt_covariance(spec), rtol=0, atol=1e-14)


def test_singular_poisson():
    e = 1e-14
    P = np.array([[1 - e, e], [e, 1 - e]])
    spec = KilledChainSpec.build(P, [1.0, -1.0], np.ones((1, 2)))
    with pytest.raises(SingularPoisson):
        clt_covariance(spec)


def test_four_cycle_parameters():
    par = limit_params(four_cycle_spec())
    assert par.J0 == pytest.approx(2.0)
    assert np.allclose(par.label_probs, [0.5625, 0.4375])
    assert np.allclose(par.Qbar, np.diag([0.25, 0.75]), atol=1e-14)
    assert par.label_probs.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("eps", [1e-2, 1e-4])
def test_constant_killing_label_law(eps):
    spec = KilledChainSpec.build(lazy_cycle(), np.zeros((4, 2)), [[1.0] * 4, [2.0] * 4])
    _, labels, _ = run_killed_chain(spec, eps, seed=3, samples=20_000)
    p = np.mean(labels == 0)
    assert abs(p - 1 / 3) < 3 * np.sqrt(p * (1 - p) / len(labels))


def test_mean_killing_time_scaling():
    spec = four_cycle_spec()
    means = {}
    for eps in (1e-4, 1e-6):
        _, _, steps = run_killed_chain(spec, eps, seed=4, samples=10_000)
        means[eps] = steps.mean()
    assert abs(means[1e-4] * 1e-2 * 2.0 - 1) < 0.05
    assert abs(means[1e-6] / means[1e-4] / 10 - 1) < 0.05


def test_label_frequencies_match_linear_algebra():
    spec = four_cycle_spec()
    par = limit_params(spec)
    for eps in (1e-3, 1e-5):
        _, labels, _ = run_killed_chain(spec, eps, seed=5, samples=10_000)
        f = np.mean(labels == 0)
        assert abs(f - par.label_probs[0]) < 3 * np.sqrt(f * (1 - f) / len(labels))


def test_far_from_limit_report_is_produced():
    rep = limit_law_test(four_cycle_spec(), 1e-1, 10_000, seed=6, n_perm=99)
    d = rep.as_dict()
    assert d["samples"] == 10_000 and 0 <= d["label_chisq_p"] <= 1


def test_survivor_centering_defect_decays():
    spec = four_cycle_spec()
    a = np.linalg.norm(survivor_mean_g(spec, 1e-2))
    b = np.linalg.norm(survivor_mean_g(spec, 1e-4))
    # at least sqrt(10) per decade, with a factor-2 allowance
    assert a / b >= 10 / 2


def test_runs_are_deterministic():
    spec = four_cycle_spec()
    a = run_killed_chain(spec, 1e-3, seed=7, samples=500)
    b = run_killed_chain(spec, 1e-3, seed=7, samples=500)
    for u, v in zip(a, b):
        assert np.array_equal(u, v)
    tail = run_killed_chain(spec, 1e-3, seed=7, samples=200, path_offset=300)
    assert np.array_equal(a[0][300:], tail[0])


def test_json_round_trip():
    spec = four_cycle_spec()
    back = KilledChainSpec.from_json(json.dumps(spec.to_json()))
    assert np.allclose(back.P0, spec.P0) and np.allclose(back.g, spec.g)
    assert np.allclose(back.h, spec.h)


def test_invalid_specs():
    P = lazy_cycle()
    with pytest.raises(ConfigError):
        KilledChainSpec.build(P, np.zeros(4), [[1.0, 0.0, 1.0, 1.0]])
    with pytest.raises(ConfigError):
        four_cycle_spec().kernel(0.5)
    with pytest.raises(ConfigError):
        KilledChainSpec.from_json({"P0": P.tolist(), "g": [0, 0, 0, 0]})


def test_lattice_span():
    assert lattice_span(np.array([0.0, 2.0, -4.0, 6.0 + 1e-15])) == pytest.approx(2.0)
    assert lattice_span(np.array([0.0, 1.0, np.sqrt(2)])) == 0.0
