import math

import numpy as np
import pytest

from cellflow.errors import StructureViolation
from cellflow.hamiltonian import SEPARATRIX, HamiltonianField, get_field

PI = math.pi


def test_eval_at_maximum(canonical):
    h, g, lap = canonical.eval((PI / 2, PI / 2))
    assert h == pytest.approx(1.0, abs=1e-15)
    assert np.allclose(g, 0.0, atol=1e-15)


def test_eval_on_separatrix_matches_finite_differences(canonical):
    x = np.array([PI / 2, 0.0])
    h, g, _ = canonical.eval(x)
    assert abs(h) < 1e-15
    assert np.allclose(g, [0.0, 1.0], atol=1e-15)
    step = 1e-6
    fd = [(canonical.H(x + step * e) - canonical.H(x - step * e)) / (2 * step) for e in np.eye(2)]
    assert np.allclose(fd, g, atol=1e-8)


def test_laplacian_identity(canonical):
    rng = np.random.default_rng(1)
    for x in rng.uniform(-10, 10, (50, 2)):
        h, _, lap = canonical.eval(x)
        assert lap == pytest.approx(-2 * h, abs=1e-14)


def test_velocity_examples(canonical):
    assert np.allclose(canonical.velocity((PI / 2, PI / 2)), 0.0, atol=1e-15)
    assert np.allclose(canonical.velocity((PI / 2, 0.0)), [-1.0, 0.0], atol=1e-15)


@pytest.mark.parametrize("name", ["canonical", "skewed"])
def test_velocity_orthogonal_and_divergence_free(name):
    f = get_field(name)
    rng = np.random.default_rng(2)
    step = 1e-5
    for x in rng.uniform(0, 2 * PI, (30, 2)):
        assert abs(f.velocity(x) @ f.eval(x)[1]) < 1e-12
        div = sum((f.velocity(x + step * e)[k] - f.velocity(x - step * e)[k]) / (2 * step)
                  for k, e in enumerate(np.eye(2)))
        assert abs(div) < 1e-6


def test_cell_of_examples(canonical):
    c = canonical.cell_of((PI / 2, PI / 2))
    assert c != SEPARATRIX
    assert canonical.cell_of((PI, 0.3)) == SEPARATRIX
    assert canonical.cell_of((PI / 2 + 2 * PI, PI / 2)) == c


def test_cell_ids_match_extrema(canonical):
    for k, e in enumerate(canonical.extrema):
        assert canonical.cell_of(e) == k
        assert canonical.cell_of(e + 0.3 * np.array([1.0, -0.7])) == k


def test_critical_points(canonical):
    saddles, extrema = canonical.critical_points()
    assert len(saddles) == 4 and len(extrema) == 4 and canonical.n_cells == 4
    expect = {(0.0, 0.0), (PI, 0.0), (0.0, PI), (PI, PI)}
    assert {tuple(np.round(s, 12)) for s in saddles} == {tuple(np.round(e, 12)) for e in expect}
    assert sorted(abs(v) for _, v, _ in extrema) == [1.0] * 4
    for s in saddles:
        assert np.linalg.det(canonical.hessian(s)) == pytest.approx(-1.0, abs=1e-12)


def test_periodicity(canonical):
    rng = np.random.default_rng(3)
    for x in rng.uniform(-5, 5, (20, 2)):
        a = canonical.eval(x)
        b = canonical.eval(x + canonical.period)
        assert abs(a[0] - b[0]) < 1e-12
        assert np.allclose(a[1], b[1], atol=1e-12)


def test_flow_conserves_H(canonical):
    rng = np.random.default_rng(4)
    h = 1e-3
    v = canonical.velocity
    for x in rng.uniform(0, 2 * PI, (2, 2)):
        h0 = canonical.H(x)
        for _ in range(10_000):
            k1 = v(x)
            k2 = v(x + 0.5 * h * k1)
            k3 = v(x + 0.5 * h * k2)
            k4 = v(x + h * k3)
            x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        assert abs(canonical.H(x) - h0) < 1e-8


def test_newton_field_reproduces_canonical():
    def fn(x1, x2):
        s1, c1, s2, c2 = math.sin(x1), math.cos(x1), math.sin(x2), math.cos(x2)
        return s1 * s2, c1 * s2, s1 * c2, -2.0 * s1 * s2

    f = HamiltonianField.from_function("sin-sin-newton", fn)
    assert f.n_cells == 4 and len(f.saddles) == 4
    assert np.allclose(np.sort(np.abs(f.extremum_values)), 1.0)


def test_skewed_field_is_admissible():
    f = get_field("skewed")
    assert f.n_cells == 4
    assert not np.allclose(f.h_max, f.h_max[0])


def test_degenerate_critical_point_rejected():
    def fn(x1, x2):
        # sin^3 has degenerate zeros
        s1, c1, s2, c2 = math.sin(x1), math.cos(x1), math.sin(x2), math.cos(x2)
        return s1 ** 3 * s2, 3 * s1 ** 2 * c1 * s2, s1 ** 3 * c2, 0.0

    with pytest.raises(StructureViolation):
        HamiltonianField.from_function("degenerate", fn, seed_grid=12)
