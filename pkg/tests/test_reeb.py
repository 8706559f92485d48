import math

import numpy as np
import pytest
from numba import njit
from scipy import integrate

from cellflow.errors import CoefficientRange
from cellflow.hamiltonian import SEPARATRIX, canonical_kernel
from cellflow.reeb import (
    GraphPoint, contour_quadrature, edge_coefficients, gamma_project, gluing_weights,
)

PI = math.pi


@njit
def grad_sq(x1, x2):
    _, g1, g2, _ = canonical_kernel(x1, x2)
    return g1 * g1 + g2 * g2


@njit
def one(x1, x2):
    return 1.0


@njit
def cos_x1(x1, x2):
    return math.cos(x1) ** 2


@njit
def grad_sq_plus_cos(x1, x2):
    return grad_sq(x1, x2) + cos_x1(x1, x2)


def test_gamma_project(canonical):
    p = gamma_project(canonical, (PI / 2, PI / 2))
    assert p.edge == canonical.cell_of((PI / 2, PI / 2)) and p.y == pytest.approx(1.0)
    o = gamma_project(canonical, (PI, 0.3))
    assert o.edge == SEPARATRIX and o.y == 0.0
    x = np.array([0.4, 2.0])
    p, q = gamma_project(canonical, x), gamma_project(canonical, x + canonical.period)
    assert p.edge == q.edge and p.y == pytest.approx(q.y, abs=1e-14)


def test_flux_quadrature_tends_to_eight(canonical):
    vals = [contour_quadrature(canonical, 0, h, grad_sq) for h in (1e-3, 5e-4, 2.5e-4)]
    assert abs(vals[-1] - 8.0) < 5e-3
    assert abs(vals[-1] - 8.0) < abs(vals[0] - 8.0)


def test_period_near_extremum(canonical):
    assert contour_quadrature(canonical, 0, 1 - 1e-6, one) == pytest.approx(2 * PI, rel=1e-5)


def test_quadrature_linearity(canonical):
    a = contour_quadrature(canonical, 2, 0.4, grad_sq)
    b = contour_quadrature(canonical, 2, 0.4, cos_x1)
    c = contour_quadrature(canonical, 2, 0.4, grad_sq_plus_cos)
    assert abs(a + b - c) <= 1e-10 * abs(c) + 1e-10


@pytest.mark.parametrize("y", [0.1, 0.5, 0.9])
def test_drift_is_minus_level(canonical, y):
    for edge in range(4):
        _, b, _ = edge_coefficients(canonical, edge, y)
        assert b == pytest.approx(-y, rel=1e-6)


def test_a2_times_period_is_flux(canonical):
    a2, _, T = edge_coefficients(canonical, 0, 1 - 1e-4)
    flux = contour_quadrature(canonical, 0, 1 - 1e-4, grad_sq)
    assert a2 * T / flux == pytest.approx(1.0, abs=1e-6)


def test_a2_times_period_separatrix_limit(canonical):
    prods = [np.prod(edge_coefficients(canonical, 0, y)[::2]) for y in (1e-3, 5e-4, 2.5e-4)]
    assert abs(prods[-1] / 8.0 - 1) < 5e-3
    assert abs(prods[2] - prods[1]) / prods[2] < 1e-2


def test_gluing_weights(canonical):
    w = gluing_weights(canonical)
    assert np.allclose(w, 0.25, atol=1e-12) and w.sum() == pytest.approx(1.0, abs=1e-15)
    raw = gluing_weights(canonical, unnormalized=True)
    assert np.allclose(raw, 8.0, atol=1e-3)


def test_tables_identical_across_edges(graph):
    ref = graph.a2[0]
    for e in range(1, 4):
        assert np.max(np.abs(graph.a2[e] / ref - 1)) < 1e-8
        assert np.max(np.abs(graph.T[e] / graph.T[0] - 1)) < 1e-8


def test_interpolation_off_grid(canonical, graph):
    g = graph.levels[0]
    for y in np.sqrt(g[[10, 80, 160, 240]] * g[[11, 81, 161, 241]]):
        a2, b, T = edge_coefficients(canonical, 1, y)
        la2, lb = graph.coefficients(1, y)
        assert la2 == pytest.approx(a2, rel=1e-4)
        assert lb == pytest.approx(b, rel=1e-4)
        assert graph.period(1, y) == pytest.approx(T, rel=1e-4)


def test_period_grows_logarithmically(graph):
    ys = np.array([1e-2, 1e-3, 1e-4])
    T = np.array([graph.period(0, y) for y in ys])
    assert np.all(np.diff(T) > 0)
    ratio = T / np.log(1 / ys)
    assert abs(ratio[2] / ratio[1] - 1) < 0.05


def test_inverse_a2_integrable(graph):
    def inv(y):
        return 1.0 / graph.coefficients(0, y)[0]

    coarse = integrate.quad(inv, 1e-6, 0.1, points=[1e-5, 1e-4, 1e-3, 1e-2], limit=200)[0]
    fine = sum(integrate.quad(inv, lo, hi)[0]
               for lo, hi in zip(np.geomspace(1e-6, 0.1, 21)[:-1], np.geomspace(1e-6, 0.1, 21)[1:]))
    assert np.isfinite(coarse) and abs(coarse / fine - 1) < 0.01


def test_a2_positive(graph):
    assert np.all(graph.a2 > 0)


def test_lookup_out_of_range(graph):
    with pytest.raises(CoefficientRange):
        graph.coefficients(0, 1.5)
    with pytest.raises(CoefficientRange):
        graph.coefficients(7, 0.5)


def test_graph_point_vertex():
    assert GraphPoint(3, 0.0).y == 0.0
