import pytest

from cellflow.hamiltonian import get_field
from cellflow.reeb import ReebGraph, reeb_graph


@pytest.fixture(scope="session")
def canonical():
    return get_field("canonical")


@pytest.fixture(scope="session")
def graph(canonical):
    return reeb_graph(canonical)


@pytest.fixture(scope="session")
def unit_graph():
    return ReebGraph.constant()


def within_se(est, target, se, k=3.0):
    return abs(est - target) <= k * se
