import numpy as np
import pytest

import phgeo
from phgeo.builtins import get_manifold
from phgeo.connection import connection_for


@pytest.fixture(scope="session", autouse=True)
def _compile_cache():
    phgeo.enable_compile_cache()


@pytest.fixture(scope="session")
def h1():
    return get_manifold("heisenberg1")


@pytest.fixture(scope="session")
def h2():
    return get_manifold("heisenberg2")


@pytest.fixture(scope="session")
def s3():
    return get_manifold("sphere3")


@pytest.fixture(scope="session")
def conn_h1(h1):
    return connection_for(h1)


@pytest.fixture(scope="session")
def conn_h2(h2):
    return connection_for(h2)


@pytest.fixture(scope="session")
def conn_s3(s3):
    return connection_for(s3)


def unit(conn, p, v):
    """Normalise v in the Webster metric at p."""
    g = conn.structure.g_theta(np.asarray(p, dtype=float))
    v = np.asarray(v, dtype=float)
    return v / np.sqrt(v @ g @ v)


def horizontal_pair(conn, p, rng):
    """Unit horizontal v and the unit horizontal Jv at p."""
    f = conn.point_data(np.asarray(p, dtype=float))
    w = f["pi_H"] @ rng.standard_normal(conn.n)
    v = unit(conn, p, w)
    return v, f["J"] @ v
