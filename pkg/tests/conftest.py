import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from meshmorph.decimation import build_hierarchy
from meshmorph.gradsuite import tiny_hierarchy
from meshmorph.mesh import TriMesh, icosphere

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny_h():
    """Icosahedron 12 -> 6 -> 4."""
    return tiny_hierarchy()


@pytest.fixture(scope="session")
def sphere_h():
    """162-vertex icosphere -> 41 -> 11."""
    return build_hierarchy(icosphere(2), levels=2, factor=4)


@pytest.fixture
def triangle():
    return TriMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))


@pytest.fixture
def two_triangles():
    pos = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
    return TriMesh(pos, np.array([[0, 1, 2], [1, 3, 2]]))
