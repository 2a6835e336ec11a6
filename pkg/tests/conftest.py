from __future__ import annotations

import pytest

from loopfsi.bem import BemDiscretisation
from loopfsi.meshio import Sphere, icosahedron, l2_fit_to_target, make_sphere_control_mesh
from loopfsi.mesh import loop_subdivide


@pytest.fixture(scope="session")
def unit_sphere():
    return Sphere(0.5)


@pytest.fixture(scope="session")
def ico42():
    """42-vertex sphere (one Loop step of the icosahedron, vertices on the sphere)."""
    return make_sphere_control_mesh(1)


@pytest.fixture(scope="session")
def raw_ico42():
    return loop_subdivide(icosahedron())


@pytest.fixture(scope="session")
def sphere438(unit_sphere):
    return l2_fit_to_target(make_sphere_control_mesh(1, base=111), unit_sphere)


@pytest.fixture(scope="session")
def disc438(sphere438):
    return BemDiscretisation(sphere438)


@pytest.fixture(scope="session")
def sphere1746(unit_sphere):
    return l2_fit_to_target(make_sphere_control_mesh(2, base=111), unit_sphere)
