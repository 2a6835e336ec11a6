from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from loopfsi.analytic import SphereScatterParams
from loopfsi.analytic import natural_frequencies as analytic_frequencies
from loopfsi.mesh import ControlMesh
from loopfsi.shell import (
    ShellError,
    ShellMaterial,
    assemble_mass,
    assemble_stiffness,
    build_dynamic_operator,
    dimensionless_frequency,
    natural_frequencies,
)
from loopfsi.surface import surface_area

MAT = ShellMaterial()


@pytest.fixture(scope="module")
def km438(sphere438):
    return assemble_stiffness(sphere438, MAT), assemble_mass(sphere438, MAT)


def _rigid_modes(mesh):
    x = mesh.vertices
    modes = []
    for d in range(3):
        t = np.zeros_like(x)
        t[:, d] = 1.0
        modes.append(t.ravel())
        w = np.zeros(3)
        w[d] = 1.0
        modes.append(np.cross(w, x).ravel())
    return np.array(modes)


def test_material_validation():
    with pytest.raises(ValueError):
        ShellMaterial(nu=0.5)
    with pytest.raises(ValueError):
        ShellMaterial(h=0.0)
    assert MAT.thin_shell_ok(0.5) and not ShellMaterial(h=0.2).thin_shell_ok(0.5)


def test_stiffness_and_mass_symmetric(km438):
    K, M = km438
    assert abs(K - K.T).max() <= 1e-10 * abs(K).max()
    assert abs(M - M.T).max() <= 1e-10 * abs(M).max()


def test_rigid_body_modes_have_zero_strain_energy(sphere438, km438):
    K, _ = km438
    knorm = spla.norm(K)
    for t in _rigid_modes(sphere438):
        assert np.linalg.norm(K @ t) <= 1e-8 * knorm * np.linalg.norm(t)


def test_exactly_six_near_null_modes(sphere438, km438):
    K, M = km438
    lam = np.sort(np.linalg.eigvalsh(K.toarray()))
    lmax = lam[-1]
    assert np.all(np.abs(lam[:6]) <= 1e-8 * lmax)
    assert lam[6] > 1e-6 * lmax
    # consistent mass is positive definite
    assert spla.eigsh(M, k=1, which="SA", return_eigenvectors=False)[0] > 0


def test_total_mass_matches_area(sphere438, km438):
    _, M = km438
    one = np.zeros(3 * sphere438.n_vertices)
    one[0::3] = 1.0
    mass = one @ (M @ one)
    assert mass == pytest.approx(MAT.rho_s * MAT.h * surface_area(sphere438), rel=1e-6)
    assert mass == pytest.approx(MAT.rho_s * MAT.h * np.pi, rel=1e-4)


def test_thickness_scaling(sphere438):
    thick = ShellMaterial(h=2 * MAT.h)
    rng = np.random.default_rng(0)
    u = rng.standard_normal(3 * sphere438.n_vertices)
    for part, factor in (("membrane", 2.0), ("bending", 8.0)):
        e1 = u @ (assemble_stiffness(sphere438, MAT, parts=(part,)) @ u)
        e2 = u @ (assemble_stiffness(sphere438, thick, parts=(part,)) @ u)
        assert e2 / e1 == pytest.approx(factor, rel=1e-12)


def test_degenerate_metric_names_element(ico42):
    flat = ControlMesh(np.zeros_like(ico42.vertices), ico42.triangles)
    with pytest.raises(ShellError, match="element"):
        assemble_stiffness(flat, MAT)


def _spheroidal_errors(mesh):
    K, M = assemble_stiffness(mesh, MAT), assemble_mass(mesh, MAT)
    Om = dimensionless_frequency(natural_frequencies(K, M, n_modes=40), 0.5, MAT)
    p = SphereScatterParams(k=1.0)
    errs = {}
    for n in (2, 3, 4, 5):
        ref = analytic_frequencies(n, p)[0]
        # torsional modes are interleaved; take the 2n+1 closest eigenvalues
        near = np.sort(np.abs(Om[6:] / ref - 1))[: 2 * n + 1]
        errs[n] = near.max()
    return errs


def test_sphere_frequencies_match_quartic_and_converge(sphere438, sphere1746):
    coarse = _spheroidal_errors(sphere438)
    fine = _spheroidal_errors(sphere1746)
    for n in (2, 3, 4, 5):
        assert coarse[n] <= 0.05 and fine[n] <= 0.05
    for n in (2, 3):
        assert fine[n] < coarse[n]


def test_static_operator_is_stiffness(km438):
    K, M = km438
    A = build_dynamic_operator(K + 1e3 * M, M, MAT, 0.0).A
    assert abs(A - (K + 1e3 * M)).max() == 0


def test_solve_residual(km438):
    K, M = km438
    op = build_dynamic_operator(K, M, MAT, 900.0)
    rng = np.random.default_rng(1)
    f = rng.standard_normal(op.n_dof) + 1j * rng.standard_normal(op.n_dof)
    u = op.solve(f)
    assert np.linalg.norm(op.A @ u - f) <= 1e-10 * np.linalg.norm(f)


def test_singular_operator_raises(km438):
    K, M = km438
    with pytest.raises(ShellError, match="damping"):
        build_dynamic_operator(K, M, MAT, 0.0)
    with pytest.raises(ValueError):
        build_dynamic_operator(K, M, MAT, -1.0)


def test_damping_keeps_resonances_nonsingular(km438):
    K, M = km438
    damped = ShellMaterial(c2=5.0)
    w = natural_frequencies(K, M, n_modes=12)[6:]
    rng = np.random.default_rng(2)
    f = rng.standard_normal(K.shape[0])
    for omega in w[::2]:
        op = build_dynamic_operator(K, M, damped, float(omega))
        u = op.solve(f)
        assert np.all(np.isfinite(u))
        assert np.linalg.norm(op.A @ u - f) <= 1e-8 * np.linalg.norm(f)
