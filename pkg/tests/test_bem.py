from __future__ import annotations

import numpy as np
import pytest

from loopfsi.analytic import SphereScatterParams, sphere_pressure
from loopfsi.bem import (
    QuadratureError,
    WaveContext,
    assemble_operators,
    build_collocation_table,
    dump_matrix,
    evaluate_exterior_pressure,
    helmholtz_kernel,
    kernel_dGdn,
    load_matrix,
    project_to_basis,
    solve_rigid,
    verify_quadrature,
)
from loopfsi.cli import compute_max_pointwise_error, elements_per_wavelength
from loopfsi.quadrature import strang_fix7, subdivided
from loopfsi.subdivision import evaluator
from loopfsi.surface import quadrature_data

THETA = 2 * np.pi * np.arange(360) / 360
CIRCLE = 5 * np.stack([np.cos(THETA), np.sin(THETA), 0 * THETA], axis=1)


def test_kernel_values():
    o = np.zeros(3)
    assert helmholtz_kernel(o, [2.0, 0, 0], 0.0) == pytest.approx(1 / (8 * np.pi))
    assert helmholtz_kernel(o, [0, 1.0, 0], np.pi) == pytest.approx(-1 / (4 * np.pi))
    assert kernel_dGdn(o, [1.0, 0, 0], [0, 0, 1.0], 3.0) == 0
    with pytest.raises(ValueError, match="coincident"):
        helmholtz_kernel(o, o, 1.0)


def test_normal_derivative_matches_finite_difference():
    x, y, n = np.zeros(3), np.array([0.3, -0.4, 0.9]), np.array([0.6, 0.0, 0.8])
    h = 1e-6
    fd = (helmholtz_kernel(x, y + h * n, 4.0) - helmholtz_kernel(x, y - h * n, 4.0)) / (2 * h)
    assert kernel_dGdn(x, y, n, 4.0) == pytest.approx(fd, rel=1e-8)


def test_collocation_table(sphere1746, sphere438):
    tab = build_collocation_table(sphere1746)
    assert len(tab) == 1746
    assert np.array_equal(tab.owner, np.arange(1746))
    # points lie on the fitted limit surface, not at the control vertices
    r = np.linalg.norm(tab.points, axis=1)
    assert np.abs(r - 0.5).max() <= 1e-5
    assert np.linalg.norm(tab.points - sphere1746.vertices, axis=1).max() > 1e-4
    np.testing.assert_allclose(np.linalg.norm(tab.normals, axis=1), 1.0)
    assert len(build_collocation_table(sphere438)) == sphere438.n_vertices


def test_static_row_sum_calibration(disc438):
    H = assemble_operators(disc438, WaveContext(k=0.0)).H
    np.testing.assert_allclose(H.sum(axis=1), 1.0, atol=1e-6)


def _far_pair_errors(disc, k=10.0):
    mesh = disc.mesh
    irregular = evaluator(mesh).corner_valence != 6
    x = disc.table.points[0]
    far = np.linalg.norm(disc.table.points - x, axis=1) > 0.8
    g, _ = disc.kernel_block(k, [0], np.arange(disc.n))
    qd = quadrature_data(mesh, subdivided(strang_fix7(), 3))
    r = np.linalg.norm(qd.points - x, axis=1)
    ref = qd.basis_matrix(mesh.n_vertices).T @ (np.exp(1j * k * r) / (4 * np.pi * r))
    touches = np.array([irregular[e].any() for e in disc.support_elements])
    err = np.abs(g[0] - ref) / np.abs(ref)
    return err[far & ~touches], err[far & touches]


def test_far_pair_against_refined_quadrature(disc438):
    regular, irregular = _far_pair_errors(disc438)
    assert len(regular) and len(irregular)
    # 7-point rule on smooth patches; the corner behaviour at extraordinary
    # vertices limits accuracy on patches that touch them
    assert regular.max() <= 1e-5
    assert irregular.max() <= 2e-3


@pytest.mark.xfail(strict=True, reason="7-point far rule cannot reach 1e-10 against a refined rule")
def test_far_pair_to_1e10(disc438):
    regular, _ = _far_pair_errors(disc438)
    assert regular.max() <= 1e-10


def test_quadrature_sentinel(sphere438):
    rows = np.arange(0, 438, 40)
    worst = verify_quadrature(sphere438, WaveContext(k=10.0), rows, tol=1e-3)
    assert 0 < worst <= 1e-3
    with pytest.raises(QuadratureError, match="collocation row"):
        verify_quadrature(sphere438, WaveContext(k=10.0), rows, tol=1e-12)


@pytest.mark.xfail(strict=True, reason="refined near rules are compared with the 7-point far rule nearby")
def test_quadrature_doubling_to_1e8(sphere438):
    verify_quadrature(sphere438, WaveContext(k=10.0), np.arange(0, 438, 40), tol=1e-8)


@pytest.fixture(scope="module")
def rigid438(disc438):
    ctx = WaveContext(k=6.0)
    ops = assemble_operators(disc438, ctx)
    return ctx, ops, solve_rigid(ops)


def test_rigid_sphere_matches_series(disc438, rigid438):
    ctx, _, p = rigid438
    num = evaluate_exterior_pressure(disc438, ctx, p, np.zeros(disc438.n), CIRCLE)
    ref = sphere_pressure(SphereScatterParams(k=6.0), 5.0, THETA, "rigid")
    assert compute_max_pointwise_error(num, ref) <= 0.02


def test_six_elements_per_wavelength_rule(disc438):
    ka = 11.0
    assert elements_per_wavelength(disc438, ka) >= 6
    ctx = WaveContext(k=ka)
    p = solve_rigid(assemble_operators(disc438, ctx))
    num = evaluate_exterior_pressure(disc438, ctx, p, np.zeros(disc438.n), CIRCLE)
    ref = sphere_pressure(SphereScatterParams(k=ka), 5.0, THETA, "rigid")
    assert compute_max_pointwise_error(num, ref) <= 0.05


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_interior_extinction(disc438, seed):
    rng = np.random.default_rng(seed)
    d = rng.standard_normal(3)
    ctx = WaveContext(k=6.0, direction=tuple(d / np.linalg.norm(d)))
    p = project_to_basis(disc438, ctx.incident(disc438.y))
    q = project_to_basis(disc438, np.einsum("ij,ij->i", ctx.incident_gradient(disc438.y), disc438.ny))
    scattered = evaluate_exterior_pressure(disc438, ctx, p, q, CIRCLE, include_incident=False)
    assert np.abs(scattered).max() <= 1e-3


def test_zero_surface_data_gives_incident_field(disc438):
    ctx = WaveContext(k=3.0, amplitude=2.0)
    z = np.zeros(disc438.n)
    np.testing.assert_array_equal(evaluate_exterior_pressure(disc438, ctx, z, z, CIRCLE), ctx.incident(CIRCLE))


def test_near_surface_evaluation_warns(disc438):
    z = np.zeros(disc438.n)
    with pytest.warns(RuntimeWarning, match="element diameter"):
        evaluate_exterior_pressure(disc438, WaveContext(k=1.0), z, z, [[0.51, 0.0, 0.0]])


def test_wave_context_validation():
    with pytest.raises(ValueError):
        WaveContext(k=-1.0)
    with pytest.raises(ValueError, match="unit"):
        WaveContext(k=1.0, direction=(1.0, 1.0, 0.0))
    assert WaveContext(k=2.0).omega == pytest.approx(2964.0)


def test_matrix_dump_round_trip(tmp_path, rigid438):
    _, ops, _ = rigid438
    dump_matrix(tmp_path / "h.bin", ops.H)
    np.testing.assert_array_equal(load_matrix(tmp_path / "h.bin"), ops.H)
    (tmp_path / "bad.bin").write_bytes(b"notamatrix")
    with pytest.raises(ValueError, match="not a matrix dump"):
        load_matrix(tmp_path / "bad.bin")
