from __future__ import annotations

import logging

import numpy as np
import pytest

from loopfsi.analytic import sphere_pressure
from loopfsi.cli import (
    RunError,
    ScenarioError,
    Scenario,
    compute_max_pointwise_error,
    load_scenario,
    main,
    parse_scenario,
    run,
)
from loopfsi.meshio import load_mesh

SMALL_RIGID = """
[mesh]
source = sphere
level = 1
base = icosahedron
[wave]
ka = 1.5
[study]
kind = rigid
[sampling]
count = 24
"""


def test_max_pointwise_error_examples():
    o = np.array([1.0 + 1j, -2.0, 0.5j])
    assert compute_max_pointwise_error(o, o) == 0.0
    assert compute_max_pointwise_error(1.1 * np.abs(o), np.abs(o)) == pytest.approx(0.1)
    with pytest.raises(ValueError, match="relocate"):
        compute_max_pointwise_error(o, np.array([1.0, 0.0, 1.0]))
    with pytest.raises(ValueError, match="shape"):
        compute_max_pointwise_error(o[:2], o)


def test_scenario_defaults_and_conversion():
    sc = parse_scenario("[wave]\nka = 10\n")
    assert sc.sphere_level == 2 and sc.study == "coupled" and sc.operators == "auto"
    assert sc.k == pytest.approx(10.0) and sc.ka == pytest.approx(10.0)
    # automatic sample count keeps at least 12 points per wavelength of arc
    assert sc.n_samples() == 600
    assert parse_scenario("[wave]\nka = 2\n").n_samples() == 360
    sc = parse_scenario("[mesh]\nradius = 1.0\n[wave]\nka = 6\ndirection = 0 2 0\n")
    assert sc.k == pytest.approx(3.0)
    assert sc.direction == (0.0, 1.0, 0.0) and not sc.has_oracle


@pytest.mark.parametrize(
    "text, match",
    [
        ("[wave]\nka = 1\nk = 2\n", "exactly one of ka or k"),
        ("[study]\nkind = rigid\n", "exactly one of ka or k"),
        ("[wave]\nka = 1\n[bogus]\nx = 1\n", "unknown section"),
        ("[wave]\nka = 1\n[study]\nkind = modal\n", "unknown study"),
        ("[wave]\nka = -1\n", "positive"),
        ("[wave]\nka = ten\n", "cannot parse"),
        ("[wave]\nka = 1\n[material]\nnu = 0.7\n", "nu"),
        ("[wave]\nka = 1\ndirection = 0 0 0\n", "direction"),
        ("[wave]\nka = 1\n[solver]\noperators = sparse\n", "operators"),
        ("[wave\nka = 1\n", "malformed"),
    ],
)
def test_scenario_errors(text, match):
    with pytest.raises(ScenarioError, match=match):
        parse_scenario(text)


def test_scenario_needs_exactly_one_mesh_source():
    with pytest.raises(ScenarioError, match="exactly one source"):
        Scenario(mesh_file="a.off", sphere_level=2)
    with pytest.raises(ScenarioError, match="exactly one source"):
        Scenario(mesh_file=None, sphere_level=None)


def test_missing_scenario_file(tmp_path):
    with pytest.raises(ScenarioError):
        load_scenario(tmp_path / "nope.ini")
    assert main(["run", str(tmp_path / "nope.ini")]) == 1


def test_analytic_study_invokes_no_solver():
    sc = parse_scenario("[wave]\nka = 10\n[study]\nkind = analytic\n[sampling]\ncount = 36\n")
    res = run(sc)
    assert res.mesh is None and res.iterations == 0
    np.testing.assert_array_equal(res.pressure, sphere_pressure(sc.series_params(), 5.0, res.theta, "total"))


def test_analytic_needs_sphere(tmp_path, ico42):
    from loopfsi.meshio import save_mesh

    save_mesh(ico42, tmp_path / "m.off")
    sc = parse_scenario(f"[mesh]\nsource = {tmp_path / 'm.off'}\nfit = none\n[wave]\nk = 1\n[study]\nkind = analytic\n")
    with pytest.raises(RunError):
        run(sc)


def test_analytic_command_prints_csv(capsys):
    assert main(["analytic", "ka=10", "count=8"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "theta,re_p,im_p,abs_p"
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    assert data.shape == (8, 4)
    np.testing.assert_allclose(data[:, 3], np.hypot(data[:, 1], data[:, 2]), rtol=1e-15)
    assert main(["analytic", "frequency=3"]) == 1


def test_rigid_run_writes_outputs_deterministically(tmp_path):
    path = tmp_path / "s.ini"
    path.write_text(SMALL_RIGID)
    assert main(["run", str(path), "--output-dir", str(tmp_path / "a")]) == 0
    assert main(["run", str(path), "--output-dir", str(tmp_path / "b")]) == 0
    for name in ("profile.csv", "oracle.csv", "surface.vtk"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    meta = (tmp_path / "a" / "metadata.txt").read_text()
    assert "max_pointwise_error" in meta and "elements_per_wavelength" in meta
    prof = np.loadtxt(tmp_path / "a" / "profile.csv", delimiter=",", skiprows=1)
    assert prof.shape == (24, 4)
    assert np.all((prof[:, 0] >= 0) & (prof[:, 0] < 2 * np.pi))
    vtk = (tmp_path / "a" / "surface.vtk").read_text()
    assert "SCALARS re_p" in vtk and "VECTORS re_u" in vtk


def test_coupled_run_small_mesh():
    sc = parse_scenario(SMALL_RIGID.replace("kind = rigid", "kind = coupled"))
    res = run(sc)
    assert res.max_error is not None and res.max_error < 0.2
    assert np.abs(res.surface_u).max() > 0
    assert res.stats["operators"] == "dense"


def test_compressed_and_dense_agree_on_small_mesh():
    sc = parse_scenario(SMALL_RIGID)
    dense = run(sc, dense=True).pressure
    comp = run(parse_scenario(SMALL_RIGID), dense=False, epsilon=1e-8).pressure
    assert np.max(np.abs(dense - comp)) <= 1e-7 * np.max(np.abs(dense))


def test_low_resolution_warning(caplog):
    sc = parse_scenario(SMALL_RIGID.replace("ka = 1.5", "ka = 10"))
    with caplog.at_level(logging.WARNING, logger="loopfsi.cli"):
        res = run(sc)
    assert res.elements_per_wavelength < 6
    assert "elements per wavelength" in caplog.text


def test_mesh_commands(tmp_path, capsys):
    out = tmp_path / "s.off"
    assert main(["mesh", "gen", "--level", "1", "--base", "icosahedron", "-o", str(out)]) == 0
    assert load_mesh(out).n_vertices == 42
    fitted = tmp_path / "f.obj"
    assert main(["mesh", "fit", str(out), "-o", str(fitted)]) == 0
    assert main(["mesh", "info", str(fitted), "--radius", "0.5"]) == 0
    text = capsys.readouterr().out
    assert "vertices 42" in text and "genus 0" in text and "valence 5:12 6:30" in text
    err = float(text.split("geometry_error_percent")[1].split()[0])
    assert err < 1.0


def test_hmatrix_diag(tmp_path, capsys):
    path = tmp_path / "s.ini"
    path.write_text(SMALL_RIGID)
    assert main(["hmatrix-diag", str(path), "--output-dir", str(tmp_path)]) == 0
    assert "blocks=" in capsys.readouterr().out
    assert (tmp_path / "blocks.csv").read_text().startswith("row_offset,row_size")
