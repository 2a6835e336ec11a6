"""Mesh files, sphere control meshes, least-squares fitting and geometry error."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse.linalg as spla
from scipy.spatial import ConvexHull

from .mesh import ControlMesh, MeshError, loop_subdivide
from .quadrature import strang_fix7
from .surface import gram_matrix, quadrature_data

log = logging.getLogger(__name__)


class MeshFileError(MeshError):
    pass


# --------------------------------------------------------------------------
# file formats


def _tokens(path):
    """Yield (line number, tokens) skipping blanks and comments."""
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def _read_off(path):
    try:
        return _parse_off(path, _tokens(path))
    except StopIteration:
        raise MeshFileError(f"{path}: unexpected end of file") from None


def _parse_off(path, it):
    lineno, tok = next(it)
    if tok[0].upper() != "OFF":
        raise MeshFileError(f"{path}:{lineno}: expected 'OFF' header, got {tok[0]!r}")
    tok = tok[1:]
    if not tok:
        lineno, tok = next(it)
    try:
        nv, nf = int(tok[0]), int(tok[1])
    except (ValueError, IndexError):
        raise MeshFileError(f"{path}:{lineno}: bad count line") from None
    verts, faces = [], []
    for _ in range(nv):
        lineno, tok = next(it)
        try:
            verts.append([float(t) for t in tok[:3]])
        except ValueError:
            raise MeshFileError(f"{path}:{lineno}: bad vertex record") from None
        if len(tok) < 3:
            raise MeshFileError(f"{path}:{lineno}: vertex needs three coordinates")
    for i in range(nf):
        lineno, tok = next(it)
        try:
            k = int(tok[0])
            idx = [int(t) for t in tok[1:4]]
        except ValueError:
            raise MeshFileError(f"{path}:{lineno}: bad face record") from None
        if k != 3 or len(tok) < 4:
            raise MeshFileError(f"{path}:{lineno}: face {i} has {k} vertices; only triangles are supported")
        faces.append((lineno, idx))
    return verts, faces


def _read_obj(path):
    verts, faces = [], []
    for lineno, tok in _tokens(path):
        if tok[0] == "v":
            if len(tok) < 4:
                raise MeshFileError(f"{path}:{lineno}: vertex needs three coordinates")
            try:
                verts.append([float(t) for t in tok[1:4]])
            except ValueError:
                raise MeshFileError(f"{path}:{lineno}: bad vertex record") from None
        elif tok[0] == "f":
            if len(tok) != 4:
                raise MeshFileError(
                    f"{path}:{lineno}: face {len(faces)} has {len(tok) - 1} vertices; "
                    "only triangles are supported"
                )
            idx = []
            for t in tok[1:]:
                try:
                    j = int(t.split("/")[0])
                except ValueError:
                    raise MeshFileError(f"{path}:{lineno}: bad face record") from None
                idx.append(j - 1 if j > 0 else len(verts) + j)
            faces.append((lineno, idx))
    return verts, faces


def load_mesh(path) -> ControlMesh:
    """Read an ASCII OFF or OBJ triangle mesh and orient it outward."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".off":
        verts, faces = _read_off(path)
    elif suffix == ".obj":
        verts, faces = _read_obj(path)
    else:
        raise MeshFileError(f"{path}: unknown mesh format {suffix!r}")
    nv = len(verts)
    for lineno, f in faces:
        if min(f) < 0 or max(f) >= nv:
            raise MeshFileError(f"{path}:{lineno}: vertex index out of range")
    try:
        mesh = ControlMesh(np.array(verts, dtype=float).reshape(-1, 3), np.array([f for _, f in faces]))
    except MeshError as err:
        raise MeshFileError(f"{path}: {err}") from None
    return mesh.oriented_outward()


def save_mesh(mesh: ControlMesh, path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    fmt = lambda x: repr(float(x))  # noqa: E731 - shortest exact round trip
    with open(path, "w") as fh:
        if suffix == ".off":
            fh.write(f"OFF\n{mesh.n_vertices} {mesh.n_triangles} {mesh.n_edges}\n")
            for v in mesh.vertices:
                fh.write(" ".join(map(fmt, v)) + "\n")
            for t in mesh.triangles:
                fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")
        elif suffix == ".obj":
            for v in mesh.vertices:
                fh.write("v " + " ".join(map(fmt, v)) + "\n")
            for t in mesh.triangles:
                fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
        else:
            raise MeshFileError(f"{path}: unknown mesh format {suffix!r}")


def write_vtk(path, points, triangles, point_data=None, title="loopfsi surface") -> None:
    """Legacy ASCII VTK polydata with scalar/vector point data."""
    points = np.asarray(points)
    with open(path, "w") as fh:
        fh.write(f"# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET POLYDATA\n")
        fh.write(f"POINTS {len(points)} double\n")
        np.savetxt(fh, points, fmt="%.10e")
        fh.write(f"POLYGONS {len(triangles)} {4 * len(triangles)}\n")
        np.savetxt(fh, np.column_stack([np.full(len(triangles), 3), triangles]), fmt="%d")
        if point_data:
            fh.write(f"POINT_DATA {len(points)}\n")
            for name, arr in point_data.items():
                arr = np.asarray(arr, dtype=float)
                if arr.ndim == 1:
                    fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                    np.savetxt(fh, arr, fmt="%.10e")
                else:
                    fh.write(f"VECTORS {name} double\n")
                    np.savetxt(fh, arr, fmt="%.10e")


# --------------------------------------------------------------------------
# generated meshes


def _hull_mesh(points) -> ControlMesh:
    tri = ConvexHull(points).simplices
    p = points[tri]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    flip = np.einsum("ij,ij->i", n, p.mean(axis=1)) < 0
    tri = np.where(flip[:, None], tri[:, ::-1], tri)
    return ControlMesh(points, tri)


def icosahedron(radius: float = 0.5) -> ControlMesh:
    g = (1 + 5**0.5) / 2
    v = np.array(
        [
            [-1, g, 0], [1, g, 0], [-1, -g, 0], [1, -g, 0],
            [0, -1, g], [0, 1, g], [0, -1, -g], [0, 1, -g],
            [g, 0, -1], [g, 0, 1], [-g, 0, -1], [-g, 0, 1],
        ],
        dtype=float,
    )
    return _hull_mesh(radius * v / np.linalg.norm(v, axis=1)[:, None])


def fibonacci_sphere(n: int, radius: float = 0.5) -> ControlMesh:
    """Convex hull of ``n`` Fibonacci-lattice points on a sphere."""
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    phi = np.pi * (1 + 5**0.5) * i
    r = np.sqrt(1 - z * z)
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return _hull_mesh(radius * pts)


def make_sphere_control_mesh(subdiv_levels: int, radius: float = 0.5, base="icosahedron") -> ControlMesh:
    """Sphere control mesh with all control vertices on the sphere.

    ``base`` is ``"icosahedron"`` or an integer vertex count for a Fibonacci
    hull base mesh (111 gives the 438 / 1746 / 6978 vertex family). After
    every refinement the vertices are pushed radially back onto the sphere.
    """
    if subdiv_levels < 0:
        raise ValueError("subdiv_levels must be >= 0")
    mesh = icosahedron(radius) if base == "icosahedron" else fibonacci_sphere(int(base), radius)
    for _ in range(subdiv_levels):
        mesh = loop_subdivide(mesh)
        v = mesh.vertices
        mesh = mesh.with_vertices(radius * v / np.linalg.norm(v, axis=1)[:, None])
    return mesh


# --------------------------------------------------------------------------
# targets, fitting, geometry error


@dataclass(frozen=True)
class Sphere:
    """Implicit sphere target with closest-point projection."""

    radius: float = 0.5
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def project(self, x: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center)
        d = x - c
        return c + self.radius * d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass(frozen=True)
class GeometryErrorReport:
    relative_error: float
    per_element: np.ndarray  # squared-error integral per element

    @property
    def percent(self) -> float:
        return 100.0 * self.relative_error


def geometry_error(mesh: ControlMesh, target, rule=None) -> GeometryErrorReport:
    """Relative L2 distance between the limit surface and its projection on ``target``."""
    qd = quadrature_data(mesh, rule or strang_fix7())
    x = qd.points
    px = target.project(x)
    err = np.einsum("ij,ij->i", x - px, x - px) * qd.jw
    ref = np.einsum("ij,ij->i", px, px) * qd.jw
    per_el = np.bincount(qd.elements, weights=err, minlength=mesh.n_triangles)
    return GeometryErrorReport(float(np.sqrt(err.sum() / ref.sum())), per_el)


def l2_fit_to_target(
    mesh: ControlMesh, target, rule=None, max_iter: int = 5, tol: float = 1e-10
) -> ControlMesh:
    """L2 projection of the limit surface onto ``target``.

    Solves ``M P = int N Pi(x^h) dGamma`` for the control points ``P``; the
    surface measure and the closest points are refreshed until the control
    points stop moving (relative change below ``tol``).
    """
    rule = rule or strang_fix7()
    P = mesh.vertices.copy()
    current = mesh
    for it in range(max_iter):
        qd = quadrature_data(current, rule)
        M = gram_matrix(current, qd).tocsc()
        B = qd.basis_matrix(current.n_vertices)
        rhs = B.T @ target.project(qd.points)
        try:
            lu = spla.splu(M)
        except RuntimeError as err:
            raise MeshError(f"singular fitting matrix: {err}") from None
        P_new = lu.solve(np.asarray(rhs))
        if not np.all(np.isfinite(P_new)):
            raise MeshError("singular fitting matrix (non-finite solution)")
        change = np.abs(P_new - P).max() / max(np.abs(P).max(), 1e-300)
        P = P_new
        current = mesh.with_vertices(P)
        log.debug("fit iteration %d: relative change %.3e", it, change)
        if change < tol:
            break
    return current
