"""Quadrature data on the limit surface shared by the fitting, BEM and shell code."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import ControlMesh
from .quadrature import strang_fix7
from .subdivision import evaluator


@dataclass(frozen=True)
class QuadratureData:
    """Flattened quadrature points over a set of elements.

    ``jw`` is the surface Jacobian times the reference weight, so
    ``sum(f * jw)`` integrates ``f`` over the limit surface. ``normals`` are
    unit outward normals.
    """

    elements: np.ndarray  # (n,)
    xi: np.ndarray  # (n, 2)
    indices: np.ndarray  # (n, nmax) control vertex ids
    values: np.ndarray  # (n, nmax)
    d1: np.ndarray  # (n, nmax, 2)
    d2: np.ndarray  # (n, nmax, 3)
    points: np.ndarray  # (n, 3)
    tangents: np.ndarray  # (n, 2, 3)
    normals: np.ndarray  # (n, 3)
    jacobian: np.ndarray  # (n,)
    jw: np.ndarray  # (n,)

    def __len__(self):
        return len(self.elements)

    def basis_matrix(self, n_vertices: int, weighted: bool = True) -> sp.csr_matrix:
        """Sparse (n_points x n_vertices) matrix of basis values (times jw)."""
        vals = self.values * (self.jw[:, None] if weighted else 1.0)
        rows = np.repeat(np.arange(len(self)), self.indices.shape[1])
        m = sp.csr_matrix(
            (vals.ravel(), (rows, self.indices.ravel())), shape=(len(self), n_vertices)
        )
        m.sum_duplicates()
        return m


def quadrature_data(mesh: ControlMesh, rule=None, elements=None) -> QuadratureData:
    """Evaluate basis and geometry at ``rule`` points of every element."""
    pts, wts = strang_fix7() if rule is None else rule
    if elements is None:
        elements = np.arange(mesh.n_triangles)
    elements = np.asarray(elements, dtype=np.int64)
    nq = len(wts)
    el = np.repeat(elements, nq)
    xi = np.tile(pts, (len(elements), 1))
    w = np.tile(wts, len(elements))
    return point_data(mesh, el, xi, w)


def point_data(mesh: ControlMesh, el, xi, w) -> QuadratureData:
    idx, val, d1, d2 = evaluator(mesh).evaluate(el, xi)
    P = mesh.vertices[idx]
    x = np.einsum("na,nai->ni", val, P)
    a = np.einsum("nad,nai->ndi", d1, P)
    n = np.cross(a[:, 0], a[:, 1])
    J = np.linalg.norm(n, axis=1)
    return QuadratureData(
        elements=np.asarray(el),
        xi=np.asarray(xi),
        indices=idx,
        values=val,
        d1=d1,
        d2=d2,
        points=x,
        tangents=a,
        normals=n / np.where(J > 0, J, np.inf)[:, None],
        jacobian=J,
        jw=J * np.asarray(w),
    )


def gram_matrix(mesh: ControlMesh, qd: QuadratureData | None = None) -> sp.csr_matrix:
    """Consistent scalar Gram matrix  int N_a N_b dGamma."""
    if qd is None:
        qd = quadrature_data(mesh)
    B = qd.basis_matrix(mesh.n_vertices, weighted=False)
    W = sp.diags(qd.jw)
    return (B.T @ W @ B).tocsr()


def surface_area(mesh: ControlMesh, qd: QuadratureData | None = None) -> float:
    if qd is None:
        qd = quadrature_data(mesh)
    return float(qd.jw.sum())
