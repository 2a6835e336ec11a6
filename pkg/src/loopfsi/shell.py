"""Kirchhoff-Love thin shell on the subdivision basis.

Three displacement dofs per control vertex, ordered ``3 * vertex + axis``.
The thickness Jacobian is taken as 1, so membrane terms scale with ``h`` and
bending terms with ``h**3 / 12``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import ControlMesh
from .quadrature import strang_fix7
from .surface import QuadratureData, gram_matrix, quadrature_data

log = logging.getLogger(__name__)


class ShellError(RuntimeError):
    pass


@dataclass(frozen=True)
class ShellMaterial:
    """Isotropic shell material with Rayleigh damping constants (c1 in s, c2 in 1/s)."""

    E: float = 210e9
    nu: float = 0.3
    rho_s: float = 7860.0
    h: float = 0.05
    c1: float = 0.0
    c2: float = 0.0

    def __post_init__(self):
        if not self.E > 0:
            raise ValueError("E must be positive")
        if not 0 <= self.nu < 0.5:
            raise ValueError("nu must lie in [0, 0.5)")
        if not self.h > 0 or not self.rho_s > 0:
            raise ValueError("h and rho_s must be positive")
        if self.c1 < 0 or self.c2 < 0:
            raise ValueError("Rayleigh constants must be >= 0")

    @property
    def membrane_rigidity(self) -> float:
        return self.E * self.h / (1 - self.nu**2)

    @property
    def bending_rigidity(self) -> float:
        return self.E * self.h**3 / (12 * (1 - self.nu**2))

    def thin_shell_ok(self, radius: float) -> bool:
        return self.h / radius <= 0.1


def _contravariant(a):
    """Inverse surface metric from tangents (n, 2, 3)."""
    g = np.einsum("nai,nbi->nab", a, a)
    det = g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] ** 2
    inv = np.empty_like(g)
    inv[:, 0, 0] = g[:, 1, 1] / det
    inv[:, 1, 1] = g[:, 0, 0] / det
    inv[:, 0, 1] = inv[:, 1, 0] = -g[:, 0, 1] / det
    return inv, det


def constitutive_matrix(a, nu: float) -> np.ndarray:
    """Plane-stress tensor in Voigt form [11, 22, 12] (engineering shear), per point."""
    c, _ = _contravariant(a)
    c11, c22, c12 = c[:, 0, 0], c[:, 1, 1], c[:, 0, 1]
    D = np.empty((len(a), 3, 3))
    D[:, 0, 0] = c11 * c11
    D[:, 1, 1] = c22 * c22
    D[:, 0, 1] = D[:, 1, 0] = nu * c11 * c22 + (1 - nu) * c12 * c12
    D[:, 0, 2] = D[:, 2, 0] = c11 * c12
    D[:, 1, 2] = D[:, 2, 1] = c22 * c12
    D[:, 2, 2] = nu * c12 * c12 + 0.5 * (1 - nu) * (c11 * c22 + c12 * c12)
    return D


def strain_operators(qd: QuadratureData, P: np.ndarray, bending: str = "modified"):
    """Membrane and bending strain-displacement matrices, each (n, 3, 3 * nmax).

    Column ``3 * j + i`` is basis slot ``j`` of the element patch moving
    along axis ``i``. Strains are in Voigt order [11, 22, 2*12].

    ``bending="classical"`` uses the linearised change of curvature
    beta = delta(b_ab). ``"modified"`` subtracts the membrane rotation part,
    rho_ab = beta_ab - (b^g_a alpha_gb + b^g_b alpha_ga) / 2, which makes
    the bending energy vanish for pure stretching of a curved surface.
    """
    if bending not in ("classical", "modified"):
        raise ValueError("bending must be 'classical' or 'modified'")
    if not np.all(np.isfinite(qd.d2)):
        raise ShellError("second derivatives requested at an extraordinary corner")
    X = P[qd.indices]  # (n, nmax, 3)
    a = np.einsum("nad,nai->ndi", qd.d1, X)
    aa = np.einsum("nad,nai->ndi", qd.d2, X)  # (n, 3, 3): 11, 12, 22
    a1, a2 = a[:, 0], a[:, 1]
    nbar = np.cross(a1, a2)
    J = np.linalg.norm(nbar, axis=1)
    bad = np.flatnonzero(~(J > 0))
    if len(bad):
        raise ShellError(f"degenerate surface metric on element {int(qd.elements[bad[0]])}")
    a3 = nbar / J[:, None]
    n, nmax = qd.values.shape
    N1, N2 = qd.d1[:, :, 0], qd.d1[:, :, 1]

    Bm = np.empty((n, 3, nmax, 3))
    Bm[:, 0] = N1[:, :, None] * a1[:, None, :]
    Bm[:, 1] = N2[:, :, None] * a2[:, None, :]
    Bm[:, 2] = N2[:, :, None] * a1[:, None, :] + N1[:, :, None] * a2[:, None, :]

    Bb = np.empty((n, 3, nmax, 3))
    mult = (1.0, 1.0, 2.0)
    for row, comp in enumerate((0, 2, 1)):  # 11, 22, 12 in the d2 layout (11, 12, 22)
        m = aa[:, comp] - np.einsum("ni,ni->n", aa[:, comp], a3)[:, None] * a3
        t1 = np.cross(a2, m) / J[:, None]
        t2 = np.cross(m, a1) / J[:, None]
        Bb[:, row] = mult[row] * (
            qd.d2[:, :, comp, None] * a3[:, None, :]
            + N1[:, :, None] * t1[:, None, :]
            + N2[:, :, None] * t2[:, None, :]
        )
    if bending == "modified":
        c, _ = _contravariant(a)
        b = np.einsum("nci,ni->nc", aa, a3)
        bl = np.stack([np.stack([b[:, 0], b[:, 1]], -1), np.stack([b[:, 1], b[:, 2]], -1)], 1)
        mx = np.einsum("ngd,nda->nga", c, bl)  # mx[:, g, a] = b^g_a
        al = (Bm[:, 0], Bm[:, 1], 0.5 * Bm[:, 2])  # alpha_11, alpha_22, alpha_12
        s = lambda v: v[:, None, None]  # noqa: E731
        Bb[:, 0] -= s(mx[:, 0, 0]) * al[0] + s(mx[:, 1, 0]) * al[2]
        Bb[:, 1] -= s(mx[:, 0, 1]) * al[2] + s(mx[:, 1, 1]) * al[1]
        Bb[:, 2] -= (s(mx[:, 0, 0]) + s(mx[:, 1, 1])) * al[2] + s(mx[:, 1, 0]) * al[1] + s(mx[:, 0, 1]) * al[0]
    return Bm.reshape(n, 3, 3 * nmax), Bb.reshape(n, 3, 3 * nmax), a, J


def _scatter(qd_elements_indices, mats, ndof):
    idx = qd_elements_indices  # (ne, nmax)
    dof = (3 * idx[:, :, None] + np.arange(3)).reshape(len(idx), -1)
    rows = np.broadcast_to(dof[:, :, None], mats.shape)
    cols = np.broadcast_to(dof[:, None, :], mats.shape)
    return sp.csr_matrix((mats.ravel(), (rows.ravel(), cols.ravel())), shape=(ndof, ndof))


def assemble_stiffness(
    mesh: ControlMesh,
    mat: ShellMaterial,
    rule=None,
    parts: tuple[str, ...] = ("membrane", "bending"),
    chunk: int = 2000,
    bending: str = "modified",
) -> sp.csr_matrix:
    """Stiffness matrix K (3V x 3V); see :func:`strain_operators` for ``bending``."""
    rule = rule or strang_fix7()
    nq = len(rule[1])
    ndof = 3 * mesh.n_vertices
    K = sp.csr_matrix((ndof, ndof))
    for start in range(0, mesh.n_triangles, chunk):
        els = np.arange(start, min(start + chunk, mesh.n_triangles))
        qd = quadrature_data(mesh, rule, els)
        Bm, Bb, a, J = strain_operators(qd, mesh.vertices, bending)
        D = constitutive_matrix(a, mat.nu)
        w = qd.jw
        ke = 0.0
        if "membrane" in parts:
            ke = ke + mat.membrane_rigidity * np.einsum("nia,nij,njb,n->nab", Bm, D, Bm, w, optimize=True)
        if "bending" in parts:
            ke = ke + mat.bending_rigidity * np.einsum("nia,nij,njb,n->nab", Bb, D, Bb, w, optimize=True)
        ke = np.asarray(ke).reshape(len(els), nq, *ke.shape[1:]).sum(axis=1)
        K = K + _scatter(qd.indices[::nq], ke, ndof)
    K = ((K + K.T) * 0.5).tocsr()
    K.eliminate_zeros()
    return K


def assemble_mass(mesh: ControlMesh, mat: ShellMaterial, qd: QuadratureData | None = None) -> sp.csr_matrix:
    """Consistent mass rho_s h int N_a N_b per displacement component."""
    M0 = gram_matrix(mesh, qd if qd is not None else quadrature_data(mesh))
    return (mat.rho_s * mat.h * sp.kron(M0, sp.identity(3))).tocsr()


@dataclass
class ShellOperator:
    """A(omega) = -omega^2 M + i omega (c1 K + c2 M) + K with a sparse LU."""

    K: sp.csr_matrix
    M: sp.csr_matrix
    material: ShellMaterial
    omega: float
    A: sp.csc_matrix = field(repr=False)
    lu: object = field(repr=False)

    @property
    def n_dof(self) -> int:
        return self.A.shape[0]

    def solve(self, f) -> np.ndarray:
        f = np.asarray(f)
        if np.iscomplexobj(f) and not np.iscomplexobj(self.A.data):
            return self.lu.solve(np.ascontiguousarray(f.real)) + 1j * self.lu.solve(np.ascontiguousarray(f.imag))
        return self.lu.solve(f)


def dynamic_matrix(K, M, mat: ShellMaterial, omega: float) -> sp.csc_matrix:
    A = K - omega**2 * M
    if omega and (mat.c1 or mat.c2):
        A = A + 1j * omega * (mat.c1 * K + mat.c2 * M)
    return A.tocsc()


def build_dynamic_operator(K, M, mat: ShellMaterial, omega: float) -> ShellOperator:
    if omega < 0:
        raise ValueError("omega must be >= 0")
    A = dynamic_matrix(K, M, mat, omega)
    try:
        lu = spla.splu(A)
    except RuntimeError as err:
        raise ShellError(
            f"shell operator singular at omega={omega:g} ({err}); shift the frequency or add damping"
        ) from None
    d = np.abs(lu.U.diagonal())
    if d.min() <= 1e-14 * d.max():
        raise ShellError(
            f"shell operator numerically singular at omega={omega:g}; shift the frequency or add damping"
        )
    return ShellOperator(K, M, mat, omega, A, lu)


def natural_frequencies(K, M, n_modes: int = 20, shift: float = -1.0) -> np.ndarray:
    """Lowest ``n_modes`` angular frequencies of K x = omega^2 M x (rigid modes included)."""
    scale = float(np.abs(K.diagonal()).max() / np.abs(M.diagonal()).max())
    vals = spla.eigsh(K.tocsc(), k=n_modes, M=M.tocsc(), sigma=shift * scale * 1e-6, which="LM",
                      return_eigenvectors=False)
    return np.sqrt(np.clip(np.sort(vals), 0.0, None))


def dimensionless_frequency(omega, radius: float, mat: ShellMaterial):
    cp = math.sqrt(mat.E / ((1 - mat.nu**2) * mat.rho_s))
    return np.asarray(omega) * radius / cp
