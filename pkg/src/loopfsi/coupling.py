"""Fluid-structure coupling: transfer operators, admittance and the coupled solve.

All normals here are the integral-equation normals ``nu`` (into the body).
With ``exp(-i omega t)`` this makes the fluid-side relations consistent:
``q = dp/dnu = omega^2 rho nu.u`` for a moving wall and ``f = nu p`` for the
pressure load on the shell.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .bem import CollocationTable
from .mesh import ControlMesh
from .shell import ShellOperator
from .surface import gram_matrix, quadrature_data

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = history or []


@dataclass(frozen=True)
class TransferOperators:
    """C_sf = n_f Gram (3n x n) and C_fs = n_f^T (n x 3n)."""

    normals: np.ndarray  # (n, 3) into the body
    gram: sp.csr_matrix
    C_sf: sp.csr_matrix
    C_fs: sp.csr_matrix


def normal_matrix(normals: np.ndarray) -> sp.csr_matrix:
    """Block matrix with vertex normal ``a`` in rows 3a..3a+2 of column ``a``."""
    n = len(normals)
    rows = np.arange(3 * n)
    cols = np.repeat(np.arange(n), 3)
    return sp.csr_matrix((normals.ravel(), (rows, cols)), shape=(3 * n, n))


def build_transfer(mesh: ControlMesh, table: CollocationTable, qd=None) -> TransferOperators:
    nf = -np.asarray(table.normals)
    Nt = normal_matrix(nf)
    M0 = gram_matrix(mesh, qd if qd is not None else quadrature_data(mesh))
    return TransferOperators(nf, M0, (Nt @ M0).tocsr(), Nt.T.tocsr())


@dataclass(frozen=True)
class AdmittanceModel:
    """Uniform surface admittance; Y = -i omega rho beta I."""

    beta: complex = 0.0

    def diagonal(self, n: int, omega: float, rho: float) -> np.ndarray:
        return np.full(n, -1j * omega * rho * self.beta, dtype=complex)


@dataclass
class StructureAdmittance:
    """Implicit Y_C = omega^2 rho C_fs A^-1 C_sf, applied through the shell LU."""

    shell: ShellOperator
    transfer: TransferOperators
    rho: float
    omega: float

    @property
    def factor(self) -> float:
        return self.omega**2 * self.rho

    def apply(self, v) -> np.ndarray:
        if self.factor == 0:
            return np.zeros(np.shape(v), dtype=complex)
        return self.factor * (self.transfer.C_fs @ self.shell.solve(self.transfer.C_sf @ v))

    def sources(self, f_s=None) -> np.ndarray:
        """q_s = omega^2 rho C_fs A^-1 f_s."""
        n = self.transfer.C_fs.shape[0]
        if f_s is None or not np.any(f_s) or self.factor == 0:
            return np.zeros(n, dtype=complex)
        return self.factor * (self.transfer.C_fs @ self.shell.solve(f_s))

    def displacement(self, p, f_s=None) -> np.ndarray:
        rhs = self.transfer.C_sf @ p
        if f_s is not None:
            rhs = rhs + f_s
        return self.shell.solve(rhs)

    def dense(self) -> np.ndarray:
        """Explicit Y_C (small meshes only)."""
        n = self.transfer.C_fs.shape[0]
        return np.stack([self.apply(e) for e in np.eye(n)], axis=1)


def build_structural_sources(A: ShellOperator, f_s, rho: float, omega: float, transfer) -> np.ndarray:
    return StructureAdmittance(A, transfer, rho, omega).sources(f_s)


def build_structure_admittance_apply(A: ShellOperator, transfer, rho: float, omega: float) -> StructureAdmittance:
    return StructureAdmittance(A, transfer, rho, omega)


@dataclass
class CoupledState:
    u: np.ndarray
    p: np.ndarray
    q: np.ndarray
    residual: float
    iterations: int
    residual_history: list = field(default_factory=list, repr=False)
    k: float = 0.0
    omega: float = 0.0
    solve_time: float = 0.0


class DenseLUPreconditioner:
    """Exact LU of a dense matrix used as an approximate inverse."""

    def __init__(self, M):
        self.lu = sla.lu_factor(M)

    def solve(self, v):
        return sla.lu_solve(self.lu, v)


def gmres_right(apply, b, precond=None, tol=1e-8, restart=100, maxiter=1000):
    """Right-preconditioned restarted GMRES; returns (x, iterations, history)."""
    n = len(b)
    history: list[float] = []
    if precond is None:
        op = spla.LinearOperator((n, n), matvec=apply, dtype=complex)
    else:
        op = spla.LinearOperator((n, n), matvec=lambda y: apply(precond.solve(y)), dtype=complex)
    y, info = spla.gmres(
        op, b, rtol=tol, atol=0.0, restart=restart, maxiter=maxiter,
        callback=history.append, callback_type="pr_norm",
    )
    x = precond.solve(y) if precond is not None else y
    res = np.linalg.norm(apply(x) - b) / max(np.linalg.norm(b), 1e-300)
    if info != 0 or res > 10 * tol:
        raise SolverError(
            f"GMRES did not reach tol={tol:g} (info={info}, residual={res:.3e}, "
            f"{len(history)} iterations)", history,
        )
    return x, len(history), history, res


def solve_coupled(
    H,
    G,
    Y,
    yc: StructureAdmittance | None,
    q_s,
    p_inc,
    f_s=None,
    precond=None,
    tol: float = 1e-8,
    restart: int = 100,
    maxiter: int = 1000,
) -> CoupledState:
    """Solve [H - G Y - G Y_C] p = G q_s + p_inc and recover u and q.

    ``H`` and ``G`` are anything supporting ``@`` with a vector; ``Y`` is the
    admittance diagonal (vector or scalar).
    """
    t0 = time.perf_counter()
    Y = np.broadcast_to(np.asarray(Y, dtype=complex), np.shape(p_inc))

    def apply(v):
        w = Y * v
        if yc is not None:
            w = w + yc.apply(v)
        return H @ v - G @ w

    q_s = np.zeros_like(p_inc, dtype=complex) if q_s is None else q_s
    b = np.asarray(p_inc, dtype=complex) + (G @ q_s if np.any(q_s) else 0)
    p, it, hist, res = gmres_right(apply, b, precond, tol, restart, maxiter)
    if yc is not None:
        u = yc.displacement(p, f_s)
        q = Y * p + yc.factor * (yc.transfer.C_fs @ u)
    else:
        u = np.zeros(3 * len(p), dtype=complex)
        q = Y * p
    log.info("coupled GMRES: %d iterations, residual %.2e", it, res)
    omega = yc.omega if yc is not None else 0.0
    return CoupledState(u, p, q, res, it, hist, omega=omega, solve_time=time.perf_counter() - t0)


MAX_BLOCK_N = 2000


def assemble_block_system(shell: ShellOperator, transfer: TransferOperators, H, G, Y, rho, omega):
    """Monolithic [[A, -C_sf], [-omega^2 rho G C_fs, H - G Y]] (dense)."""
    n = H.shape[0]
    if n > MAX_BLOCK_N:
        raise ValueError(f"block system limited to {MAX_BLOCK_N} collocation points, got {n}")
    Y = np.broadcast_to(np.asarray(Y, dtype=complex), (n,))
    A = shell.A.toarray()
    top = np.hstack([A, -transfer.C_sf.toarray()])
    bottom = np.hstack([-omega**2 * rho * (G @ transfer.C_fs.toarray()), H - G * Y[None, :]])
    return np.vstack([top, bottom]).astype(complex)


def solve_block_system(shell, transfer, H, G, Y, rho, omega, p_inc, f_s=None):
    """Direct dense solve of the monolithic system; returns (u, p)."""
    K = assemble_block_system(shell, transfer, H, G, Y, rho, omega)
    nd = shell.n_dof
    rhs = np.concatenate([np.zeros(nd, dtype=complex) if f_s is None else f_s, p_inc])
    x = np.linalg.solve(K, rhs)
    return x[:nd], x[nd:]
