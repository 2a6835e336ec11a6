"""Hierarchical matrices: cluster tree, ACA compression, matvec and a near-field preconditioner."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .bem import BemDiscretisation, _kernels

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# cluster tree


@dataclass(eq=False)
class ClusterNode:
    indices: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    offset: int  # position of the first index in the tree permutation
    level: int
    children: list["ClusterNode"] = field(default_factory=list)
    id: int = -1

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def size(self) -> int:
        return len(self.indices)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))


def box_distance(a: ClusterNode, b: ClusterNode) -> float:
    gap = np.maximum(0.0, np.maximum(a.lo - b.hi, b.lo - a.hi))
    return float(np.linalg.norm(gap))


@dataclass
class ClusterTree:
    root: ClusterNode
    nodes: list[ClusterNode]
    n_min: int

    @property
    def permutation(self) -> np.ndarray:
        return np.concatenate([n.indices for n in self.leaves()])

    def leaves(self) -> list[ClusterNode]:
        return [n for n in self.nodes if n.is_leaf]

    @property
    def depth(self) -> int:
        return max(n.level for n in self.nodes)


def build_cluster_tree(points, boxes=None, n_min: int = 32) -> ClusterTree:
    """Longest-axis median bisection of ``points``.

    ``boxes`` is (n, 2, 3) with per-index bounding boxes (defaults to the
    points themselves); node boxes are the union of member boxes.
    """
    points = np.asarray(points, dtype=float)
    if boxes is None:
        boxes = np.stack([points, points], axis=1)
    boxes = np.asarray(boxes, dtype=float)
    nodes: list[ClusterNode] = []
    warned = False

    def make(idx, offset, level):
        nonlocal warned
        node = ClusterNode(idx, boxes[idx, 0].min(axis=0), boxes[idx, 1].max(axis=0), offset, level)
        node.id = len(nodes)
        nodes.append(node)
        if len(idx) <= n_min:
            return node
        p = points[idx]
        ext = p.max(axis=0) - p.min(axis=0)
        axis = int(np.argmax(ext))
        if ext[axis] == 0:
            if not warned:
                warnings.warn(f"{len(idx)} coincident points exceed leaf size {n_min}", RuntimeWarning,
                              stacklevel=3)
                warned = True
            return node
        order = idx[np.argsort(p[:, axis], kind="stable")]
        half = len(order) // 2
        node.children = [make(order[:half], offset, level + 1), make(order[half:], offset + half, level + 1)]
        return node

    root = make(np.arange(len(points)), 0, 0)
    return ClusterTree(root, nodes, n_min)


# --------------------------------------------------------------------------
# entry oracles


class DenseOracle:
    """Entry oracle backed by an explicit matrix (tests, small problems)."""

    def __init__(self, M):
        self.M = np.asarray(M)
        self.shape = self.M.shape
        self.dtype = self.M.dtype

    def block(self, rows, cols, col_node=None):
        return self.M[np.ix_(rows, cols)]

    def row(self, i, cols, col_node=None):
        return self.M[i, cols]

    def col(self, rows, j):
        return self.M[rows, j]


class BemKernelOracle:
    """7-point kernel part of G or H, evaluated on demand."""

    def __init__(self, disc: BemDiscretisation, k: float, which: str):
        if which not in ("G", "H"):
            raise ValueError("which must be 'G' or 'H'")
        self.disc = disc
        self.k = k
        self.which = which
        self.shape = (disc.n, disc.n)
        self.dtype = np.complex128
        self._cache: dict[int, tuple] = {}
        self._csc = disc.B.tocsc()
        self._csc.sort_indices()

    def _cols(self, cols, node):
        key = node.id if node is not None else None
        if key is not None and key in self._cache:
            return self._cache[key]
        q = self.disc.quadrature_points_of(cols)
        Bq = self.disc.B[q][:, cols].tocsr()
        if key is not None:
            self._cache[key] = (q, Bq)
        return q, Bq

    def _kernel(self, rows, q):
        d = self.disc
        G, H = _kernels(d.table.points[np.atleast_1d(rows)], d.y[q], d.ny[q], self.k, self.which == "H")
        return G if self.which == "G" else H

    def block(self, rows, cols, col_node=None):
        q, Bq = self._cols(cols, col_node)
        return np.asarray(self._kernel(rows, q) @ Bq)

    def row(self, i, cols, col_node=None):
        return self.block([i], cols, col_node)[0]

    def col(self, rows, j):
        B = self._csc
        lo, hi = B.indptr[j], B.indptr[j + 1]
        return self._kernel(rows, B.indices[lo:hi]) @ B.data[lo:hi]


# --------------------------------------------------------------------------
# ACA


def aca_compress(oracle, rows, cols, eps: float, col_node=None, max_rank=None):
    """Partially pivoted ACA of the block ``rows x cols``.

    Returns ``(U, V, rank)`` with block ~= U @ V, or ``(None, None, -1)``
    when the approximation would not pay off (caller stores the block dense).
    """
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    m, n = len(rows), len(cols)
    max_rank = min(m, n) if max_rank is None else min(max_rank, m, n)
    U: list[np.ndarray] = []
    V: list[np.ndarray] = []
    norm2 = 0.0
    used = np.zeros(m, dtype=bool)
    i = 0
    zero_rows = 0
    while len(U) < max_rank:
        used[i] = True
        r = np.array(oracle.row(rows[i], cols, col_node), dtype=complex)
        for u, v in zip(U, V):
            r -= u[i] * v
        j = int(np.argmax(np.abs(r)))
        if abs(r[j]) <= 1e-300:
            zero_rows += 1
            free = np.flatnonzero(~used)
            if not len(free) or zero_rows > 3:
                break
            i = int(free[0])
            continue
        v = r / r[j]
        c = np.array(oracle.col(rows, cols[j]), dtype=complex)
        for u, vv in zip(U, V):
            c -= vv[j] * u
        cross = sum(2.0 * np.real(np.vdot(uk, c) * np.vdot(vk, v)) for uk, vk in zip(U, V))
        step = np.linalg.norm(c) * np.linalg.norm(v)
        norm2 = max(norm2 + cross + step * step, 0.0)
        U.append(c)
        V.append(v)
        if step <= eps * np.sqrt(norm2):
            break
        score = np.abs(c)
        score[used] = -1.0
        i = int(np.argmax(score))
        if score[i] < 0:
            break
    if not U:
        if zero_rows:
            return np.zeros((m, 0), complex), np.zeros((0, n), complex), 0
        return None, None, -1
    U = np.stack(U, axis=1)
    V = np.stack(V, axis=0)
    U, V = recompress(U, V, eps)
    rank = U.shape[1]
    if rank * (m + n) >= m * n:
        return None, None, -1
    return U, V, rank


def recompress(U, V, eps):
    """Truncate U @ V to the smallest rank keeping relative accuracy ``eps``."""
    if U.shape[1] <= 1:
        return U, V
    qu, ru = np.linalg.qr(U)
    qv, rv = np.linalg.qr(V.T)
    w, s, zh = np.linalg.svd(ru @ rv.T)
    if s[0] == 0:
        return U[:, :0], V[:0]
    tail = np.sqrt(np.cumsum((s**2)[::-1]))[::-1]
    keep = max(1, int(np.sum(tail > eps * np.sqrt(np.sum(s**2)))))
    return (qu @ w[:, :keep]) * s[:keep], zh[:keep] @ qv.T


# --------------------------------------------------------------------------
# hierarchical matrix


@dataclass(eq=False)
class Block:
    row: ClusterNode
    col: ClusterNode
    admissible: bool
    dense: np.ndarray | None = None
    U: np.ndarray | None = None
    V: np.ndarray | None = None

    @property
    def rank(self) -> int:
        return -1 if self.U is None else self.U.shape[1]

    @property
    def storage(self) -> int:
        if self.U is not None:
            return self.U.size + self.V.size
        return self.dense.size


def is_admissible(s: ClusterNode, t: ClusterNode, eta: float) -> bool:
    d = box_distance(s, t)
    return d > 0 and min(s.diameter, t.diameter) <= eta * d


def build_block_tree(rtree: ClusterTree, ctree: ClusterTree, eta: float = 2.0) -> list[Block]:
    out: list[Block] = []
    stack = [(rtree.root, ctree.root)]
    while stack:
        s, t = stack.pop()
        if is_admissible(s, t, eta):
            out.append(Block(s, t, True))
        elif s.is_leaf or t.is_leaf:
            out.append(Block(s, t, False))
        else:
            stack.extend((a, b) for a in s.children for b in t.children)
    return out


class HMatrix:
    """Compressed operator, optionally plus a sparse correction."""

    def __init__(self, blocks, shape, eps, eta, tree, correction=None):
        self.blocks = blocks
        self.shape = shape
        self.eps = eps
        self.eta = eta
        self.tree = tree
        self.correction = correction
        self.dtype = np.complex128

    def matvec(self, x) -> np.ndarray:
        x = np.asarray(x)
        y = np.zeros(self.shape[0], dtype=complex)
        for b in self.blocks:
            xs = x[b.col.indices]
            if b.U is not None:
                y[b.row.indices] += b.U @ (b.V @ xs)
            else:
                y[b.row.indices] += b.dense @ xs
        if self.correction is not None:
            y += self.correction @ x
        return y

    def __matmul__(self, x):
        x = np.asarray(x)
        if x.ndim == 2:
            return np.stack([self.matvec(c) for c in x.T], axis=1)
        return self.matvec(x)

    def to_dense(self) -> np.ndarray:
        M = np.zeros(self.shape, dtype=complex)
        for b in self.blocks:
            M[np.ix_(b.row.indices, b.col.indices)] = b.U @ b.V if b.U is not None else b.dense
        if self.correction is not None:
            M += self.correction.toarray()
        return M

    def near_field(self) -> sp.csr_matrix:
        """Inadmissible blocks (and the correction) as a sparse matrix."""
        r, c, v = [], [], []
        for b in self.blocks:
            if b.U is None:
                R, C = np.meshgrid(b.row.indices, b.col.indices, indexing="ij")
                r.append(R.ravel())
                c.append(C.ravel())
                v.append(b.dense.ravel())
        M = sp.csr_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c))), shape=self.shape)
        if self.correction is not None:
            M = M + self.correction
        return M.tocsr()

    @property
    def storage(self) -> int:
        return sum(b.storage for b in self.blocks)

    @property
    def compression_ratio(self) -> float:
        return self.storage / (self.shape[0] * self.shape[1])

    def block_table(self):
        """Rows of (row_offset, row_size, col_offset, col_size, kind, rank)."""
        return [
            (b.row.offset, b.row.size, b.col.offset, b.col.size,
             "lowrank" if b.U is not None else "dense", b.rank if b.U is not None else min(b.row.size, b.col.size))
            for b in self.blocks
        ]

    def write_block_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row_offset", "row_size", "col_offset", "col_size", "kind", "rank"])
            w.writerows(self.block_table())


def build_hmatrix(oracle, tree: ClusterTree, eps: float = 1e-6, eta: float = 2.0, correction=None,
                  col_tree: ClusterTree | None = None) -> HMatrix:
    col_tree = col_tree or tree
    blocks = build_block_tree(tree, col_tree, eta)
    n_low = 0
    for b in blocks:
        if b.admissible:
            U, V, rank = aca_compress(oracle, b.row.indices, b.col.indices, eps, b.col)
            if rank >= 0:
                b.U, b.V = U, V
                n_low += 1
                continue
        b.dense = np.asarray(oracle.block(b.row.indices, b.col.indices, b.col), dtype=complex)
    H = HMatrix(blocks, oracle.shape, eps, eta, tree, correction)
    log.info("H-matrix: %d blocks (%d low rank), storage ratio %.3f", len(blocks), n_low, H.compression_ratio)
    return H


def bem_cluster_tree(disc: BemDiscretisation, n_min: int = 32) -> ClusterTree:
    return build_cluster_tree(disc.table.points, disc.support_boxes, n_min)


def compress_bem(disc: BemDiscretisation, k: float, eps: float = 1e-6, eta: float = 2.0, n_min: int = 32,
                 tree: ClusterTree | None = None):
    """Compressed (H, G) for wavenumber ``k`` including the sparse corrections."""
    tree = tree or bem_cluster_tree(disc, n_min)
    Gc, Hc = disc.corrections(k)
    G = build_hmatrix(BemKernelOracle(disc, k, "G"), tree, eps, eta, Gc)
    H = build_hmatrix(BemKernelOracle(disc, k, "H"), tree, eps, eta, Hc)
    return H, G


# --------------------------------------------------------------------------
# preconditioning


class NearFieldPreconditioner:
    """Incomplete LU of the near-field part of an H-matrix (approximate inverse).

    ``drop_tol=0`` switches to a complete sparse LU, which is accurate but
    suffers heavy fill-in on large meshes.
    """

    def __init__(self, H: HMatrix | sp.spmatrix, shift: float = 0.0, drop_tol: float = 1e-3,
                 fill_factor: float = 20.0):
        M = H.near_field() if isinstance(H, HMatrix) else sp.csr_matrix(H)
        M = M.tocsc().astype(complex)
        if shift:
            M = M + shift * sp.identity(M.shape[0], format="csc")
        try:
            self.lu = self._factor(M, drop_tol, fill_factor)
        except RuntimeError:
            d = float(np.abs(M.diagonal()).max())
            warnings.warn("singular near-field block; regularising the preconditioner", RuntimeWarning,
                          stacklevel=2)
            self.lu = self._factor(M + 1e-8 * d * sp.identity(M.shape[0], format="csc"), drop_tol, fill_factor)

    @staticmethod
    def _factor(M, drop_tol, fill_factor):
        if drop_tol > 0:
            return spla.spilu(M, drop_tol=drop_tol, fill_factor=fill_factor)
        return spla.splu(M)

    def solve(self, v):
        return self.lu.solve(np.asarray(v, dtype=complex))


def h_factorize(H: HMatrix, drop_tol: float = 1e-3) -> NearFieldPreconditioner:
    return NearFieldPreconditioner(H, drop_tol=drop_tol)
