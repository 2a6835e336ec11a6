"""Collocation BEM for the exterior Helmholtz problem on Loop limit surfaces.

Normal convention: the integral equation uses the normal pointing *into the
body* (away from the fluid), ``nu = -outward``. With that choice

    1/2 p(x) + int dG/dnu p = int G dp/dnu + p_inc(x)

holds on a smooth boundary and the static double layer integrates to +1/2.

Every operator is split into a kernel part, integrated with the 7-point rule
on every element, and a sparse correction that replaces the 7-point result
on elements close to a collocation point by a polar (singular) or
subdivided (near-singular) rule. The H correction also carries the jump term
and the static calibration. The kernel part is what the hierarchical matrix
compresses.
"""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .mesh import ControlMesh
from .quadrature import polar_rule, strang_fix7, subdivided
from .subdivision import evaluator, vertex_limit_masks, vertex_limit_points
from .surface import point_data, quadrature_data

log = logging.getLogger(__name__)

FOUR_PI = 4.0 * np.pi


class QuadratureError(ArithmeticError):
    pass


# --------------------------------------------------------------------------
# wave data and kernels


@dataclass(frozen=True)
class WaveContext:
    """Frequency, fluid and incident plane wave ``P exp(i k d.x)``."""

    k: float
    c: float = 1482.0
    rho_f: float = 1000.0
    amplitude: complex = 1.0
    direction: tuple[float, float, float] = (1.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.k >= 0:
            raise ValueError("k must be >= 0")
        if not self.c > 0 or not self.rho_f >= 0:
            raise ValueError("need c > 0 and rho_f >= 0")
        d = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ValueError("incident direction must be a unit vector")

    @property
    def omega(self) -> float:
        return self.k * self.c

    def incident(self, x) -> np.ndarray:
        d = np.asarray(self.direction, dtype=float)
        return self.amplitude * np.exp(1j * self.k * (np.asarray(x) @ d))

    def incident_gradient(self, x) -> np.ndarray:
        d = np.asarray(self.direction, dtype=float)
        return 1j * self.k * self.incident(x)[..., None] * d


def _distance(x, y):
    d = np.asarray(y) - np.asarray(x)
    r = np.sqrt(np.einsum("...i,...i->...", d, d))
    if np.any(r == 0):
        raise ValueError("kernel evaluated at coincident points; use singular quadrature")
    return d, r


def helmholtz_kernel(x, y, k: float):
    """G = exp(ikr) / (4 pi r)."""
    _, r = _distance(x, y)
    return np.exp(1j * k * r) / (FOUR_PI * r)


def kernel_dGdn(x, y, n_y, k: float):
    """Normal derivative of G at the field point ``y`` along ``n_y``."""
    d, r = _distance(x, y)
    drdn = np.einsum("...i,...i->...", d, np.asarray(n_y)) / r
    return np.exp(1j * k * r) / (FOUR_PI * r * r) * (1j * k * r - 1.0) * drdn


def _kernels(x, y, ny, k, need_h=True):
    """G and dG/dn for all pairs of x (m, 3) and y (n, 3) -> (m, n)."""
    d = y[None, :, :] - x[:, None, :]
    r = np.sqrt(np.einsum("mni,mni->mn", d, d))
    inv = 1.0 / r
    e = np.exp(1j * k * r) if k else np.ones_like(r)
    G = e * (inv / FOUR_PI)
    if not need_h:
        return G, None
    dn = np.einsum("mni,ni->mn", d, ny)
    H = G * (1j * k * r - 1.0) * dn * inv * inv
    return G, H


def _static_dn(x, y, ny):
    d = y[None, :, :] - x[:, None, :]
    r2 = np.einsum("mni,mni->mn", d, d)
    return -np.einsum("mni,ni->mn", d, ny) / (FOUR_PI * r2 * np.sqrt(r2))


# --------------------------------------------------------------------------
# collocation


@dataclass(frozen=True)
class CollocationTable:
    """Limit-surface images of the control vertices.

    ``normals`` are unit outward normals; the integral equation uses their
    negatives.
    """

    points: np.ndarray
    normals: np.ndarray
    owner: np.ndarray

    def __len__(self):
        return len(self.points)


def build_collocation_table(mesh: ControlMesh) -> CollocationTable:
    pts, nrm = vertex_limit_points(mesh)
    return CollocationTable(pts, nrm, np.arange(mesh.n_vertices))


# --------------------------------------------------------------------------
# discretisation


@dataclass(frozen=True)
class QuadratureSettings:
    """Quadrature layout for the boundary integrals.

    Elements whose centroid lies within ``near_factor`` element diameters of
    a collocation point use the 7-point rule on ``4**near_levels``
    sub-triangles; elements with the collocation point at a corner use a
    polar rule (radially graded at extraordinary corners).
    """

    near_factor: float = 2.0
    near_levels: int = 2
    polar_radial: int = 8
    polar_angular: int = 8
    irregular_grading: int = 6

    def refined(self) -> "QuadratureSettings":
        return QuadratureSettings(
            self.near_factor * 1.5,
            self.near_levels + 1,
            2 * self.polar_radial,
            2 * self.polar_angular,
            self.irregular_grading + 4,
        )


class BemDiscretisation:
    """Frequency-independent geometry and quadrature data for one mesh."""

    def __init__(self, mesh: ControlMesh, settings: QuadratureSettings | None = None):
        self.mesh = mesh
        self.settings = settings or QuadratureSettings()
        self.table = build_collocation_table(mesh)
        ev = evaluator(mesh)
        ev.require_valid(np.arange(mesh.n_triangles))
        self.patches = ev.patches
        self.patch_mask = ev.patch_mask
        rule = strang_fix7()
        self.n_far = len(rule[1])
        qd = quadrature_data(mesh, rule)
        self.y = qd.points
        self.ny = -qd.normals
        self.jw = qd.jw
        self.far_values = qd.values.reshape(mesh.n_triangles, self.n_far, -1)
        self.B = qd.basis_matrix(mesh.n_vertices, weighted=True).tocsc()
        self.B_unweighted = qd.basis_matrix(mesh.n_vertices, weighted=False).tocsr()

        tp = self.table.points[mesh.triangles]
        self.diameter = np.max(
            np.linalg.norm(tp - np.roll(tp, 1, axis=1), axis=2), axis=1
        )
        self.centroids = point_data(
            mesh, np.arange(mesh.n_triangles), np.full((mesh.n_triangles, 2), 1 / 3), np.ones(mesh.n_triangles)
        ).points
        self._find_near_pairs()

    @property
    def n(self) -> int:
        return self.mesh.n_vertices

    def _find_near_pairs(self):
        s = self.settings
        tree = cKDTree(self.centroids)
        cand = tree.query_ball_point(self.table.points, s.near_factor * self.diameter.max())
        rows, els = [], []
        for a, lst in enumerate(cand):
            lst = np.asarray(lst, dtype=np.int64)
            d = np.linalg.norm(self.centroids[lst] - self.table.points[a], axis=1)
            keep = lst[d < s.near_factor * self.diameter[lst]]
            keep = np.union1d(keep, self.mesh.vertex_triangles[a])
            rows.append(np.full(len(keep), a))
            els.append(keep)
        rows = np.concatenate(rows)
        els = np.concatenate(els)
        tri = self.mesh.triangles[els]
        hit = tri == rows[:, None]
        corner = np.where(hit.any(axis=1), np.argmax(hit, axis=1), -1)
        self.pair_row = rows
        self.pair_element = els
        self.pair_corner = corner

    @cached_property
    def support_elements(self) -> list[np.ndarray]:
        """Elements on which each basis function is non-zero."""
        f, slot = np.nonzero(self.patch_mask)
        v = self.patches[f, slot]
        order = np.argsort(v, kind="stable")
        bounds = np.searchsorted(v[order], np.arange(self.n + 1))
        fs = f[order]
        return [np.unique(fs[bounds[i] : bounds[i + 1]]) for i in range(self.n)]

    @cached_property
    def support_boxes(self) -> np.ndarray:
        """(n, 2, 3) axis-aligned boxes around the quadrature points of each support."""
        yq = self.y.reshape(self.mesh.n_triangles, self.n_far, 3)
        lo = yq.min(axis=1)
        hi = yq.max(axis=1)
        out = np.empty((self.n, 2, 3))
        for a, els in enumerate(self.support_elements):
            out[a, 0] = np.minimum(lo[els].min(axis=0), self.table.points[a])
            out[a, 1] = np.maximum(hi[els].max(axis=0), self.table.points[a])
        return out

    def quadrature_points_of(self, cols) -> np.ndarray:
        """Indices of the far-rule points in the union of supports of ``cols``."""
        els = np.unique(np.concatenate([self.support_elements[c] for c in np.atleast_1d(cols)]))
        return (els[:, None] * self.n_far + np.arange(self.n_far)).ravel()

    # -- kernel part ------------------------------------------------------

    def kernel_block(self, k: float, rows, cols, need_g=True, need_h=True):
        """7-point kernel part of G and H restricted to ``rows`` x ``cols``."""
        rows = np.atleast_1d(rows)
        cols = np.atleast_1d(cols)
        q = self.quadrature_points_of(cols)
        Bq = self.B[q][:, cols]
        G, H = _kernels(self.table.points[rows], self.y[q], self.ny[q], k, need_h)
        return (G @ Bq if need_g else None), (H @ Bq if need_h else None)

    def dense_kernel_part(self, k: float, need_h: bool = True, chunk_entries: float = 2.5e6):
        n, nq = self.n, len(self.y)
        G = np.empty((n, n), dtype=complex)
        H = np.empty((n, n), dtype=complex) if need_h else None
        step = max(1, int(chunk_entries // nq))
        Bt = self.B.T.tocsr()
        for i in range(0, n, step):
            sl = slice(i, min(i + step, n))
            g, h = _kernels(self.table.points[sl], self.y, self.ny, k, need_h)
            G[sl] = (Bt @ g.T).T
            if need_h:
                H[sl] = (Bt @ h.T).T
        return G, H

    @cached_property
    def _static_far_rowsum(self) -> np.ndarray:
        n, nq = self.n, len(self.y)
        out = np.empty(n)
        step = max(1, int(2.5e6 // nq))
        for i in range(0, n, step):
            sl = slice(i, min(i + step, n))
            out[sl] = _static_dn(self.table.points[sl], self.y, self.ny) @ self.jw
        return out

    # -- near / singular corrections --------------------------------------

    def _pair_groups(self):
        """Yield (pair indices, rule) groups sharing one quadrature rule."""
        s = self.settings
        near = np.flatnonzero(self.pair_corner < 0)
        yield near, subdivided(strang_fix7(), s.near_levels)
        irregular = self.mesh.valence[self.pair_row] != 6
        for c in range(3):
            for irr in (False, True):
                sel = np.flatnonzero((self.pair_corner == c) & (irregular == irr))
                g = s.irregular_grading if irr else 0
                yield sel, polar_rule(c, s.polar_radial, s.polar_angular, g)

    def _correction_pieces(self, k: float, max_points: float = 4e5):
        """Per pair: (fine - 7pt) integrals against the patch basis, and the
        static double-layer integral over the element (fine rule)."""
        npair = len(self.pair_row)
        nmax = self.patches.shape[1]
        dG = np.zeros((npair, nmax), dtype=complex)
        dH = np.zeros((npair, nmax), dtype=complex)
        s0 = np.zeros(npair)
        s0_far = np.zeros(npair)
        for sel, (pts, wts) in self._pair_groups():
            if not len(sel):
                continue
            els = self.pair_element[sel]
            uniq, inv = np.unique(els, return_inverse=True)
            nf = len(wts)
            step = max(1, int(max_points // nf))
            for i in range(0, len(uniq), step):
                chunk = uniq[i : i + step]
                qd = point_data(
                    self.mesh, np.repeat(chunk, nf), np.tile(pts, (len(chunk), 1)), np.tile(wts, len(chunk))
                )
                yf = qd.points.reshape(len(chunk), nf, 3)
                nyf = -qd.normals.reshape(len(chunk), nf, 3)
                jwf = qd.jw.reshape(len(chunk), nf)
                vf = qd.values.reshape(len(chunk), nf, -1)
                m = (inv >= i) & (inv < i + step)
                p = sel[m]
                loc = inv[m] - i
                self._accumulate(k, p, loc, chunk, yf, nyf, jwf, vf, dG, dH, s0, s0_far)
        return dG, dH, s0, s0_far

    def _accumulate(self, k, p, loc, chunk, yf, nyf, jwf, vf, dG, dH, s0, s0_far):
        x = self.table.points[self.pair_row[p]]
        e = chunk[loc]
        g, h, st = _pair_kernels(x, yf[loc], nyf[loc], k)
        g *= jwf[loc]
        h *= jwf[loc]
        dG[p] += np.einsum("pf,pfa->pa", g, vf[loc])
        dH[p] += np.einsum("pf,pfa->pa", h, vf[loc])
        s0[p] += np.einsum("pf,pf->p", st, jwf[loc])
        # subtract the 7-point result already present in the kernel part
        q = e[:, None] * self.n_far + np.arange(self.n_far)
        g7, h7, st7 = _pair_kernels(x, self.y[q], self.ny[q], k)
        g7 *= self.jw[q]
        h7 *= self.jw[q]
        dG[p] -= np.einsum("pf,pfa->pa", g7, self.far_values[e])
        dH[p] -= np.einsum("pf,pfa->pa", h7, self.far_values[e])
        s0_far[p] += np.einsum("pf,pf->p", st7, self.jw[q])

    def static_row_integral(self) -> np.ndarray:
        """Numerical int dG0/dnu over the whole surface for every row."""
        if not hasattr(self, "_s0"):
            self.corrections(0.0)
        return self._s0

    def corrections(self, k: float) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        """Sparse corrections (G_c, H_c) to add to the kernel part."""
        cache = self.__dict__.setdefault("_corr_cache", {})
        if k in cache:
            return cache[k]
        dG, dH, s0p, s0p_far = self._correction_pieces(k)
        n = self.n
        if not hasattr(self, "_s0"):
            s0 = self._static_far_rowsum.copy()
            np.add.at(s0, self.pair_row, s0p - s0p_far)
            self._s0 = s0
        cols = self.patches[self.pair_element]
        mask = self.patch_mask[self.pair_element]
        rows = np.broadcast_to(self.pair_row[:, None], cols.shape)
        Gc = sp.csr_matrix((dG[mask], (rows[mask], cols[mask])), shape=(n, n))
        Hc = sp.csr_matrix((dH[mask], (rows[mask], cols[mask])), shape=(n, n))
        # jump term plus static calibration: N_B(x_A) (1/2 + 1/2 - S0(A))
        r, c, v = [], [], []
        for a in range(n):
            idx, w, _, _ = vertex_limit_masks(self.mesh, a)
            r.append(np.full(len(idx), a))
            c.append(idx)
            v.append(w * (1.0 - self._s0[a]))
        Hc = Hc + sp.csr_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c))), shape=(n, n))
        Gc.sum_duplicates()
        Hc.sum_duplicates()
        cache.clear()
        cache[k] = (Gc, Hc)
        return Gc, Hc

    @cached_property
    def limit_mask_matrix(self) -> sp.csr_matrix:
        """Row A holds N_B(x_A): maps coefficients to collocation values."""
        r, c, v = [], [], []
        for a in range(self.n):
            idx, w, _, _ = vertex_limit_masks(self.mesh, a)
            r.append(np.full(len(idx), a))
            c.append(idx)
            v.append(w)
        return sp.csr_matrix(
            (np.concatenate(v), (np.concatenate(r), np.concatenate(c))), shape=(self.n, self.n)
        )


def _pair_kernels(x, y, ny, k):
    """Kernels for pairwise x (p, 3) against y (p, f, 3)."""
    d = y - x[:, None, :]
    r2 = np.einsum("pfi,pfi->pf", d, d)
    r = np.sqrt(r2)
    dn = np.einsum("pfi,pfi->pf", d, ny)
    st = -dn / (FOUR_PI * r2 * r)
    e = np.exp(1j * k * r)
    g = e / (FOUR_PI * r)
    h = g * (1j * k * r - 1.0) * dn / r2
    return g, h, st


# --------------------------------------------------------------------------
# assembled operators


@dataclass
class BemOperators:
    """Dense H and G with the discretisation and wave data they belong to."""

    H: np.ndarray
    G: np.ndarray
    context: WaveContext
    disc: BemDiscretisation = field(repr=False)

    @property
    def table(self) -> CollocationTable:
        return self.disc.table

    def incident_rhs(self) -> np.ndarray:
        return self.context.incident(self.table.points)


def discretise(mesh: ControlMesh, settings: QuadratureSettings | None = None) -> BemDiscretisation:
    return BemDiscretisation(mesh, settings)


def assemble_operators(mesh_or_disc, ctx: WaveContext, need_h: bool = True) -> BemOperators:
    disc = mesh_or_disc if isinstance(mesh_or_disc, BemDiscretisation) else BemDiscretisation(mesh_or_disc)
    G, H = disc.dense_kernel_part(ctx.k, need_h)
    Gc, Hc = disc.corrections(ctx.k)
    G += Gc.toarray()
    if need_h:
        H += Hc.toarray()
    return BemOperators(H, G, ctx, disc)


def assemble_G(mesh_or_disc, ctx: WaveContext) -> np.ndarray:
    return assemble_operators(mesh_or_disc, ctx, need_h=False).G


def assemble_H(mesh_or_disc, ctx: WaveContext) -> np.ndarray:
    return assemble_operators(mesh_or_disc, ctx).H


def verify_quadrature(mesh: ControlMesh, ctx: WaveContext, rows, tol: float = 1e-6,
                      settings: QuadratureSettings | None = None) -> float:
    """Compare H and G rows under a settings and its refinement.

    Raises :class:`QuadratureError` naming the worst row when the relative
    row difference exceeds ``tol``; returns the largest difference.
    """
    settings = settings or QuadratureSettings()
    rows = np.atleast_1d(rows)
    worst, where = 0.0, None
    results = []
    for s in (settings, settings.refined()):
        d = BemDiscretisation(mesh, s)
        cols = np.arange(d.n)
        g, h = d.kernel_block(ctx.k, rows, cols)
        Gc, Hc = d.corrections(ctx.k)
        results.append((g + Gc[rows].toarray(), h + Hc[rows].toarray()))
    (g0, h0), (g1, h1) = results
    for a, b in ((g0, g1), (h0, h1)):
        diff = np.linalg.norm(a - b, axis=1) / np.linalg.norm(b, axis=1)
        i = int(np.argmax(diff))
        if diff[i] > worst:
            worst, where = float(diff[i]), int(rows[i])
    if worst > tol:
        raise QuadratureError(f"quadrature not converged on collocation row {where}: {worst:.2e}")
    return worst


# --------------------------------------------------------------------------
# field evaluation and solves


def solve_rigid(ops: BemOperators) -> np.ndarray:
    """Sound-hard scatterer: H p = p_inc."""
    return np.linalg.solve(ops.H, ops.incident_rhs())


def evaluate_exterior_pressure(disc: BemDiscretisation, ctx: WaveContext, p, q, points,
                               include_incident: bool = True) -> np.ndarray:
    """Representation formula p = p_inc + int G q - int dG/dnu p at exterior points."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    tree = cKDTree(disc.y)
    dist, _ = tree.query(points)
    if np.any(dist < disc.diameter.max()):
        warnings.warn("evaluation point within one element diameter of the surface", RuntimeWarning,
                      stacklevel=2)
    ph = disc.B @ np.asarray(p, dtype=complex)  # includes jw
    qh = disc.B @ np.asarray(q, dtype=complex)
    out = np.zeros(len(points), dtype=complex)
    step = max(1, int(2.5e6 // len(disc.y)))
    for i in range(0, len(points), step):
        sl = slice(i, i + step)
        G, H = _kernels(points[sl], disc.y, disc.ny, ctx.k)
        out[sl] = G @ qh - H @ ph
    if include_incident:
        out += ctx.incident(points)
    return out


def project_to_basis(disc: BemDiscretisation, values_at_quadrature) -> np.ndarray:
    """L2 projection of a function sampled at the 7-point quadrature points."""
    from scipy.sparse.linalg import splu

    M = (disc.B_unweighted.T @ disc.B).tocsc()
    rhs = disc.B.T @ values_at_quadrature
    lu = splu(M)
    rhs = np.asarray(rhs)
    if np.iscomplexobj(rhs):
        return lu.solve(np.ascontiguousarray(rhs.real)) + 1j * lu.solve(np.ascontiguousarray(rhs.imag))
    return lu.solve(rhs)


# --------------------------------------------------------------------------
# binary dump

_MAGIC = b"LFSIMAT1"


def dump_matrix(path, M) -> None:
    """Write ``M`` as: 8-byte magic, int64 rows, int64 cols, then row-major
    little-endian float64 (re, im) pairs."""
    M = np.ascontiguousarray(M, dtype="<c16")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<qq", *M.shape))
        fh.write(M.tobytes())


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a matrix dump")
        m, n = struct.unpack("<qq", fh.read(16))
        return np.frombuffer(fh.read(), dtype="<c16").reshape(m, n).copy()
