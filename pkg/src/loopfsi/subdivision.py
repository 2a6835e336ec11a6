"""Evaluation of Loop subdivision limit surfaces and their basis functions.

Every element is a control triangle ``(c0, c1, c2)`` with local coordinates
``xi = (xi1, xi2)`` such that ``c0 -> (0, 0)``, ``c1 -> (1, 0)`` and
``c2 -> (0, 1)``. The support of the basis on an element (its *patch*) is
collected in a fixed order: the corner carrying the extraordinary vertex
first, then its one-ring starting at the next corner, then five outer
vertices. On regular patches the basis is the quartic box spline; on patches
with one extraordinary vertex the point is pushed through local refinement
until it falls into a regular sub-patch.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .mesh import ControlMesh, MeshError, limit_weight, loop_beta

MAX_DEPTH = 30

# --------------------------------------------------------------------------
# quartic box splines


def _box_splines_uvw(u, v, w):
    return (
        np.array(
            [
                u**4 + 2 * u**3 * v,
                u**4 + 2 * u**3 * w,
                u**4 + 2 * u**3 * w + 6 * u**3 * v + 6 * u**2 * v * w + 12 * u**2 * v**2
                + 6 * u * v**2 * w + 6 * u * v**3 + 2 * v**3 * w + v**4,
                6 * u**4 + 24 * u**3 * w + 24 * u**2 * w**2 + 8 * u * w**3 + w**4 + 24 * u**3 * v
                + 60 * u**2 * v * w + 36 * u * v * w**2 + 6 * v * w**3 + 24 * u**2 * v**2
                + 36 * u * v**2 * w + 12 * v**2 * w**2 + 8 * u * v**3 + 6 * v**3 * w + v**4,
                u**4 + 6 * u**3 * w + 12 * u**2 * w**2 + 6 * u * w**3 + w**4 + 2 * u**3 * v
                + 6 * u**2 * v * w + 6 * u * v * w**2 + 2 * v * w**3,
                2 * u * v**3 + v**4,
                u**4 + 6 * u**3 * w + 12 * u**2 * w**2 + 6 * u * w**3 + w**4 + 8 * u**3 * v
                + 36 * u**2 * v * w + 36 * u * v * w**2 + 8 * v * w**3 + 24 * u**2 * v**2
                + 60 * u * v**2 * w + 24 * v**2 * w**2 + 24 * u * v**3 + 24 * v**3 * w + 6 * v**4,
                u**4 + 8 * u**3 * w + 24 * u**2 * w**2 + 24 * u * w**3 + 6 * w**4 + 6 * u**3 * v
                + 36 * u**2 * v * w + 60 * u * v * w**2 + 24 * v * w**3 + 12 * u**2 * v**2
                + 36 * u * v**2 * w + 24 * v**2 * w**2 + 6 * u * v**3 + 8 * v**3 * w + v**4,
                2 * u * w**3 + w**4,
                2 * v**3 * w + v**4,
                2 * u * w**3 + w**4 + 6 * u * v * w**2 + 6 * v * w**3 + 6 * u * v**2 * w
                + 12 * v**2 * w**2 + 2 * u * v**3 + 6 * v**3 * w + v**4,
                w**4 + 2 * v * w**3,
            ]
        )
        / 12.0
    )


# position of each patch entry (patch order) in the classical 12-function
# numbering used by _box_splines_uvw
_STAM_FROM_PATCH = np.array([3, 6, 7, 4, 1, 0, 2, 5, 9, 10, 11, 8])

_EXPONENTS = np.array([(i, j) for i in range(5) for j in range(5 - i)])


def _monomials(s, t, ds=0, dt=0):
    """Monomial (derivative) matrix, shape (n, 15)."""
    i, j = _EXPONENTS[:, 0], _EXPONENTS[:, 1]
    coef = np.ones(len(_EXPONENTS))
    for _ in range(ds):
        coef = coef * i
        i = i - 1
    for _ in range(dt):
        coef = coef * j
        j = j - 1
    ok = (i >= 0) & (j >= 0)
    s = np.asarray(s, dtype=float)[:, None]
    t = np.asarray(t, dtype=float)[:, None]
    return np.where(ok, coef * s ** np.maximum(i, 0) * t ** np.maximum(j, 0), 0.0)


def _fit_box_spline_coefficients():
    g = np.linspace(0.0, 1.0, 7)
    s, t = np.meshgrid(g, g)
    m = (s + t) <= 1.0
    s, t = s[m], t[m]
    vals = _box_splines_uvw(1 - s - t, s, t)[_STAM_FROM_PATCH].T
    coeff, *_ = np.linalg.lstsq(_monomials(s, t), vals, rcond=None)
    coeff[np.abs(coeff) < 1e-13] = 0.0
    return coeff


_BOX_COEFF = _fit_box_spline_coefficients()  # (15, 12), patch order


def box_spline(s, t, derivatives: bool = True):
    """Regular-patch basis (patch order) at arrays ``s, t``.

    Returns ``values (n, 12)`` and, when requested, ``d1 (n, 12, 2)`` and
    ``d2 (n, 12, 3)`` with second derivatives ordered (ss, st, tt).
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    val = _monomials(s, t) @ _BOX_COEFF
    if not derivatives:
        return val
    d1 = np.stack([_monomials(s, t, 1, 0) @ _BOX_COEFF, _monomials(s, t, 0, 1) @ _BOX_COEFF], axis=-1)
    d2 = np.stack(
        [
            _monomials(s, t, 2, 0) @ _BOX_COEFF,
            _monomials(s, t, 1, 1) @ _BOX_COEFF,
            _monomials(s, t, 0, 2) @ _BOX_COEFF,
        ],
        axis=-1,
    )
    return val, d1, d2


# --------------------------------------------------------------------------
# patch gathering (works on any triangle set through a "next around" map)


def _ring(nxt, v, first):
    ring = [first]
    cur = nxt[(v, first)]
    while cur != first:
        ring.append(cur)
        cur = nxt[(v, cur)]
        if len(ring) > 64:
            raise MeshError(f"one-ring of {v} does not close")
    return ring


def gather_patch(nxt, a, b, c) -> list[int]:
    """Patch of triangle ``(a, b, c)`` with ``a`` the (possibly) extraordinary corner.

    ``b`` and ``c`` must have valence 6.
    """
    ra = _ring(nxt, a, b)
    rb = _ring(nxt, b, c)
    rc = _ring(nxt, c, a)
    if len(rb) != 6 or len(rc) != 6:
        raise MeshError(f"triangle ({a}, {b}, {c}) has more than one extraordinary vertex")
    return [a, *ra, rb[3], rb[4], rb[5], rc[3], rc[4]]


def _next_map(tris):
    nxt = {}
    for a, b, c in tris:
        nxt[(a, b)] = c
        nxt[(b, c)] = a
        nxt[(c, a)] = b
    return nxt


def _canonical_patch_triangles(n):
    """Local triangles of an extraordinary patch of valence ``n`` (patch labels)."""
    ring = list(range(1, n + 1))
    e = [n + 1 + i for i in range(5)]
    tris = [(0, ring[i], ring[(i + 1) % n]) for i in range(n)]
    c1, c2, rlast, r2 = 1, 2, n, 3
    tris += [(c1, rlast, e[0]), (c1, e[0], e[1]), (c1, e[1], e[2]), (c1, e[2], c2)]
    tris += [(c2, e[2], e[3]), (c2, e[3], e[4]), (c2, e[4], r2)]
    return tris


def _refine_local(tris, n_old):
    """Loop-refine a local triangle set as far as the data allows.

    Returns the weight matrix (new x old), refined triangles, and lookup
    maps for vertex points and edge points.
    """
    nxt = _next_map(tris)
    edge_opp: dict[tuple[int, int], list[int]] = {}
    for a, b, c in tris:
        for p, q, r in ((a, b, c), (b, c, a), (c, a, b)):
            edge_opp.setdefault((min(p, q), max(p, q)), []).append(r)

    rows = []
    vpoint = {}
    for v in range(n_old):
        starts = [b for (x, b) in nxt if x == v]
        if not starts:
            continue
        ring = [starts[0]]
        cur = nxt.get((v, starts[0]))
        closed = False
        while cur is not None:
            if cur == starts[0]:
                closed = True
                break
            ring.append(cur)
            cur = nxt.get((v, cur))
        if not closed:
            continue
        n = len(ring)
        beta = loop_beta(n)
        w = np.zeros(n_old)
        w[v] = 1 - n * beta
        w[ring] += beta
        vpoint[v] = len(rows)
        rows.append(w)
    epoint = {}
    for (a, b), opp in sorted(edge_opp.items()):
        if len(opp) != 2:
            continue
        w = np.zeros(n_old)
        w[[a, b]] += 3.0 / 8.0
        w[opp] += 1.0 / 8.0
        epoint[(a, b)] = len(rows)
        rows.append(w)

    def em(p, q):
        return epoint.get((min(p, q), max(p, q)))

    new_tris = []
    for a, b, c in tris:
        mab, mbc, mca = em(a, b), em(b, c), em(c, a)
        va, vb, vc = vpoint.get(a), vpoint.get(b), vpoint.get(c)
        for tri in ((va, mab, mca), (mab, vb, mbc), (mca, mbc, vc), (mab, mbc, mca)):
            if None not in tri:
                new_tris.append(tri)
    return np.array(rows), new_tris, vpoint, epoint


@dataclass(frozen=True, eq=False)
class _ValenceTables:
    n: int
    corner: np.ndarray  # (n+6, n+6): patch of the corner child
    regular: tuple  # three (12, n+6) picks for children 1, 2, 3

    @lru_cache(maxsize=None)
    def level(self, k: int, child: int) -> np.ndarray:
        m = self.regular[child - 1]
        return m @ np.linalg.matrix_power(self.corner, k)


@lru_cache(maxsize=None)
def valence_tables(n: int) -> _ValenceTables:
    tris = _canonical_patch_triangles(n)
    S, new_tris, vp, ep = _refine_local(tris, n + 6)
    nxt = _next_map(new_tris)

    def e(p, q):
        return ep[(min(p, q), max(p, q))]

    c0, c1, c2 = vp[0], vp[1], vp[2]
    m01, m12, m20 = e(0, 1), e(1, 2), e(2, 0)
    corner = S[gather_patch(nxt, c0, m01, m20)]
    # children in the order used by mesh.CHILD_CORNERS
    regular = (
        S[gather_patch(nxt, m01, c1, m12)],
        S[gather_patch(nxt, m20, m12, c2)],
        S[gather_patch(nxt, m01, m12, m20)],
    )
    return _ValenceTables(n, corner, regular)


# child parametric frames (must agree with mesh.CHILD_CORNERS)
_CHILD_P0 = np.array([[0.0, 0.0], [0.5, 0.0], [0.0, 0.5], [0.5, 0.0]])
_CHILD_JINV = np.array(
    [
        np.linalg.inv(np.array([[0.5, 0.0], [0.0, 0.5]])),
        np.linalg.inv(np.array([[0.5, 0.0], [0.0, 0.5]])),
        np.linalg.inv(np.array([[0.5, 0.0], [0.0, 0.5]])),
        np.linalg.inv(np.array([[0.0, -0.5], [0.5, 0.5]])),
    ]
)

# rotation of an element so that corner r comes first: xi' = T xi + c
_ROT_T = np.array([np.eye(2), [[0.0, 1.0], [-1.0, -1.0]], [[-1.0, -1.0], [1.0, 0.0]]])
_ROT_C = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]])


def _transform_derivatives(d1, d2, M):
    """Pull derivatives back through xi' = M xi (+ const). d1 (..., 2), d2 (..., 3)."""
    g = d1 @ M
    H = np.empty(d2.shape[:-1] + (2, 2))
    H[..., 0, 0] = d2[..., 0]
    H[..., 0, 1] = H[..., 1, 0] = d2[..., 1]
    H[..., 1, 1] = d2[..., 2]
    Hx = np.einsum("ji,...jk,kl->...il", M, H, M)
    return g, np.stack([Hx[..., 0, 0], Hx[..., 0, 1], Hx[..., 1, 1]], axis=-1)


# --------------------------------------------------------------------------
# public types


@dataclass(frozen=True)
class ParamPoint:
    element: int
    xi: tuple[float, float]

    def __post_init__(self):
        x1, x2 = self.xi
        if x1 < -1e-14 or x2 < -1e-14 or x1 + x2 > 1 + 1e-14:
            raise ValueError(f"parameter {self.xi} lies outside the reference triangle")


@dataclass(frozen=True)
class PatchBasis:
    """Basis functions of one element evaluated at one parameter point."""

    element: int
    indices: np.ndarray  # control vertex ids, length n_v
    values: np.ndarray  # (n_v,)
    d1: np.ndarray  # (n_v, 2)
    d2: np.ndarray  # (n_v, 3) -> (11, 12, 22)

    @property
    def n_v(self) -> int:
        return len(self.indices)


class SurfaceEvaluator:
    """Vectorised basis evaluation for all elements of a control mesh."""

    def __init__(self, mesh: ControlMesh):
        self.mesh = mesh
        val = mesh.valence
        tris = mesh.triangles
        nxt = mesh._next_around
        irregular = val[tris] != 6
        n_irr = irregular.sum(axis=1)
        rot = np.where(n_irr == 1, np.argmax(irregular, axis=1), 0)
        self.rotation = rot
        self.valid = n_irr <= 1
        self.corner_valence = val[tris[np.arange(len(tris)), rot]]
        self.n_v = self.corner_valence + 6
        nmax = int(self.n_v[self.valid].max()) if self.valid.any() else 12
        self.nmax = nmax
        patches = np.zeros((len(tris), nmax), dtype=np.int64)
        mask = np.zeros((len(tris), nmax), dtype=bool)
        for f in np.flatnonzero(self.valid):
            r = rot[f]
            a, b, c = tris[f, r], tris[f, (r + 1) % 3], tris[f, (r + 2) % 3]
            p = gather_patch(nxt, int(a), int(b), int(c))
            patches[f, : len(p)] = p
            mask[f, : len(p)] = True
        self.patches = patches
        self.patch_mask = mask

    def require_valid(self, elements):
        bad = np.flatnonzero(~self.valid[np.asarray(elements)])
        if len(bad):
            f = int(np.asarray(elements)[bad[0]])
            raise MeshError(
                f"element {f} touches more than one extraordinary vertex; refine the mesh once first"
            )

    def evaluate(self, elements, xi, derivatives: bool = True):
        """Basis on many (element, xi) pairs.

        Returns ``(indices, values, d1, d2)`` with shapes (n, nmax),
        (n, nmax), (n, nmax, 2), (n, nmax, 3). Unused slots hold index 0 and
        zero values.
        """
        elements = np.atleast_1d(np.asarray(elements, dtype=np.int64))
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        self.require_valid(elements)
        n = len(elements)
        nmax = self.nmax
        val = np.zeros((n, nmax))
        d1 = np.zeros((n, nmax, 2))
        d2 = np.zeros((n, nmax, 3))

        rot = self.rotation[elements]
        T = _ROT_T[rot]
        xr = np.einsum("nij,nj->ni", T, xi) + _ROT_C[rot]
        xr = np.clip(xr, 0.0, 1.0)
        nv = self.corner_valence[elements]

        reg = nv == 6
        if reg.any():
            b, g, h = box_spline(xr[reg, 0], xr[reg, 1])
            val[reg, :12] = b
            d1[reg, :12] = g
            d2[reg, :12] = h

        for N in np.unique(nv[~reg]):
            sel = np.flatnonzero(nv == N)
            self._eval_irregular(int(N), xr[sel], sel, val, d1, d2)

        # back to the element's own frame
        for r in (1, 2):
            m = rot == r
            if m.any():
                d1[m], d2[m] = _transform_derivatives(d1[m], d2[m], _ROT_T[r])
        return self.patches[elements], val, d1, d2

    def _eval_irregular(self, N, x, sel, val, d1, d2):
        tab = valence_tables(N)
        s = x.sum(axis=1)
        at_corner = s <= 0.0
        if at_corner.any():
            chi = limit_weight(N)
            c = sel[at_corner]
            val[c, 0] = 1 - N * chi
            val[c, 1 : N + 1] = chi
            ang = 2 * np.pi * np.arange(N) / N
            d1[c, 1 : N + 1, 0] = np.cos(ang)
            d1[c, 1 : N + 1, 1] = np.sin(ang)
            d2[c] = np.nan
        live = ~at_corner
        if not live.any():
            return
        x = x[live]
        sel = sel[live]
        s = s[live]
        k = np.maximum(np.floor(-np.log2(s)).astype(np.int64), 0)
        # guard against rounding in log2
        k = np.where(s * 2.0**k < 0.5, k + 1, k)
        k = np.where(s * 2.0 ** (k - 1) >= 0.5, k - 1, k)
        k = np.maximum(k, 0)
        deep = k > MAX_DEPTH
        k = np.minimum(k, MAX_DEPTH)
        xs = x * (2.0**k)[:, None]
        if deep.any():
            xs[deep] *= 0.5 / xs[deep].sum(axis=1)[:, None]
        child = np.full(len(xs), 3)
        child[xs[:, 0] >= 0.5] = 1
        child[(xs[:, 1] >= 0.5) & (child == 3)] = 2
        for kk in np.unique(k):
            for ch in (1, 2, 3):
                m = (k == kk) & (child == ch)
                if not m.any():
                    continue
                Jinv = _CHILD_JINV[ch]
                st = (xs[m] - _CHILD_P0[ch]) @ Jinv.T
                b, g, h = box_spline(st[:, 0], st[:, 1])
                g, h = _transform_derivatives(g, h, Jinv)
                W = tab.level(int(kk), ch)
                scale = 2.0 ** float(kk)
                rows = sel[m]
                val[rows, : N + 6] = b @ W
                d1[rows, : N + 6] = np.einsum("nad,ab->nbd", g, W) * scale
                d2[rows, : N + 6] = np.einsum("nad,ab->nbd", h, W) * scale**2


def evaluator(mesh: ControlMesh) -> SurfaceEvaluator:
    """Cached evaluator for ``mesh`` (meshes are immutable)."""
    ev = mesh.__dict__.get("_evaluator")
    if ev is None:
        ev = SurfaceEvaluator(mesh)
        mesh.__dict__["_evaluator"] = ev
    return ev


def evaluate_basis(mesh: ControlMesh, p: ParamPoint) -> PatchBasis:
    """Basis functions (with first and second derivatives) at one point.

    At an extraordinary corner the values are the limit-position mask and
    ``d1`` holds the two limit tangent masks (they span the tangent plane but
    are not parametric derivatives there); ``d2`` is NaN.
    """
    ev = evaluator(mesh)
    idx, val, g, h = ev.evaluate([p.element], [p.xi])
    n = int(ev.n_v[p.element])
    return PatchBasis(p.element, idx[0, :n], val[0, :n], g[0, :n], h[0, :n])


def vertex_limit_masks(mesh: ControlMesh, v: int):
    """Limit position and tangent masks at control vertex ``v``.

    Returns ``(indices, position_weights, tangent1_weights, tangent2_weights)``.
    The tangents follow the counter-clockwise ring, so ``t1 x t2`` points
    outward for an outward-oriented mesh.
    """
    ring = mesh.one_rings[v]
    n = len(ring)
    chi = limit_weight(n)
    idx = np.concatenate([[v], ring])
    pos = np.concatenate([[1 - n * chi], np.full(n, chi)])
    ang = 2 * np.pi * np.arange(n) / n
    t1 = np.concatenate([[0.0], np.cos(ang)])
    t2 = np.concatenate([[0.0], np.sin(ang)])
    return idx, pos, t1, t2


def vertex_limit_points(mesh: ControlMesh) -> tuple[np.ndarray, np.ndarray]:
    """Limit positions and unit outward normals at all control vertices."""
    P = mesh.vertices
    pts = np.empty_like(P)
    nrm = np.empty_like(P)
    for v in range(mesh.n_vertices):
        idx, w, t1, t2 = vertex_limit_masks(mesh, v)
        pts[v] = w @ P[idx]
        n = np.cross(t1 @ P[idx], t2 @ P[idx])
        ln = np.linalg.norm(n)
        if ln == 0:
            raise MeshError(f"degenerate tangent plane at vertex {v}")
        nrm[v] = n / ln
    return pts, nrm


def surface_points(mesh: ControlMesh, elements, xi):
    """Positions, tangents (n, 2, 3) and second derivatives (n, 3, 3)."""
    idx, val, g, h = evaluator(mesh).evaluate(elements, xi)
    P = mesh.vertices[idx]
    x = np.einsum("na,nai->ni", val, P)
    a = np.einsum("nad,nai->ndi", g, P)
    aa = np.einsum("nad,nai->ndi", h, P)
    return x, a, aa


def limit_position(mesh: ControlMesh, p: ParamPoint) -> np.ndarray:
    b = evaluate_basis(mesh, p)
    return b.values @ mesh.vertices[b.indices]


def limit_normal(mesh: ControlMesh, p: ParamPoint) -> np.ndarray:
    """Unit normal; outward for outward-oriented meshes."""
    b = evaluate_basis(mesh, p)
    P = mesh.vertices[b.indices]
    n = np.cross(b.d1[:, 0] @ P, b.d1[:, 1] @ P)
    ln = np.linalg.norm(n)
    if not ln > 0:
        raise MeshError(f"degenerate tangents on element {p.element} at {p.xi}")
    return n / ln
