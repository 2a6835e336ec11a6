"""Closed triangle control meshes and Loop refinement."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp


class MeshError(ValueError):
    """Raised when a control mesh violates the closed 2-manifold contract."""


def loop_beta(valence: int) -> float:
    """Loop's original vertex-smoothing weight for a vertex of given valence."""
    c = 3.0 / 8.0 + 0.25 * np.cos(2.0 * np.pi / valence)
    return (5.0 / 8.0 - c * c) / valence


def limit_weight(valence: int) -> float:
    """Weight of each one-ring neighbour in the Loop limit-position mask."""
    return 1.0 / (valence + 3.0 / (8.0 * loop_beta(valence)))


@dataclass(frozen=True, eq=False)
class ControlMesh:
    """Closed, consistently oriented triangle mesh.

    ``vertices`` is (V, 3) float, ``triangles`` is (F, 3) int with
    counter-clockwise winding seen from outside. Arrays are made read-only.
    Construction validates manifoldness and orientation; pass
    ``validate=False`` only for meshes produced by trusted operations.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        t = np.array(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (V, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError(f"triangles must be (F, 3), got {t.shape}")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.validate:
            self.check()

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    # -- topology ---------------------------------------------------------

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as (E, 2) with ``a < b``, sorted."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def _next_around(self) -> dict[tuple[int, int], int]:
        # (v, a) -> b when triangle (v, a, b) is counter-clockwise
        nxt: dict[tuple[int, int], int] = {}
        for a, b, c in self.triangles.tolist():
            nxt[(a, b)] = c
            nxt[(b, c)] = a
            nxt[(c, a)] = b
        return nxt

    @cached_property
    def one_rings(self) -> list[np.ndarray]:
        """Counter-clockwise ordered neighbours of every vertex."""
        nxt = self._next_around
        start: dict[int, int] = {}
        for v, a in nxt:
            start.setdefault(v, a)
        rings = []
        for v in range(self.n_vertices):
            if v not in start:
                raise MeshError(f"vertex {v} is not referenced by any triangle")
            first = start[v]
            ring = [first]
            cur = nxt[(v, first)]
            while cur != first:
                ring.append(cur)
                if len(ring) > self.n_vertices:
                    raise MeshError(f"one-ring of vertex {v} does not close")
                cur = nxt.get((v, cur))
                if cur is None:
                    raise MeshError(f"one-ring of vertex {v} is open (boundary vertex)")
            rings.append(np.array(ring, dtype=np.int64))
        return rings

    @cached_property
    def valence(self) -> np.ndarray:
        return np.array([len(r) for r in self.one_rings], dtype=np.int64)

    @cached_property
    def vertex_triangles(self) -> list[np.ndarray]:
        """Triangles incident to each vertex."""
        buckets: list[list[int]] = [[] for _ in range(self.n_vertices)]
        for f, tri in enumerate(self.triangles.tolist()):
            for v in tri:
                buckets[v].append(f)
        return [np.array(b, dtype=np.int64) for b in buckets]

    def ring_from(self, v: int, first: int) -> np.ndarray:
        """One-ring of ``v`` rotated so that it starts at neighbour ``first``."""
        ring = self.one_rings[v]
        pos = np.flatnonzero(ring == first)
        if len(pos) != 1:
            raise MeshError(f"vertex {first} is not a neighbour of {v}")
        return np.roll(ring, -int(pos[0]))

    @property
    def euler_characteristic(self) -> int:
        return self.n_vertices - self.n_edges + self.n_triangles

    @property
    def genus(self) -> int:
        return (2 - self.euler_characteristic) // 2

    def check(self) -> None:
        """Validate the closed, oriented 2-manifold invariants."""
        t = self.triangles
        nv = self.n_vertices
        if t.size and (t.min() < 0 or t.max() >= nv):
            raise MeshError("triangle index out of range")
        bad = np.flatnonzero((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2]))
        if len(bad):
            raise MeshError(f"degenerate triangle {int(bad[0])} repeats a vertex")
        directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        _, counts = np.unique(directed, axis=0, return_counts=True)
        if np.any(counts > 1):
            raise MeshError("inconsistent winding or non-manifold edge (directed edge repeated)")
        und = np.sort(directed, axis=1)
        uniq, counts = np.unique(und, axis=0, return_counts=True)
        if np.any(counts != 2):
            e = uniq[np.flatnonzero(counts != 2)[0]]
            raise MeshError(
                f"edge ({e[0]}, {e[1]}) is shared by {counts[counts != 2][0]} triangles; "
                "mesh must be closed and manifold"
            )
        self.one_rings  # raises on open / non-manifold vertex fans
        chi = self.euler_characteristic
        if chi > 2 or chi % 2:
            raise MeshError(f"Euler characteristic {chi} is not that of a closed orientable surface")

    # -- geometry ---------------------------------------------------------

    def signed_volume(self) -> float:
        p = self.vertices[self.triangles]
        return float(np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum() / 6.0)

    def oriented_outward(self) -> "ControlMesh":
        """Return a mesh whose winding gives outward normals (positive volume)."""
        if self.signed_volume() >= 0:
            return self
        return ControlMesh(self.vertices, self.triangles[:, ::-1], validate=False)

    _TOPOLOGY_CACHES = ("edges", "_next_around", "one_rings", "valence", "vertex_triangles", "_evaluator")

    def with_vertices(self, vertices: np.ndarray) -> "ControlMesh":
        """Same connectivity, new control points (topology caches are shared)."""
        new = ControlMesh(vertices, self.triangles, validate=False)
        if new.vertices.shape != self.vertices.shape:
            raise MeshError("vertex array shape changed")
        for name in self._TOPOLOGY_CACHES:
            if name in self.__dict__:
                new.__dict__[name] = self.__dict__[name]
        return new

    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 1]] - self.vertices[e[:, 0]], axis=1)


def loop_subdivision_matrix(mesh: ControlMesh) -> tuple[sp.csr_matrix, np.ndarray]:
    """Sparse Loop subdivision operator and the refined triangle list.

    Row ``i < V`` is the vertex point of old vertex ``i``; row ``V + j`` is
    the edge point of ``mesh.edges[j]``. Each triangle ``f`` produces children
    ``4f`` (at corner 0), ``4f+1`` (corner 1), ``4f+2`` (corner 2) and ``4f+3``
    (middle).
    """
    nv = mesh.n_vertices
    edges = mesh.edges
    ne = len(edges)
    t = mesh.triangles

    rows, cols, vals = [], [], []
    val = mesh.valence
    beta = np.array([loop_beta(n) for n in range(1, val.max() + 1)])[val - 1]
    rows.append(np.arange(nv))
    cols.append(np.arange(nv))
    vals.append(1.0 - val * beta)
    for v, ring in enumerate(mesh.one_rings):
        rows.append(np.full(len(ring), v))
        cols.append(ring)
        vals.append(np.full(len(ring), beta[v]))

    key = edges[:, 0] * nv + edges[:, 1]
    order = np.argsort(key)

    def edge_id(a, b):
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        return order[np.searchsorted(key, lo * nv + hi, sorter=order)]

    # opposite vertices: each triangle contributes its third vertex to 3 edges
    eid = np.stack([edge_id(t[:, 0], t[:, 1]), edge_id(t[:, 1], t[:, 2]), edge_id(t[:, 2], t[:, 0])], axis=1)
    opp = np.stack([t[:, 2], t[:, 0], t[:, 1]], axis=1)
    erow = nv + np.arange(ne)
    rows += [erow, erow]
    cols += [edges[:, 0], edges[:, 1]]
    vals += [np.full(ne, 3.0 / 8.0)] * 2
    rows.append(nv + eid.ravel())
    cols.append(opp.ravel())
    vals.append(np.full(eid.size, 1.0 / 8.0))

    S = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nv + ne, nv)
    )
    m01, m12, m20 = (nv + eid[:, 0], nv + eid[:, 1], nv + eid[:, 2])
    children = np.stack(
        [
            np.stack([t[:, 0], m01, m20], axis=1),
            np.stack([m01, t[:, 1], m12], axis=1),
            np.stack([m20, m12, t[:, 2]], axis=1),
            np.stack([m01, m12, m20], axis=1),
        ],
        axis=1,
    ).reshape(-1, 3)
    return S, children


def loop_subdivide(mesh: ControlMesh) -> ControlMesh:
    """One step of Loop refinement: V' = V + E, F' = 4F."""
    S, tris = loop_subdivision_matrix(mesh)
    return ControlMesh(S @ mesh.vertices, tris, validate=False)


# parametric corners of the four children in the parent's (xi1, xi2) frame,
# matching the child ordering of loop_subdivision_matrix
CHILD_CORNERS = np.array(
    [
        [[0.0, 0.0], [0.5, 0.0], [0.0, 0.5]],
        [[0.5, 0.0], [1.0, 0.0], [0.5, 0.5]],
        [[0.0, 0.5], [0.5, 0.5], [0.0, 1.0]],
        [[0.5, 0.0], [0.5, 0.5], [0.0, 0.5]],
    ]
)


def child_parameter(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map parent parameters to (child index 0..3, child parameters).

    Works on arrays of shape (n, 2); used to relate a point of a mesh to the
    same point on ``loop_subdivide(mesh)`` (element ``4e + child``).
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    s = xi.sum(axis=1)
    child = np.full(len(xi), 3)
    child[s <= 0.5] = 0
    child[(xi[:, 0] >= 0.5) & (child == 3)] = 1
    child[(xi[:, 1] >= 0.5) & (child == 3)] = 2
    out = np.empty_like(xi)
    for c in range(4):
        m = child == c
        p0, p1, p2 = CHILD_CORNERS[c]
        J = np.stack([p1 - p0, p2 - p0], axis=1)
        out[m] = np.linalg.solve(J, (xi[m] - p0).T).T
    return child, out
