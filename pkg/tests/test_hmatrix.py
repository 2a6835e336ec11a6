from __future__ import annotations

import csv
import math

import numpy as np
import pytest

from loopfsi.bem import WaveContext, assemble_operators
from loopfsi.coupling import gmres_right
from loopfsi.hmatrix import (
    DenseOracle,
    NearFieldPreconditioner,
    aca_compress,
    bem_cluster_tree,
    build_cluster_tree,
    build_hmatrix,
    compress_bem,
    h_factorize,
    is_admissible,
)
from loopfsi.meshio import fibonacci_sphere


def _helmholtz(x, y, k):
    r = np.linalg.norm(x[:, None] - y[None], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.exp(1j * k * r) / (4 * np.pi * r)
    g[r == 0] = 0.0
    return g


@pytest.fixture(scope="module")
def synthetic():
    pts = fibonacci_sphere(1746).vertices
    M = _helmholtz(pts, pts, 10.0) + np.eye(len(pts))
    return pts, M, build_cluster_tree(pts, n_min=32)


def test_cube_corners_give_balanced_tree():
    pts = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=float)
    tree = build_cluster_tree(pts, n_min=1)
    assert tree.depth == 3
    assert [leaf.size for leaf in tree.leaves()] == [1] * 8
    assert sorted(tree.permutation) == list(range(8))


def test_identical_points_warn():
    with pytest.warns(RuntimeWarning, match="coincident"):
        tree = build_cluster_tree(np.ones((50, 3)), n_min=32)
    assert len(tree.leaves()) == 1


def test_bem_tree_structure(sphere1746):
    from loopfsi.bem import BemDiscretisation

    disc = BemDiscretisation(sphere1746)
    tree = bem_cluster_tree(disc)
    n = disc.n
    assert all(leaf.size <= 32 for leaf in tree.leaves())
    assert tree.depth <= math.ceil(math.log2(n / 32)) + 3
    assert sorted(tree.permutation) == list(range(n))
    boxes = disc.support_boxes
    for node in tree.nodes:
        if node.children:
            merged = np.concatenate([c.indices for c in node.children])
            assert sorted(merged) == sorted(node.indices)
        assert np.all(boxes[node.indices, 0] >= node.lo - 1e-15)
        assert np.all(boxes[node.indices, 1] <= node.hi + 1e-15)


def test_aca_recovers_rank_one():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal(40), rng.standard_normal(60)
    M = np.outer(a, b)
    U, V, rank = aca_compress(DenseOracle(M), np.arange(40), np.arange(60), 1e-12)
    assert rank == 1
    np.testing.assert_allclose(U @ V, M, atol=1e-12 * np.abs(M).max())


def _far_block():
    rng = np.random.default_rng(1)
    x = rng.uniform(-0.5, 0.5, (120, 3))
    y = rng.uniform(-0.5, 0.5, (100, 3)) + [6.0, 0.0, 0.0]
    return _helmholtz(x, y, 1.0)


@pytest.mark.parametrize("eps", [1e-4, 1e-6, 1e-8])
def test_aca_far_helmholtz_block(eps):
    M = _far_block()
    U, V, rank = aca_compress(DenseOracle(M), np.arange(120), np.arange(100), eps)
    assert 0 < rank <= 20
    assert np.linalg.norm(U @ V - M) <= 10 * eps * np.linalg.norm(M)


def test_rank_nondecreasing_as_tolerance_tightens():
    M = _far_block()
    ranks = [aca_compress(DenseOracle(M), np.arange(120), np.arange(100), e)[2] for e in (1e-2, 1e-4, 1e-6)]
    assert ranks == sorted(ranks)


def test_blocks_partition_matrix_and_are_admissible(synthetic):
    _, M, tree = synthetic
    H = build_hmatrix(DenseOracle(M), tree, eps=1e-6)
    cover = np.zeros(M.shape, dtype=np.int8)
    for b in H.blocks:
        cover[np.ix_(b.row.indices, b.col.indices)] += 1
        if b.admissible:
            assert is_admissible(b.row, b.col, H.eta)
            assert min(b.row.diameter, b.col.diameter) <= H.eta * np.linalg.norm(
                np.maximum(0, np.maximum(b.row.lo - b.col.hi, b.col.lo - b.row.hi)))
    assert np.all(cover == 1)
    assert H.compression_ratio < 1.0


def test_accuracy_ladder(synthetic):
    _, M, tree = synthetic
    rng = np.random.default_rng(2)
    X = rng.standard_normal((len(M), 10)) + 1j * rng.standard_normal((len(M), 10))
    ref = M @ X
    errs = []
    for eps in (1e-3, 5e-4, 2.5e-4, 1.25e-4, 6.25e-5):
        H = build_hmatrix(DenseOracle(M), tree, eps=eps)
        err = np.linalg.norm(H @ X - ref, axis=0) / np.linalg.norm(ref, axis=0)
        assert err.max() <= 10 * eps
        errs.append(err.max())
    assert all(b <= a for a, b in zip(errs, errs[1:]))


def test_block_csv(tmp_path, synthetic):
    _, M, tree = synthetic
    H = build_hmatrix(DenseOracle(M), tree, eps=1e-4)
    path = tmp_path / "blocks.csv"
    H.write_block_csv(path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(H.blocks)
    assert sum(int(r["row_size"]) * int(r["col_size"]) for r in rows) == M.size
    assert {r["kind"] for r in rows} == {"dense", "lowrank"}


def test_compressed_bem_matvec_on_438(disc438):
    ctx = WaveContext(k=10.0)
    ops = assemble_operators(disc438, ctx)
    H, G = compress_bem(disc438, ctx.k, eps=1e-8)
    rng = np.random.default_rng(3)
    for _ in range(10):
        x = rng.standard_normal(disc438.n) + 1j * rng.standard_normal(disc438.n)
        for dense, comp in ((ops.H, H), (ops.G, G)):
            assert np.linalg.norm(comp @ x - dense @ x) <= 1e-7 * np.linalg.norm(dense @ x)


def test_static_single_layer_preconditioned_in_few_iterations(disc438):
    _, G = compress_bem(disc438, 0.0, eps=1e-6)
    scale = 1.0 / np.abs(G.near_field().diagonal()).mean()
    b = np.ones(disc438.n, dtype=complex)
    P = h_factorize(G)
    _, its, _, res = gmres_right(lambda v: G @ v, b, P, tol=1e-8)
    assert its <= 5 and res <= 1e-7
    assert scale > 0


def test_singular_near_field_is_regularised():
    import scipy.sparse as sp

    A = sp.csr_matrix(np.diag([1.0, 2.0, 0.0]))
    with pytest.warns(RuntimeWarning, match="regularis"):
        P = NearFieldPreconditioner(A)
    assert np.all(np.isfinite(P.solve(np.ones(3))))


def test_preconditioner_reduces_iterations_on_rigid_system(sphere1746):
    from loopfsi.bem import BemDiscretisation, build_collocation_table
    from loopfsi.hmatrix import BemKernelOracle

    disc = BemDiscretisation(sphere1746)
    ctx = WaveContext(k=10.0)
    _, Hc = disc.corrections(ctx.k)
    H = build_hmatrix(BemKernelOracle(disc, ctx.k, "H"), bem_cluster_tree(disc), 1e-6, correction=Hc)
    b = ctx.incident(build_collocation_table(sphere1746).points)
    _, plain, _, _ = gmres_right(lambda v: H @ v, b, None, tol=1e-8)
    _, pre, _, res = gmres_right(lambda v: H @ v, b, h_factorize(H), tol=1e-8)
    assert pre < plain and res <= 1e-7
