import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import sparse_matrices
from vbarms.compression import QuotientGraph, build_quotient_graph, exact_blocking
from vbarms.corpus import laplacian_2d
from vbarms.ordering import SingularScalingError, block_independent_set, scale
from vbarms.sparse import BlockPartition, CsrMatrix, Permutation, permute, symmetrized_pattern, to_vbcsr


def quotient_from_edges(n, edges, sizes=None):
    adj = [{k} for k in range(n)]
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    sizes = sizes or [1] * n
    members, start = [], 0
    for s in sizes:
        members.append(np.arange(start, start + s))
        start += s
    m2s = np.repeat(np.arange(n), sizes)
    return QuotientGraph(members, [np.array(sorted(a), dtype=np.int64) for a in adj], m2s)


# -- scaling ---------------------------------------------------------------


def test_scale_identity_when_already_unit():
    A = CsrMatrix.from_dense([[1.0, -0.5, 0.0], [0.2, 0.0, 1.0], [0.0, -1.0, 0.3]])
    s, B = scale(A)
    np.testing.assert_array_equal(s.row_scale, 1.0)
    np.testing.assert_array_equal(s.col_scale, 1.0)
    np.testing.assert_array_equal(B.to_dense(), A.to_dense())


def test_scale_one_by_one():
    s, B = scale(CsrMatrix.from_dense([[4.0]]))
    assert s.row_scale[0] == 0.25 and s.col_scale[0] == 1.0
    assert B.values[0] == 1.0


def test_scale_random_positive(rng):
    A = CsrMatrix.from_dense(rng.random((10, 10)) + 0.01)
    s, B = scale(A)
    D = np.abs(B.to_dense())
    assert D.max(axis=1).max() <= 1 + 1e-14
    assert D.max(axis=0).max() <= 1 + 1e-14
    np.testing.assert_allclose(B.to_dense(), s.row_scale[:, None] * A.to_dense() * s.col_scale, rtol=1e-15)


@pytest.mark.parametrize("dense,kind,index", [([[1.0, 0.0], [0.0, 0.0]], "row", 1), ([[1.0, 0.0], [1.0, 0.0]], "column", 1)])
def test_scale_zero_row_or_column(dense, kind, index):
    with pytest.raises(SingularScalingError) as exc:
        scale(CsrMatrix.from_dense(dense, keep_zeros=False))
    assert exc.value.kind == kind and exc.value.index == index


def _nonsingular_pattern(A: CsrMatrix) -> CsrMatrix:
    D = A.to_dense() + 3.0 * np.eye(A.n_rows)
    return CsrMatrix.from_dense(D)


@given(sparse_matrices(min_n=1, max_n=25))
def test_scale_contract_and_idempotence(A):
    A = _nonsingular_pattern(A)
    s, B = scale(A)
    assert np.all(np.isfinite(s.row_scale)) and np.all(s.row_scale > 0)
    assert np.all(np.isfinite(s.col_scale)) and np.all(s.col_scale > 0)
    assert B.abs_row_max().max() <= 1 + 1e-14
    assert B.abs_col_max().max() <= 1 + 1e-14
    s2, _ = scale(B)
    np.testing.assert_allclose(s2.row_scale, 1.0, atol=1e-14)
    np.testing.assert_allclose(s2.col_scale, 1.0, atol=1e-14)


@given(sparse_matrices(min_n=1, max_n=25), st.integers(0, 1000))
def test_scaling_commutes_with_solve(A, seed):
    A = _nonsingular_pattern(A)
    b = np.random.default_rng(seed).standard_normal(A.n_rows)
    s, B = scale(A)
    y = np.linalg.solve(B.to_dense(), s.row_scale * b)
    x = np.linalg.solve(A.to_dense(), b)
    np.testing.assert_allclose(s.col_scale * y, x, rtol=1e-12, atol=1e-12 * np.abs(x).max())


def test_scale_vbcsr_matches_csr(rng):
    D = rng.standard_normal((12, 12)) * (rng.random((12, 12)) < 0.4) + np.eye(12)
    A = CsrMatrix.from_dense(D)
    part = BlockPartition.uniform(12, 3)
    s1, B1 = scale(A)
    s2, B2 = scale(to_vbcsr(A, part))
    np.testing.assert_array_equal(s1.row_scale, s2.row_scale)
    np.testing.assert_array_equal(s1.col_scale, s2.col_scale)
    np.testing.assert_array_equal(B2.to_dense(), B1.to_dense())


# -- independent sets ------------------------------------------------------


def test_edgeless_graph_all_independent():
    qg = quotient_from_edges(4, [])
    o = block_independent_set(qg)
    assert o.m_blocks == 4 and len(o.interface) == 0
    assert o.m_rows == 4


def test_path_of_three():
    o = block_independent_set(quotient_from_edges(3, [(0, 1), (1, 2)]))
    assert sorted(o.independent.tolist()) == [0, 2]
    assert o.interface.tolist() == [1]
    assert o.perm.inverse.tolist() == [0, 2, 1]


def test_star_picks_leaves():
    o = block_independent_set(quotient_from_edges(6, [(0, k) for k in range(1, 6)]))
    assert sorted(o.independent.tolist()) == [1, 2, 3, 4, 5]
    assert o.interface.tolist() == [0]


def test_group_boundaries_follow_sizes():
    qg = quotient_from_edges(3, [(0, 1), (1, 2)], sizes=[2, 3, 4])
    o = block_independent_set(qg)
    assert o.m_rows == 6
    assert o.group_boundaries.tolist() == [0, 2, 6]


@given(sparse_matrices(min_n=1, max_n=40, density=0.1))
def test_independent_groups_are_decoupled(A):
    adj = symmetrized_pattern(A)
    part = exact_blocking(adj)
    qg = build_quotient_graph(adj, part)
    o = block_independent_set(qg)
    assert o.perm.is_valid()
    assert o.m_rows == int(qg.sizes()[o.independent].sum())
    ind = set(o.independent.tolist())
    for k in ind:
        assert not (set(qg.adjacency[k].tolist()) - {k}) & ind
    # maximality: every interface supernode touches the independent set
    for k in o.interface:
        assert set(qg.adjacency[k].tolist()) & ind
    # D block diagonal after permutation, checked on the matrix
    order = np.concatenate([qg.supernodes[k] for k in o.perm.inverse])
    P = Permutation.from_inverse(order)
    D = permute(A, P, P).to_dense()[: o.m_rows, : o.m_rows]
    g = o.group_boundaries
    for p in range(len(g) - 1):
        for q in range(len(g) - 1):
            if p != q:
                assert not np.any(D[g[p]:g[p + 1], g[q]:g[q + 1]])


def test_grid_independent_set_is_checkerboard_like():
    adj = symmetrized_pattern(CsrMatrix.from_scipy(laplacian_2d(4)))
    qg = build_quotient_graph(adj, BlockPartition.singletons(16))
    o = block_independent_set(qg)
    # corners have degree 2 and go first
    assert {0, 3, 12, 15} <= set(o.independent.tolist())
