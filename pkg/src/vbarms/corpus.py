"""Synthetic test matrices: grids with several unknowns per node, planted blocks, stencils.

Everything here is seeded and deterministic. ``desk_corpus()`` returns the
ten-matrix collection used by the bench and the property checks.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
import scipy.sparse as sps

from .sparse import BlockPartition, CsrMatrix


def _pruned(M) -> sps.csr_matrix:
    """CSR without explicitly stored zeros (scipy sums can leave them)."""
    M = sps.csr_matrix(M)
    M.eliminate_zeros()
    return M


def laplacian_1d(n: int) -> sps.csr_matrix:
    return sps.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")


def laplacian_2d(nx: int, ny: Optional[int] = None) -> sps.csr_matrix:
    """5-point Laplacian, row-major node numbering ``k = i * ny + j``."""
    ny = nx if ny is None else ny
    return _pruned(sps.kron(laplacian_1d(nx), sps.eye(ny)) + sps.kron(sps.eye(nx), laplacian_1d(ny)))


def laplacian_3d(n: int) -> sps.csr_matrix:
    L, I = laplacian_1d(n), sps.eye(n)
    return _pruned(sps.kron(sps.kron(L, I), I) + sps.kron(sps.kron(I, L), I) + sps.kron(sps.kron(I, I), L))


def convection_diffusion_2d(n: int, beta: float = 20.0) -> sps.csr_matrix:
    """Upwind convection-diffusion on an ``n x n`` grid; nonsymmetric."""
    h = 1.0 / (n + 1)
    D = laplacian_1d(n) / h**2
    C = sps.diags([-np.ones(n - 1), np.ones(n)], [-1, 0]) * (beta / h)
    I = sps.eye(n)
    return _pruned(sps.kron(D + C, I) + sps.kron(I, D + 0.5 * C))


def node_graph_to_blocks(
    G: sps.spmatrix, dofs, rng: np.random.Generator, diag_shift: float = 1.0, fill: float = 1.0
) -> sps.csr_matrix:
    """Expand a node graph into a block matrix with ``dofs[k]`` unknowns at node ``k``.

    Every stored node coupling becomes a dense random block; ``fill < 1``
    zeroes a random fraction of the off-diagonal block entries so blocks are
    only approximately dense. Diagonal blocks are shifted for dominance.
    """
    G = sps.csr_matrix(G)
    nn = G.shape[0]
    dofs = np.broadcast_to(np.asarray(dofs, dtype=np.int64), (nn,))
    off = np.zeros(nn + 1, dtype=np.int64)
    np.cumsum(dofs, out=off[1:])
    G = (G + sps.eye(nn)).tocsr()
    rows, cols, vals = [], [], []
    for I in range(nn):
        for J in G.indices[G.indptr[I]:G.indptr[I + 1]]:
            bi, bj = dofs[I], dofs[J]
            B = rng.uniform(-1.0, 1.0, (bi, bj))
            if I != J and fill < 1.0:
                B[rng.random((bi, bj)) > fill] = 0.0
            r, c = np.nonzero(B)
            rows.append(off[I] + r)
            cols.append(off[J] + c)
            vals.append(B[r, c])
    A = sps.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(off[-1], off[-1])
    )
    rowsum = np.asarray(abs(A).sum(axis=1)).ravel()
    return (A + sps.diags(diag_shift * rowsum)).tocsr()


def random_block_graph(n_blocks: int, density: float, rng: np.random.Generator) -> sps.csr_matrix:
    """Random nonsymmetric block-level pattern with a full diagonal."""
    M = sps.random(n_blocks, n_blocks, density=density, random_state=rng, format="csr")
    M.data[:] = 1.0
    return (M + sps.eye(n_blocks)).tocsr()


def planted_block_matrix(
    rng: np.random.Generator, n_blocks: int = 40, sizes=(2, 6), density: float = 0.08, shuffle: bool = True
) -> tuple[CsrMatrix, BlockPartition]:
    """Random matrix made of dense blocks with a known block partition.

    Block-level adjacency (symmetrized) is made pairwise distinct, so the
    planted blocks are exactly the groups of indistinguishable rows.
    Rows and columns are symmetrically shuffled when ``shuffle`` is set.
    """
    lo, hi = sizes
    dofs = rng.integers(lo, hi + 1, size=n_blocks)
    G = random_block_graph(n_blocks, density, rng).tolil()
    while True:
        S = ((G + G.T) != 0).tocsr()
        S.sort_indices()
        sigs = {}
        clash = None
        for I in range(n_blocks):
            key = S.indices[S.indptr[I]:S.indptr[I + 1]].tobytes()
            if key in sigs:
                clash = I
                break
            sigs[key] = I
        if clash is None:
            break
        G[clash, int(rng.integers(n_blocks))] = 1.0
    A = node_graph_to_blocks(G.tocsr(), dofs, rng)
    labels = np.repeat(np.arange(n_blocks), dofs)
    n = A.shape[0]
    if shuffle:
        p = rng.permutation(n)
        A = A[p][:, p]
        labels = labels[p]
    return CsrMatrix.from_scipy(A.tocsr()), BlockPartition.from_labels(labels)


def random_block_system(rng: np.random.Generator, n_max: int = 300) -> CsrMatrix:
    """Nonsingular random block matrix of size at most ``n_max``."""
    nb = int(rng.integers(10, n_max // 4))
    dofs = rng.integers(1, 5, size=nb)
    while dofs.sum() > n_max:
        dofs = dofs[:-1]
    G = random_block_graph(len(dofs), min(0.3, 4.0 / len(dofs)), rng)
    return CsrMatrix.from_scipy(node_graph_to_blocks(G, dofs, rng, diag_shift=0.5))


def _grid_graph(nx: int, ny: int, nz: int = 1) -> sps.csr_matrix:
    if nz == 1:
        return (laplacian_2d(nx, ny) != 0).astype(float).tocsr()
    return (laplacian_3d(nx) != 0).astype(float).tocsr()


def desk_corpus(seed: int = 2024) -> list[tuple[str, CsrMatrix]]:
    """Ten small nonsymmetric matrices with different block structure."""
    rng = np.random.default_rng(seed)
    out = []

    def add(name, M):
        out.append((name, CsrMatrix.from_scipy(sps.csr_matrix(M))))

    add("fe2d_dof3", node_graph_to_blocks(_grid_graph(14, 14), 3, rng))
    add("fe3d_dof4", node_graph_to_blocks(_grid_graph(6, 6, 6), 4, rng))
    add("convdiff2d", convection_diffusion_2d(30))
    G, _ = planted_block_matrix(rng, n_blocks=120, sizes=(2, 6))
    out.append(("planted_2to6", G))
    add("fe2d_dof5_holes", node_graph_to_blocks(_grid_graph(12, 12), 5, rng, fill=0.75))
    add("fe2d_mixed", node_graph_to_blocks(_grid_graph(16, 16), rng.integers(1, 6, size=256), rng))
    add("block_tridiag", node_graph_to_blocks(laplacian_1d(40) != 0, 8, rng, fill=0.9))
    R = sps.random(600, 600, density=0.01, random_state=rng, format="csr")
    add("random_sparse", R + sps.diags(np.asarray(abs(R).sum(axis=1)).ravel() + 1.0))
    cd3 = (laplacian_3d(8) + sps.diags([np.full(511, -0.4)], [1])).tocsr()
    add("convdiff3d_dof2", sps.kron(cd3, np.array([[2.0, -0.5], [0.3, 1.5]])).tocsr())
    p = rng.permutation(14 * 14 * 3)
    add("fe2d_dof3_shuffled", node_graph_to_blocks(_grid_graph(14, 14), 3, rng, fill=0.85)[p][:, p])
    return out
