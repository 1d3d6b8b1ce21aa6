"""Per-level preprocessing: two-sided scaling and block independent sets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .compression import QuotientGraph
from .sparse import CsrMatrix, Permutation, VbcsrMatrix


class SingularScalingError(ValueError):
    def __init__(self, kind: str, index: int):
        self.kind = kind
        self.index = index
        super().__init__(f"structurally zero {kind} {index}: cannot scale")


@dataclass(frozen=True, eq=False)
class ScalingPair:
    row_scale: np.ndarray
    col_scale: np.ndarray

    @classmethod
    def identity(cls, n: int) -> "ScalingPair":
        return cls(np.ones(n), np.ones(n))


def _vb_abs_row_max(M: VbcsrMatrix) -> np.ndarray:
    out = np.zeros(M.shape[0])
    ro = M.row_offsets
    for I in range(M.n_block_rows):
        _, blks = M.block_row(I)
        for B in blks:
            np.maximum(out[ro[I]:ro[I + 1]], np.abs(B).max(axis=1), out=out[ro[I]:ro[I + 1]])
    return out


def _vb_abs_col_max(M: VbcsrMatrix) -> np.ndarray:
    out = np.zeros(M.shape[1])
    co = M.col_offsets
    for k, J in enumerate(M.block_col_idx):
        seg = out[co[J]:co[J + 1]]
        np.maximum(seg, np.abs(M.blocks[k]).max(axis=0), out=seg)
    return out


def _vb_scaled(M: VbcsrMatrix, r: np.ndarray, c: np.ndarray) -> VbcsrMatrix:
    ro, co = M.row_offsets, M.col_offsets
    blocks = []
    for I in range(M.n_block_rows):
        cols, blks = M.block_row(I)
        rs = r[ro[I]:ro[I + 1], None]
        for J, B in zip(cols, blks):
            blocks.append(rs * B * c[co[J]:co[J + 1]])
    return VbcsrMatrix(ro, co, M.block_row_ptr, M.block_col_idx, blocks, M.masks)


Scalable = Union[CsrMatrix, VbcsrMatrix]


def scale(A: Scalable) -> tuple[ScalingPair, Scalable]:
    """Row sweep then column sweep so every entry of ``S1 A S2`` has magnitude <= 1."""
    is_csr = isinstance(A, CsrMatrix)
    row_max = A.abs_row_max() if is_csr else _vb_abs_row_max(A)
    zero = np.flatnonzero(row_max == 0)
    if len(zero):
        raise SingularScalingError("row", int(zero[0]))
    s1 = 1.0 / row_max
    ones_c = np.ones(A.shape[1])
    A1 = A.scaled(s1, ones_c) if is_csr else _vb_scaled(A, s1, ones_c)
    col_max = A1.abs_col_max() if is_csr else _vb_abs_col_max(A1)
    zero = np.flatnonzero(col_max == 0)
    if len(zero):
        raise SingularScalingError("column", int(zero[0]))
    s2 = 1.0 / col_max
    ones_r = np.ones(A.shape[0])
    A2 = A1.scaled(ones_r, s2) if is_csr else _vb_scaled(A1, ones_r, s2)
    return ScalingPair(s1, s2), A2


@dataclass(frozen=True, eq=False)
class IndependentSetOrdering:
    """``perm.inverse[k]`` is the supernode placed at position ``k``."""

    perm: Permutation
    m_blocks: int
    m_rows: int
    group_boundaries: np.ndarray

    @property
    def independent(self) -> np.ndarray:
        return self.perm.inverse[: self.m_blocks]

    @property
    def interface(self) -> np.ndarray:
        return self.perm.inverse[self.m_blocks:]


def block_independent_set(qg: QuotientGraph) -> IndependentSetOrdering:
    """Greedy independent set on the quotient graph, lowest degree first.

    Each selected supernode is its own diagonal group; its neighbors are
    marked and go to the interface part, which is ordered last.
    """
    nb = qg.n_supernodes
    deg = qg.degrees()
    visit = np.lexsort((np.arange(nb), deg))
    marked = np.zeros(nb, dtype=bool)
    chosen = []
    for k in visit:
        if marked[k]:
            continue
        chosen.append(int(k))
        marked[k] = True
        marked[qg.adjacency[k]] = True
    chosen.sort()
    in_set = np.zeros(nb, dtype=bool)
    in_set[chosen] = True
    rest = np.flatnonzero(~in_set)
    order = np.concatenate((np.asarray(chosen, dtype=np.int64), rest))
    sizes = qg.sizes()
    bounds = np.zeros(len(chosen) + 1, dtype=np.int64)
    np.cumsum(sizes[chosen], out=bounds[1:])
    return IndependentSetOrdering(
        Permutation.from_inverse(order), len(chosen), int(bounds[-1]), bounds
    )
