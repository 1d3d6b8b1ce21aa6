"""Multilevel variable-block ILU (VBARMS): block ILUT, level reduction, solve."""

from __future__ import annotations

import heapq
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .compression import CompressionParams, QuotientGraph, compress
from .ordering import IndependentSetOrdering, ScalingPair, block_independent_set, scale
from .sparse import (
    BlockPartition,
    CsrMatrix,
    DimensionError,
    Permutation,
    VbcsrMatrix,
    permute,
    symmetrized_pattern,
    to_vbcsr,
)

log = logging.getLogger(__name__)

PIVOT_RTOL = 1e-13


class SingularPivotError(ArithmeticError):
    def __init__(self, pivot_magnitude: float, level: int = 0, block_row: int = 0, domain: Optional[int] = None):
        self.pivot_magnitude = pivot_magnitude
        self.level = level
        self.block_row = block_row
        self.domain = domain
        where = f"level {level}, block row {block_row}"
        if domain is not None:
            where = f"domain {domain}, " + where
        super().__init__(f"singular pivot block ({where}): pivot magnitude {pivot_magnitude:.3e}")

    def in_domain(self, domain: int) -> "SingularPivotError":
        return SingularPivotError(self.pivot_magnitude, self.level, self.block_row, domain)


class MissingDiagonalBlockError(ValueError):
    def __init__(self, level: int, block_row: int):
        self.level = level
        self.block_row = block_row
        super().__init__(f"no diagonal block in block row {block_row} (level {level})")


class DegenerateLevel(Exception):
    """The independent set is empty; the caller should stop recursing."""


@dataclass(frozen=True)
class FactorParams:
    drop_tol: float = 1e-3
    max_levels: int = 4
    min_schur_size: int = 200
    last_level_fill: Optional[int] = None
    compression: CompressionParams = field(default_factory=CompressionParams)
    exact_last_level: bool = False

    def __post_init__(self):
        if not self.drop_tol >= 0:
            raise ValueError(f"drop_tol must be >= 0, got {self.drop_tol}")
        if self.max_levels < 1:
            raise ValueError(f"max_levels must be >= 1, got {self.max_levels}")


# ---------------------------------------------------------------------------
# Dense pivot kernels
# ---------------------------------------------------------------------------


class PivotFactor:
    """LU with partial pivoting of a small dense block plus its explicit inverse."""

    __slots__ = ("lu", "piv", "inv")

    def __init__(self, lu, piv, inv):
        self.lu = lu
        self.piv = piv
        self.inv = inv

    @property
    def size(self) -> int:
        return self.lu.shape[0]

    def solve(self, X: np.ndarray) -> np.ndarray:
        """``block^-1 @ X``."""
        return self.inv @ X

    def rsolve(self, X: np.ndarray) -> np.ndarray:
        """``X @ block^-1``."""
        return X @ self.inv


def invert_pivot(block: np.ndarray, level: int = 0, block_row: int = 0) -> PivotFactor:
    block = np.asarray(block, dtype=np.float64)
    if block.ndim != 2 or block.shape[0] != block.shape[1] or block.shape[0] == 0:
        raise ValueError(f"pivot block must be square and non-empty, got {block.shape}")
    scale_ = np.abs(block).max()
    if not np.isfinite(scale_):
        raise SingularPivotError(float("nan"), level, block_row)
    with warnings.catch_warnings():
        # exact singularity is reported through our own pivot test below
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(block, check_finite=False)
    pmin = float(np.abs(np.diag(lu)).min())
    if scale_ == 0 or pmin < PIVOT_RTOL * scale_:
        raise SingularPivotError(pmin, level, block_row)
    inv = sla.lu_solve((lu, piv), np.eye(block.shape[0]), check_finite=False)
    return PivotFactor(lu, piv, inv)


def _dropped(B: np.ndarray, t: float) -> bool:
    return np.linalg.norm(B) / B.size < t


# ---------------------------------------------------------------------------
# Block-sparse factor storage
# ---------------------------------------------------------------------------


class BlockSparse:
    """Block-sparse matrix compiled per block row for fast row products.

    Row ``I`` keeps its block column ids, the pointwise column indices they
    cover, and the horizontally stacked dense blocks.
    """

    def __init__(self, rows: list, row_offsets: np.ndarray, col_offsets: np.ndarray):
        self.row_offsets = np.asarray(row_offsets, dtype=np.int64)
        self.col_offsets = np.asarray(col_offsets, dtype=np.int64)
        self.cols: list = []
        self.idx: list = []
        self.cat: list = []
        co = self.col_offsets
        nnz = 0
        for I, row in enumerate(rows):
            keys = sorted(row)
            self.cols.append(np.asarray(keys, dtype=np.int64))
            if keys:
                self.idx.append(np.concatenate([np.arange(co[J], co[J + 1]) for J in keys]))
                self.cat.append(np.hstack([row[J] for J in keys]))
                nnz += self.cat[-1].size
            else:
                self.idx.append(np.zeros(0, dtype=np.int64))
                self.cat.append(np.zeros((self.row_offsets[I + 1] - self.row_offsets[I], 0)))
        self.nnz = nnz

    @property
    def shape(self) -> tuple[int, int]:
        return (int(self.row_offsets[-1]), int(self.col_offsets[-1]))

    @property
    def n_block_rows(self) -> int:
        return len(self.row_offsets) - 1

    @property
    def n_stored_blocks(self) -> int:
        return int(sum(len(c) for c in self.cols))

    def block(self, I: int, J: int) -> Optional[np.ndarray]:
        cols = self.cols[I]
        k = np.searchsorted(cols, J)
        if k == len(cols) or cols[k] != J:
            return None
        co = self.col_offsets
        start = int(sum(co[c + 1] - co[c] for c in cols[:k]))
        return self.cat[I][:, start:start + co[J + 1] - co[J]]

    def matvec(self, x: np.ndarray) -> np.ndarray:
        y = np.zeros(self.shape[0])
        ro = self.row_offsets
        for I in range(self.n_block_rows):
            if len(self.idx[I]):
                y[ro[I]:ro[I + 1]] = self.cat[I] @ x[self.idx[I]]
        return y

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        ro = self.row_offsets
        for I in range(self.n_block_rows):
            if len(self.idx[I]):
                out[ro[I]:ro[I + 1], self.idx[I]] = self.cat[I]
        return out

    def is_empty(self) -> bool:
        return self.nnz == 0


class BlockTriangularFactors:
    """Unit block-lower ``L`` and block-upper ``U`` (off-diagonal part + pivots)."""

    def __init__(self, L: BlockSparse, U_off: BlockSparse, pivots: list):
        self.L = L
        self.U_off = U_off
        self.pivots = pivots
        self.offsets = L.row_offsets
        self._diag_only = L.is_empty() and U_off.is_empty()
        if self._diag_only:
            self._batches = _batch_pivots(pivots, self.offsets)

    @property
    def n(self) -> int:
        return int(self.offsets[-1])

    @property
    def nnz(self) -> int:
        return self.L.nnz + self.U_off.nnz + sum(p.size * p.size for p in self.pivots)

    def lower_solve(self, f: np.ndarray) -> np.ndarray:
        y = np.array(f, dtype=np.float64)
        if self.L.is_empty():
            return y
        ro = self.offsets
        for I in range(len(self.pivots)):
            idx = self.L.idx[I]
            if len(idx):
                y[ro[I]:ro[I + 1]] -= self.L.cat[I] @ y[idx]
        return y

    def upper_solve(self, v: np.ndarray) -> np.ndarray:
        if self._diag_only:
            return _apply_batches(self._batches, v)
        y = np.array(v, dtype=np.float64)
        ro = self.offsets
        for I in range(len(self.pivots) - 1, -1, -1):
            seg = y[ro[I]:ro[I + 1]]
            idx = self.U_off.idx[I]
            if len(idx):
                seg = seg - self.U_off.cat[I] @ y[idx]
            y[ro[I]:ro[I + 1]] = self.pivots[I].inv @ seg
        return y

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self.upper_solve(self.lower_solve(b))

    def product_dense(self) -> np.ndarray:
        """``L @ U`` assembled densely (tests and diagnostics)."""
        n = self.n
        L = self.L.to_dense() + np.eye(n)
        U = self.U_off.to_dense()
        ro = self.offsets
        for I, p in enumerate(self.pivots):
            U[ro[I]:ro[I + 1], ro[I]:ro[I + 1]] = np.linalg.inv(p.inv)
        return L @ U


def _batch_pivots(pivots: list, offsets: np.ndarray):
    by_size: dict[int, list[int]] = {}
    for I, p in enumerate(pivots):
        by_size.setdefault(p.size, []).append(I)
    batches = []
    for s, ids in by_size.items():
        ids = np.asarray(ids, dtype=np.int64)
        rows = offsets[ids][:, None] + np.arange(s)[None, :]
        invs = np.stack([pivots[I].inv for I in ids])
        batches.append((rows, invs))
    return batches


def _apply_batches(batches, v: np.ndarray) -> np.ndarray:
    y = np.empty(len(v))
    for rows, invs in batches:
        y[rows] = np.einsum("kij,kj->ki", invs, v[rows])
    return y


# ---------------------------------------------------------------------------
# Block IKJ elimination
# ---------------------------------------------------------------------------


@dataclass
class Elimination:
    """Result of eliminating the leading ``m`` block rows of a block matrix.

    ``upper`` stores the factors of the leading part, ``G = L^-1 F`` and
    ``W = E U^-1`` the couplings, and ``schur`` the reduced trailing matrix.
    """

    upper: BlockTriangularFactors
    G: BlockSparse
    W: BlockSparse
    schur: VbcsrMatrix
    m_rows: int

    @property
    def nnz(self) -> int:
        return self.upper.nnz + self.G.nnz + self.W.nnz


def _eliminate_row(w: dict, limit: int, upper_rows: list, pivots: list, t: float) -> dict:
    """IKJ sweep of one working row over block columns ``K < limit``.

    Multipliers ``w[K] @ pivot_K^-1`` below the threshold are dropped before
    use; the others update the row with the stored upper row ``K``
    (fill-in included). Returns the retained multipliers.
    """
    mult = {}
    heap = [K for K in w if K < limit]
    heapq.heapify(heap)
    while heap:
        K = heapq.heappop(heap)
        B = w.pop(K)
        M = B @ pivots[K].inv
        if t > 0 and _dropped(M, t):
            continue
        mult[K] = M
        for J, UKJ in upper_rows[K].items():
            if J in w:
                w[J] -= M @ UKJ
            else:
                w[J] = -(M @ UKJ)
                if J < limit:
                    heapq.heappush(heap, J)
    return mult


def eliminate(A: VbcsrMatrix, m: int, t: float, level: int = 0, schur_drop: bool = False) -> Elimination:
    """Block ILUT of the leading ``m`` block rows, then reduction of the rest.

    The first loop runs IKJ elimination over the block rows of ``[D F]``,
    producing ``U`` and ``G``; the second eliminates ``[E C]`` with the
    stored upper rows, producing ``W`` and the Schur complement. The drop
    rule applies to ``L``, ``U``, ``G`` and ``W`` blocks; pivots are never
    dropped, and Schur blocks only when ``schur_drop`` is set.
    """
    nbr = A.n_block_rows
    if A.n_block_cols != nbr or not np.array_equal(A.row_offsets, A.col_offsets):
        raise DimensionError("block elimination needs a square block structure")
    rows = A.to_rows()
    upper_rows: list = [None] * m
    pivots: list = [None] * m
    L_rows = []
    for I in range(m):
        w = rows[I]
        mult = _eliminate_row(w, I, upper_rows, pivots, t)
        L_rows.append(mult)
        if I not in w:
            raise MissingDiagonalBlockError(level, I)
        pivots[I] = invert_pivot(w.pop(I), level, I)
        if t > 0:
            w = {J: B for J, B in w.items() if not _dropped(B, t)}
        upper_rows[I] = w

    W_rows, S_rows = [], []
    for I in range(m, nbr):
        w = rows[I]
        W_rows.append(_eliminate_row(w, m, upper_rows, pivots, t))
        if schur_drop and t > 0:
            w = {J: B for J, B in w.items() if J == I or not _dropped(B, t)}
        S_rows.append({J - m: B for J, B in w.items()})

    off = A.row_offsets
    d_off = off[: m + 1]
    c_off = off[m:] - off[m]
    U_off = BlockSparse([{J: B for J, B in r.items() if J < m} for r in upper_rows], d_off, d_off)
    G = BlockSparse([{J - m: B for J, B in r.items() if J >= m} for r in upper_rows], d_off, c_off)
    L = BlockSparse(L_rows, d_off, d_off)
    W = BlockSparse(W_rows, c_off, d_off)
    schur = VbcsrMatrix.from_rows(S_rows, c_off)
    return Elimination(BlockTriangularFactors(L, U_off, pivots), G, W, schur, int(off[m]))


def block_ilut(M: VbcsrMatrix, t: float, level: int = 0) -> BlockTriangularFactors:
    """Block ILU with threshold ``t`` of a square block matrix."""
    return eliminate(M, M.n_block_rows, t, level).upper


# ---------------------------------------------------------------------------
# Levels
# ---------------------------------------------------------------------------


def block_quotient_graph(A: VbcsrMatrix) -> QuotientGraph:
    """Quotient graph of the symmetrized block pattern (self-loops included)."""
    nb = A.n_block_rows
    nbrs = [set([I]) for I in range(nb)]
    for I in range(nb):
        for J in A.block_row(I)[0]:
            J = int(J)
            nbrs[I].add(J)
            nbrs[J].add(I)
    off = A.row_offsets
    supernodes = [np.arange(off[I], off[I + 1]) for I in range(nb)]
    member = np.repeat(np.arange(nb), np.diff(off))
    return QuotientGraph(supernodes, [np.array(sorted(s), dtype=np.int64) for s in nbrs], member)


def permute_blocks(A: VbcsrMatrix, perm: Permutation) -> tuple[VbcsrMatrix, Permutation]:
    """Symmetric block permutation; also returns the induced pointwise permutation."""
    off = A.row_offsets
    sizes = np.diff(off)
    new_sizes = sizes[perm.inverse]
    new_off = np.zeros(len(off), dtype=np.int64)
    np.cumsum(new_sizes, out=new_off[1:])
    rows = []
    for I_new in range(A.n_block_rows):
        cols, blks = A.block_row(int(perm.inverse[I_new]))
        rows.append({int(perm.forward[J]): B for J, B in zip(cols, blks)})
    point = Permutation.from_inverse(
        np.concatenate([np.arange(off[I], off[I + 1]) for I in perm.inverse]) if len(off) > 1 else np.zeros(0, np.int64)
    )
    return VbcsrMatrix.from_rows(rows, new_off), point


@dataclass(eq=False)
class LevelFactor:
    level: int
    perm: Permutation  # pointwise, new <- old within this level
    block_perm: Permutation
    scaling: ScalingPair
    m_rows: int
    n_rows: int
    m_blocks: int
    factors: BlockTriangularFactors
    G: BlockSparse
    W: BlockSparse

    @property
    def nnz(self) -> int:
        return self.factors.nnz + self.G.nnz + self.W.nnz


def factorize_level(
    A_l: VbcsrMatrix, params: FactorParams, level: int = 1, ordering: Optional[IndependentSetOrdering] = None
) -> tuple[LevelFactor, VbcsrMatrix]:
    """Scale, order by block independent sets and reduce one level."""
    scaling, As = scale(A_l)
    if ordering is None:
        ordering = block_independent_set(block_quotient_graph(As))
    if ordering.m_blocks == 0:
        raise DegenerateLevel(f"empty independent set at level {level}")
    Ap, point = permute_blocks(As, ordering.perm)
    el = eliminate(Ap, ordering.m_blocks, params.drop_tol, level)
    lf = LevelFactor(
        level=level,
        perm=point,
        block_perm=ordering.perm,
        scaling=scaling,
        m_rows=el.m_rows,
        n_rows=A_l.shape[0],
        m_blocks=ordering.m_blocks,
        factors=el.upper,
        G=el.G,
        W=el.W,
    )
    return lf, el.schur


class LastLevel:
    """Factorization of the last reduced matrix (block ILUT or dense LU)."""

    def __init__(self, A: VbcsrMatrix, t: float, level: int, exact: bool = False):
        self.n = A.shape[0]
        self.scaling, As = scale(A)
        self.exact = exact
        if exact:
            dense = As.to_dense()
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", sla.LinAlgWarning)
                self.lu = sla.lu_factor(dense, check_finite=False)
            pmin = float(np.abs(np.diag(self.lu[0])).min()) if self.n else 1.0
            if pmin < PIVOT_RTOL * max(np.abs(dense).max(), 1e-300):
                raise SingularPivotError(pmin, level, 0)
            self.factors = None
            self.nnz = self.n * self.n
        else:
            self.factors = block_ilut(As, t, level)
            self.nnz = self.factors.nnz

    def solve(self, b: np.ndarray) -> np.ndarray:
        bs = self.scaling.row_scale * b
        if self.exact:
            x = sla.lu_solve(self.lu, bs, check_finite=False)
        else:
            x = self.factors.solve(bs)
        return self.scaling.col_scale * x


@dataclass(eq=False)
class VbarmsPreconditioner:
    partition: BlockPartition
    perm: Permutation
    levels: list
    last: Optional[LastLevel]
    n: int
    nnz_matrix: int

    @property
    def nnz_precond(self) -> int:
        return sum(lf.nnz for lf in self.levels) + (self.last.nnz if self.last is not None else 0)

    @property
    def memory_ratio(self) -> float:
        return self.nnz_precond / self.nnz_matrix if self.nnz_matrix else 0.0

    def solve(self, b: np.ndarray) -> np.ndarray:
        return vbarms_solve(self, b)

    __call__ = solve


def vbarms_factorize(
    A: CsrMatrix, params: FactorParams = FactorParams(), partition: Optional[BlockPartition] = None
) -> VbarmsPreconditioner:
    """Compress, then reduce level by level and factor the last Schur complement."""
    if A.n_rows != A.n_cols:
        raise DimensionError(f"square matrix required, got {A.shape}")
    if partition is None:
        partition = compress(A, params.compression, symmetrized_pattern(A))
    perm = partition.permutation()
    Ap = permute(A, perm, perm)
    current = to_vbcsr(Ap, partition.permuted())
    current = VbcsrMatrix(
        current.row_offsets, current.col_offsets, current.block_row_ptr, current.block_col_idx, current.blocks
    )
    levels: list = []
    last = None
    level = 1
    while True:
        if current.shape[0] == 0:
            break
        if level > params.max_levels:
            last = LastLevel(current, params.drop_tol, level, params.exact_last_level)
            break
        try:
            lf, schur = factorize_level(current, params, level)
        except DegenerateLevel:
            last = LastLevel(current, params.drop_tol, level, params.exact_last_level)
            break
        levels.append(lf)
        log.debug("level %d: n=%d m=%d schur=%d", level, lf.n_rows, lf.m_rows, schur.shape[0])
        current = schur
        level += 1
        if 0 < current.shape[0] <= params.min_schur_size:
            last = LastLevel(current, params.drop_tol, level, params.exact_last_level)
            break
    return VbarmsPreconditioner(partition, perm, levels, last, A.n_rows, A.nnz)


def vbilut_factorize(
    A: CsrMatrix, params: FactorParams = FactorParams(), partition: Optional[BlockPartition] = None
) -> VbarmsPreconditioner:
    """Single-level block ILUT of the whole compressed matrix (no reduction levels)."""
    if A.n_rows != A.n_cols:
        raise DimensionError(f"square matrix required, got {A.shape}")
    if partition is None:
        partition = compress(A, params.compression, symmetrized_pattern(A))
    perm = partition.permutation()
    V = to_vbcsr(permute(A, perm, perm), partition.permuted())
    last = LastLevel(V, params.drop_tol, 1, params.exact_last_level) if A.n_rows else None
    return VbarmsPreconditioner(partition, perm, [], last, A.n_rows, A.nnz)


def _solve_from(P: VbarmsPreconditioner, k: int, b: np.ndarray) -> np.ndarray:
    if k == len(P.levels):
        if P.last is None:
            return np.zeros(0) if len(b) == 0 else b.copy()
        return P.last.solve(b)
    lf: LevelFactor = P.levels[k]
    bp = lf.perm.apply(lf.scaling.row_scale * b)
    m = lf.m_rows
    y = lf.factors.lower_solve(bp[:m])
    g = bp[m:] - lf.W.matvec(y) if lf.W.shape[0] else bp[m:]
    z = _solve_from(P, k + 1, g) if len(g) else g
    v = y - lf.G.matvec(z) if len(z) else y
    xp = np.concatenate((lf.factors.upper_solve(v), z))
    return lf.scaling.col_scale * lf.perm.unapply(xp)


def vbarms_solve(P: VbarmsPreconditioner, b: np.ndarray) -> np.ndarray:
    """Apply ``M^-1`` in the original numbering."""
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (P.n,):
        raise DimensionError(f"right-hand side of shape {b.shape}, preconditioner of size {P.n}")
    return P.perm.unapply(_solve_from(P, 0, P.perm.apply(b)))
