"""Sparse matrix containers, Matrix Market I/O, permutations and block formats."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence, Union

import numpy as np
import scipy.sparse as sps


class ParseError(ValueError):
    """Malformed Matrix Market input; ``line`` is 1-based (0 when unknown)."""

    def __init__(self, message: str, line: int = 0):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


class DimensionError(ValueError):
    pass


def _frozen(a, dtype) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=dtype)
    a.flags.writeable = False
    return a


# ---------------------------------------------------------------------------
# CSR
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    n_rows: int
    n_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "row_ptr", _frozen(self.row_ptr, np.int64))
        object.__setattr__(self, "col_idx", _frozen(self.col_idx, np.int64))
        object.__setattr__(self, "values", _frozen(self.values, np.float64))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return int(self.row_ptr[-1])

    def row_ids(self) -> np.ndarray:
        """Row index of every stored entry (COO row array)."""
        return np.repeat(np.arange(self.n_rows, dtype=np.int64), np.diff(self.row_ptr))

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.row_ptr[i], self.row_ptr[i + 1]
        return self.col_idx[lo:hi], self.values[lo:hi]

    def check(self) -> None:
        """Raise ``ValueError`` if a structural invariant is violated."""
        rp, ci = self.row_ptr, self.col_idx
        if len(rp) != self.n_rows + 1 or rp[0] != 0 or rp[-1] != len(ci):
            raise ValueError("bad row_ptr")
        if np.any(np.diff(rp) < 0):
            raise ValueError("row_ptr decreasing")
        if len(ci) and (ci.min() < 0 or ci.max() >= self.n_cols):
            raise ValueError("column index out of range")
        if len(ci) > 1:
            same_row = self.row_ids()[1:] == self.row_ids()[:-1]
            if np.any(same_row & (np.diff(ci) <= 0)):
                raise ValueError("columns not strictly increasing within a row")

    @classmethod
    def from_coo(cls, rows, cols, vals, shape: tuple[int, int]) -> "CsrMatrix":
        """Build from triplets; duplicates are summed, explicit zeros kept."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        n_rows, n_cols = shape
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if len(rows):
            new = np.ones(len(rows), dtype=bool)
            new[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            starts = np.flatnonzero(new)
            vals = np.add.reduceat(vals, starts)
            rows, cols = rows[starts], cols[starts]
        row_ptr = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n_rows), out=row_ptr[1:])
        return cls(n_rows, n_cols, row_ptr, cols, vals)

    @classmethod
    def from_dense(cls, a, keep_zeros: bool = False) -> "CsrMatrix":
        a = np.asarray(a, dtype=np.float64)
        mask = np.ones(a.shape, dtype=bool) if keep_zeros else a != 0
        r, c = np.nonzero(mask)
        return cls.from_coo(r, c, a[r, c], a.shape)

    @classmethod
    def from_scipy(cls, m) -> "CsrMatrix":
        m = sps.csr_matrix(m)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.shape[0], m.shape[1], m.indptr, m.indices, m.data)

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))

    def to_scipy(self) -> sps.csr_matrix:
        return sps.csr_matrix(
            (self.values.copy(), self.col_idx.copy(), self.row_ptr.copy()), shape=self.shape
        )

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_ids(), self.col_idx] = self.values
        return out

    def transpose(self) -> "CsrMatrix":
        return CsrMatrix.from_coo(self.col_idx, self.row_ids(), self.values, (self.n_cols, self.n_rows))

    def submatrix(self, rows, cols) -> "CsrMatrix":
        """Extract ``A[rows][:, cols]`` keeping stored zeros; index order is preserved."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        col_map = np.full(self.n_cols, -1, dtype=np.int64)
        col_map[cols] = np.arange(len(cols))
        lens = np.diff(self.row_ptr)[rows]
        starts = self.row_ptr[rows]
        idx = np.repeat(starts - np.concatenate(([0], np.cumsum(lens)[:-1])), lens) + np.arange(lens.sum())
        r = np.repeat(np.arange(len(rows)), lens)
        c = col_map[self.col_idx[idx]]
        keep = c >= 0
        return CsrMatrix.from_coo(r[keep], c[keep], self.values[idx][keep], (len(rows), len(cols)))

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n_cols,):
            raise DimensionError(f"vector of length {x.shape} for matrix {self.shape}")
        return np.bincount(self.row_ids(), weights=self.values * x[self.col_idx], minlength=self.n_rows)

    def __matmul__(self, x):
        return self.matvec(x)

    def abs_row_max(self) -> np.ndarray:
        out = np.zeros(self.n_rows)
        np.maximum.at(out, self.row_ids(), np.abs(self.values))
        return out

    def abs_col_max(self) -> np.ndarray:
        out = np.zeros(self.n_cols)
        np.maximum.at(out, self.col_idx, np.abs(self.values))
        return out

    def scaled(self, row_scale: np.ndarray, col_scale: np.ndarray) -> "CsrMatrix":
        vals = row_scale[self.row_ids()] * self.values * col_scale[self.col_idx]
        return CsrMatrix(self.n_rows, self.n_cols, self.row_ptr, self.col_idx, vals)


# ---------------------------------------------------------------------------
# Matrix Market
# ---------------------------------------------------------------------------


def _locate_bad_line(lines: list[str], first_line: int, ncols_expected: int) -> tuple[int, str]:
    for k, text in enumerate(lines):
        parts = text.split()
        if not parts or parts[0].startswith("%"):
            continue
        if len(parts) != ncols_expected:
            return first_line + k, f"expected {ncols_expected} fields, got {len(parts)}"
        try:
            [float(p) for p in parts]
        except ValueError:
            return first_line + k, f"unparsable entry {text.strip()!r}"
    return 0, "wrong number of entries"


def load_matrix_market(path: Union[str, os.PathLike]) -> CsrMatrix:
    """Read a coordinate Matrix Market file (real/integer/pattern, general/symmetric).

    Symmetric files are expanded to full storage, duplicate entries are
    summed, explicitly stored zeros stay structural, and pattern files get
    unit values.
    """
    with open(path, "r") as fh:
        text = fh.read()
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty file", 1)
    header = lines[0].lower().split()
    if len(header) != 5 or header[0] != "%%matrixmarket" or header[1] != "matrix":
        raise ParseError("malformed header", 1)
    fmt, field_, symm = header[2:]
    if fmt != "coordinate":
        raise ParseError(f"unsupported format {fmt!r} (coordinate only)", 1)
    if field_ not in ("real", "integer", "pattern"):
        raise ParseError(f"unsupported field {field_!r}", 1)
    if symm not in ("general", "symmetric"):
        raise ParseError(f"unsupported symmetry {symm!r}", 1)

    k = 1
    while k < len(lines) and (not lines[k].strip() or lines[k].lstrip().startswith("%")):
        k += 1
    if k == len(lines):
        raise ParseError("missing size line", k)
    try:
        n_rows, n_cols, nnz = (int(v) for v in lines[k].split())
    except ValueError:
        raise ParseError("malformed size line", k + 1) from None
    size_line = k + 1

    body = [ln for ln in lines[k + 1:]]
    ncols_expected = 2 if field_ == "pattern" else 3
    data_text = "\n".join(ln for ln in body if ln.strip() and not ln.lstrip().startswith("%"))
    try:
        flat = np.array(data_text.split(), dtype=np.float64) if data_text else np.zeros(0)
    except ValueError:
        bad, why = _locate_bad_line(body, size_line + 1, ncols_expected)
        raise ParseError(why, bad) from None
    if flat.size != nnz * ncols_expected:
        bad, why = _locate_bad_line(body, size_line + 1, ncols_expected)
        if bad == 0:
            why = f"declared {nnz} entries, found {flat.size / ncols_expected:g}"
        raise ParseError(why, bad)
    entries = flat.reshape(nnz, ncols_expected)
    rows = entries[:, 0].astype(np.int64) - 1
    cols = entries[:, 1].astype(np.int64) - 1
    vals = entries[:, 2] if field_ != "pattern" else np.ones(nnz)

    bad = np.flatnonzero((rows < 0) | (rows >= n_rows) | (cols < 0) | (cols >= n_cols))
    if len(bad):
        data_lines = [i for i, ln in enumerate(body) if ln.strip() and not ln.lstrip().startswith("%")]
        lineno = size_line + 1 + data_lines[bad[0]]
        raise ParseError(f"index ({rows[bad[0]] + 1}, {cols[bad[0]] + 1}) outside {n_rows}x{n_cols}", lineno)

    if symm == "symmetric":
        off = rows != cols
        rows, cols, vals = (
            np.concatenate((rows, cols[off])),
            np.concatenate((cols, rows[off])),
            np.concatenate((vals, vals[off])),
        )
    return CsrMatrix.from_coo(rows, cols, vals, (n_rows, n_cols))


def write_matrix_market(A: CsrMatrix, path: Union[str, os.PathLike]) -> None:
    data = np.column_stack((A.row_ids() + 1, A.col_idx + 1, A.values))
    header = f"%%MatrixMarket matrix coordinate real general\n{A.n_rows} {A.n_cols} {A.nnz}"
    np.savetxt(path, data, fmt=("%d", "%d", "%.17g"), header=header, comments="")


# Binary cache: a numpy .npz with a format tag and version.
CACHE_FORMAT = "vbarms-csr"
CACHE_VERSION = 1


def save_csr_cache(A: CsrMatrix, path: Union[str, os.PathLike]) -> None:
    np.savez(
        path,
        format=np.array(CACHE_FORMAT),
        version=np.array(CACHE_VERSION),
        shape=np.array(A.shape, dtype=np.int64),
        row_ptr=A.row_ptr,
        col_idx=A.col_idx,
        values=A.values,
    )


def load_csr_cache(path: Union[str, os.PathLike]) -> CsrMatrix:
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != CACHE_FORMAT or int(z["version"]) != CACHE_VERSION:
            raise ParseError(f"{path}: not a version-{CACHE_VERSION} {CACHE_FORMAT} cache")
        n_rows, n_cols = (int(v) for v in z["shape"])
        return CsrMatrix(n_rows, n_cols, z["row_ptr"], z["col_idx"], z["values"])


def load_matrix(path: Union[str, os.PathLike]) -> CsrMatrix:
    """Load ``.mtx`` or ``.npz`` cache, chosen by suffix."""
    if str(path).endswith(".npz"):
        return load_csr_cache(path)
    return load_matrix_market(path)


# ---------------------------------------------------------------------------
# Pattern graphs
# ---------------------------------------------------------------------------


class Adjacency(NamedTuple):
    """Pattern graph in compressed form; neighbors of ``u`` are ``idx[ptr[u]:ptr[u+1]]``."""

    ptr: np.ndarray
    idx: np.ndarray

    @property
    def n(self) -> int:
        return len(self.ptr) - 1

    def neighbors(self, u: int) -> np.ndarray:
        return self.idx[self.ptr[u]:self.ptr[u + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.ptr)

    def as_csr(self) -> CsrMatrix:
        """Pattern matrix with unit values."""
        return CsrMatrix(self.n, self.n, self.ptr, self.idx, np.ones(len(self.idx)))

    @classmethod
    def from_lists(cls, lists: Sequence[Sequence[int]]) -> "Adjacency":
        lists = [np.unique(np.asarray(l, dtype=np.int64)) for l in lists]
        ptr = np.zeros(len(lists) + 1, dtype=np.int64)
        np.cumsum([len(l) for l in lists], out=ptr[1:])
        idx = np.concatenate(lists) if lists else np.zeros(0, dtype=np.int64)
        return cls(ptr, idx.astype(np.int64))


def symmetrized_pattern(A: CsrMatrix) -> Adjacency:
    """Adjacency of the pattern of ``A + A^T`` with every self-loop present."""
    if A.n_rows != A.n_cols:
        raise DimensionError(f"pattern graph needs a square matrix, got {A.shape}")
    n = A.n_rows
    r = A.row_ids()
    rows = np.concatenate((r, A.col_idx, np.arange(n)))
    cols = np.concatenate((A.col_idx, r, np.arange(n)))
    g = sps.csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, n))
    g.sum_duplicates()
    g.sort_indices()
    return Adjacency(g.indptr.astype(np.int64), g.indices.astype(np.int64))


# ---------------------------------------------------------------------------
# Permutations and block partitions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Permutation:
    """``forward[old] = new`` and ``inverse[new] = old``."""

    forward: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_inverse(cls, inverse) -> "Permutation":
        inverse = np.asarray(inverse, dtype=np.int64)
        forward = np.empty_like(inverse)
        forward[inverse] = np.arange(len(inverse))
        return cls(_frozen(forward, np.int64), _frozen(inverse, np.int64))

    @classmethod
    def from_forward(cls, forward) -> "Permutation":
        return cls.from_inverse(cls.from_inverse(forward).forward)

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls.from_inverse(np.arange(n))

    def __len__(self) -> int:
        return len(self.forward)

    def invert(self) -> "Permutation":
        return Permutation(self.inverse, self.forward)

    def is_valid(self) -> bool:
        n = len(self.forward)
        return (
            len(self.inverse) == n
            and np.array_equal(np.sort(self.inverse), np.arange(n))
            and np.array_equal(self.forward[self.inverse], np.arange(n))
        )

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Vector in new numbering: ``y[new] = x[inverse[new]]``."""
        return x[self.inverse]

    def unapply(self, y: np.ndarray) -> np.ndarray:
        return y[self.forward]


def permute(A: CsrMatrix, row_perm: Permutation, col_perm: Permutation) -> CsrMatrix:
    """``result[i, j] = A[row_perm.inverse[i], col_perm.inverse[j]]``."""
    if len(row_perm) != A.n_rows or len(col_perm) != A.n_cols:
        raise DimensionError(
            f"permutation lengths ({len(row_perm)}, {len(col_perm)}) vs matrix {A.shape}"
        )
    return CsrMatrix.from_coo(
        row_perm.forward[A.row_ids()], col_perm.forward[A.col_idx], A.values, A.shape
    )


@dataclass(frozen=True, eq=False)
class BlockPartition:
    """Partition of ``0..n-1`` into blocks.

    ``block_order`` lists block ids in permuted order; the induced
    permutation places the members of ``block_order[0]`` first (ascending),
    then those of ``block_order[1]``, and so on.
    """

    block_of: np.ndarray
    block_sizes: np.ndarray
    block_order: np.ndarray

    @classmethod
    def from_labels(cls, labels, order=None) -> "BlockPartition":
        """Relabel arbitrary labels to ids 0.. by first appearance."""
        labels = np.asarray(labels)
        _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
        rank = np.empty(len(first), dtype=np.int64)
        rank[np.argsort(first, kind="stable")] = np.arange(len(first))
        block_of = rank[inv.ravel()]
        sizes = np.bincount(block_of, minlength=len(first))
        if order is None:
            order = np.arange(len(first))
        return cls(_frozen(block_of, np.int64), _frozen(sizes, np.int64), _frozen(order, np.int64))

    @classmethod
    def from_blocks(cls, blocks: Sequence[Sequence[int]], n: int) -> "BlockPartition":
        """Blocks given as member lists, kept in the given order."""
        block_of = np.full(n, -1, dtype=np.int64)
        for b, members in enumerate(blocks):
            if np.any(block_of[np.asarray(members, dtype=np.int64)] >= 0):
                raise ValueError("blocks overlap")
            block_of[np.asarray(members, dtype=np.int64)] = b
        if np.any(block_of < 0):
            raise ValueError("blocks do not cover 0..n-1")
        sizes = np.bincount(block_of, minlength=len(blocks))
        return cls(_frozen(block_of, np.int64), _frozen(sizes, np.int64), _frozen(np.arange(len(blocks)), np.int64))

    @classmethod
    def singletons(cls, n: int) -> "BlockPartition":
        return cls.from_labels(np.arange(n))

    @classmethod
    def uniform(cls, n: int, size: int) -> "BlockPartition":
        return cls.from_labels(np.arange(n) // size)

    @property
    def n(self) -> int:
        return len(self.block_of)

    @property
    def n_blocks(self) -> int:
        return len(self.block_sizes)

    def members(self) -> list[np.ndarray]:
        order = np.argsort(self.block_of, kind="stable")
        return np.split(order, np.cumsum(self.block_sizes)[:-1])

    def permutation(self) -> Permutation:
        mem = self.members()
        return Permutation.from_inverse(
            np.concatenate([mem[b] for b in self.block_order]) if self.n else np.zeros(0, np.int64)
        )

    def offsets(self) -> np.ndarray:
        """Block boundaries in permuted numbering."""
        out = np.zeros(self.n_blocks + 1, dtype=np.int64)
        np.cumsum(self.block_sizes[self.block_order], out=out[1:])
        return out

    def permuted(self) -> "BlockPartition":
        """The same partition expressed on the permuted index set (contiguous blocks)."""
        return BlockPartition.from_labels(np.repeat(np.arange(self.n_blocks), self.block_sizes[self.block_order]))

    def is_valid(self) -> bool:
        return (
            self.n_blocks == len(self.block_order)
            and np.array_equal(np.sort(self.block_order), np.arange(self.n_blocks))
            and np.array_equal(np.bincount(self.block_of, minlength=self.n_blocks), self.block_sizes)
            and int(self.block_sizes.sum()) == self.n
            and bool(np.all(self.block_sizes > 0))
        )

    def canonical(self) -> frozenset:
        """Label-free representation for partition equality."""
        return frozenset(frozenset(m.tolist()) for m in self.members())

    def same_as(self, other: "BlockPartition") -> bool:
        return self.canonical() == other.canonical()


def save_partition(part: BlockPartition, path: Union[str, os.PathLike]) -> None:
    """Text format: one block id per row, one per line."""
    np.savetxt(path, part.block_of, fmt="%d")


def load_partition(path: Union[str, os.PathLike]) -> BlockPartition:
    return BlockPartition.from_labels(np.loadtxt(path, dtype=np.int64, ndmin=1))


# ---------------------------------------------------------------------------
# Variable block CSR
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VbcsrMatrix:
    """Variable-block CSR.

    Block row ``I`` spans rows ``row_offsets[I]:row_offsets[I+1]``; its stored
    blocks are ``blocks[k]`` for ``k`` in ``block_row_ptr[I]:block_row_ptr[I+1]``
    with block columns ``block_col_idx[k]``.  ``masks`` (optional) marks the
    structurally present entries of each block; without it every entry counts.
    """

    row_offsets: np.ndarray
    col_offsets: np.ndarray
    block_row_ptr: np.ndarray
    block_col_idx: np.ndarray
    blocks: list
    masks: list | None = field(default=None)

    @property
    def n_block_rows(self) -> int:
        return len(self.row_offsets) - 1

    @property
    def n_block_cols(self) -> int:
        return len(self.col_offsets) - 1

    @property
    def shape(self) -> tuple[int, int]:
        return (int(self.row_offsets[-1]), int(self.col_offsets[-1]))

    @property
    def n_stored_blocks(self) -> int:
        return len(self.blocks)

    @property
    def stored_entries(self) -> int:
        return int(sum(b.size for b in self.blocks))

    @property
    def padded_zeros(self) -> int:
        if self.masks is None:
            return 0
        return int(sum(m.size - np.count_nonzero(m) for m in self.masks))

    def block_row(self, I: int):
        lo, hi = self.block_row_ptr[I], self.block_row_ptr[I + 1]
        return self.block_col_idx[lo:hi], self.blocks[lo:hi]

    def to_rows(self) -> list[dict]:
        """Block rows as ``{block_col: dense block}`` dictionaries (copies)."""
        out = []
        for I in range(self.n_block_rows):
            cols, blks = self.block_row(I)
            out.append({int(J): B.copy() for J, B in zip(cols, blks)})
        return out

    @classmethod
    def from_rows(cls, rows: Sequence[dict], row_offsets, col_offsets=None) -> "VbcsrMatrix":
        row_offsets = np.asarray(row_offsets, dtype=np.int64)
        col_offsets = row_offsets if col_offsets is None else np.asarray(col_offsets, dtype=np.int64)
        ptr = np.zeros(len(rows) + 1, dtype=np.int64)
        idx, blocks = [], []
        for I, row in enumerate(rows):
            for J in sorted(row):
                idx.append(J)
                blocks.append(np.ascontiguousarray(row[J]))
            ptr[I + 1] = len(idx)
        return cls(row_offsets, col_offsets, ptr, np.asarray(idx, dtype=np.int64), blocks)

    def to_csr(self, keep_padding: bool = False) -> CsrMatrix:
        """Flatten; padded zeros are dropped unless ``keep_padding``."""
        rs, cs, vs = [], [], []
        for I in range(self.n_block_rows):
            lo, hi = self.block_row_ptr[I], self.block_row_ptr[I + 1]
            for k in range(lo, hi):
                J = self.block_col_idx[k]
                B = self.blocks[k]
                if keep_padding or self.masks is None:
                    mask = np.ones(B.shape, dtype=bool)
                else:
                    mask = self.masks[k]
                r, c = np.nonzero(mask)
                rs.append(r + self.row_offsets[I])
                cs.append(c + self.col_offsets[J])
                vs.append(B[r, c])
        if not rs:
            return CsrMatrix.from_coo([], [], [], self.shape)
        return CsrMatrix.from_coo(np.concatenate(rs), np.concatenate(cs), np.concatenate(vs), self.shape)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        for I in range(self.n_block_rows):
            r0, r1 = self.row_offsets[I], self.row_offsets[I + 1]
            cols, blks = self.block_row(I)
            for J, B in zip(cols, blks):
                out[r0:r1, self.col_offsets[J]:self.col_offsets[J + 1]] = B
        return out

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.shape[1],):
            raise DimensionError(f"vector of length {x.shape} for matrix {self.shape}")
        y = np.zeros(self.shape[0])
        co = self.col_offsets
        for I in range(self.n_block_rows):
            cols, blks = self.block_row(I)
            if len(cols):
                acc = blks[0] @ x[co[cols[0]]:co[cols[0] + 1]]
                for J, B in zip(cols[1:], blks[1:]):
                    acc = acc + B @ x[co[J]:co[J + 1]]
                y[self.row_offsets[I]:self.row_offsets[I + 1]] = acc
        return y

    def __matmul__(self, x):
        return self.matvec(x)


def to_vbcsr(A: CsrMatrix, partition: BlockPartition, col_partition: BlockPartition | None = None) -> VbcsrMatrix:
    """Convert an already-permuted matrix to VBCSR.

    Block boundaries come from ``partition.offsets()`` (permuted numbering).
    A block is stored iff at least one entry of ``A`` lies in it.
    """
    col_partition = partition if col_partition is None else col_partition
    if partition.n != A.n_rows or col_partition.n != A.n_cols:
        raise DimensionError(f"partition sizes ({partition.n}, {col_partition.n}) vs matrix {A.shape}")
    ro, co = partition.offsets(), col_partition.offsets()
    rows = A.row_ids()
    brow = np.searchsorted(ro, rows, side="right") - 1
    bcol = np.searchsorted(co, A.col_idx, side="right") - 1
    nbc = len(co) - 1
    key = brow * nbc + bcol
    order = np.argsort(key, kind="stable")
    key_sorted = key[order]
    uniq, starts = np.unique(key_sorted, return_index=True)
    ends = np.append(starts[1:], len(key_sorted))
    ptr = np.zeros(len(ro), dtype=np.int64)
    np.cumsum(np.bincount(uniq // nbc, minlength=len(ro) - 1), out=ptr[1:])
    blocks, masks = [], []
    for u, s, e in zip(uniq, starts, ends):
        I, J = divmod(int(u), nbc)
        sel = order[s:e]
        B = np.zeros((ro[I + 1] - ro[I], co[J + 1] - co[J]))
        M = np.zeros(B.shape, dtype=bool)
        rr = rows[sel] - ro[I]
        cc = A.col_idx[sel] - co[J]
        B[rr, cc] = A.values[sel]
        M[rr, cc] = True
        blocks.append(B)
        masks.append(M)
    return VbcsrMatrix(ro, co, ptr, (uniq % nbc).astype(np.int64), blocks, masks)


@dataclass(frozen=True)
class BlockMetrics:
    av_bd: float
    av_bs: float
    n_blocks: int
    padded_zeros: int
    covered_cells: int
    nnz: int


def block_metrics(A: CsrMatrix, partition: BlockPartition) -> BlockMetrics:
    """Average block density and size of ``A`` under ``partition``.

    ``partition`` is expressed in the numbering of ``A`` (no permutation is
    needed; blocks need not be contiguous).
    """
    if partition.n != A.n_rows or partition.n != A.n_cols:
        raise DimensionError(f"partition of {partition.n} for matrix {A.shape}")
    nb = partition.n_blocks
    key = np.unique(partition.block_of[A.row_ids()] * nb + partition.block_of[A.col_idx])
    sizes = partition.block_sizes
    covered = int(np.sum(sizes[key // nb] * sizes[key % nb]))
    nnz = A.nnz
    return BlockMetrics(
        av_bd=nnz / covered if covered else 1.0,
        av_bs=float(sizes.sum()) / nb if nb else 0.0,
        n_blocks=nb,
        padded_zeros=covered - nnz,
        covered_cells=covered,
        nnz=nnz,
    )


def spmv(A: Union[CsrMatrix, VbcsrMatrix], x: np.ndarray) -> np.ndarray:
    return A.matvec(x)
