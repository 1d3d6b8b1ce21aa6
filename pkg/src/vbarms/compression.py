"""Dense block discovery on the symmetrized pattern graph.

Three blockings are provided: exact (indistinguishable vertices found via
checksums), angle-based (row-pattern cosine threshold) and graph-based
(supernode merging under a block density floor).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import scipy.sparse as sps

from .sparse import Adjacency, BlockPartition, CsrMatrix, block_metrics, symmetrized_pattern

Method = Literal["checksum", "angle", "graph"]


@dataclass(frozen=True)
class CompressionParams:
    method: Method = "graph"
    tau: float = 0.8
    mu: float = 0.7

    def __post_init__(self):
        if self.method not in ("checksum", "angle", "graph"):
            raise ValueError(f"unknown compression method {self.method!r}")
        _check_unit(self.tau, "tau")
        _check_unit(self.mu, "mu")


def _check_unit(v: float, name: str) -> None:
    if not (0.0 < v <= 1.0):
        raise ValueError(f"{name} must lie in (0, 1], got {v}")


@dataclass(frozen=True, eq=False)
class QuotientGraph:
    supernodes: list
    adjacency: list
    member_to_supernode: np.ndarray

    @property
    def n_supernodes(self) -> int:
        return len(self.supernodes)

    def sizes(self) -> np.ndarray:
        return np.array([len(s) for s in self.supernodes], dtype=np.int64)

    def degrees(self) -> np.ndarray:
        """Quotient degree, self-loop excluded."""
        return np.array(
            [len(a) - int(np.any(a == k)) for k, a in enumerate(self.adjacency)], dtype=np.int64
        )


def checksum_keys(adj: Adjacency) -> np.ndarray:
    """``key[u] = sum of (w + 1)`` over neighbors ``w``, in wrap-around uint64."""
    weights = adj.idx.astype(np.uint64) + np.uint64(1)
    keys = np.zeros(adj.n, dtype=np.uint64)
    nonempty = np.diff(adj.ptr) > 0
    if weights.size:
        sums = np.add.reduceat(weights, adj.ptr[:-1][nonempty])
        keys[nonempty] = sums
    return keys


def exact_blocking(adj: Adjacency) -> BlockPartition:
    """Group vertices with identical adjacency lists.

    Vertices are bucketed by checksum and compared by full list inside each
    bucket. Block ids follow the smallest member index.
    """
    keys = checksum_keys(adj)
    order = np.argsort(keys, kind="stable")
    labels = np.empty(adj.n, dtype=np.int64)
    start = 0
    sorted_keys = keys[order]
    bounds = np.flatnonzero(np.diff(sorted_keys)) + 1
    for stop in list(bounds) + [adj.n]:
        bucket = order[start:stop]
        if len(bucket) == 1:
            labels[bucket[0]] = bucket[0]
        else:
            seen: dict[bytes, int] = {}
            for u in bucket:
                sig = adj.neighbors(u).tobytes()
                labels[u] = seen.setdefault(sig, int(u))
        start = stop
    return BlockPartition.from_labels(labels)


def build_quotient_graph(adj: Adjacency, partition: BlockPartition) -> QuotientGraph:
    """Coalesce each block into a supernode; supernodes keep the block ids."""
    if partition.n != adj.n:
        raise ValueError(f"partition covers {partition.n} vertices, graph has {adj.n}")
    n, nb = adj.n, partition.n_blocks
    rows = np.repeat(np.arange(n), adj.degrees())
    q = sps.csr_matrix(
        (np.ones(len(rows), dtype=np.int8), (partition.block_of[rows], partition.block_of[adj.idx])),
        shape=(nb, nb),
    )
    q.sum_duplicates()
    q.sort_indices()
    adjacency = [q.indices[q.indptr[k]:q.indptr[k + 1]].astype(np.int64) for k in range(nb)]
    return QuotientGraph(partition.members(), adjacency, partition.block_of)


def quotient_adjacency(qg: QuotientGraph) -> Adjacency:
    return Adjacency.from_lists(qg.adjacency)


# ---------------------------------------------------------------------------
# Angle-based blocking
# ---------------------------------------------------------------------------


def angle_blocking(A: CsrMatrix, tau: float, adj: Adjacency | None = None) -> BlockPartition:
    """Blocking by row-pattern cosine ``|p_i & p_j| / sqrt(|p_i| |p_j|) >= tau``.

    A first pass groups identical patterns. The second pass visits those
    groups by smallest member and moves each into the first earlier-created
    group whose representative row is within the angle threshold; if none
    matches it opens a new group.
    """
    _check_unit(tau, "tau")
    adj = symmetrized_pattern(A) if adj is None else adj
    exact = exact_blocking(adj)
    if tau == 1.0:
        return exact
    members = exact.members()
    reps = np.array([m[0] for m in members], dtype=np.int64)
    C = adj.as_csr().to_scipy()
    R = C[reps]
    counts = np.asarray(R.sum(axis=1)).ravel()
    overlap = (R @ R.T).tocsr()
    overlap.sort_indices()

    final_of = np.full(len(reps), -1, dtype=np.int64)
    is_rep = np.zeros(len(reps), dtype=bool)
    for g in range(len(reps)):
        lo, hi = overlap.indptr[g], overlap.indptr[g + 1]
        cand = overlap.indices[lo:hi]
        common = overlap.data[lo:hi]
        sel = (cand < g) & is_rep[cand]
        target = -1
        if np.any(sel):
            cand, common = cand[sel], common[sel]
            cos = common / np.sqrt(counts[g] * counts[cand])
            ok = np.flatnonzero(cos >= tau)
            if len(ok):
                # groups are created in ascending representative order
                target = int(final_of[cand[ok].min()])
        if target < 0:
            is_rep[g] = True
            final_of[g] = g
        else:
            final_of[g] = target
    labels = final_of[exact.block_of]
    return BlockPartition.from_labels(labels)


# ---------------------------------------------------------------------------
# Graph-based blocking
# ---------------------------------------------------------------------------


@dataclass
class GraphBlockingResult:
    partition: BlockPartition
    av_bd: float
    covered_cells: int
    covered_nnz: int
    merges: int


def graph_blocking(A: CsrMatrix, mu: float, adj: Adjacency | None = None) -> BlockPartition:
    return graph_blocking_detail(A, mu, adj).partition


def graph_blocking_detail(A: CsrMatrix, mu: float, adj: Adjacency | None = None) -> GraphBlockingResult:
    """Merge neighboring supernodes of the exact blocking under a density floor.

    A merge of ``X`` and ``Z`` into ``S`` is accepted when the block row and
    column strip of ``S``, with ``N`` nonzeros over ``T`` cells, keeps
    ``N / T >= mu`` and the global average block density stays ``>= mu``.
    The global density is tracked through covered-cell and covered-nonzero
    counters updated with the strip quantities of the merged and removed
    supernodes.
    """
    _check_unit(mu, "mu")
    adj = symmetrized_pattern(A) if adj is None else adj
    exact = exact_blocking(adj)
    qg = build_quotient_graph(adj, exact)
    nb = qg.n_supernodes
    block_of = exact.block_of
    nnz_total = len(adj.idx)

    size = [len(m) for m in qg.supernodes]
    members = [list(m) for m in qg.supernodes]
    # pointwise column sets, per-block nonzero counts, strip nonzeros
    colset = []
    nz_to: list[dict[int, int]] = []
    row_nnz = []
    for k, mem in enumerate(qg.supernodes):
        cols = np.unique(np.concatenate([adj.neighbors(u) for u in mem]))
        colset.append(set(cols.tolist()))
        cnt: dict[int, int] = {}
        for u in mem:
            nbrs, c = np.unique(block_of[adj.neighbors(u)], return_counts=True)
            for J, v in zip(nbrs.tolist(), c.tolist()):
                cnt[J] = cnt.get(J, 0) + v
        nz_to.append(cnt)
        row_nnz.append(sum(cnt.values()))

    def width(k: int) -> int:
        return sum(size[J] for J in nz_to[k])

    def strip_cells(s: int, w: int) -> int:
        return 2 * s * w - s * s

    def strip_nnz(k: int) -> int:
        return 2 * row_nnz[k] - nz_to[k].get(k, 0)

    cells = sum(size[k] * width(k) for k in range(nb))
    covered_nnz = nnz_total
    alive = [True] * nb
    merges = 0

    for X in range(nb):
        if not alive[X]:
            continue
        for Z in sorted(nz_to[X]):
            if Z == X or not alive[Z] or Z not in nz_to[X]:
                continue
            sx, sz = size[X], size[Z]
            s = sx + sz
            nbrs = (set(nz_to[X]) | set(nz_to[Z])) - {X, Z}
            w_new = s + sum(size[J] for J in nbrs)
            t_new = strip_cells(s, w_new)
            t_old = strip_cells(sx, width(X)) + strip_cells(sz, width(Z)) - 2 * sx * sz
            delta_cells = t_new - t_old

            nz_xz = nz_to[X].get(Z, 0)
            diag_new = nz_to[X].get(X, 0) + nz_to[Z].get(Z, 0) + 2 * nz_xz
            n_new = 2 * (row_nnz[X] + row_nnz[Z]) - diag_new
            delta_nnz = n_new - (strip_nnz(X) + strip_nnz(Z) - 2 * nz_xz)

            # local strip density over pointwise columns
            t_local = strip_cells(s, len(colset[X] | colset[Z]))
            if n_new / t_local < mu:
                continue
            if (covered_nnz + delta_nnz) / (cells + delta_cells) < mu:
                continue

            cells += delta_cells
            covered_nnz += delta_nnz
            merges += 1
            members[X].extend(members[Z])
            members[Z] = []
            size[X] = s
            size[Z] = 0
            colset[X] |= colset[Z]
            colset[Z] = set()
            merged = dict(nz_to[X])
            for J, v in nz_to[Z].items():
                merged[J] = merged.get(J, 0) + v
            self_nz = merged.pop(X, 0) + merged.pop(Z, 0)
            merged[X] = self_nz
            nz_to[X] = merged
            row_nnz[X] += row_nnz[Z]
            for J in nbrs:
                d = nz_to[J]
                d[X] = d.get(X, 0) + d.pop(Z, 0)
            nz_to[Z] = {}
            alive[Z] = False

    labels = np.empty(adj.n, dtype=np.int64)
    for k in range(nb):
        if alive[k]:
            labels[np.asarray(members[k], dtype=np.int64)] = k
    part = BlockPartition.from_labels(labels)
    return GraphBlockingResult(part, covered_nnz / cells, cells, covered_nnz, merges)


def compress(A: CsrMatrix, params: CompressionParams, adj: Adjacency | None = None) -> BlockPartition:
    adj = symmetrized_pattern(A) if adj is None else adj
    if params.method == "checksum":
        return exact_blocking(adj)
    if params.method == "angle":
        return angle_blocking(A, params.tau, adj)
    return graph_blocking(A, params.mu, adj)


def pattern_metrics(A: CsrMatrix, partition: BlockPartition, adj: Adjacency | None = None):
    """Block metrics measured on the symmetrized pattern graph (what the blockings see)."""
    adj = symmetrized_pattern(A) if adj is None else adj
    return block_metrics(adj.as_csr(), partition)
