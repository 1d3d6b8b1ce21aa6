"""Desk-scale domain decomposition with VBARMS local solvers.

Subdomains are groups of supernodes of the quotient graph. Three global
preconditioners are built on top: block Jacobi, restricted additive
Schwarz and a Schur complement method on the interface unknowns. Local
work runs in a thread pool, one task per domain; every output row has a
single writer, so results do not depend on scheduling.
"""

from __future__ import annotations

import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, Optional, Union

import numpy as np

from .compression import QuotientGraph
from .factorization import (
    BlockTriangularFactors,
    Elimination,
    FactorParams,
    SingularPivotError,
    VbarmsPreconditioner,
    block_ilut,
    eliminate,
    vbarms_factorize,
    vbarms_solve,
)
from .krylov import DivergenceError, KrylovParams, fgmres
from .sparse import BlockPartition, CsrMatrix, DimensionError, VbcsrMatrix, symmetrized_pattern, to_vbcsr

Kind = Literal["bj", "ras", "schur"]


@dataclass(frozen=True, eq=False)
class DomainMap:
    n_domains: int
    owner: np.ndarray  # supernode -> domain
    domain_rows: list  # per domain, sorted global rows

    @classmethod
    def from_owner(cls, owner, qg: QuotientGraph, n_domains: Optional[int] = None) -> "DomainMap":
        owner = np.asarray(owner, dtype=np.int64)
        if len(owner) != qg.n_supernodes:
            raise ValueError(f"{len(owner)} owners for {qg.n_supernodes} supernodes")
        p = int(owner.max()) + 1 if n_domains is None else n_domains
        if owner.min() < 0 or owner.max() >= p:
            raise ValueError("domain id out of range")
        row_owner = owner[qg.member_to_supernode]
        rows = [np.flatnonzero(row_owner == d) for d in range(p)]
        return cls(p, owner, rows)

    def row_owner(self, qg: QuotientGraph) -> np.ndarray:
        return self.owner[qg.member_to_supernode]


def _bfs_distances(qg: QuotientGraph, sources: list) -> np.ndarray:
    dist = np.full(qg.n_supernodes, -1, dtype=np.int64)
    q = deque()
    for s in sources:
        dist[s] = 0
        q.append(s)
    while q:
        u = q.popleft()
        for v in qg.adjacency[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist


def partition_quotient_graph(qg: QuotientGraph, p: int) -> DomainMap:
    """Greedy BFS growth from farthest-point seeds, lightest domain grows first."""
    nb = qg.n_supernodes
    if not 1 <= p <= nb:
        raise ValueError(f"number of domains must be in [1, {nb}], got {p}")
    seeds = [0]
    while len(seeds) < p:
        dist = _bfs_distances(qg, seeds)
        dist[seeds] = -2
        unreachable = np.flatnonzero(dist == -1)
        seeds.append(int(unreachable[0]) if len(unreachable) else int(np.argmax(dist)))

    weight = qg.sizes()
    owner = np.full(nb, -1, dtype=np.int64)
    load = np.zeros(p, dtype=np.int64)
    frontier = [deque() for _ in range(p)]
    for d, s in enumerate(seeds):
        owner[s] = d
        load[d] += weight[s]
        frontier[d].extend(int(v) for v in qg.adjacency[s])
    remaining = nb - p
    while remaining:
        grown = False
        for d in np.lexsort((np.arange(p), load)):
            fq = frontier[d]
            while fq and owner[fq[0]] >= 0:
                fq.popleft()
            if fq:
                u = fq.popleft()
                owner[u] = d
                load[d] += weight[u]
                fq.extend(int(v) for v in qg.adjacency[u] if owner[v] < 0)
                remaining -= 1
                grown = True
                break
        if not grown:
            # disconnected leftovers: restart the lightest domain there
            d = int(np.lexsort((np.arange(p), load))[0])
            u = int(np.flatnonzero(owner < 0)[0])
            owner[u] = d
            load[d] += weight[u]
            frontier[d].extend(int(v) for v in qg.adjacency[u] if owner[v] < 0)
            remaining -= 1
    _rebalance(qg, owner, weight, p)
    return DomainMap.from_owner(owner, qg, p)


def _stays_connected(qg: QuotientGraph, owner: np.ndarray, u: int) -> bool:
    """Whether removing ``u`` leaves the rest of its domain connected."""
    d = owner[u]
    rest = [int(v) for v in qg.adjacency[u] if v != u and owner[v] == d]
    if not rest:
        return bool(np.count_nonzero(owner == d) > 1)
    seen = {u, rest[0]}
    q = deque([rest[0]])
    while q:
        x = q.popleft()
        for v in qg.adjacency[x]:
            v = int(v)
            if owner[v] == d and v not in seen:
                seen.add(v)
                q.append(v)
    return len(seen) == int(np.count_nonzero(owner == d))


def _rebalance(qg: QuotientGraph, owner: np.ndarray, weight: np.ndarray, p: int, tol: float = 0.1) -> None:
    """Move boundary supernodes into light domains until loads are within ``tol``.

    A move needs the donor to stay connected and must strictly narrow the
    donor/receiver gap, so the loop terminates. Order is fixed (loads, then ids).
    """
    if p == 1:
        return
    target = weight.sum() / p
    load = np.bincount(owner, weights=weight, minlength=p)
    for _ in range(qg.n_supernodes * p):
        if load.min() >= (1 - tol) * target and load.max() <= (1 + tol) * target:
            return
        moved = False
        for recv in np.lexsort((np.arange(p), load)):
            cand = set()
            for x in np.flatnonzero(owner == recv):
                cand.update(int(v) for v in qg.adjacency[x] if owner[v] != recv)
            order = sorted(cand, key=lambda u: (-load[owner[u]], u))
            for u in order:
                donor = owner[u]
                if load[donor] - load[recv] <= weight[u]:
                    continue
                if not _stays_connected(qg, owner, u):
                    continue
                owner[u] = recv
                load[donor] -= weight[u]
                load[recv] += weight[u]
                moved = True
                break
            if moved:
                break
        if not moved:
            return


def save_domain_map(dm: DomainMap, path: Union[str, os.PathLike]) -> None:
    """Text format: one domain id per supernode, one per line."""
    np.savetxt(path, dm.owner, fmt="%d")


def load_domain_map(path: Union[str, os.PathLike], qg: QuotientGraph) -> DomainMap:
    return DomainMap.from_owner(np.loadtxt(path, dtype=np.int64, ndmin=1), qg)


# ---------------------------------------------------------------------------
# Local systems
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class LocalSystem:
    """Rows of one subdomain split as ``[[B, F], [E, C]]`` plus external couplings.

    ``rows`` lists the global rows of the local unknowns, interior first.
    ``owned`` marks those rows the domain writes back (all of them when
    there is no overlap). ``E_ext[j]`` maps this domain's interface unknowns
    onto the local unknowns of neighbor ``j`` (columns index ``locals[j].rows``).
    """

    domain: int
    rows: np.ndarray
    n_interior: int
    owned: np.ndarray
    partition: BlockPartition
    A_local: CsrMatrix
    B: VbcsrMatrix
    F: VbcsrMatrix
    E: VbcsrMatrix
    C: VbcsrMatrix
    E_ext: dict = field(default_factory=dict)
    n_interior_blocks: int = 0

    @property
    def interior(self) -> np.ndarray:
        return self.rows[: self.n_interior]

    @property
    def interface(self) -> np.ndarray:
        return self.rows[self.n_interior:]

    @property
    def n_interface(self) -> int:
        return len(self.rows) - self.n_interior


def _split_vbcsr(M: VbcsrMatrix, m: int):
    """Split a square block matrix at block index ``m`` into ``B, F, E, C``."""
    rows = M.to_rows()
    off = M.row_offsets
    d_off, c_off = off[: m + 1], off[m:] - off[m]
    top, bot = rows[:m], rows[m:]
    B = VbcsrMatrix.from_rows([{J: b for J, b in r.items() if J < m} for r in top], d_off, d_off)
    F = VbcsrMatrix.from_rows([{J - m: b for J, b in r.items() if J >= m} for r in top], d_off, c_off)
    E = VbcsrMatrix.from_rows([{J: b for J, b in r.items() if J < m} for r in bot], c_off, d_off)
    C = VbcsrMatrix.from_rows([{J - m: b for J, b in r.items() if J >= m} for r in bot], c_off, c_off)
    return B, F, E, C


def _expand(sets: np.ndarray, qg: QuotientGraph, delta: int) -> np.ndarray:
    mask = np.zeros(qg.n_supernodes, dtype=bool)
    mask[sets] = True
    for _ in range(delta):
        cur = np.flatnonzero(mask)
        for s in cur:
            mask[qg.adjacency[s]] = True
    return np.flatnonzero(mask)


def build_local_systems(
    A: CsrMatrix, P_B: BlockPartition, dm: DomainMap, delta: int = 0, qg: Optional[QuotientGraph] = None
) -> list:
    """Per-domain local matrices with interior/interface splitting.

    A row is interface when the symmetrized pattern couples it with a row
    outside the domain's (possibly overlapped) row set. Local unknowns are
    ordered interior first, each part grouped block by block.
    """
    if delta < 0:
        raise ValueError("overlap must be >= 0")
    if qg is None:
        from .compression import build_quotient_graph

        qg = build_quotient_graph(symmetrized_pattern(A), P_B)
    adj = symmetrized_pattern(A)
    n = A.n_rows
    row_owner = dm.row_owner(qg)
    block_pos = np.empty(P_B.n_blocks, dtype=np.int64)
    block_pos[P_B.block_order] = np.arange(P_B.n_blocks)
    rank = block_pos[P_B.block_of]
    src = np.repeat(np.arange(n), adj.degrees())

    locals_: list = []
    for d in range(dm.n_domains):
        supers = _expand(np.flatnonzero(dm.owner == d), qg, delta)
        in_set = np.zeros(n, dtype=bool)
        for s in supers:
            in_set[qg.supernodes[s]] = True
        W = np.flatnonzero(in_set)
        outside = ~in_set[adj.idx]
        coupled = np.zeros(n, dtype=bool)
        coupled[src[outside]] = True
        is_iface = coupled[W]
        interior = W[~is_iface]
        interface = W[is_iface]
        interior = interior[np.lexsort((interior, rank[interior]))]
        interface = interface[np.lexsort((interface, rank[interface]))]
        rows = np.concatenate((interior, interface))
        labels = P_B.block_of[rows] * 2 + np.r_[np.zeros(len(interior), np.int64), np.ones(len(interface), np.int64)]
        part = BlockPartition.from_labels(labels)
        A_loc = A.submatrix(rows, rows)
        vb = to_vbcsr(A_loc, part)
        n_int_blocks = int(np.unique(labels[: len(interior)]).size)
        B, F, E, C = _split_vbcsr(vb, n_int_blocks)
        locals_.append(
            LocalSystem(
                domain=d,
                rows=rows,
                n_interior=len(interior),
                owned=row_owner[rows] == d,
                partition=BlockPartition.from_labels(P_B.block_of[rows]),
                A_local=A_loc,
                B=B,
                F=F,
                E=E,
                C=C,
                n_interior_blocks=n_int_blocks,
            )
        )

    # external couplings, columns owned by each neighbor
    pos_in = []
    for ls in locals_:
        pos = np.full(n, -1, dtype=np.int64)
        pos[ls.rows] = np.arange(len(ls.rows))
        pos_in.append(pos)
    for ls in locals_:
        iface = ls.interface
        sub_rows, sub_cols, sub_vals = [], [], []
        for k, r in enumerate(iface):
            cols, vals = A.row(r)
            outside = pos_in[ls.domain][cols] < 0
            sub_rows.append(np.full(int(outside.sum()), k))
            sub_cols.append(cols[outside])
            sub_vals.append(vals[outside])
        if not iface.size:
            continue
        rr = np.concatenate(sub_rows)
        cc = np.concatenate(sub_cols)
        vv = np.concatenate(sub_vals)
        if not rr.size:
            continue
        owners = row_owner[cc]
        for j in np.unique(owners):
            sel = owners == j
            ls.E_ext[int(j)] = CsrMatrix.from_coo(
                rr[sel], pos_in[j][cc[sel]], vv[sel], (len(iface), len(locals_[j].rows))
            )
    return locals_


def assemble_from_locals(locals_: list, n: int) -> CsrMatrix:
    """Reassemble the global matrix from a non-overlapping splitting (checks)."""
    rs, cs, vs = [], [], []
    for ls in locals_:
        m = ls.n_interior
        for M, ro, co in (
            (ls.B, ls.rows[:m], ls.rows[:m]),
            (ls.F, ls.rows[:m], ls.rows[m:]),
            (ls.E, ls.rows[m:], ls.rows[:m]),
            (ls.C, ls.rows[m:], ls.rows[m:]),
        ):
            c = M.to_csr()
            rs.append(ro[c.row_ids()])
            cs.append(co[c.col_idx])
            vs.append(c.values)
        for j, Ej in ls.E_ext.items():
            rs.append(ls.interface[Ej.row_ids()])
            cs.append(locals_[j].rows[Ej.col_idx])
            vs.append(Ej.values)
    return CsrMatrix.from_coo(np.concatenate(rs), np.concatenate(cs), np.concatenate(vs), (n, n))


# ---------------------------------------------------------------------------
# Global preconditioners
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class SchurLocal:
    """Local pieces for the Schur method: ``A_i = [[L_B, 0], [W, L_S]] [[U_B, G], [0, U_S]]``."""

    elim: Elimination
    S: CsrMatrix
    S_factors: Optional[BlockTriangularFactors]
    nnz: int


@dataclass(eq=False)
class GlobalPreconditioner:
    kind: Kind
    n: int
    locals: list
    solvers: list
    overlap: int = 0
    inner: KrylovParams = KrylovParams(tol=1e-2, max_iters=5, restart_dim=5)
    workers: int = 1
    last_inner_stats: list = field(default_factory=list)

    @property
    def nnz_precond(self) -> int:
        return int(sum(s.nnz_precond if isinstance(s, VbarmsPreconditioner) else s.nnz for s in self.solvers))

    @property
    def nnz_local(self) -> int:
        return int(sum(ls.A_local.nnz for ls in self.locals))

    @property
    def memory_ratio(self) -> float:
        return self.nnz_precond / self.nnz_local if self.nnz_local else 0.0

    def _map(self, fn, items):
        if self.workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]

    def apply(self, r: np.ndarray) -> np.ndarray:
        if self.kind == "schur":
            return schur_apply(self, r)
        if self.kind == "ras":
            return ras_apply(self, r)
        return bj_apply(self, r)

    __call__ = apply


def _check_len(gp: GlobalPreconditioner, r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (gp.n,):
        raise DimensionError(f"vector of shape {r.shape} for global size {gp.n}")
    return r


def _local_vbarms(ls: LocalSystem, params: FactorParams) -> VbarmsPreconditioner:
    try:
        return vbarms_factorize(ls.A_local, params, partition=ls.partition)
    except SingularPivotError as exc:
        raise exc.in_domain(ls.domain) from exc


def build_schwarz_preconditioner(
    A: CsrMatrix,
    P_B: BlockPartition,
    dm: DomainMap,
    params: FactorParams,
    overlap: int = 0,
    workers: int = 1,
    qg: Optional[QuotientGraph] = None,
) -> GlobalPreconditioner:
    """Block Jacobi (``overlap=0``) or restricted additive Schwarz."""
    locals_ = build_local_systems(A, P_B, dm, overlap, qg)
    gp = GlobalPreconditioner("ras" if overlap else "bj", A.n_rows, locals_, [], overlap=overlap, workers=workers)
    gp.solvers = gp._map(lambda ls: _local_vbarms(ls, params), locals_)
    return gp


def _restricted_solve(gp: GlobalPreconditioner, r: np.ndarray) -> np.ndarray:
    def task(k):
        ls = gp.locals[k]
        return vbarms_solve(gp.solvers[k], r[ls.rows])

    parts = gp._map(task, list(range(len(gp.locals))))
    z = np.zeros(gp.n)
    for ls, zl in zip(gp.locals, parts):
        z[ls.rows[ls.owned]] = zl[ls.owned]
    return z


def bj_apply(gp: GlobalPreconditioner, r: np.ndarray) -> np.ndarray:
    if gp.kind not in ("bj", "ras"):
        raise ValueError(f"block Jacobi application on a {gp.kind} preconditioner")
    return _restricted_solve(gp, _check_len(gp, r))


def ras_apply(gp: GlobalPreconditioner, r: np.ndarray) -> np.ndarray:
    if gp.kind not in ("bj", "ras"):
        raise ValueError(f"RAS application on a {gp.kind} preconditioner")
    return _restricted_solve(gp, _check_len(gp, r))


def _schur_local(ls: LocalSystem, params: FactorParams):
    if ls.n_interface == 0:
        return _local_vbarms(ls, params)
    vb = to_vbcsr(ls.A_local, BlockPartition.from_labels(_local_labels(ls)))
    try:
        el = eliminate(vb, ls.n_interior_blocks, params.drop_tol)
        S_fac = block_ilut(el.schur, params.drop_tol)
    except SingularPivotError as exc:
        raise exc.in_domain(ls.domain) from exc
    S = el.schur.to_csr(keep_padding=True)
    return SchurLocal(el, S, S_fac, el.nnz + S_fac.nnz)


def _local_labels(ls: LocalSystem) -> np.ndarray:
    off_int = np.r_[np.zeros(ls.n_interior, np.int64), np.ones(ls.n_interface, np.int64)]
    return ls.partition.block_of * 2 + off_int


def build_schur_preconditioner(
    locals_: list,
    params: FactorParams,
    inner: KrylovParams = KrylovParams(tol=1e-2, max_iters=5, restart_dim=5),
    workers: int = 1,
) -> GlobalPreconditioner:
    """Local partial factorizations with the interface unknowns eliminated last."""
    n = int(sum(int(ls.owned.sum()) for ls in locals_))
    gp = GlobalPreconditioner("schur", n, locals_, [], inner=inner, workers=workers)
    gp.solvers = gp._map(lambda ls: _schur_local(ls, params), locals_)
    return gp


def interface_offsets(gp: GlobalPreconditioner) -> np.ndarray:
    """Start of each domain's interface segment in the global interface vector."""
    sizes = [ls.n_interface if isinstance(s, SchurLocal) else 0 for ls, s in zip(gp.locals, gp.solvers)]
    off = np.zeros(len(sizes) + 1, dtype=np.int64)
    np.cumsum(sizes, out=off[1:])
    return off


def global_schur_matvec(gp: GlobalPreconditioner, y: np.ndarray) -> np.ndarray:
    """``S y`` for the global interface system: local Schur blocks plus ``E_ij`` couplings."""
    off = interface_offsets(gp)

    def row(k):
        s = gp.solvers[k]
        if not isinstance(s, SchurLocal):
            return np.zeros(0)
        out = s.S.matvec(y[off[k]:off[k + 1]])
        for j, Ej in gp.locals[k].E_ext.items():
            lj = gp.locals[j]
            xj = np.zeros(len(lj.rows))
            xj[lj.n_interior:] = y[off[j]:off[j + 1]]
            out = out + Ej.matvec(xj)
        return out

    return np.concatenate(gp._map(row, list(range(len(gp.locals)))))


def schur_block_solve(gp: GlobalPreconditioner, y: np.ndarray) -> np.ndarray:
    """Block-diagonal preconditioner ``diag(L_S U_S)^-1`` for the interface system."""
    off = interface_offsets(gp)

    def part(k):
        s = gp.solvers[k]
        if not isinstance(s, SchurLocal):
            return np.zeros(0)
        return s.S_factors.solve(y[off[k]:off[k + 1]])

    return np.concatenate(gp._map(part, list(range(len(gp.locals)))))


def schur_apply(gp: GlobalPreconditioner, r: np.ndarray) -> np.ndarray:
    """Interior elimination, inner GMRES on the global interface system, back-substitution."""
    if gp.kind != "schur":
        raise ValueError(f"Schur application on a {gp.kind} preconditioner")
    r = _check_len(gp, r)
    locals_, solvers = gp.locals, gp.solvers
    p = len(locals_)
    off = interface_offsets(gp)
    z = np.zeros(gp.n)

    def forward(k):
        ls, s = locals_[k], solvers[k]
        rl = r[ls.rows]
        if not isinstance(s, SchurLocal):
            return vbarms_solve(s, rl), None
        v = s.elim.upper.lower_solve(rl[: ls.n_interior])
        g = rl[ls.n_interior:] - (s.elim.W.matvec(v) if ls.n_interior else 0.0)
        return v, g

    fw = gp._map(forward, list(range(p)))
    for k, (v, g) in enumerate(fw):
        if g is None:
            z[locals_[k].rows] = v
    y = np.zeros(int(off[-1]))
    if off[-1]:
        gprime = np.concatenate([g for _, g in fw if g is not None])
        y, st = fgmres(
            lambda v: global_schur_matvec(gp, v), lambda v: schur_block_solve(gp, v), gprime, gp.inner
        )
        if not np.all(np.isfinite(y)):
            raise DivergenceError("non-finite interface solution")
        gp.last_inner_stats.append(st.iterations)

    def backward(k):
        ls, s = locals_[k], solvers[k]
        if not isinstance(s, SchurLocal):
            return None
        yk = y[off[k]:off[k + 1]]
        u = s.elim.upper.upper_solve(fw[k][0] - s.elim.G.matvec(yk)) if ls.n_interior else np.zeros(0)
        return np.concatenate((u, yk))

    for k, xl in enumerate(gp._map(backward, list(range(p)))):
        if xl is not None:
            z[locals_[k].rows] = xl
    return z


def build_global_preconditioner(
    kind: str,
    A: CsrMatrix,
    P_B: BlockPartition,
    dm: DomainMap,
    params: FactorParams,
    overlap: int = 0,
    inner: KrylovParams = KrylovParams(tol=1e-2, max_iters=5, restart_dim=5),
    workers: int = 1,
    qg: Optional[QuotientGraph] = None,
) -> GlobalPreconditioner:
    if kind == "bj":
        return build_schwarz_preconditioner(A, P_B, dm, params, 0, workers, qg)
    if kind == "ras":
        gp = build_schwarz_preconditioner(A, P_B, dm, params, overlap, workers, qg)
        gp.kind = "ras"
        return gp
    if kind == "schur":
        return build_schur_preconditioner(build_local_systems(A, P_B, dm, 0, qg), params, inner, workers)
    raise ValueError(f"unknown global preconditioner {kind!r}")
