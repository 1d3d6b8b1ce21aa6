"""Bench harness: load, compress, factorize, solve, report.

Exit status is 0 when FGMRES converged, 1 when it stopped without
converging, 2 for bad input (missing file, malformed matrix, bad flags)
and 3 when a solver stage failed (singular pivot, divergence).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .compression import CompressionParams, build_quotient_graph, compress, pattern_metrics
from .domain import build_global_preconditioner, load_domain_map, partition_quotient_graph
from .factorization import FactorParams, MissingDiagonalBlockError, SingularPivotError, vbarms_factorize
from .krylov import DivergenceError, KrylovParams, fgmres
from .ordering import SingularScalingError
from .sparse import CsrMatrix, DimensionError, ParseError, load_matrix, load_partition, symmetrized_pattern


PRECONDS = ("seq", "bj", "ras", "schur")


@dataclass(frozen=True)
class RunConfig:
    matrix: str
    rhs: str = "ones"  # "ones", "random" or a path to a .npy / text vector
    seed: int = 0
    compression: CompressionParams = CompressionParams()
    factor: FactorParams = FactorParams()
    krylov: KrylovParams = KrylovParams()
    precond: str = "seq"
    domains: int = 1
    overlap: int = 0
    inner: KrylovParams = KrylovParams(tol=1e-2, max_iters=5, restart_dim=5)
    workers: int = 1
    block_file: Optional[str] = None
    domain_file: Optional[str] = None
    report: Optional[str] = None
    format: str = "json"

    def __post_init__(self):
        if self.precond not in PRECONDS:
            raise ValueError(f"unknown preconditioner {self.precond!r}")
        if self.format not in ("json", "csv"):
            raise ValueError(f"unknown report format {self.format!r}")
        if self.domains < 1:
            raise ValueError("--domains must be >= 1")
        if self.overlap < 0:
            raise ValueError("--overlap must be >= 0")


@dataclass
class RunReport:
    matrix: str
    n: int = 0
    nnz: int = 0
    method: str = ""
    tau: float = math.nan
    mu: float = math.nan
    drop_tol: float = math.nan
    precond: str = "seq"
    domains: int = 1
    overlap: int = 0
    n_blocks: int = 0
    av_bd: float = math.nan
    av_bs: float = math.nan
    levels: int = 0
    blocking_time: float = math.nan
    factor_time: float = math.nan
    solve_time: float = math.nan
    total_time: float = math.nan
    iterations: int = 0
    converged: bool = False
    final_relres: float = math.nan
    solution_error: float = math.nan
    memory_ratio: float = math.nan
    status: str = "ok"
    error: str = ""

    FIELDS = ()  # filled below

    def to_json(self) -> str:
        return json.dumps({k: _encode(v) for k, v in dataclasses.asdict(self).items()}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        raw = json.loads(text)
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        return cls(**{k: _decode(v, types[k]) for k, v in raw.items()})

    def __eq__(self, other):
        if not isinstance(other, RunReport):
            return NotImplemented
        a, b = dataclasses.astuple(self), dataclasses.astuple(other)
        return all(x == y or (isinstance(x, float) and isinstance(y, float) and math.isnan(x) and math.isnan(y))
                   for x, y in zip(a, b))


RunReport.FIELDS = tuple(f.name for f in dataclasses.fields(RunReport))


def _encode(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def _decode(v, typ):
    if typ in ("float", float):
        return float(v)
    if typ in ("int", int):
        return int(v)
    if typ in ("bool", bool):
        return v if isinstance(v, bool) else str(v).lower() == "true"
    return v


def emit_report(report: RunReport, path, fmt: str = "json") -> Path:
    """Write JSON (whole report) or append one CSV row, header only for a new file."""
    path = Path(path)
    if fmt == "json":
        path.write_text(report.to_json() + "\n")
        return path
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(RunReport.FIELDS)
        w.writerow([_encode(getattr(report, k)) for k in RunReport.FIELDS])
    return path


def read_csv_reports(path) -> list:
    types = {f.name: f.type for f in dataclasses.fields(RunReport)}
    with open(path, newline="") as fh:
        return [RunReport(**{k: _decode(v, types[k]) for k, v in row.items()}) for row in csv.DictReader(fh)]


class RunError(Exception):
    def __init__(self, stage: str, exc: BaseException):
        self.stage = stage
        self.exc = exc
        super().__init__(f"{stage}: {exc}")


def _rhs(cfg: RunConfig, A: CsrMatrix) -> tuple[np.ndarray, Optional[np.ndarray]]:
    if cfg.rhs == "ones":
        x = np.ones(A.n_cols)
        return A @ x, x
    if cfg.rhs == "random":
        return np.random.default_rng(cfg.seed).standard_normal(A.n_rows), None
    p = Path(cfg.rhs)
    b = np.load(p) if p.suffix == ".npy" else np.loadtxt(p, ndmin=1)
    if b.shape != (A.n_rows,):
        raise DimensionError(f"rhs of shape {b.shape} for a matrix with {A.n_rows} rows")
    return b.astype(np.float64), None


def run(cfg: RunConfig) -> RunReport:
    """Run one pipeline; stage failures are raised as ``RunError`` with the partial report attached."""
    t_start = time.perf_counter()
    rep = RunReport(
        matrix=Path(cfg.matrix).stem,
        method=cfg.compression.method,
        tau=cfg.compression.tau,
        mu=cfg.compression.mu,
        drop_tol=cfg.factor.drop_tol,
        precond=cfg.precond,
        domains=1 if cfg.precond == "seq" else cfg.domains,
        overlap=cfg.overlap if cfg.precond == "ras" else 0,
    )

    def fail(stage, exc):
        rep.status = stage
        rep.error = f"{type(exc).__name__}: {exc}"
        rep.total_time = time.perf_counter() - t_start
        err = RunError(stage, exc)
        err.report = rep
        return err

    try:
        A = load_matrix(cfg.matrix)
        b, x_true = _rhs(cfg, A)
    except (OSError, ParseError, DimensionError, ValueError) as exc:
        raise fail("input", exc)
    rep.n, rep.nnz = A.n_rows, A.nnz

    t0 = time.perf_counter()
    adj = symmetrized_pattern(A)
    try:
        if cfg.block_file:
            P_B = load_partition(cfg.block_file)
            if P_B.n != A.n_rows:
                raise DimensionError(f"block file covers {P_B.n} rows, matrix has {A.n_rows}")
            rep.method = "file"
        else:
            P_B = compress(A, cfg.compression, adj)
    except (OSError, ValueError, DimensionError) as exc:
        raise fail("compression", exc)
    rep.blocking_time = time.perf_counter() - t0
    m = pattern_metrics(A, P_B, adj)
    rep.n_blocks, rep.av_bd, rep.av_bs = m.n_blocks, m.av_bd, m.av_bs

    t0 = time.perf_counter()
    try:
        if cfg.precond == "seq":
            P = vbarms_factorize(A, cfg.factor, P_B)
            apply_M = P.solve
            rep.memory_ratio = P.memory_ratio
            rep.levels = len(P.levels)
        else:
            qg = build_quotient_graph(adj, P_B)
            dm = load_domain_map(cfg.domain_file, qg) if cfg.domain_file else partition_quotient_graph(qg, cfg.domains)
            rep.domains = dm.n_domains
            gp = build_global_preconditioner(
                cfg.precond, A, P_B, dm, cfg.factor, cfg.overlap, cfg.inner, cfg.workers, qg
            )
            apply_M = gp.apply
            rep.memory_ratio = gp.memory_ratio
    except (SingularPivotError, MissingDiagonalBlockError, SingularScalingError) as exc:
        raise fail("factorization", exc)
    except (OSError, ValueError) as exc:
        raise fail("input", exc)
    rep.factor_time = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        x, st = fgmres(A.matvec, apply_M, b, cfg.krylov)
    except DivergenceError as exc:
        raise fail("solve", exc)
    rep.solve_time = time.perf_counter() - t0
    rep.iterations, rep.converged = st.iterations, st.converged
    rep.final_relres = float(np.linalg.norm(b - A @ x) / max(np.linalg.norm(b), np.finfo(float).tiny))
    if x_true is not None:
        rep.solution_error = float(np.abs(x - x_true).max())
    rep.status = "converged" if st.converged else "max_iters"
    rep.total_time = time.perf_counter() - t_start
    return rep


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vbarms", description="VBARMS compression / factorization / FGMRES bench")
    p.add_argument("--matrix", required=True, help="Matrix Market (.mtx) or cached (.npz) matrix")
    p.add_argument("--rhs", default="ones", help="'ones' (b = A*1), 'random' or a vector file")
    p.add_argument("--seed", type=int, default=0, help="seed for --rhs random")
    p.add_argument("--method", choices=("checksum", "angle", "graph"), default="graph")
    p.add_argument("--tau", type=float, default=0.8, help="angle threshold")
    p.add_argument("--mu", type=float, default=0.7, help="graph density floor")
    p.add_argument("--blocks", help="block partition file (block id per row) instead of compression")
    p.add_argument("--droptol", type=float, default=1e-3)
    p.add_argument("--levels", type=int, default=4, help="maximum number of reduction levels")
    p.add_argument("--min-schur", type=int, default=200)
    p.add_argument("--exact-last", action="store_true", help="dense LU on the last Schur complement")
    p.add_argument("--precond", choices=PRECONDS, default="seq")
    p.add_argument("--domains", type=int, default=1)
    p.add_argument("--domain-map", help="domain id per supernode, one per line")
    p.add_argument("--overlap", type=int, default=0, help="RAS overlap in quotient-graph hops")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--maxit", type=int, default=1000)
    p.add_argument("--restart", type=int, default=60)
    p.add_argument("--inner-its", type=int, default=5)
    p.add_argument("--inner-tol", type=float, default=1e-2)
    p.add_argument("--report", help="report path; printed to stdout when omitted")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    return RunConfig(
        matrix=ns.matrix,
        rhs=ns.rhs,
        seed=ns.seed,
        compression=CompressionParams(ns.method, ns.tau, ns.mu),
        factor=FactorParams(
            drop_tol=ns.droptol,
            max_levels=ns.levels,
            min_schur_size=ns.min_schur,
            exact_last_level=ns.exact_last,
        ),
        krylov=KrylovParams(ns.tol, ns.maxit, ns.restart),
        precond=ns.precond,
        domains=ns.domains,
        overlap=ns.overlap,
        inner=KrylovParams(ns.inner_tol, ns.inner_its, max(ns.inner_its, 1)),
        workers=ns.workers,
        block_file=ns.blocks,
        domain_file=ns.domain_map,
        report=ns.report,
        format=ns.format,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = config_from_args(ns)
    except ValueError as exc:
        parser.error(str(exc))
    if not Path(cfg.matrix).is_file():
        print(f"vbarms: matrix file not found: {cfg.matrix}", file=sys.stderr)
        return 2
    code = 0
    try:
        rep = run(cfg)
        if not rep.converged:
            print(f"vbarms: no convergence after {rep.iterations} iterations "
                  f"(relative residual {rep.final_relres:.3e})", file=sys.stderr)
            code = 1
    except RunError as exc:
        rep = exc.report
        print(f"vbarms: {exc.stage} failed: {exc.exc}", file=sys.stderr)
        code = 2 if exc.stage == "input" else 3
    if cfg.report:
        emit_report(rep, cfg.report, cfg.format)
    elif cfg.format == "json":
        print(rep.to_json())
    else:
        w = csv.writer(sys.stdout)
        w.writerow(RunReport.FIELDS)
        w.writerow([_encode(getattr(rep, k)) for k in RunReport.FIELDS])
    return code


if __name__ == "__main__":
    sys.exit(main())
