import json
import math

import numpy as np
import pytest
import scipy.sparse as sps

from vbarms.cli import RunConfig, RunError, RunReport, build_parser, config_from_args, emit_report, main, read_csv_reports, run
from vbarms.compression import CompressionParams, build_quotient_graph, compress
from vbarms.corpus import laplacian_2d, node_graph_to_blocks
from vbarms.domain import partition_quotient_graph, save_domain_map
from vbarms.factorization import FactorParams
from vbarms.krylov import KrylovParams
from vbarms.sparse import CsrMatrix, save_partition, symmetrized_pattern, write_matrix_market


@pytest.fixture
def block_mtx(tmp_path):
    rng = np.random.default_rng(5)
    A = CsrMatrix.from_scipy(node_graph_to_blocks(laplacian_2d(6) != 0, 3, rng))
    path = tmp_path / "blk.mtx"
    write_matrix_market(A, path)
    return path, A


def test_identity_run(tmp_path):
    path = tmp_path / "eye.mtx"
    write_matrix_market(CsrMatrix.identity(10), path)
    rep = run(RunConfig(matrix=str(path)))
    assert rep.converged and rep.iterations == 1
    assert rep.memory_ratio == 1.0
    assert rep.n == 10 and rep.nnz == 10
    assert rep.solution_error <= 1e-15
    assert rep.status == "converged" and rep.domains == 1


@pytest.mark.parametrize("precond", ["seq", "bj", "ras", "schur"])
def test_all_preconditioners_converge(block_mtx, precond):
    path, A = block_mtx
    rep = run(RunConfig(matrix=str(path), precond=precond, domains=3, overlap=1, workers=2))
    assert rep.converged and rep.final_relres < 1e-6
    assert rep.solution_error < 1e-4
    assert rep.n_blocks == 36 and rep.av_bd == 1.0 and rep.av_bs == 3.0
    assert rep.domains == (1 if precond == "seq" else 3)
    assert rep.overlap == (1 if precond == "ras" else 0)
    for t in (rep.blocking_time, rep.factor_time, rep.solve_time, rep.total_time):
        assert t >= 0


def test_json_round_trip(block_mtx, tmp_path):
    rep = run(RunConfig(matrix=str(block_mtx[0])))
    out = emit_report(rep, tmp_path / "r.json")
    back = RunReport.from_json(out.read_text())
    assert back == rep
    assert set(json.loads(out.read_text())) == set(RunReport.FIELDS)


def test_nan_fields_use_sentinel(tmp_path):
    rep = RunReport(matrix="m", solution_error=math.nan, final_relres=math.inf)
    text = rep.to_json()
    raw = json.loads(text)
    assert raw["solution_error"] == "nan" and raw["final_relres"] == "inf"
    back = RunReport.from_json(text)
    assert math.isnan(back.solution_error) and back.final_relres == math.inf
    emit_report(rep, tmp_path / "r.csv", "csv")
    (row,) = read_csv_reports(tmp_path / "r.csv")
    assert row == rep


def test_csv_appends_rows_under_one_header(block_mtx, tmp_path):
    out = tmp_path / "runs.csv"
    reps = [run(RunConfig(matrix=str(block_mtx[0]), precond=p, domains=2)) for p in ("seq", "bj")]
    for r in reps:
        emit_report(r, out, "csv")
    lines = out.read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("matrix,")
    assert sum(l.startswith("matrix,") for l in lines) == 1
    assert read_csv_reports(out) == reps


def test_missing_matrix_file(tmp_path, capsys):
    assert main(["--matrix", str(tmp_path / "nope.mtx")]) == 2
    assert "not found" in capsys.readouterr().err
    with pytest.raises(RunError) as exc:
        run(RunConfig(matrix=str(tmp_path / "nope.mtx")))
    assert exc.value.stage == "input" and exc.value.report.status == "input"


def test_malformed_matrix_exits_2(tmp_path):
    path = tmp_path / "bad.mtx"
    path.write_text("%%MatrixMarket matrix coordinate real general\n2 2 1\n1 x 3.0\n")
    assert main(["--matrix", str(path), "--report", str(tmp_path / "r.json")]) == 2
    rep = RunReport.from_json((tmp_path / "r.json").read_text())
    assert rep.status == "input" and "ParseError" in rep.error


def test_main_exit_codes(block_mtx, tmp_path, capsys):
    path = str(block_mtx[0])
    assert main(["--matrix", path, "--report", str(tmp_path / "a.json")]) == 0
    assert main(["--matrix", path, "--maxit", "1", "--droptol", "0.5", "--report", str(tmp_path / "b.json")]) == 1
    assert "no convergence" in capsys.readouterr().err
    sing = tmp_path / "sing.mtx"
    write_matrix_market(CsrMatrix.from_dense([[1.0, 2.0], [2.0, 4.0]]), sing)
    assert main(["--matrix", str(sing), "--report", str(tmp_path / "c.json")]) == 3
    rep = RunReport.from_json((tmp_path / "c.json").read_text())
    assert rep.status == "factorization"


def test_main_prints_json_to_stdout(block_mtx, capsys):
    assert main(["--matrix", str(block_mtx[0])]) == 0
    rep = RunReport.from_json(capsys.readouterr().out)
    assert rep.converged


def test_random_rhs_is_seeded(block_mtx):
    cfg = RunConfig(matrix=str(block_mtx[0]), rhs="random", seed=3)
    a, b = run(cfg), run(cfg)
    assert a.iterations == b.iterations and a.final_relres == b.final_relres
    assert math.isnan(a.solution_error)


def test_rhs_from_file(block_mtx, tmp_path):
    path, A = block_mtx
    np.savetxt(tmp_path / "b.txt", A @ np.arange(A.n_rows, dtype=float))
    rep = run(RunConfig(matrix=str(path), rhs=str(tmp_path / "b.txt")))
    assert rep.converged
    np.savetxt(tmp_path / "short.txt", np.ones(3))
    with pytest.raises(RunError):
        run(RunConfig(matrix=str(path), rhs=str(tmp_path / "short.txt")))


def test_block_and_domain_files(block_mtx, tmp_path):
    path, A = block_mtx
    adj = symmetrized_pattern(A)
    P_B = compress(A, CompressionParams(method="checksum"), adj)
    save_partition(P_B, tmp_path / "blocks.txt")
    dm = partition_quotient_graph(build_quotient_graph(adj, P_B), 4)
    save_domain_map(dm, tmp_path / "dom.txt")
    rep = run(
        RunConfig(
            matrix=str(path), precond="bj", block_file=str(tmp_path / "blocks.txt"), domain_file=str(tmp_path / "dom.txt")
        )
    )
    assert rep.method == "file" and rep.n_blocks == P_B.n_blocks
    assert rep.domains == 4 and rep.converged


def test_parser_builds_config():
    ns = build_parser().parse_args(
        ["--matrix", "m.mtx", "--method", "angle", "--tau", "0.5", "--droptol", "0.01", "--precond", "ras",
         "--domains", "4", "--overlap", "2", "--restart", "30", "--inner-its", "7", "--format", "csv"]
    )
    cfg = config_from_args(ns)
    assert cfg.compression == CompressionParams("angle", 0.5, 0.7)
    assert cfg.factor.drop_tol == 0.01
    assert cfg.krylov == KrylovParams(1e-6, 1000, 30)
    assert cfg.inner.max_iters == 7
    assert (cfg.precond, cfg.domains, cfg.overlap, cfg.format) == ("ras", 4, 2, "csv")


@pytest.mark.parametrize("kw", [dict(precond="ilu"), dict(domains=0), dict(overlap=-1), dict(format="xml")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        RunConfig(matrix="m.mtx", **kw)


def test_bad_flag_values_exit(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--matrix", "m.mtx", "--domains", "0"])
    assert exc.value.code == 2
