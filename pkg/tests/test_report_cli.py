import json
import math
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bfmf.bench import ConfigError, RunConfig, run, sweep
from bfmf.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, main
from bfmf.report import (SolveReport, field_names, loglog_slope, read_csv, write_csv)
from bfmf.sparse import SparseMatrix, write_matrix_market
from bfmf.problems import GridSpec, poisson


def cli_json(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip().startswith("{") else out)


# --- report serialization ------------------------------------------------------------

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)
reports = st.builds(
    SolveReport,
    problem=st.text(max_size=20), n=st.integers(0, 10 ** 9), nnz=st.integers(0, 10 ** 9),
    solver=st.sampled_from(["exact", "hodbf"]), eps=st.none() | finite,
    n_min=st.none() | st.integers(0, 10 ** 6), seed=st.integers(0, 2 ** 31),
    status=st.sampled_from(["converged", "not_converged", "failed"]),
    error=st.none() | st.text(max_size=30), factor_time_s=finite, factor_flops=st.integers(0, 10 ** 15),
    factor_flops_by_phase=st.dictionaries(st.sampled_from(["dense", "F11", "S"]), st.integers(0, 10 ** 12)),
    mem_compression_pct=st.none() | finite, gmres_iterations=st.none() | st.integers(0, 500),
    relative_residual=st.none() | finite,
    top_fronts=st.lists(st.fixed_dictionaries({"node": st.integers(0, 99), "dim": st.integers(1, 999)}),
                        max_size=3),
)


@settings(max_examples=50, deadline=None)
@given(r=reports)
def test_json_round_trip(r):
    assert SolveReport.from_json(r.to_json()) == r


@settings(max_examples=30, deadline=None)
@given(rs=st.lists(reports, min_size=1, max_size=4))
def test_csv_round_trip(tmp_path_factory, rs):
    path = tmp_path_factory.mktemp("csv") / "r.csv"
    slopes = {"factor_flops_vs_N": 2.0, "memory_vs_N": math.nan}
    write_csv(path, rs, slopes)
    back, sl = read_csv(path)
    assert back == rs
    assert sl["factor_flops_vs_N"] == 2.0 and math.isnan(sl["memory_vs_N"])


def test_unknown_field_rejected():
    d = SolveReport("p", 1, 1, "exact").to_dict()
    d["bogus"] = 1
    with pytest.raises(ValueError):
        SolveReport.from_dict(d)


def test_loglog_slope():
    x = np.array([10, 100, 1000.0])
    assert loglog_slope(x, 3 * x ** 2) == pytest.approx(2.0)
    assert math.isnan(loglog_slope([5], [1]))
    assert math.isnan(loglog_slope([5, 5], [1, 2]))


# --- driver ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def hodbf_report():
    return run(RunConfig(problem="poisson3d", k=14, solver="hodbf", eps=1e-3, n_min=150, seed=3))


def test_phase_flops_sum_to_total(hodbf_report):
    r = hodbf_report
    assert r.status == "converged" and r.compressed_fronts > 0
    assert r.factor_flops == sum(r.factor_flops_by_phase.values())
    assert set(r.factor_flops_by_phase) >= {"factor_dense", "assembly", "id", "hodbf_invert", "random_matvec"}
    for name in ("n", "nnz", "factor_flops", "exact_factor_flops", "factor_memory_units",
                 "exact_memory_units", "max_rank", "solve_flops"):
        assert getattr(r, name) >= 0
    assert r.mem_compression_pct == pytest.approx(100 * r.factor_memory_units / r.exact_memory_units)
    assert r.gmres_iterations >= 1 and r.refinement_steps is None


def test_top_fronts_sorted(hodbf_report):
    dims = [f["dim"] for f in hodbf_report.top_fronts]
    assert dims == sorted(dims, reverse=True) and len(dims) == 5


def test_exact_run_counters():
    r = run(RunConfig(problem="poisson3d", k=10))
    assert r.status == "converged"
    assert r.factor_flops == r.exact_factor_flops and r.flop_compression_pct == 100.0
    assert r.mem_compression_pct == 100.0
    assert r.gmres_iterations is None and r.refinement_steps <= 2
    assert r.relative_residual <= 1e-12


def test_config_errors():
    for cfg in (RunConfig(problem="poisson5d"), RunConfig(solver="lu"), RunConfig(k=2),
                RunConfig(problem="helmholtz3d", ppw=3), RunConfig(matrix="/nonexistent.mtx")):
        with pytest.raises(ConfigError):
            run(cfg)


def test_sweep_slopes_and_partial_failure():
    reports, slopes = sweep(RunConfig(problem="poisson2d"), [2, 12, 20, 28])
    assert reports[0].status == "failed" and "ConfigError" in reports[0].error
    assert all(r.status == "converged" for r in reports[1:])
    assert set(slopes) == {"factor_flops_vs_N", "memory_vs_N", "max_rank_vs_N",
                           "root_rank_vs_root_dim"}
    assert 1.0 < slopes["factor_flops_vs_N"] < 2.0
    with pytest.raises(ConfigError):
        sweep(RunConfig(), [16, 12])


# --- command line ---------------------------------------------------------------------

def test_cli_exact_example(capsys):
    code, rep = cli_json(capsys, "run", "--problem", "poisson3d", "--k", "16", "--solver", "exact")
    assert code == EXIT_OK
    assert rep["status"] == "converged" and rep["gmres_iterations"] is None
    assert rep["n"] == 16 ** 3


def test_cli_helmholtz_hodbf_example(capsys):
    # the default n_min of 1000 exceeds every front at k = 24
    code, rep = cli_json(capsys, "run", "--problem", "helmholtz3d", "--k", "24", "--ppw", "15",
                         "--eps", "1e-3", "--solver", "hodbf", "--nmin", "400")
    assert code == EXIT_OK
    assert rep["status"] == "converged" and rep["max_rank"] > 0
    assert rep["relative_residual"] <= 1e-5


def test_cli_matrix_import(tmp_path, capsys):
    path = tmp_path / "a.mtx"
    write_matrix_market(poisson(GridSpec.cube(12)), path)
    code, rep = cli_json(capsys, "run", "--matrix", str(path), "--rhs", "ones", "--solver", "hodbf",
                         "--eps", "1e-5", "--nmin", "120")
    assert code == EXIT_OK
    assert rep["problem"] == f"matrix:{path}" and rep["n"] == 1728
    assert rep["compressed_fronts"] > 0


def test_cli_config_errors(tmp_path, capsys):
    assert main(["run", "--problem", "poisson3d", "--k", "2"]) == EXIT_CONFIG
    assert main(["run", "--problem", "nope"]) == EXIT_CONFIG
    assert main(["run", "--out", "xml", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["run", "--matrix", str(tmp_path / "missing.mtx")]) == EXIT_CONFIG
    assert main(["run", "--problem", "poisson2d", "--rhs", "point-center", "--matrix", "x"]) == EXIT_CONFIG
    bad = tmp_path / "bad.mtx"
    bad.write_text("%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 1.0\n")
    assert main(["run", "--matrix", str(bad)]) == EXIT_CONFIG
    assert "line 3" in capsys.readouterr().err


def test_cli_numerical_failure(tmp_path, capsys):
    path = tmp_path / "sing.mtx"
    write_matrix_market(SparseMatrix.from_dense(np.diag([1.0, 0.0, 1.0])), path)
    assert main(["run", "--matrix", str(path)]) == EXIT_NUMERICAL
    rep = json.loads(capsys.readouterr().out)
    assert rep["status"] == "failed"


def test_cli_not_converged_exit(capsys):
    code, rep = cli_json(capsys, "run", "--problem", "poisson3d", "--k", "14", "--solver", "hodbf",
                         "--nmin", "150", "--eps", "1e-1", "--maxiter", "1", "--tol-abs", "0",
                         "--tol-rel", "1e-14")
    assert code == EXIT_NUMERICAL and rep["status"] == "not_converged"


def test_cli_sweep_csv(tmp_path, capsys):
    out = tmp_path / "s.csv"
    assert main(["sweep", "--problem", "poisson3d", "--k", "6", "8", "10", "--out", "csv",
                 str(out)]) == EXIT_OK
    reports, slopes = read_csv(out)
    assert [r.n for r in reports] == [216, 512, 1000]
    assert slopes is not None and np.isfinite(slopes["factor_flops_vs_N"])


def test_cli_single_point_sweep_has_no_footer(capsys):
    assert main(["sweep", "--problem", "poisson3d", "--k", "8"]) == EXIT_OK
    text = capsys.readouterr().out
    lines = text.strip().splitlines()
    assert len(lines) == 2 and lines[0].split(",") == field_names()
    assert "#slopes" not in text


def test_cli_json_file_and_determinism(tmp_path):
    paths = [tmp_path / f"r{i}.json" for i in range(2)]
    argv = ["run", "--problem", "helmholtz3d", "--k", "12", "--ppw", "10", "--solver", "hodbf",
            "--nmin", "100", "--eps", "1e-3", "--rhs", "random", "--seed", "7", "--out", "json"]
    for p in paths:
        assert main(argv + [str(p)]) == EXIT_OK
    a, b = (SolveReport.from_json(p.read_text()) for p in paths)
    assert a.compressed_fronts > 0
    assert a.deterministic_dict() == b.deterministic_dict()


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "bfmf.cli", "--help"], capture_output=True,
                         text=True, check=True).stdout
    for flag in ("run", "sweep"):
        assert flag in out
    sub = subprocess.run([sys.executable, "-m", "bfmf.cli", "run", "--help"], capture_output=True,
                         text=True, check=True).stdout
    for flag in ("--problem", "--matrix", "--rhs", "--k", "--ppw", "--omega", "--solver", "--eps",
                 "--nmin", "--alpha", "--knn", "--gmres-restart", "--tol-abs", "--tol-rel",
                 "--seed", "--out"):
        assert flag in sub
