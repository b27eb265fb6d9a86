import json

import pytest

from hybrid_hpf.cli import EXIT_INPUT, EXIT_NO_CONVERGENCE, EXIT_OK, main
from hybrid_hpf.study import reduced_benchmark

from conftest import random_study_dict


@pytest.fixture(scope="module")
def benchmark_runs(tmp_path_factory):
    outs = [tmp_path_factory.mktemp(f"run{k}") for k in range(2)]
    codes = [main(["benchmark", "--out", str(o), "--harmonics", "3"]) for o in outs]
    return codes, outs


def test_benchmark_writes_results(benchmark_runs):
    codes, outs = benchmark_runs
    assert codes == [EXIT_OK, EXIT_OK]
    assert {p.name for p in outs[0].iterdir()} >= {"spectra.csv", "results.json"}


def test_repeated_benchmark_runs_are_bitwise_identical(benchmark_runs):
    _, (a, b) = benchmark_runs
    for name in ("spectra.csv", "results.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_run_study_file(tmp_path, capsys):
    study = tmp_path / "s.json"
    study.write_text(json.dumps(random_study_dict(1, H=2)))
    assert main(["run", "--study", str(study), "--out", str(tmp_path / "out")]) == EXIT_OK
    assert "converged" in capsys.readouterr().out
    assert (tmp_path / "out" / "spectra.csv").exists()


def test_schema_error_exits_2_with_path(tmp_path, capsys):
    doc = random_study_dict(1)
    doc["bases"]["P_b_W"] = "x"
    study = tmp_path / "s.json"
    study.write_text(json.dumps(doc))
    assert main(["run", "--study", str(study), "--out", str(tmp_path)]) == EXIT_INPUT
    assert "$.bases.P_b_W" in capsys.readouterr().err


def test_missing_file_exits_2(tmp_path):
    assert main(["run", "--study", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == EXIT_INPUT


def test_iteration_budget_exits_1(tmp_path, capsys):
    code = main(["benchmark", "--out", str(tmp_path), "--harmonics", "2", "--max-iter", "1"])
    assert code == EXIT_NO_CONVERGENCE
    assert "NOT converged" in capsys.readouterr().out


def test_kpi_of_identical_results(benchmark_runs, tmp_path, capsys):
    _, (a, b) = benchmark_runs
    out = tmp_path / "kpi.json"
    assert main(["kpi", "--ref", str(a / "results.json"), "--test", str(b / "spectra.csv"),
                 "--out", str(out)]) == EXIT_OK
    d = json.loads(out.read_text())
    assert d["format"] == "hybrid-hpf-kpi"
    # the CSV rounds to a few ulps; the JSON copy is exact
    assert all(m["e_abs"] < 1e-13 for m in d["maxima"])
    assert "max e_abs" in capsys.readouterr().out
    assert main(["kpi", "--ref", str(a), "--test", str(b), "--out", str(out)]) == EXIT_OK
    assert all(m["e_abs"] == 0.0 for m in json.loads(out.read_text())["maxima"])


def test_validate_without_cosim(tmp_path, capsys):
    study = tmp_path / "r.json"
    reduced_benchmark(H=3).save(study)
    assert main(["validate", "--study", str(study), "--no-cosim"]) == EXIT_OK
    assert "FAIL" not in capsys.readouterr().out


@pytest.mark.parametrize("argv", [[], ["solve"], ["run", "--out", "x"], ["benchmark", "--harmonics", "two"],
                                  ["benchmark", "--tier", "switched"]])
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as err:
        main(argv)
    assert err.value.code == EXIT_INPUT
