import json
from pathlib import Path

import pytest

from jaggedcp.cli import BENCH_CSV_COLUMNS, main


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_verify_small_grid_exits_zero(capsys):
    code, out, _ = run_cli(
        capsys, "verify", "--cp", "2", "--protocol", "alltoall", "--seed", "7"
    )
    assert code == 0
    assert "PASS" in out


def test_verify_json_output(capsys):
    code, out, _ = run_cli(
        capsys, "verify", "--cp", "1", "--dtype", "f64", "--seed", "3", "--output", "json"
    )
    assert code == 0
    payload = json.loads(out)
    assert payload["all_passed"] is True


def test_bench_json_schema(capsys):
    code, out, _ = run_cli(
        capsys,
        "bench", "--cp", "4", "--protocol", "allgather_split", "--seed", "7",
        "--min-len", "0", "--max-len", "16", "--max-length", "32", "--output", "json",
    )
    assert code == 0
    report = json.loads(out)
    assert report["config"]["protocol"] == "allgather_split"
    assert len(report["resident_tokens_per_rank"]) == 4
    assert set(report["redistribute_peak_bytes"]) == {"allgather_split", "alltoall"}


def test_bench_csv_columns(capsys):
    code, out, _ = run_cli(
        capsys,
        "bench", "--cp", "2", "--seed", "5", "--max-len", "12", "--max-length", "16",
        "--output", "csv",
    )
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0] == ",".join(BENCH_CSV_COLUMNS)
    assert len(lines) == 3  # header + one row per rank


def test_bench_repeated_invocations_are_bitwise_identical(capsys):
    args = ["bench", "--cp", "2", "--seed", "9", "--max-len", "20", "--max-length", "32", "--output", "json"]
    _, out1, _ = run_cli(capsys, *args)
    _, out2, _ = run_cli(capsys, *args)
    assert out1 == out2


def test_bench_scheduling_modes_agree(capsys):
    base = ["bench", "--cp", "4", "--seed", "11", "--max-len", "24", "--max-length", "32", "--output", "json"]
    _, seq, _ = run_cli(capsys, *base, "--scheduling", "sequential")
    _, thr, _ = run_cli(capsys, *base, "--scheduling", "threaded")
    assert seq == thr


def test_sweep_csv_rows(capsys):
    code, out, _ = run_cli(
        capsys, "sweep", "--budget", "16777216", "--cp", "1,2,4,8", "--seed", "7"
    )
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0] == "cp_size,max_supported_length"
    assert len(lines) == 5  # header + 4 rows
    ls = [int(line.split(",")[1]) for line in lines[1:]]
    assert ls == sorted(ls)


def test_gen_writes_fixture_files(tmp_path: Path, capsys):
    out_dir = tmp_path / "fixtures"
    code, out, _ = run_cli(
        capsys,
        "gen", "--cp", "2", "--seed", "7", "--batch-size", "2",
        "--min-len", "1", "--max-len", "8", "--max-length", "8",
        "--out", str(out_dir),
    )
    assert code == 0
    files = sorted(out_dir.glob("fixture_rank*.json"))
    assert len(files) == 2
    payload = json.loads(files[0].read_text())
    assert {"config", "q", "k", "v", "ts"} <= set(payload)


def test_missing_seed_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["bench", "--cp", "2"])
    assert exc.value.code == 2


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["bench", "--cp", "2", "--seed", "1", "--frobnicate"])
    assert exc.value.code == 2


def test_invalid_config_is_nonzero(capsys):
    code, _, err = run_cli(
        capsys, "bench", "--cp", "2", "--seed", "1", "--min-len", "30", "--max-len", "4"
    )
    assert code == 2
    assert "invalid configuration" in err


def test_verify_failure_exit_code(capsys, monkeypatch):
    # force a failing case by shrinking the f64 tolerance
    import jaggedcp.harness as harness

    monkeypatch.setattr(harness, "F64_ABS_TOL", 0.0)
    code, out, _ = run_cli(capsys, "verify", "--cp", "2", "--dtype", "f64", "--seed", "7")
    assert code == 1
    assert "FAIL" in out
