import json

import pytest

from cli import EXIT_INVALID, EXIT_OK, EXIT_RUN_FAILED, EXIT_USAGE, cli_main


def test_validate_ok(fixtures_dir, capsys):
    assert cli_main(["validate", str(fixtures_dir / "gateway_flyby.json")]) == EXIT_OK
    assert "valid" in capsys.readouterr().out


def test_missing_arguments_are_usage_errors(capsys):
    assert cli_main([]) == EXIT_USAGE
    assert capsys.readouterr().err.startswith("error[usage]:")
    assert cli_main(["launch", "x.json"]) == EXIT_USAGE


def test_missing_file(tmp_path, capsys):
    assert cli_main(["validate", str(tmp_path / "absent.json")]) == EXIT_USAGE
    assert "error[io]" in capsys.readouterr().err


def test_parse_error_exit_code(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{ not json", encoding="utf-8")
    assert cli_main(["validate", str(path)]) == EXIT_INVALID
    assert capsys.readouterr().err.startswith("error[parse]:")


def test_infeasible_mission_lists_violations(tmp_path, capsys):
    path = tmp_path / "blocked.json"
    path.write_text(json.dumps({
        "inspection_points": [{"position": [0, 0, 0]}, {"position": [3, 0, 0]}],
        "keepouts": [{"name": "tank", "center": [0, 0, 0], "semi_axes": [0.5, 0.5, 0.5]}],
    }), encoding="utf-8")
    assert cli_main(["validate", str(path)]) == EXIT_INVALID
    err = capsys.readouterr().err.splitlines()
    assert err[0].startswith("error[validation]:")
    assert any("tank" in line for line in err[1:])


def test_run_exports(fixtures_dir, tmp_path, capsys):
    out = tmp_path / "run"
    code = cli_main(["run", str(fixtures_dir / "straight_flyby.json"), "--out", str(out), "--max-time", "1"])
    assert code == EXIT_OK
    stdout = capsys.readouterr().out
    assert "termination = timeout" in stdout
    assert sorted(p.name for p in out.iterdir()) == ["metrics.txt", "summary.json", "trajectory.csv"]


def test_run_collision_exit_code(tmp_path, capsys):
    path = tmp_path / "offset.json"
    path.write_text(json.dumps({
        "name": "offset",
        "inspection_points": [{"position": [0, 0, 0]}, {"position": [3, 0, 0]}],
        "initial_state": {"position": [1.0, 0.9, 0.0]},
    }), encoding="utf-8")
    code = cli_main(["run", str(path), "--out", str(tmp_path / "out")])
    assert code == EXIT_RUN_FAILED
    assert "error[collision]" in capsys.readouterr().err


def test_bad_max_time_is_usage_error(fixtures_dir):
    assert cli_main(["run", str(fixtures_dir / "straight_flyby.json"), "--max-time", "soon"]) == EXIT_USAGE


@pytest.mark.slow
def test_compare_prints_table(fixtures_dir, capsys):
    path = str(fixtures_dir / "straight_flyby.json")
    assert cli_main(["compare", path, path, "--max-time", "2"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "avg_lateral_dev" in out
    assert "---" in out


def test_unwritable_output_is_io_error(fixtures_dir, tmp_path, capsys):
    blocker = tmp_path / "taken"
    blocker.write_text("not a directory", encoding="utf-8")
    code = cli_main(["run", str(fixtures_dir / "straight_flyby.json"), "--out", str(blocker), "--max-time", "1"])
    assert code == EXIT_USAGE
    assert "error[io]" in capsys.readouterr().err


def test_bench_reports_solve_times(fixtures_dir, capsys):
    assert cli_main(["bench", str(fixtures_dir / "straight_flyby.json"), "--duration", "1"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "solves = 5" in out
    assert "median" in out
    assert "Hz" in out


@pytest.mark.slow
def test_four_failure_run_exits_with_run_failure(fixtures_dir, tmp_path, capsys):
    code = cli_main(["run", str(fixtures_dir / "gateway_flyby_four_failure.json"), "--out", str(tmp_path / "out")])
    assert code == EXIT_RUN_FAILED
    assert "error[" in capsys.readouterr().err
