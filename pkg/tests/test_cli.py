"""The mvx command line: exit codes, CSV output, argument handling."""

import csv
import os

from conftest import scenario_path
from mvxsim.cli import (
    EXIT_CLEAN,
    EXIT_CONFIG,
    EXIT_DIVERGENCE,
    EXIT_ORDERING,
    EXIT_TERMINATED,
    main,
)
from mvxsim.metrics import CSV_COLUMNS

WORKLOADS = os.path.abspath(
    os.path.join(os.path.dirname(scenario_path("open_micro")), "..", "workloads"))


def test_exit_code_values_are_stable():
    assert (EXIT_CLEAN, EXIT_ORDERING, EXIT_DIVERGENCE, EXIT_TERMINATED,
            EXIT_CONFIG) == (0, 1, 2, 3, 64)


def test_run_clean_exits_zero(capsys):
    rc = main(["run", "--scenario", scenario_path("open_micro"),
               "--rsm", "--sr", "--repeat", "1"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "Clean" in out
    assert "overhead=" in out


def test_run_prints_one_line_per_repeat(capsys):
    rc = main(["run", "--scenario", scenario_path("getcwd_micro"),
               "--rsm", "--repeat", "3"])
    assert rc == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if "Clean" in l]
    assert len(lines) == 3


def test_run_quiet_suppresses_per_run_lines(capsys):
    rc = main(["run", "--scenario", scenario_path("getcwd_micro"),
               "--rsm", "--repeat", "1", "--quiet"])
    assert rc == 0
    assert capsys.readouterr().out == ""


def test_run_attack_exits_divergence(capsys):
    rc = main(["run", "--scenario", scenario_path("open_micro"),
               "--ssm", "--repeat", "1",
               "--attack", "perturb:path:x@1:0"])
    assert rc == EXIT_DIVERGENCE
    assert "Divergence" in capsys.readouterr().out


def test_run_token_attack_exits_divergence(capsys):
    rc = main(["run", "--scenario", scenario_path("open_micro"),
               "--rsm", "--sr", "--repeat", "1",
               "--attack", "token-tamper@1:5"])
    assert rc == EXIT_DIVERGENCE


def test_run_writes_metrics_csv(tmp_path, capsys):
    out = tmp_path / "metrics.csv"
    rc = main(["run", "--scenario", scenario_path("getcwd_micro"),
               "--rsm", "--repeat", "2", "--quiet", "--out", str(out)])
    assert rc == 0
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == list(CSV_COLUMNS)
    assert len(rows) == 3
    body = [r[1:] for r in rows[1:]]
    assert body[0] == body[1]  # same seed, same numbers


def test_run_bad_attack_is_a_config_error(capsys):
    rc = main(["run", "--scenario", scenario_path("open_micro"),
               "--rsm", "--attack", "frobnicate@1:2"])
    assert rc == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_run_missing_scenario_is_a_config_error(capsys):
    rc = main(["run", "--scenario", "/nonexistent/x.scenario"])
    assert rc == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_run_sr_without_mode_is_a_config_error(capsys):
    rc = main(["run", "--scenario", scenario_path("open_micro"), "--sr"])
    assert rc == EXIT_CONFIG
    assert "requires ssm or rsm" in capsys.readouterr().err


def test_usage_errors_map_to_config_exit(capsys):
    assert main(["run"]) == EXIT_CONFIG
    assert main(["run", "--scenario", scenario_path("open_micro"),
                 "--ssm", "--rsm"]) == EXIT_CONFIG


def test_bench_ordering_violation_exits_one(tmp_path, capsys):
    # A descriptor-free workload ties rsm with rsm+sr; asserting strict
    # ordering over it must trip the bench gate.
    scen = tmp_path / "tie.scenario"
    scen.write_text(
        "[scenario]\n"
        "name = tie\n"
        f"workload = {WORKLOADS}/getcwd_micro.wl\n"
        "assert_ordering = true\n")
    rc = main(["bench", "--suite", str(tmp_path)])
    assert rc == EXIT_ORDERING
    out = capsys.readouterr().out
    assert "ordering violations:" in out
    assert "strictly more" in out


def test_bench_clean_suite_exits_zero_and_writes_csv(tmp_path, capsys):
    scen = tmp_path / "ok.scenario"
    scen.write_text(
        "[scenario]\n"
        "name = ok\n"
        f"workload = {WORKLOADS}/open_micro.wl\n"
        "assert_ordering = true\n"
        "\n"
        "[filesystem]\n"
        "/app/data/blob.bin = 0123456789abcdef\n")
    out = tmp_path / "bench.csv"
    rc = main(["bench", "--suite", str(tmp_path), "--out", str(out)])
    assert rc == 0
    assert "ordering: ok" in capsys.readouterr().out
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["scenario", "config", "verdict", "sim_time_us", "overhead"]
    assert len(rows) == 5
    assert [r[1] for r in rows[1:]] == ["none", "ssm", "rsm", "rsm+sr"]


def test_bench_empty_suite_is_a_config_error(tmp_path, capsys):
    rc = main(["bench", "--suite", str(tmp_path)])
    assert rc == EXIT_CONFIG
