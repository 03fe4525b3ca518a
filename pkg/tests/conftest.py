"""Shared fixtures for the mvxsim test suite."""

import os

import pytest

from mvxsim.harness import ScenarioConfig, load_scenario, run_scenario
from mvxsim.workload import parse_attack, parse_workload

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
BENCH_DIR = os.path.join(REPO, "scenarios", "bench")

# One line per acceptance criterion, re-printed at the end of the session so
# the gate result is visible even when pytest captures stdout.
_gate_lines = []


def pytest_terminal_summary(terminalreporter):
    if _gate_lines:
        terminalreporter.section("acceptance gate")
        for line in _gate_lines:
            terminalreporter.write_line(line)


@pytest.fixture
def gate():
    """Record one pass/fail line for an acceptance criterion, then assert."""

    def _check(criterion, ok, detail=""):
        status = "PASS" if ok else "FAIL"
        line = f"criterion {criterion}: {status}  {detail}".rstrip()
        print(line)
        _gate_lines.append(line)
        assert ok, line

    return _check


def scenario_path(name):
    return os.path.join(BENCH_DIR, name + ".scenario")


def load_bench(name, mode="rsm", sr=False, channel="sim:50", seed=0,
               attack=None, **overrides):
    """Load a shipped scenario and apply run selection in one step."""
    cfg = load_scenario(scenario_path(name))
    cfg.mode = mode
    cfg.sr = sr
    cfg.channel = channel
    cfg.seed = seed
    if attack is not None:
        cfg.attack = parse_attack(attack)
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


def run_bench(name, run_id="test", **kwargs):
    return run_scenario(load_bench(name, **kwargs), run_id=run_id)


def config_from_text(workload_text, name="inline", **kwargs):
    """Build a ScenarioConfig straight from workload text."""
    program = parse_workload(workload_text)
    cfg = ScenarioConfig(name=name, program=program)
    for key, value in kwargs.items():
        setattr(cfg, key, value)
    return cfg
