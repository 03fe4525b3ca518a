'''
Scenario files, repeated runs, CSV reports, and the benchmark suite.

A scenario is an INI file:

    [scenario]
    name = open_heavy
    workload = ../workloads/open_heavy.wl
    policy = ../policies/default.policy
    variants = 2
    app_root = /app
    misprediction = retry
    retry_budget = 16
    assert_ordering = true
    latency_us = 50

    [filesystem]
    /app/data/blob.bin = 0123456789abcdef

    [traffic]
    requests =
        GET /index.html
        GET /about.html

Paths are resolved relative to the scenario file.  The [filesystem] section
pre-populates every variant's private file tree; [traffic] feeds accepted
connections in order.
'''

from __future__ import annotations

import configparser
import csv
import io
import os
import uuid
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from .metrics import CSV_COLUMNS, CostModel, RunMetrics
from .runner import ResolvedScenario, RunResult, run_once
from .syscalls import DEFAULT_POLICY, PolicyError, SensitivityPolicy, parse_policy
from .workload import AttackSpec, ScenarioFormatError, parse_attack, parse_workload


class ConfigError(ValueError):
    """Bad scenario, policy, or command-line configuration."""


MODES = ("none", "ssm", "rsm")

_COST_KEYS = ("latency_us", "syscall_cost_us", "crossing_cost_us",
              "msg_cost_us", "jitter_us")


@dataclass
class ScenarioConfig:
    name: str
    program: list
    policy: SensitivityPolicy = field(default_factory=lambda: DEFAULT_POLICY)
    variants: int = 2
    files: dict = field(default_factory=dict)
    traffic: tuple = ()
    app_root: str = "/app"
    misprediction: str = "retry"
    retry_budget: int = 16
    assert_ordering: bool = False
    cost_overrides: dict = field(default_factory=dict)
    # per-run selection, overridable from the command line
    mode: str = "none"
    sr: bool = False
    channel: str = "sim:50"
    seed: int = 0
    repeat: int = 3
    attack: Optional[AttackSpec] = None
    kernel_setup: Optional[Callable] = None

    def validate(self) -> None:
        if self.variants < 2:
            raise ConfigError("a run needs at least two variants")
        if self.mode not in MODES:
            raise ConfigError(f"unknown monitoring mode {self.mode!r}")
        if self.sr and self.mode == "none":
            raise ConfigError(
                "selective replication requires ssm or rsm monitoring")
        if self.misprediction not in ("retry", "terminate"):
            raise ConfigError(
                f"unknown misprediction policy {self.misprediction!r}")
        if self.retry_budget < 1:
            raise ConfigError("retry budget must be positive")
        if self.repeat < 1:
            raise ConfigError("repeat must be positive")
        if not self.program:
            raise ConfigError("workload is empty")
        parse_channel(self.channel)

    def resolved(self) -> ResolvedScenario:
        self.validate()
        flavor, latency, port = parse_channel(self.channel)
        costs = {"latency_us": latency}
        costs.update(self.cost_overrides)
        cost = CostModel(jitter_seed=self.seed, **costs)
        return ResolvedScenario(
            name=self.name,
            program=list(self.program),
            policy=self.policy,
            variants=self.variants,
            mode=self.mode,
            sr=self.sr,
            channel_flavor=flavor,
            port=port,
            cost=cost,
            seed=self.seed,
            files=dict(self.files),
            traffic=tuple(self.traffic),
            app_root=self.app_root,
            misprediction=self.misprediction,
            retry_budget=self.retry_budget,
            attack=self.attack,
            kernel_setup=self.kernel_setup,
        )


def parse_channel(spec: str) -> "tuple[str, float, int]":
    """'sim:<latency_us>' or 'tcp:<port>[:<latency_us>]'."""
    parts = spec.split(":")
    try:
        if parts[0] == "sim" and len(parts) <= 2:
            latency = float(parts[1]) if len(parts) == 2 else 50.0
            if latency < 0:
                raise ValueError
            return "sim", latency, 0
        if parts[0] == "tcp" and 2 <= len(parts) <= 3:
            port = int(parts[1])
            latency = float(parts[2]) if len(parts) == 3 else 50.0
            if port < 0 or latency < 0:
                raise ValueError
            return "tcp", latency, port
    except ValueError:
        pass
    raise ConfigError(f"bad channel spec {spec!r}; "
                      f"use sim:<latency_us> or tcp:<port>[:<latency_us>]")


def load_scenario(path: str) -> ScenarioConfig:
    cp = configparser.ConfigParser()
    cp.optionxform = str  # filesystem paths are case sensitive
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read scenario file {path!r}")
    if "scenario" not in cp:
        raise ConfigError(f"{path}: missing [scenario] section")
    sec = cp["scenario"]
    base = os.path.dirname(os.path.abspath(path))

    name = sec.get("name") or os.path.splitext(os.path.basename(path))[0]
    workload_rel = sec.get("workload")
    if not workload_rel:
        raise ConfigError(f"{path}: [scenario] needs a workload entry")
    workload_path = os.path.join(base, workload_rel)
    try:
        with open(workload_path, encoding="utf-8") as fh:
            program = parse_workload(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read workload {workload_path!r}: {exc}") from None
    except ScenarioFormatError as exc:
        raise ConfigError(f"{workload_path}: {exc}") from None

    policy = DEFAULT_POLICY
    if sec.get("policy"):
        policy = load_policy(os.path.join(base, sec["policy"]))

    cost_overrides = {}
    for key in _COST_KEYS:
        if sec.get(key):
            try:
                cost_overrides[key] = float(sec[key])
            except ValueError:
                raise ConfigError(f"{path}: {key} must be a number") from None

    files = {}
    if "filesystem" in cp:
        for fpath, content in cp["filesystem"].items():
            files[fpath] = content.encode()

    traffic = ()
    if "traffic" in cp and cp["traffic"].get("requests"):
        traffic = tuple(line.strip().encode()
                        for line in cp["traffic"]["requests"].splitlines()
                        if line.strip())

    try:
        cfg = ScenarioConfig(
            name=name,
            program=program,
            policy=policy,
            variants=sec.getint("variants", fallback=2),
            files=files,
            traffic=traffic,
            app_root=sec.get("app_root", "/app"),
            misprediction=sec.get("misprediction", "retry"),
            retry_budget=sec.getint("retry_budget", fallback=16),
            assert_ordering=sec.getboolean("assert_ordering", fallback=False),
            cost_overrides=cost_overrides,
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return cfg


def load_policy(path: str) -> SensitivityPolicy:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_policy(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read policy {path!r}: {exc}") from None
    except PolicyError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def run_scenario(config: ScenarioConfig, run_id: Optional[str] = None) -> RunResult:
    """One run of one configuration."""
    rid = run_id or make_run_id(config)
    return run_once(config.resolved(), run_id=rid)


def run_repeated(config: ScenarioConfig) -> list:
    """config.repeat runs; identical metrics modulo run_id by construction."""
    out = []
    for k in range(config.repeat):
        out.append(run_scenario(config, run_id=make_run_id(config, k)))
    return out


def make_run_id(config: ScenarioConfig, k: int = 0) -> str:
    tag = config.mode + ("+sr" if config.sr else "")
    return f"{config.name}-{tag}-s{config.seed}-r{k}-{uuid.uuid4().hex[:8]}"


def emit_report(metrics: list, path_or_fh) -> None:
    """Write RunMetrics rows as CSV with the fixed column order."""
    if not metrics:
        raise ValueError("emit_report needs at least one metrics row")
    own = isinstance(path_or_fh, (str, os.PathLike))
    fh = open(path_or_fh, "w", newline="", encoding="utf-8") if own else path_or_fh
    try:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for m in metrics:
            w.writerow(m.csv_row())
    finally:
        if own:
            fh.close()


def render_csv(metrics: list) -> str:
    buf = io.StringIO()
    emit_report(metrics, buf)
    return buf.getvalue()


# -- benchmark suite ---------------------------------------------------------

BENCH_CONFIGS = (
    ("none", False),
    ("ssm", False),
    ("rsm", False),
    ("rsm", True),
)


@dataclass
class BenchRow:
    scenario: str
    mode: str
    sr: bool
    verdict: str
    sim_time_us: float
    overhead: float

    @property
    def label(self) -> str:
        return self.mode + ("+sr" if self.sr else "")


@dataclass
class BenchReport:
    rows: list
    violations: list

    def render(self) -> str:
        lines = [f"{'scenario':<18} {'config':<8} {'verdict':<12} "
                 f"{'sim_time_us':>14} {'overhead':>10}"]
        for r in self.rows:
            lines.append(f"{r.scenario:<18} {r.label:<8} {r.verdict:<12} "
                         f"{r.sim_time_us:>14.1f} {r.overhead:>10.3f}")
        if self.violations:
            lines.append("ordering violations:")
            lines.extend(f"  {v}" for v in self.violations)
        else:
            lines.append("ordering: ok (no asserted scenario regressed)")
        return "\n".join(lines)


def bench_scenario(config: ScenarioConfig) -> "tuple[list, list]":
    """Run the four monitoring configurations over one scenario."""
    rows = []
    results = []
    for mode, sr in BENCH_CONFIGS:
        cfg = replace(config, mode=mode, sr=sr, repeat=1)
        res = run_scenario(cfg)
        results.append(res)
        rows.append(BenchRow(
            scenario=config.name, mode=mode, sr=sr,
            verdict=res.verdict.status.value,
            sim_time_us=res.metrics.sim_time_us,
            overhead=res.metrics.overhead,
        ))
    violations = []
    if config.assert_ordering:
        over = [r.overhead for r in rows]
        labels = [r.label for r in rows]
        for a in range(len(over) - 1):
            if not over[a] > over[a + 1]:
                violations.append(
                    f"{config.name}: {labels[a]} ({over[a]:.3f}) must cost "
                    f"strictly more than {labels[a + 1]} ({over[a + 1]:.3f})")
    return rows, violations


def bench_suite(suite_dir: str, channel: Optional[str] = None,
                seed: Optional[int] = None) -> BenchReport:
    paths = sorted(
        os.path.join(suite_dir, f) for f in os.listdir(suite_dir)
        if f.endswith(".scenario"))
    if not paths:
        raise ConfigError(f"no .scenario files under {suite_dir!r}")
    rows: list = []
    violations: list = []
    for p in paths:
        cfg = load_scenario(p)
        if channel is not None:
            cfg.channel = channel
        if seed is not None:
            cfg.seed = seed
        r, v = bench_scenario(cfg)
        rows.extend(r)
        violations.extend(v)
    return BenchReport(rows, violations)
