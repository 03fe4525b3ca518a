'''
Counters, the simulated cost model, and report rows.

Every variant carries its own virtual clock in microseconds.  All waiting
and message travel is computed in simulated time from deterministic inputs
(costs, per-message timestamps, hashed jitter), never from the wall clock,
so a run's metrics are a pure function of scenario + seed + config.
'''

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional

from .syscalls import digest64

# Column order is part of the output contract; keep it stable.
CSV_COLUMNS = (
    "run_id", "workload", "ssm", "rsm", "sr", "latency_us", "seed",
    "verdict", "syscalls_total", "sensitive", "nonsensitive",
    "sync_rtt_leader", "sync_rtt_follower", "async_msgs", "crossings",
    "stalls", "sim_time_us", "baseline_time_us", "overhead",
)


@dataclass(frozen=True)
class CostModel:
    """Simulated costs, all in microseconds."""

    syscall_cost_us: float = 1.0
    crossing_cost_us: float = 0.5
    msg_cost_us: float = 0.3
    latency_us: float = 50.0
    jitter_us: float = 0.0
    jitter_seed: int = 0

    def jitter(self, stream: str, variant_id: int, n: int) -> float:
        """Deterministic per-message jitter in [0, jitter_us)."""
        if self.jitter_us <= 0:
            return 0.0
        h = digest64(f"{self.jitter_seed}:{stream}:{variant_id}:{n}".encode())
        return (h / float(1 << 64)) * self.jitter_us


@dataclass
class VariantCounters:
    """Owned by one variant thread; no locking needed."""

    variant_id: int = 0
    clock_us: float = 0.0
    syscalls: int = 0
    sensitive: int = 0
    nonsensitive: int = 0
    handles: int = 0      # in-process monitor dispatches
    rounds: int = 0       # lockstep rounds joined
    sync_rtt: int = 0
    sync_rtt_nonsensitive: int = 0
    async_sent: int = 0
    async_consumed: int = 0
    crossings: int = 0
    stalls: int = 0       # simulated waits (lockstep and consume)
    mispredictions: int = 0
    retries: int = 0

    def advance(self, cost: float) -> None:
        self.clock_us += cost

    def wait_until(self, t: float) -> None:
        # Simulated blocking: jumping the clock forward is the wait.
        if t > self.clock_us:
            self.clock_us = t
            self.stalls += 1

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class RunMetrics:
    run_id: str
    workload: str
    ssm: bool
    rsm: bool
    sr: bool
    latency_us: float
    seed: int
    verdict: str
    syscalls_total: int
    sensitive: int
    nonsensitive: int
    sync_rtt_leader: int
    sync_rtt_follower: int
    async_msgs: int
    crossings: int
    stalls: int
    sim_time_us: float
    baseline_time_us: float
    overhead: float

    def csv_row(self) -> list:
        vals = []
        for col in CSV_COLUMNS:
            v = getattr(self, col)
            if isinstance(v, bool):
                vals.append("1" if v else "0")
            elif isinstance(v, float):
                vals.append(f"{v:.3f}")
            else:
                vals.append(str(v))
        return vals


def naive_switch_count(exchanges: int, switches_per_exchange: int = 4) -> int:
    """Cost bound for the rejected design this system replaces.

    A monitor that toggled interception off and on around its own I/O would
    pay four protection-mode switches per exchanged message; the connector
    path pays none because monitor traffic never enters the intercepted
    world.  Used only for reporting the comparison.
    """
    return exchanges * switches_per_exchange
