'''
Run assembly: variants, monitors, transport, and final reconciliation.

One run = N variant threads executing the same expanded workload over
private kernels, a lockstep barrier with its resolver, connector pumps, and
a channel (simulated or TCP loopback).  The runner owns thread lifecycle
and the end-of-run reconciliation that turns silent skew (handle-count or
descriptor-table mismatches) into an explicit divergence verdict.
'''

from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional

from .arbiter import Arbiter, RouteTarget
from .filemap import FileMap, Origin
from .inproc import DipMonConfig, InProcessMonitor
from .kernel import (EmulatedKernel, ReplicationMismatch, SyscallResult,
                     TrafficModel, apply_replicated)
from .lockstep import (ForwardToLockstep, LockstepBarrier, LockstepSession,
                       RunControl, TerminatedError, Verdict, VerdictStatus,
                       barrier_endpoint)
from .metrics import CostModel, RunMetrics, VariantCounters, naive_switch_count
from .syscalls import SensitivityPolicy, SyscallKind
from .transport import (CommBuffer, Connector, SimChannel, TcpChannel,
                        TransportClosed, WireMessage)
from .workload import AttackSpec, VariantProgram


@dataclass
class ResolvedScenario:
    """Everything a single run needs, already parsed and validated."""

    name: str
    program: list
    policy: SensitivityPolicy
    variants: int = 2
    mode: str = "rsm"            # "none" | "ssm" | "rsm"
    sr: bool = False
    channel_flavor: str = "sim"  # "sim" | "tcp"
    port: int = 0
    cost: CostModel = field(default_factory=CostModel)
    seed: int = 0
    files: dict = field(default_factory=dict)
    traffic: tuple = ()
    app_root: str = "/app"
    misprediction: str = "retry"
    retry_budget: int = 16
    attack: Optional[AttackSpec] = None
    cb_capacity: int = CommBuffer.DEFAULT_CAPACITY
    wall_timeout_s: float = 20.0
    sim_limit_us: float = 5_000_000.0
    # Called as kernel_setup(variant_id, kernel) after each kernel is built;
    # the fault-injection hook for tests and demos.
    kernel_setup: Optional[Callable[[int, EmulatedKernel], None]] = None


@dataclass
class RunReport:
    variant_counters: dict
    arbiter_stats: dict
    security_events: list
    replicated_by_kind: Counter
    broadcasts: int
    notices_sent: int
    rounds_sensitive: int
    rounds_nonsensitive: int
    projections: dict
    fd_tables: dict
    lane_stats: dict
    channel_stats: dict
    log: list
    anomalies: list
    internal_errors: list
    naive_switches: int
    send_traces: dict = field(default_factory=dict)


@dataclass
class RunResult:
    verdict: Verdict
    metrics: RunMetrics
    report: RunReport


class _VariantRuntime:
    def __init__(self, variant_id: int, role: str):
        self.variant_id = variant_id
        self.role = role
        self.kernel: EmulatedKernel = None
        self.fmap: FileMap = None
        self.arbiter: Arbiter = None
        self.dipmon: InProcessMonitor = None
        self.session: LockstepSession = None
        self.cb: CommBuffer = None
        self.counters: VariantCounters = None
        self.program: VariantProgram = None


def run_once(scn: ResolvedScenario, run_id: str = "run") -> RunResult:
    control = RunControl()
    cost = scn.cost
    ids = list(range(scn.variants))
    leader_id = 0

    if scn.channel_flavor == "tcp":
        channel = TcpChannel(scn.port, cost.latency_us, scn.variants - 1)
    else:
        channel = SimChannel(cost.latency_us, control.stop)

    barrier = LockstepBarrier(control, ids, leader_id, cost,
                              wall_timeout_s=scn.wall_timeout_s,
                              sim_limit_us=scn.sim_limit_us)
    endpoint = barrier_endpoint(barrier)

    runtimes = {}
    selective = scn.mode != "none"
    dip_cfg = DipMonConfig(
        mode=scn.mode if scn.mode in ("ssm", "rsm") else "rsm",
        selective_replication=scn.sr,
        app_root=scn.app_root,
        misprediction=scn.misprediction,
        retry_budget=scn.retry_budget,
    )
    for v in ids:
        rt = _VariantRuntime(v, "leader" if v == leader_id else "follower")
        rt.counters = VariantCounters(variant_id=v)
        rt.kernel = EmulatedKernel(files=dict(scn.files),
                                   traffic=TrafficModel(tuple(scn.traffic)))
        if scn.kernel_setup is not None:
            scn.kernel_setup(v, rt.kernel)
        rt.fmap = FileMap()
        rt.arbiter = Arbiter(v, scn.policy, rt.fmap, selective, scn.seed,
                             rt.counters, control)
        rt.cb = CommBuffer(v, scn.cb_capacity, stop=control.stop)
        rt.dipmon = InProcessMonitor(v, rt.role, rt.kernel, rt.fmap,
                                     rt.arbiter, rt.cb, control, dip_cfg,
                                     cost, rt.counters)
        if (scn.attack is not None and scn.attack.is_token_attack
                and scn.attack.variant_id == v):
            rt.dipmon.token_attacks[scn.attack.position] = scn.attack.op
        rt.program = VariantProgram(scn.program, v, scn.attack)
        runtimes[v] = rt

    # transport wiring: follower ends first so a TCP channel can pair up
    follower_async = {}
    follower_sync = {}
    sim_leader_ends = {}
    for v in ids[1:]:
        if scn.channel_flavor == "tcp":
            follower_async[v], follower_sync[v] = channel.follower_links(v)
        else:
            leader_end, follower_end = channel.async_pair(v)
            follower_async[v] = follower_end
            follower_sync[v] = channel.sync_link(v, endpoint)
            sim_leader_ends[v] = leader_end

    leader_links = {}
    for v in ids[1:]:
        if scn.channel_flavor == "tcp":
            leader_links[v] = channel.leader_async_link(v)
            channel.start_sync_service(v, endpoint)
        else:
            leader_links[v] = sim_leader_ends[v]

    control_msgs: list = []
    control_lock = threading.Lock()

    def control_sink(msg: WireMessage) -> None:
        with control_lock:
            control_msgs.append((msg.msg_type.name, msg.variant_id, msg.seq_no))

    connectors = {}
    lead_conn = Connector(leader_id, "leader", runtimes[leader_id].cb)
    lead_conn.start_leader(leader_links, control_sink)
    connectors[leader_id] = lead_conn
    for v in ids[1:]:
        conn = Connector(v, "follower", runtimes[v].cb)
        conn.start_follower(follower_async[v])
        connectors[v] = conn

    for v in ids:
        rt = runtimes[v]
        if v == leader_id:
            rt.session = LockstepSession(v, "leader", barrier, None, cost,
                                         rt.counters, control)
        else:
            rt.session = LockstepSession(v, "follower", None, follower_sync[v],
                                         cost, rt.counters, control)

    internal_errors: list = []

    def dispatch_lockstep(rt: _VariantRuntime, event, route) -> None:
        grant = rt.session.submit(event, route.sensitivity)
        action = grant["action"]
        c = rt.counters
        if action == "exec":
            control.gate_exec(event.variant_id, event.seq_no, event.kind)
            result = rt.kernel.execute(event)
            c.advance(cost.syscall_cost_us)
            c.syscalls += 1
            rt.fmap.record(event, result, Origin.LOCAL)
            barrier.provide_result(grant["round_no"], result, c.clock_us)
        elif action == "local":
            control.gate_exec(event.variant_id, event.seq_no, event.kind)
            result = rt.kernel.execute(event)
            c.advance(cost.syscall_cost_us)
            c.syscalls += 1
            rt.fmap.record(event, result, Origin.LOCAL)
        elif action == "apply":
            result = SyscallResult.from_wire(grant["result"])
            control.gate_exec(event.variant_id, event.seq_no, event.kind)
            try:
                applied = apply_replicated(rt.kernel, event,
                                           SyscallKind(grant["kind"]), result)
            except ReplicationMismatch as exc:
                control.divergence(
                    f"variant {rt.variant_id}: lockstep result apply failed: {exc}")
                raise TerminatedError(str(exc)) from None
            c.advance(cost.syscall_cost_us)
            c.syscalls += 1
            rt.fmap.record(event, applied, Origin.REPLICATED_SHADOW)
        else:  # pragma: no cover - grant shapes are closed
            raise TerminatedError(f"unknown grant {action!r}")

    def run_variant(rt: _VariantRuntime) -> None:
        try:
            while True:
                event = rt.program.next_event()
                if event is None:
                    break
                route = rt.arbiter.intercept(event)
                rt.counters.advance(cost.crossing_cost_us)
                if route.target is RouteTarget.CROSS_PROCESS:
                    dispatch_lockstep(rt, event, route)
                else:
                    try:
                        rt.dipmon.handle(event, route)
                    except ForwardToLockstep:
                        dispatch_lockstep(rt, event, route)
                if rt.kernel.exited is not None:
                    break
        except TerminatedError:
            pass
        except TransportClosed:
            pass
        except Exception as exc:  # noqa: BLE001 - surfaced via the verdict
            internal_errors.append((rt.variant_id, repr(exc)))
            control.terminate(f"internal error in variant {rt.variant_id}: {exc!r}")
        finally:
            try:
                rt.session.retire()
            except (TransportClosed, TerminatedError, OSError):
                pass
            if not control.stop.is_set():
                rt.dipmon.send_eos()
            try:
                rt.cb.outgoing.close()
            except Exception:
                pass

    threads = []
    for v in ids:
        t = threading.Thread(target=run_variant, args=(runtimes[v],),
                             name=f"variant-{v}", daemon=True)
        threads.append(t)
        t.start()

    deadline = scn.wall_timeout_s + 10.0
    for t in threads:
        t.join(timeout=deadline)
    if any(t.is_alive() for t in threads):
        control.terminate("run exceeded the wall-clock budget")
        for v in ids:
            runtimes[v].cb.incoming.abandon()
            runtimes[v].cb.outgoing.abandon()
        for t in threads:
            t.join(timeout=5.0)

    # reconciliation: turn silent end-state skew into explicit divergence
    if control.verdict is None:
        handle_counts = {v: runtimes[v].counters.handles for v in ids}
        if len(set(handle_counts.values())) > 1:
            control.divergence(
                f"in-process handle count skew at end of run: {handle_counts}")
    if control.verdict is None:
        fd_sets = {v: tuple(sorted(runtimes[v].kernel.fd_table)) for v in ids}
        if len(set(fd_sets.values())) > 1:
            control.divergence(f"descriptor table skew at end of run: {fd_sets}")
    if control.verdict is None:
        offenders = [v for v in ids[1:] if runtimes[v].kernel.external_io > 0]
        if offenders:
            control.divergence(
                f"followers {offenders} performed external I/O directly")

    verdict = control.final_verdict()
    control.stop.set()

    for v in ids:
        runtimes[v].cb.incoming.abandon()
        runtimes[v].cb.outgoing.abandon()
    for conn in connectors.values():
        conn.join(timeout=2.0)
    channel.close()

    # baseline: the same expanded script, one variant, no monitoring
    baseline_time, baseline_count = run_baseline(scn)

    lead = runtimes[leader_id].counters
    follower_rtt = max((runtimes[v].counters.sync_rtt for v in ids[1:]),
                       default=0)
    sim_time = max(runtimes[v].counters.clock_us for v in ids)
    overhead = sim_time / baseline_time if baseline_time > 0 else float("inf")

    metrics = RunMetrics(
        run_id=run_id,
        workload=scn.name,
        ssm=scn.mode == "ssm",
        rsm=scn.mode == "rsm",
        sr=scn.sr,
        latency_us=cost.latency_us,
        seed=scn.seed,
        verdict=verdict.status.value,
        syscalls_total=lead.sensitive + lead.nonsensitive,
        sensitive=lead.sensitive,
        nonsensitive=lead.nonsensitive,
        sync_rtt_leader=lead.sync_rtt,
        sync_rtt_follower=follower_rtt,
        async_msgs=sum(runtimes[v].counters.async_sent for v in ids),
        crossings=sum(runtimes[v].counters.crossings for v in ids),
        stalls=sum(runtimes[v].counters.stalls for v in ids),
        sim_time_us=sim_time,
        baseline_time_us=baseline_time,
        overhead=overhead,
    )

    lane_stats = {}
    for v in ids:
        cb = runtimes[v].cb
        for lane in (cb.outgoing, cb.incoming):
            lane_stats[lane.name] = {
                "pushed": lane.pushed, "popped": lane.popped,
                "drained": lane.drained, "stalls": lane.stalls,
            }

    report = RunReport(
        variant_counters={v: runtimes[v].counters.as_dict() for v in ids},
        arbiter_stats={v: {
            "minted": runtimes[v].arbiter.minted,
            "permits": runtimes[v].arbiter.permits,
            "rejects": runtimes[v].arbiter.rejects,
            "monitor_origin_intercepts": runtimes[v].arbiter.monitor_origin_intercepts,
        } for v in ids},
        security_events=list(control.security_events),
        replicated_by_kind=sum((runtimes[v].dipmon.replicated_by_kind for v in ids),
                               Counter()),
        broadcasts=sum(runtimes[v].dipmon.broadcasts for v in ids),
        notices_sent=sum(runtimes[v].dipmon.notices_sent for v in ids),
        rounds_sensitive=barrier.rounds_sensitive,
        rounds_nonsensitive=barrier.rounds_nonsensitive,
        projections={v: list(barrier.projections[v]) for v in ids},
        fd_tables={v: tuple(sorted(runtimes[v].kernel.fd_table)) for v in ids},
        lane_stats=lane_stats,
        channel_stats=channel.counters.snapshot(),
        log=list(control.log),
        anomalies={v: list(runtimes[v].fmap.anomalies) for v in ids},
        internal_errors=internal_errors,
        naive_switches=naive_switch_count(metrics.async_msgs),
        send_traces=channel.send_traces() if hasattr(channel, "send_traces") else {},
    )
    return RunResult(verdict=verdict, metrics=metrics, report=report)


def run_baseline(scn: ResolvedScenario) -> "tuple[float, int]":
    """Unmonitored single-variant execution; the overhead denominator."""
    kernel = EmulatedKernel(files=dict(scn.files),
                            traffic=TrafficModel(tuple(scn.traffic)))
    program = VariantProgram(scn.program, 0, attack=None)
    clock = 0.0
    count = 0
    while True:
        event = program.next_event()
        if event is None:
            break
        kernel.execute(event)
        clock += scn.cost.syscall_cost_us
        count += 1
        if kernel.exited is not None:
            break
    return clock, count
