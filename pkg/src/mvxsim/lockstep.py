'''
Run verdicts, the shared run control, and the cross-process lockstep monitor.

Sensitive calls rendezvous here.  Every live variant deposits its next
sensitive call; a resolver thread validates that kinds and normalized
arguments agree, then releases the round: result-bearing calls execute on
the leader and their results travel back with the release, everything else
runs locally on each variant after validation.

All release timing is computed from deposited simulated timestamps, so the
outcome does not depend on OS scheduling.  Divergence, missing deposits
after a peer retired, and budget overruns all converge to a single sticky
verdict; once it is set, no further syscalls can enter the run log.
'''

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .kernel import SyscallResult
from .metrics import CostModel, VariantCounters
from .syscalls import IO_RESULT_KINDS, SensitivityClass, SyscallEvent
from .transport import MsgType, SyncLink, WireMessage, pack_payload, unpack_payload


class VerdictStatus(Enum):
    CLEAN = "Clean"
    DIVERGENCE = "Divergence"
    TERMINATED = "Terminated"


@dataclass(frozen=True)
class Verdict:
    status: VerdictStatus
    reason: str = ""
    round_no: Optional[int] = None

    def __str__(self) -> str:
        if self.status is VerdictStatus.CLEAN:
            return "Clean"
        where = f" [round {self.round_no}]" if self.round_no is not None else ""
        return f"{self.status.value}{where}: {self.reason}"


class TerminatedError(Exception):
    """Unwinds a variant thread once the run verdict is set."""


class ForwardToLockstep(Exception):
    """Restart-token verification failed; the call escalates to lockstep."""


class RunControl:
    """Sticky verdict, stop flag, and the ordered execution log.

    The log is the ground truth for containment: every emulated execution
    (local or applied) records itself through gate_exec, which refuses once
    a verdict exists.  The verdict marker is appended atomically with the
    verdict itself, so "nothing executes after the verdict" is a property
    of the log, not of thread timing.
    """

    def __init__(self):
        self.stop = threading.Event()
        self._lock = threading.Lock()
        self._verdict: Optional[Verdict] = None
        self.log: list = []
        self.security_events: list = []
        self._stop_callbacks: list = []

    def add_stop_callback(self, fn: Callable) -> None:
        with self._lock:
            self._stop_callbacks.append(fn)

    def gate_exec(self, variant_id: int, seq_no: int, kind) -> None:
        with self._lock:
            if self._verdict is not None:
                raise TerminatedError(str(self._verdict))
            self.log.append(("exec", variant_id, seq_no, kind.value))

    def divergence(self, reason: str, round_no: Optional[int] = None) -> None:
        self._set(Verdict(VerdictStatus.DIVERGENCE, reason, round_no))

    def terminate(self, reason: str) -> None:
        self._set(Verdict(VerdictStatus.TERMINATED, reason))

    def _set(self, verdict: Verdict) -> None:
        with self._lock:
            if self._verdict is not None:
                return  # first verdict wins
            self._verdict = verdict
            self.log.append(("verdict", verdict.status.value, verdict.reason))
            callbacks = list(self._stop_callbacks)
        self.stop.set()
        for fn in callbacks:
            fn()

    def add_security_event(self, variant_id: int, seq_no: int, reason: str) -> None:
        with self._lock:
            self.security_events.append((variant_id, seq_no, reason))

    @property
    def verdict(self) -> Optional[Verdict]:
        with self._lock:
            return self._verdict

    def final_verdict(self) -> Verdict:
        v = self.verdict
        return v if v is not None else Verdict(VerdictStatus.CLEAN)


@dataclass
class _Submission:
    variant_id: int
    sidx: int
    event: SyscallEvent
    arrival_us: float
    sensitivity: str
    grant: Optional[dict] = None


class LockstepBarrier:
    """Collects one sensitive call per live variant, validates, releases.

    A dedicated resolver thread performs validation so that round outcomes
    are computed in one place, in deposit-content order, never influenced
    by which variant thread happened to arrive last.
    """

    def __init__(self, control: RunControl, variant_ids, leader_id: int,
                 cost: CostModel, wall_timeout_s: float = 20.0,
                 sim_limit_us: float = 5_000_000.0):
        self.control = control
        self.variant_ids = tuple(variant_ids)
        self.leader_id = leader_id
        self.cost = cost
        self.wall_timeout_s = wall_timeout_s
        self.sim_limit_us = sim_limit_us
        self._cond = threading.Condition()
        self._pending: dict = {}
        self._retired: set = set()
        self._awaiting_result: Optional[dict] = None
        self.round_no = 0
        self.rounds_sensitive = 0
        self.rounds_nonsensitive = 0
        self.projections: dict = {v: [] for v in self.variant_ids}
        self._last_activity = time.monotonic()
        control.add_stop_callback(self._wake)
        self._resolver = threading.Thread(target=self._resolve_loop,
                                          name="lockstep-resolver", daemon=True)
        self._resolver.start()

    def _wake(self) -> None:
        with self._cond:
            self._cond.notify_all()

    # -- variant-facing entry points --------------------------------------

    def submit(self, variant_id: int, sidx: int, event: SyscallEvent,
               arrival_us: float, sensitivity: str) -> dict:
        with self._cond:
            if self.control.stop.is_set():
                return self._stopped_grant()
            sub = _Submission(variant_id, sidx, event, arrival_us, sensitivity)
            self._pending[variant_id] = sub
            self._last_activity = time.monotonic()
            self._cond.notify_all()
            while sub.grant is None:
                if self.control.stop.is_set():
                    self._pending.pop(variant_id, None)
                    return self._stopped_grant()
                self._cond.wait(timeout=0.1)
            self._pending.pop(variant_id, None)
            self._cond.notify_all()
            return sub.grant

    def provide_result(self, round_no: int, result: SyscallResult,
                       done_us: float) -> None:
        with self._cond:
            state = self._awaiting_result
            if state is None or state["round_no"] != round_no:
                return  # verdict raced the execution; nothing to release
            for sub in state["followers"]:
                sub.grant = {
                    "action": "apply",
                    "round_no": round_no,
                    "kind": state["kind"],
                    "result": result.to_wire(),
                    "t_release": done_us,
                }
            self._awaiting_result = None
            self._last_activity = time.monotonic()
            self._cond.notify_all()

    def retire(self, variant_id: int) -> None:
        with self._cond:
            self._retired.add(variant_id)
            waiting = sorted(v for v, s in self._pending.items()
                             if s.grant is None)
            if waiting and not self.control.stop.is_set():
                self.control.divergence(
                    f"variant {variant_id} retired while variants {waiting} "
                    f"hold pending sensitive calls", self.round_no)
            self._cond.notify_all()

    def _stopped_grant(self) -> dict:
        v = self.control.final_verdict()
        action = "divergence" if v.status is VerdictStatus.DIVERGENCE else "terminated"
        return {"action": action, "reason": v.reason, "round_no": self.round_no,
                "t_release": 0.0}

    # -- resolver ----------------------------------------------------------

    def _live(self) -> set:
        return set(self.variant_ids) - self._retired

    def _resolve_loop(self) -> None:
        while True:
            with self._cond:
                if self.control.stop.is_set():
                    for sub in self._pending.values():
                        if sub.grant is None:
                            sub.grant = self._stopped_grant()
                    self._cond.notify_all()
                    return
                ready = self._round_ready()
                if ready:
                    self._resolve_round()
                    continue
                waiting = sorted(v for v, s in self._pending.items()
                                 if s.grant is None)
                if waiting and self._retired and self._awaiting_result is None:
                    self.control.divergence(
                        f"variants {waiting} issued a sensitive call after a "
                        f"peer retired", self.round_no)
                    continue
                if waiting and (time.monotonic() - self._last_activity
                                > self.wall_timeout_s):
                    self.control.divergence(
                        f"lockstep round stalled past {self.wall_timeout_s}s "
                        f"wall budget", self.round_no)
                    continue
                self._cond.wait(timeout=0.1)

    def _round_ready(self) -> bool:
        # A round needs every original variant; once somebody retired,
        # any further sensitive call is a count mismatch, not a round.
        if self._retired or self._awaiting_result is not None:
            return False
        fresh = {v for v, s in self._pending.items() if s.grant is None}
        return fresh >= set(self.variant_ids)

    def _resolve_round(self) -> None:
        # Runs under self._cond.
        live = sorted(self._live())
        subs = [self._pending[v] for v in live]
        self.round_no += 1
        rn = self.round_no

        for sub in subs:
            self.projections[sub.variant_id].append(
                (sub.event.kind.value, tuple(sorted(sub.event.args.to_wire().items(),
                                                    key=lambda kv: kv[0]))))

        over = [s for s in subs if s.arrival_us > self.sim_limit_us]
        if over:
            self.control.divergence(
                f"simulated time budget {self.sim_limit_us}us exceeded", rn)
            return

        sidxs = {s.sidx for s in subs}
        if len(sidxs) > 1:
            self.control.divergence(
                "sensitive call index skew: "
                + ", ".join(f"v{s.variant_id}@{s.sidx}" for s in subs), rn)
            return

        views = {s.variant_id: (s.event.kind.value, s.event.args.to_wire())
                 for s in subs}
        first = views[live[0]]
        if any(views[v] != first for v in live[1:]):
            detail = "; ".join(f"v{v}={views[v]!r}" for v in live)
            self.control.divergence(f"lockstep mismatch: {detail}", rn)
            return

        if subs[0].sensitivity == SensitivityClass.SENSITIVE.value:
            self.rounds_sensitive += 1
        else:
            self.rounds_nonsensitive += 1

        t_resolve = max(s.arrival_us for s in subs)
        kind = subs[0].event.kind
        if kind in IO_RESULT_KINDS:
            leader_sub = self._pending.get(self.leader_id)
            if leader_sub is None or leader_sub.grant is not None:
                # Leader already retired; no one can own the result.
                self.control.divergence(
                    f"result-bearing {kind.value} with no live leader", rn)
                return
            followers = [s for s in subs if s.variant_id != self.leader_id]
            self._awaiting_result = {
                "round_no": rn, "followers": followers, "kind": kind.value,
            }
            leader_sub.grant = {
                "action": "exec", "round_no": rn, "t_release": t_resolve,
            }
        else:
            for sub in subs:
                sub.grant = {
                    "action": "local", "round_no": rn, "t_release": t_resolve,
                }
        self._last_activity = time.monotonic()
        self._cond.notify_all()


class LockstepSession:
    """One variant's view of the lockstep monitor.

    The leader calls the barrier directly (it is co-located); followers go
    through a sync link carrying the same submit/release payloads whether
    the link is simulated or TCP.  All resume timestamps come back in the
    release and are applied to the variant's virtual clock here.
    """

    def __init__(self, variant_id: int, role: str, barrier: Optional[LockstepBarrier],
                 link: Optional[SyncLink], cost: CostModel,
                 counters: VariantCounters, control: RunControl):
        self.variant_id = variant_id
        self.role = role
        self.barrier = barrier
        self.link = link
        self.cost = cost
        self.counters = counters
        self.control = control

    def submit(self, event: SyscallEvent, sensitivity: SensitivityClass) -> dict:
        """Deposit one sensitive call; block until released.

        Returns the grant. Raises TerminatedError when the run verdict
        preempts the round.
        """
        c = self.counters
        c.advance(self.cost.crossing_cost_us)  # handoff into the monitor
        c.crossings += 1
        sidx = c.rounds
        c.rounds += 1
        c.sync_rtt += 1
        if sensitivity is SensitivityClass.NON_SENSITIVE:
            c.sync_rtt_nonsensitive += 1

        if self.role == "leader":
            grant = self.barrier.submit(self.variant_id, sidx, event,
                                        c.clock_us, sensitivity.value)
            if grant["action"] in ("divergence", "terminated"):
                raise TerminatedError(grant.get("reason", "stopped"))
            c.wait_until(grant["t_release"])
            return grant

        arrival = c.clock_us + self.cost.latency_us + self.cost.jitter(
            "submit", self.variant_id, sidx)
        request = WireMessage(
            MsgType.LOCKSTEP_SUBMIT, self.variant_id, sidx,
            pack_payload({
                "t": arrival,
                "sidx": sidx,
                "sensitivity": sensitivity.value,
                "event": event.to_wire(),
            }))
        reply = self.link.roundtrip(request)
        if reply.msg_type is not MsgType.LOCKSTEP_RELEASE:
            raise TerminatedError("lockstep link returned a foreign message")
        grant = unpack_payload(reply)
        if grant["action"] in ("divergence", "terminated"):
            raise TerminatedError(grant.get("reason", "stopped"))
        resume = grant["t_release"] + self.cost.latency_us + self.cost.jitter(
            "release", self.variant_id, sidx)
        c.wait_until(resume)
        return grant

    def retire(self) -> None:
        if self.role == "leader":
            self.barrier.retire(self.variant_id)
        else:
            request = WireMessage(MsgType.LOCKSTEP_SUBMIT, self.variant_id, 0,
                                  pack_payload({"retire": True}))
            self.link.roundtrip(request)


def barrier_endpoint(barrier: LockstepBarrier) -> Callable:
    """Server-side handler turning submit frames into release frames."""

    def handle(msg: WireMessage) -> WireMessage:
        body = unpack_payload(msg)
        if body.get("retire"):
            barrier.retire(msg.variant_id)
            return WireMessage(MsgType.LOCKSTEP_RELEASE, msg.variant_id,
                               msg.seq_no, pack_payload({"action": "retired",
                                                         "t_release": 0.0}))
        event = SyscallEvent.from_wire(body["event"])
        grant = barrier.submit(msg.variant_id, body["sidx"], event,
                               body["t"], body["sensitivity"])
        return WireMessage(MsgType.LOCKSTEP_RELEASE, msg.variant_id,
                           msg.seq_no, pack_payload(grant))

    return handle
