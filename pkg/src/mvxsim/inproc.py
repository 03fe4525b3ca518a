'''
The in-process monitor: the fast path for non-sensitive calls.

Each variant runs one of these on its own thread.  A call arrives here only
with a routed one-time token, which is immediately spent back at the
arbiter; a failed check demotes the call to the cross-process path.

Monitoring strictness:
    ssm   leader broadcasts normalized arguments, followers compare
    rsm   no argument exchange at all

Replication policy (asynchronous replication itself is always on; what is
selective is whether a call needs it):
    - process-local kinds always execute on every variant
    - with selective replication, open under the application root and
      setsockopt are answered by prediction and executed locally, and file
      I/O on locally opened app-root files stays local
    - everything else executes on the leader and its result rides the
      communication buffer to the followers, who apply it without executing

The monitor's own traffic uses the comm buffer and connector, never the
intercepted call path, so monitoring costs no extra interceptions and the
arbiter never sees monitor-origin events.
'''

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .arbiter import Arbiter, RestartOutcome, Route
from .filemap import FileMap, Origin
from .kernel import EmulatedKernel, ReplicationMismatch, SyscallResult, apply_replicated
from .lockstep import ForwardToLockstep, RunControl, TerminatedError
from .metrics import CostModel, VariantCounters
from .syscalls import (Issuer, LOCAL_KINDS, SyscallEvent, SyscallKind,
                       canonical_path)
from .transport import (LANE_EOF, CommBuffer, MsgType, WireMessage,
                        pack_payload, unpack_payload)


class Decision(Enum):
    LOCAL_BOTH = "local-both"
    PREDICT_FD = "predict-fd"
    PREDICT_SOCKOPT = "predict-sockopt"
    REPLICATE = "replicate"


@dataclass(frozen=True)
class DipMonConfig:
    mode: str = "rsm"             # "ssm" | "rsm"
    selective_replication: bool = False
    app_root: str = "/app"
    misprediction: str = "retry"  # "retry" | "terminate"
    retry_budget: int = 16


def _under_root(path: Optional[str], root: str) -> bool:
    if path is None:
        return False
    p = canonical_path(path)
    root = canonical_path(root)
    return p == root or p.startswith(root + "/")


def decide_replication(event: SyscallEvent, fmap: FileMap,
                       config: DipMonConfig) -> Decision:
    """Pure decision: how does this non-sensitive call get its result?"""
    kind = event.kind
    if kind in LOCAL_KINDS:
        return Decision.LOCAL_BOTH
    if not config.selective_replication:
        return Decision.REPLICATE
    if kind is SyscallKind.OPEN:
        if _under_root(event.args.path, config.app_root):
            return Decision.PREDICT_FD
        return Decision.REPLICATE
    if kind is SyscallKind.SETSOCKOPT:
        return Decision.PREDICT_SOCKOPT
    if kind is SyscallKind.STAT:
        if _under_root(event.args.path, config.app_root):
            return Decision.LOCAL_BOTH
        return Decision.REPLICATE
    if kind in (SyscallKind.READ, SyscallKind.WRITE):
        meta = fmap.get(event.args.fd) if event.args.fd is not None else None
        if (meta is not None and meta.kind.value == "file"
                and meta.origin is Origin.LOCAL
                and _under_root(meta.path, config.app_root)):
            return Decision.LOCAL_BOTH
        return Decision.REPLICATE
    return Decision.REPLICATE


class InProcessMonitor:
    def __init__(self, variant_id: int, role: str, kernel: EmulatedKernel,
                 fmap: FileMap, arbiter: Arbiter, cb: CommBuffer,
                 control: RunControl, config: DipMonConfig, cost: CostModel,
                 counters: VariantCounters):
        self.variant_id = variant_id
        self.role = role
        self.kernel = kernel
        self.fmap = fmap
        self.arbiter = arbiter
        self.cb = cb
        self.control = control
        self.config = config
        self.cost = cost
        self.counters = counters
        self.replicated_by_kind: Counter = Counter()
        self.broadcasts = 0
        self.notices_sent = 0
        self.notices_seen: list = []
        self._lane_n = 0
        self._last_token = None
        # seq_no -> "token-tamper" | "token-replay", set by attack wiring
        self.token_attacks: dict = {}

    # -- plumbing ---------------------------------------------------------

    def _push(self, msg_type: MsgType, k: int, body: dict) -> None:
        c = self.counters
        c.advance(self.cost.msg_cost_us)
        body = dict(body)
        body["t"] = c.clock_us
        body["n"] = self._lane_n
        self._lane_n += 1
        self.cb.outgoing.push(WireMessage(msg_type, self.variant_id, k,
                                          pack_payload(body)))
        c.async_sent += 1

    def _pop_expected(self, k: int, want: MsgType) -> dict:
        """Next data message for handle index k; skips notice interleaves."""
        c = self.counters
        while True:
            item = self.cb.incoming.pop()
            if item is LANE_EOF:
                self.control.divergence(
                    f"variant {self.variant_id}: replication stream ended "
                    f"while awaiting {want.name} for handle {k}")
                raise TerminatedError("replication stream ended early")
            msg: WireMessage = item
            if msg.msg_type is MsgType.MISPREDICT_NOTICE:
                self.notices_seen.append(unpack_payload(msg))
                continue
            if msg.msg_type is MsgType.TERMINATE:
                self.control.divergence(
                    f"variant {self.variant_id}: peer stream terminated "
                    f"while awaiting {want.name} for handle {k}")
                raise TerminatedError("peer stream terminated early")
            body = unpack_payload(msg)
            if msg.msg_type is not want or msg.seq_no != k:
                self.control.divergence(
                    f"variant {self.variant_id}: stream skew at handle {k}: "
                    f"got {msg.msg_type.name}#{msg.seq_no}, wanted {want.name}#{k}")
                raise TerminatedError("replication stream skew")
            c.async_consumed += 1
            arrival = body["t"] + self.cost.latency_us + self.cost.jitter(
                "async", msg.variant_id, body["n"])
            c.wait_until(arrival)
            c.advance(self.cost.msg_cost_us)
            return body

    def _exec(self, event: SyscallEvent) -> SyscallResult:
        self.control.gate_exec(event.variant_id, event.seq_no, event.kind)
        result = self.kernel.execute(event)
        self.counters.advance(self.cost.syscall_cost_us)
        self.counters.syscalls += 1
        return result

    # -- the restart token dance -------------------------------------------

    def _restart(self, event: SyscallEvent, route: Route) -> None:
        presented = route.token
        attack = self.token_attacks.get(event.seq_no)
        if attack == "token-tamper" and presented is not None:
            presented = presented.forged_copy()
        elif attack == "token-replay":
            presented = self._last_token
        self.counters.advance(self.cost.crossing_cost_us)
        outcome = self.arbiter.verify_restart(event, presented,
                                              Issuer.IN_PROCESS_MONITOR)
        if outcome is RestartOutcome.FORWARD:
            raise ForwardToLockstep(f"seq {event.seq_no}")
        self._last_token = route.token

    # -- main entry ----------------------------------------------------------

    def handle(self, event: SyscallEvent, route: Route) -> SyscallResult:
        self._restart(event, route)
        k = self.counters.handles
        self.counters.handles += 1

        if self.config.mode == "ssm":
            self._strict_exchange(event, k)

        decision = decide_replication(event, self.fmap, self.config)
        if decision is Decision.LOCAL_BOTH:
            result = self._exec(event)
            self.fmap.record(event, result, Origin.LOCAL)
            return result
        if decision is Decision.PREDICT_FD:
            return self._predicted_open(event)
        if decision is Decision.PREDICT_SOCKOPT:
            return self._predicted_sockopt(event)
        return self._replicated(event, k)

    def _strict_exchange(self, event: SyscallEvent, k: int) -> None:
        if self.role == "leader":
            self._push(MsgType.ARG_BROADCAST, k, {
                "kind": event.kind.value,
                "args": event.args.to_wire(),
            })
            self.broadcasts += 1
            return
        body = self._pop_expected(k, MsgType.ARG_BROADCAST)
        theirs = (body["kind"], body["args"])
        ours = (event.kind.value, event.args.to_wire())
        if theirs != ours:
            self.control.divergence(
                f"strict argument mismatch at handle {k}: "
                f"leader={theirs!r} v{self.variant_id}={ours!r}")
            raise TerminatedError("strict argument mismatch")

    # -- replication paths ----------------------------------------------------

    def _replicated(self, event: SyscallEvent, k: int) -> SyscallResult:
        if self.role == "leader":
            result = self._exec(event)
            self.fmap.record(event, result, Origin.LOCAL)
            self._push(MsgType.RESULT_REPLICATION, k, {
                "kind": event.kind.value,
                "result": result.to_wire(),
            })
            self.replicated_by_kind[event.kind.value] += 1
            return result
        body = self._pop_expected(k, MsgType.RESULT_REPLICATION)
        result = SyscallResult.from_wire(body["result"])
        self.control.gate_exec(event.variant_id, event.seq_no, event.kind)
        try:
            applied = apply_replicated(self.kernel, event,
                                       SyscallKind(body["kind"]), result)
        except ReplicationMismatch as exc:
            self.control.divergence(
                f"variant {self.variant_id}: cannot apply replicated result "
                f"at handle {k}: {exc}")
            raise TerminatedError(str(exc)) from None
        self.counters.advance(self.cost.syscall_cost_us)
        self.counters.syscalls += 1
        self.fmap.record(event, applied, Origin.REPLICATED_SHADOW)
        return applied

    def _predicted_open(self, event: SyscallEvent) -> SyscallResult:
        predicted = self.fmap.predict_next_fd()
        result = self._exec(event)
        if result.ok and result.value == predicted:
            self.fmap.record(event, result, Origin.LOCAL)
            return result
        return self._mispredicted(event, SyscallResult(predicted), result,
                                  retryable=not result.ok)

    def _predicted_sockopt(self, event: SyscallEvent) -> SyscallResult:
        predicted = self.fmap.predict_setsockopt(event)
        result = self._exec(event)
        if (result.value, result.errno) == (predicted.value, predicted.errno):
            self.fmap.record(event, result, Origin.LOCAL)
            return result
        return self._mispredicted(event, predicted, result, retryable=True)

    def _mispredicted(self, event: SyscallEvent, predicted: SyscallResult,
                      actual: SyscallResult, retryable: bool) -> SyscallResult:
        """Prediction missed: notify, then retry within budget or terminate.

        A success that landed on the wrong descriptor is structural skew,
        not a transient, so it never retries.
        """
        c = self.counters
        c.mispredictions += 1
        self.notices_sent += 1
        self._push(MsgType.MISPREDICT_NOTICE, event.seq_no, {
            "kind": event.kind.value,
            "predicted": predicted.to_wire(),
            "actual": actual.to_wire(),
        })
        if self.config.misprediction == "retry" and retryable:
            for _ in range(self.config.retry_budget):
                c.retries += 1
                actual = self._exec(event)
                if (actual.value, actual.errno) == (predicted.value,
                                                    predicted.errno):
                    self.fmap.record(event, actual, Origin.LOCAL)
                    return actual
            self.control.terminate(
                f"variant {self.variant_id}: {event.kind.value} misprediction "
                f"outlived the retry budget of {self.config.retry_budget}")
            raise TerminatedError("misprediction retry budget exhausted")
        self.control.terminate(
            f"variant {self.variant_id}: unrecoverable {event.kind.value} "
            f"misprediction (predicted {predicted.value}, got {actual.value})")
        raise TerminatedError("unrecoverable misprediction")

    # -- end of stream ---------------------------------------------------------

    def send_eos(self) -> None:
        """Ordered end-of-stream marker behind all data messages."""
        try:
            self._push(MsgType.TERMINATE, 0, {"reason": "eos"})
        except Exception:
            pass  # teardown already in progress
