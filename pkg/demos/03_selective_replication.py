"""
Selective replication and descriptor prediction
===============================================

By default every descriptor-returning call executes once on the leader and
its result is replicated to the followers, one message per call.  With
selective replication, opens under the application root and socket-option
calls are predicted locally instead: both variants compute the same result
from their own descriptor maps and no message is sent.
"""

import os

from mvxsim.filemap import FileMap
from mvxsim.harness import load_scenario, run_scenario
from mvxsim.kernel import EmulatedKernel
from mvxsim.syscalls import Issuer, SyscallEvent, SyscallKind, normalize

BENCH = os.path.join(os.path.dirname(os.path.abspath(__file__)),
                     "..", "scenarios", "bench")

# 1000 open/close pairs under /app: replication traffic with and without
# the optimization.
cfg = load_scenario(os.path.join(BENCH, "open_heavy.scenario"))
cfg.mode = "rsm"
for sr in (False, True):
    cfg.sr = sr
    res = run_scenario(cfg, run_id=f"sr={int(sr)}")
    rep = res.report.replicated_by_kind
    print(f"selective_replication={str(sr):5}  verdict={res.verdict}  "
          f"replicated opens={rep.get('open', 0):4d}  "
          f"async messages={res.metrics.async_msgs:4d}  "
          f"overhead={res.metrics.overhead:.3f}x")

# The prediction rule is the kernel's own allocation rule: smallest free
# integer, with 0..2 preoccupied.  Walk one descriptor history by hand.
kernel = EmulatedKernel()
fmap = FileMap()


def run(kind, **kw):
    e = SyscallEvent(0, 0, kind, normalize(kind, **kw), Issuer.APPLICATION)
    predicted = fmap.predict_next_fd() if kind is not SyscallKind.CLOSE else None
    res = kernel.execute(e)
    fmap.record(e, res)
    return predicted, res.value


print("\ndescriptor prediction against the kernel:")
for step in (
    dict(kind=SyscallKind.OPEN, path="/app/a", flags=("create",)),
    dict(kind=SyscallKind.OPEN, path="/app/b", flags=("create",)),
    dict(kind=SyscallKind.SOCKET),
    dict(kind=SyscallKind.CLOSE, fd=4),
    dict(kind=SyscallKind.OPEN, path="/app/c", flags=("create",)),  # reuses 4
    dict(kind=SyscallKind.SOCKET),
):
    predicted, got = run(**step)
    kind = step["kind"].value
    if predicted is None:
        print(f"  {kind:7} fd={step.get('fd')}")
    else:
        mark = "ok" if predicted == got else "MISPREDICT"
        print(f"  {kind:7} predicted={predicted} kernel={got}  {mark}")
