"""
Call routing and one-time restart tokens
========================================

Every intercepted call is routed either to the cross-process rendezvous or
to the variant's in-process monitor.  In-process routes carry a one-time
token; when the call restarts at the kernel boundary, the token must check
out or the call is escalated and a security event is recorded.
"""

from mvxsim.arbiter import Arbiter, RestartOutcome, RouteTarget
from mvxsim.filemap import FileMap
from mvxsim.lockstep import RunControl
from mvxsim.metrics import VariantCounters
from mvxsim.syscalls import (DEFAULT_POLICY, Issuer, SyscallEvent,
                             SyscallKind, normalize)

control = RunControl()
arbiter = Arbiter(variant_id=0, policy=DEFAULT_POLICY, fmap=FileMap(),
                  selective=True, seed=7,
                  counters=VariantCounters(variant_id=0), control=control)


def event(kind, seq, **kw):
    return SyscallEvent(0, seq, kind, normalize(kind, **kw),
                        Issuer.APPLICATION)


# A memory call is non-sensitive: it stays in-process and gets a token.
brk = event(SyscallKind.BRK, seq=0, numbers=(4096,))
route = arbiter.intercept(brk)
print(f"brk        -> {route.target.value:14} token={route.token is not None}")

# A memory-permission call is sensitive no matter what: it must cross.
mprot = event(SyscallKind.MPROTECT, seq=1, numbers=(1,))
route_x = arbiter.intercept(mprot)
print(f"mprotect   -> {route_x.target.value:14} token={route_x.token is not None}")
assert route_x.target is RouteTarget.CROSS_PROCESS

# The token permits the restarted call exactly once.
mon = Issuer.IN_PROCESS_MONITOR
print("\nfirst use :", arbiter.verify_restart(brk, route.token, mon).value)
print("replay    :", arbiter.verify_restart(brk, route.token, mon).value)

# A tampered copy never permits, and the attempt is logged.
fresh = event(SyscallKind.BRK, seq=2, numbers=(4096,))
route2 = arbiter.intercept(fresh)
forged = route2.token.forged_copy()
print("forged    :", arbiter.verify_restart(fresh, forged, mon).value)
assert arbiter.verify_restart(fresh, route2.token, mon) is RestartOutcome.PERMIT

print("\nsecurity events recorded:")
for variant, seq, reason in control.security_events:
    print(f"  variant {variant} call {seq}: {reason}")
print(f"\nminted={arbiter.minted} permits={arbiter.permits} "
      f"rejects={arbiter.rejects}")
