'''
mvxsim: a deterministic simulation of distributed multi-variant execution.

Program variants run the same system-call workload on private emulated
kernels while a split monitor checks them against each other: a
cross-process monitor keeps sensitive calls in lockstep, and an in-process
monitor handles the rest with argument exchange and asynchronous result
replication.  Time is simulated, so runs are reproducible bit for bit.

Module map:

    syscalls    call vocabulary, argument normalization, sensitivity policy
    kernel      per-variant emulated kernel (files, sockets, memory)
    workload    workload scripts, loop expansion, attack mutations
    filemap     descriptor metadata and outcome prediction
    arbiter     interception, routing, one-time restart tokens
    transport   wire format, communication buffers, sim/tcp channels
    inproc      in-process monitor (selective monitoring + replication)
    lockstep    cross-process monitor, verdicts, run control
    metrics     counters, cost model, report rows
    runner      wires one run together and reconciles the outcome
    harness     scenario files, repeat runs, CSV reports, benchmark suite
    cli         the `mvx` command
'''

from .syscalls import SyscallKind, SensitivityClass, NormalizedArgs, SyscallEvent
from .lockstep import Verdict, VerdictStatus
from .harness import ScenarioConfig, load_scenario, run_scenario

__version__ = "0.1.0"

__all__ = [
    "SyscallKind",
    "SensitivityClass",
    "NormalizedArgs",
    "SyscallEvent",
    "Verdict",
    "VerdictStatus",
    "ScenarioConfig",
    "load_scenario",
    "run_scenario",
    "__version__",
]
