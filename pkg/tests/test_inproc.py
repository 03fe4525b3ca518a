"""In-process monitor: replication decisions and misprediction recovery."""

import pytest

from conftest import config_from_text
from mvxsim.filemap import FileMap
from mvxsim.harness import run_scenario
from mvxsim.inproc import Decision, DipMonConfig, decide_replication
from mvxsim.kernel import Errno, SyscallResult
from mvxsim.lockstep import VerdictStatus
from mvxsim.syscalls import Issuer, SyscallEvent, SyscallKind, normalize


def ev(kind, **norm_kwargs):
    return SyscallEvent(0, 0, kind, normalize(kind, **norm_kwargs),
                        Issuer.APPLICATION)


def decide(event, fmap=None, sr=True, **cfg_kwargs):
    config = DipMonConfig(selective_replication=sr, **cfg_kwargs)
    return decide_replication(event, fmap or FileMap(), config)


def fmap_with_open(path, fd=3):
    fmap = FileMap()
    fmap.record(ev(SyscallKind.OPEN, path=path, flags=("rd",)),
                SyscallResult(fd))
    return fmap


def fmap_with_socket(fd=3):
    fmap = FileMap()
    fmap.record(ev(SyscallKind.SOCKET), SyscallResult(fd))
    return fmap


# -- replication decisions -------------------------------------------------


def test_local_kinds_never_replicate():
    for kind in (SyscallKind.GETCWD, SyscallKind.BRK, SyscallKind.EXIT):
        assert decide(ev(kind), sr=False) is Decision.LOCAL_BOTH
        assert decide(ev(kind), sr=True) is Decision.LOCAL_BOTH


def test_close_stays_local_even_without_selective_replication():
    # Each variant retires its own descriptor; no message needed.
    event = ev(SyscallKind.CLOSE, fd=3)
    assert decide(event, sr=False) is Decision.LOCAL_BOTH
    assert decide(event, sr=True) is Decision.LOCAL_BOTH


def test_without_selective_replication_io_replicates():
    assert decide(ev(SyscallKind.OPEN, path="/app/f"), sr=False) \
        is Decision.REPLICATE
    assert decide(ev(SyscallKind.SETSOCKOPT, fd=3, symbols=("sol_socket", "rcvbuf"),
                     numbers=(4096,)), sr=False) is Decision.REPLICATE
    assert decide(ev(SyscallKind.STAT, path="/app/f"), sr=False) \
        is Decision.REPLICATE


def test_open_under_app_root_predicts_fd():
    assert decide(ev(SyscallKind.OPEN, path="/app/logs/x")) is Decision.PREDICT_FD
    assert decide(ev(SyscallKind.OPEN, path="/app/../app/f")) is Decision.PREDICT_FD


def test_open_outside_app_root_replicates():
    assert decide(ev(SyscallKind.OPEN, path="/etc/passwd")) is Decision.REPLICATE
    # Path escape from under the root must not predict.
    assert decide(ev(SyscallKind.OPEN, path="/app/../etc/passwd")) \
        is Decision.REPLICATE
    assert decide(ev(SyscallKind.OPEN, path="/apple/f")) is Decision.REPLICATE


def test_setsockopt_predicts_from_descriptor_map():
    event = ev(SyscallKind.SETSOCKOPT, fd=3, symbols=("sol_socket", "rcvbuf"),
               numbers=(4096,))
    assert decide(event) is Decision.PREDICT_SOCKOPT


def test_stat_under_root_is_local_and_outside_replicates():
    assert decide(ev(SyscallKind.STAT, path="/app/cfg.ini")) is Decision.LOCAL_BOTH
    assert decide(ev(SyscallKind.STAT, path="/var/run/x")) is Decision.REPLICATE


def test_read_on_local_app_file_stays_local():
    fmap = fmap_with_open("/app/data.txt")
    assert decide(ev(SyscallKind.READ, fd=3, numbers=(64,)), fmap) \
        is Decision.LOCAL_BOTH
    assert decide(ev(SyscallKind.WRITE, fd=3, data=b"x"), fmap) \
        is Decision.LOCAL_BOTH


def test_read_on_file_outside_root_replicates():
    fmap = fmap_with_open("/var/log/app.log")
    assert decide(ev(SyscallKind.READ, fd=3, numbers=(64,)), fmap) \
        is Decision.REPLICATE


def test_read_on_socket_or_unknown_fd_replicates():
    assert decide(ev(SyscallKind.READ, fd=3, numbers=(64,)), fmap_with_socket()) \
        is Decision.REPLICATE
    assert decide(ev(SyscallKind.READ, fd=9, numbers=(64,)), FileMap()) \
        is Decision.REPLICATE


def test_custom_app_root_moves_the_boundary():
    event = ev(SyscallKind.OPEN, path="/srv/site/f")
    assert decide(event, app_root="/srv/site") is Decision.PREDICT_FD
    assert decide(event, app_root="/app") is Decision.REPLICATE


# -- misprediction recovery (full runs) -------------------------------------

SOCKOPT_WL = """
call socket
call connect fd=3 addr=private:9090
call setsockopt fd=3 level=sol_socket opt=rcvbuf value=4096
call setsockopt fd=3 level=sol_socket opt=sndbuf value=4096
call setsockopt fd=3 level=sol_socket opt=reuseaddr value=1
call close fd=3
"""

OPEN_WL = """
call open path=/app/cfg.ini
call close fd=3
"""


def fault_third_sockopt(variant_id, kernel):
    if variant_id == 1:
        kernel.inject_fault(SyscallKind.SETSOCKOPT, Errno.EINVAL, nth=3)


def test_sockopt_misprediction_retries_to_clean():
    cfg = config_from_text(SOCKOPT_WL, mode="rsm", sr=True,
                           misprediction="retry",
                           kernel_setup=fault_third_sockopt)
    res = run_scenario(cfg, run_id="t")
    assert res.verdict.status is VerdictStatus.CLEAN
    follower = res.report.variant_counters[1]
    assert follower["mispredictions"] == 1
    assert follower["retries"] == 1
    assert res.report.notices_sent == 1
    leader = res.report.variant_counters[0]
    assert leader["mispredictions"] == 0


def test_sockopt_misprediction_terminates_when_configured():
    cfg = config_from_text(SOCKOPT_WL, mode="rsm", sr=True,
                           misprediction="terminate",
                           kernel_setup=fault_third_sockopt)
    res = run_scenario(cfg, run_id="t")
    assert res.verdict.status is VerdictStatus.TERMINATED
    assert "unrecoverable setsockopt misprediction" in res.verdict.reason


def test_retry_budget_exhaustion_terminates():
    def fault_forever(variant_id, kernel):
        if variant_id == 1:
            kernel.inject_fault(SyscallKind.SETSOCKOPT, Errno.EINVAL,
                                nth=1, once=False)

    cfg = config_from_text(SOCKOPT_WL, mode="rsm", sr=True,
                           misprediction="retry", retry_budget=2,
                           kernel_setup=fault_forever)
    res = run_scenario(cfg, run_id="t")
    assert res.verdict.status is VerdictStatus.TERMINATED
    assert "misprediction" in res.verdict.reason
    assert res.report.variant_counters[1]["retries"] == 2


def test_wrong_fd_open_success_terminates_without_retry():
    # The follower got a working descriptor with the wrong number; retrying
    # would leak it, so this is fatal regardless of the retry policy.
    def skew_fd_table(variant_id, kernel):
        if variant_id == 1:
            kernel.reserve_fd(3)

    cfg = config_from_text(OPEN_WL, mode="rsm", sr=True,
                           misprediction="retry",
                           files={"/app/cfg.ini": b"key=value\n"},
                           kernel_setup=skew_fd_table)
    res = run_scenario(cfg, run_id="t")
    assert res.verdict.status is VerdictStatus.TERMINATED
    assert "unrecoverable open misprediction (predicted 3, got 4)" \
        in res.verdict.reason
    assert res.report.variant_counters[1]["retries"] == 0


def test_clean_predicted_run_sends_no_notices():
    cfg = config_from_text(SOCKOPT_WL, mode="rsm", sr=True)
    res = run_scenario(cfg, run_id="t")
    assert res.verdict.status is VerdictStatus.CLEAN
    assert res.report.notices_sent == 0
    for v in (0, 1):
        assert res.report.variant_counters[v]["mispredictions"] == 0
