'''
The mvx command.

    mvx run   --scenario <file> [--policy <file>] [--ssm|--rsm] [--sr]
              [--channel sim:<latency_us>|tcp:<port>] [--seed N]
              [--repeat N] [--attack <spec>] [--out <csv>]
    mvx bench --suite <dir> [--channel ...] [--seed N] [--out <csv>]

Exit codes: 0 clean, 2 divergence, 3 terminated, 64 configuration error;
bench exits 1 when an asserted overhead ordering is violated.
'''

from __future__ import annotations

import argparse
import sys
from typing import Optional

from .harness import (ConfigError, bench_suite, emit_report, load_policy,
                      load_scenario, run_repeated)
from .lockstep import VerdictStatus
from .workload import ScenarioFormatError, parse_attack

EXIT_CLEAN = 0
EXIT_ORDERING = 1
EXIT_DIVERGENCE = 2
EXIT_TERMINATED = 3
EXIT_CONFIG = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors are config errors here
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mvx", description="multi-variant execution simulator")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario", add_help=True)
    run.add_argument("--scenario", required=True, help="scenario file")
    run.add_argument("--policy", help="sensitivity policy file (overrides scenario)")
    mode = run.add_mutually_exclusive_group()
    mode.add_argument("--ssm", action="store_true",
                      help="strict selective monitoring (argument exchange)")
    mode.add_argument("--rsm", action="store_true",
                      help="relaxed selective monitoring")
    run.add_argument("--sr", action="store_true",
                     help="selective replication (needs --ssm or --rsm)")
    run.add_argument("--channel", default="sim:50",
                     help="sim:<latency_us> or tcp:<port>[:<latency_us>]")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--repeat", type=int, default=3)
    run.add_argument("--attack", help="attack spec, e.g. extra:mprotect@1:5")
    run.add_argument("--out", help="write per-run metrics CSV here")
    run.add_argument("--quiet", action="store_true")

    bench = sub.add_parser("bench", help="run a scenario suite in all modes")
    bench.add_argument("--suite", required=True, help="directory of .scenario files")
    bench.add_argument("--channel", help="override channel for every scenario")
    bench.add_argument("--seed", type=int)
    bench.add_argument("--out", help="write bench rows CSV here")
    return p


def cmd_run(args) -> int:
    config = load_scenario(args.scenario)
    if args.policy:
        config.policy = load_policy(args.policy)
    if args.ssm:
        config.mode = "ssm"
    elif args.rsm:
        config.mode = "rsm"
    else:
        config.mode = "none"
    config.sr = bool(args.sr)
    config.channel = args.channel
    config.seed = args.seed
    config.repeat = args.repeat
    if args.attack:
        try:
            config.attack = parse_attack(args.attack)
        except ScenarioFormatError as exc:
            raise ConfigError(str(exc)) from None
    config.validate()

    results = run_repeated(config)
    if args.out:
        emit_report([r.metrics for r in results], args.out)
    worst = VerdictStatus.CLEAN
    for r in results:
        m = r.metrics
        if not args.quiet:
            print(f"{m.run_id}: {r.verdict} "
                  f"(calls={m.syscalls_total} sensitive={m.sensitive} "
                  f"async={m.async_msgs} rtt={m.sync_rtt_leader} "
                  f"sim_time={m.sim_time_us:.1f}us overhead={m.overhead:.3f})")
        if r.verdict.status is VerdictStatus.DIVERGENCE:
            worst = VerdictStatus.DIVERGENCE
        elif (r.verdict.status is VerdictStatus.TERMINATED
              and worst is not VerdictStatus.DIVERGENCE):
            worst = VerdictStatus.TERMINATED
    return {VerdictStatus.CLEAN: EXIT_CLEAN,
            VerdictStatus.DIVERGENCE: EXIT_DIVERGENCE,
            VerdictStatus.TERMINATED: EXIT_TERMINATED}[worst]


def cmd_bench(args) -> int:
    report = bench_suite(args.suite, channel=args.channel, seed=args.seed)
    print(report.render())
    if args.out:
        import csv as _csv
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = _csv.writer(fh)
            w.writerow(("scenario", "config", "verdict", "sim_time_us", "overhead"))
            for r in report.rows:
                w.writerow((r.scenario, r.label, r.verdict,
                            f"{r.sim_time_us:.3f}", f"{r.overhead:.3f}"))
    return EXIT_ORDERING if report.violations else EXIT_CLEAN


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "run":
            return cmd_run(args)
        return cmd_bench(args)
    except ConfigError as exc:
        print(f"mvx: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
