"""
Divergence detection and containment
====================================

Two variants run the same workload on private emulated kernels.  Here one
variant is compromised: its script opens a different path at position 0.
Under strict monitoring the argument exchange catches the mismatch, the
run verdict turns sticky, and the execution log proves that nothing ran
after the verdict.  The benign twin of the same run stays clean.
"""

import os

from mvxsim.harness import load_scenario, run_scenario
from mvxsim.workload import parse_attack

BENCH = os.path.join(os.path.dirname(os.path.abspath(__file__)),
                     "..", "scenarios", "bench")

cfg = load_scenario(os.path.join(BENCH, "open_micro.scenario"))
cfg.mode = "ssm"

# The attack grammar: perturb the path argument of call 0 on variant 1.
cfg.attack = parse_attack("perturb:path:x@1:0")
attacked = run_scenario(cfg, run_id="attacked")
print("attacked run :", attacked.verdict)

# Containment: walk the ordered execution log and count anything that
# managed to execute after the verdict marker was appended.
after = 0
seen_verdict = False
for entry in attacked.report.log:
    if entry[0] == "verdict":
        seen_verdict = True
    elif seen_verdict and entry[0] == "exec":
        after += 1
print(f"executions after the verdict: {after}")
assert after == 0

# The same configuration without the attack is clean.
cfg.attack = None
benign = run_scenario(cfg, run_id="benign")
print("benign twin  :", benign.verdict)
print(f"calls={benign.metrics.syscalls_total} "
      f"sensitive={benign.metrics.sensitive} "
      f"overhead={benign.metrics.overhead:.3f}x")

# A token attack is caught by the restart check instead: the tampered
# presentation is rejected, logged, and escalated until verdicts collide.
cfg.mode, cfg.sr = "rsm", True
cfg.attack = parse_attack("token-tamper@1:5")
tampered = run_scenario(cfg, run_id="tampered")
print("\ntoken tamper :", tampered.verdict)
for variant, seq, reason in tampered.report.security_events:
    print(f"  security event: variant {variant} call {seq}: {reason}")
