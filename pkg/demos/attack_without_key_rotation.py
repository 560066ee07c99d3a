"""Why the volatile key must change on every recovery.

Non-persistent counters are written back lazily, so after a crash they
restart from zero.  If the key stayed the same, the next write to an
address would reuse a pad that already left the chip.

Run: python3 demos/attack_without_key_rotation.py
"""

from securenvm.config import SimConfig
from securenvm.recovery import crash_test
from securenvm.workload import TraceOp

ADDR = 0x40000  # in the non-persistent half of the default 64MB memory
trace = [TraceOp("W", ADDR, 1), TraceOp("W", ADDR, 2), TraceOp("R", ADDR)]

for demo in (True, False):
    summary = crash_test(trace, SimConfig(attack_demo=demo))
    label = "static volatile key" if demo else "rotated volatile key"
    print(f"{label}: {summary.points} crash points, {summary.pad_reuse} with pad reuse")
    for verdict in summary.failures[:2]:
        print(f"    crash after event {verdict.event_id} ({verdict.kind}): {verdict.violations[0]}")
