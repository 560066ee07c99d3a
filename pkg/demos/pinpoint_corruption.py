"""How far a single corrupted block spreads after recovery.

Run: python3 demos/pinpoint_corruption.py
"""

from securenvm.config import SimConfig, parse_fault
from securenvm.controller import PersistPolicy
from securenvm.devices import Fault, node_meta
from securenvm.recovery import recover
from securenvm.workload import SyntheticSpec, generate, replay

MB = 1 << 20
cap = 64 * MB
page = cap // 2 + 3 * 4096
l1 = SimConfig().geometry.parent(0, page // 4096)[1]

cases = [
    ("triad:1", "counter block", parse_fault(f"counter {page:#x} 5", cap), False),
    ("triad:1", "level-1 node", Fault(node_meta(1, l1), 77), False),
    ("triad:0", "counter block", parse_fault(f"counter {page:#x} 5", cap), False),
    ("triad:0", "counter block, pinned top levels", parse_fault(f"counter {page:#x} 5", cap), True),
]
for mode, what, fault, pin in cases:
    cfg = SimConfig(policy=PersistPolicy.parse(mode), pin_top_levels=pin)
    ctrl = cfg.build()
    replay(generate(SyntheticSpec("persistent", 64, 0, 300, seed=3), cfg.region_map), ctrl)
    ctrl.device.crash()
    report = recover(ctrl, after_drain=cfg.replace(faults=(fault,)).apply_faults)
    spans = ", ".join(f"{r.size // 1024}KB ({r.cause})" for r in report.unverifiable)
    print(f"{mode:<8} {what:<34} -> {report.outcome}: {spans}")
