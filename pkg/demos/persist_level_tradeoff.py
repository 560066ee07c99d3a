"""Runtime write cost against recovery work as more tree levels persist.

Run: python3 demos/persist_level_tradeoff.py
"""

from securenvm.config import SimConfig
from securenvm.controller import PersistPolicy
from securenvm.recovery import recover
from securenvm.workload import bundled, generate, replay

base = SimConfig()
ops = generate(bundled("stride-256-r2"), base.region_map)
levels = base.geometry.levels

print(f"{'policy':<10}{'nvm writes':>12}{'strict meta':>13}{'recovery blocks':>17}")
for mode in ["strict"] + [f"triad:{p}" for p in range(levels, -1, -1)] + ["none"]:
    cfg = base.replace(policy=PersistPolicy.parse(mode))
    ctrl = cfg.build()
    replay(ops, ctrl)
    writes, meta = ctrl.stats.total_writes, ctrl.stats.metadata_strict_writes
    ctrl.device.crash()
    report = recover(ctrl)
    print(f"{mode:<10}{writes:>12}{meta:>13}{report.simulated_work:>17}")
