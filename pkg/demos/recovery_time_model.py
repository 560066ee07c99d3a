"""Recovery time versus capacity for each lowest trusted tier.

Run: python3 demos/recovery_time_model.py
"""

from securenvm.analytics import DATA_TIER, analytic_recovery_time, tier_name
from securenvm.core import format_size

TB = 1 << 40
tiers = [DATA_TIER, 0, 1, 2]

print("capacity  " + "".join(f"{tier_name(t):>12}" for t in tiers))
for cap in (TB, 3 * TB, 8 * TB, 64 * TB):
    print(f"{format_size(cap):<10}" + "".join(f"{analytic_recovery_time(cap, t):>11.2f}s" for t in tiers))

speedup = analytic_recovery_time(8 * TB, DATA_TIER) / analytic_recovery_time(8 * TB, 2)
print(f"\nat 8TB, trusting level 2 instead of rebuilding from data is {speedup:.0f}x faster")
