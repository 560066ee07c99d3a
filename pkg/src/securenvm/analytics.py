"""Run statistics, the pad ledger, the analytic recovery-time model, reports.

Recovery-time model
-------------------
Recovery reads the lowest trusted tier and reads-or-hashes every tier above
it up to (not including) the on-chip root, one unit per 64B block at
``t_block`` seconds (100ns by default).  Tier sizes come from the same
geometry the simulator uses, so for large memories the total is the
familiar geometric sum ``count(lowest) * 8/7``.

The data tier is the no-persistence case: every data block is visited once
to reinitialise it (data, MAC and its counter slot).  The counters are then
all identical, so each tree tier is uniform and costs one hash, adding
``levels + 1`` units.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field

from .core import BLOCK_SIZE, PAGE_SIZE, ROOT_SLOTS
from .errors import ConfigError
from .merkle import TreeGeometry

DATA_TIER = -1
COUNTER_TIER = 0
T_BLOCK = 100e-9

WRITE_CAUSES = ("data", "reencrypt", "counter", "mt", "writeback", "replay", "recovery")


@dataclass
class RunStats:
    nvm_writes: Counter = field(default_factory=Counter)
    nvm_reads: int = 0
    latency_ns: int = 0
    wpq_stalls: int = 0
    reads: int = 0
    writes: int = 0
    tree_fetches: int = 0
    crashes: int = 0
    recoveries: int = 0
    rekey_events: int = 0
    zero_mac_events: int = 0
    lazy_reinits: int = 0
    integrity_violations: int = 0

    def count_write(self, cause: str) -> None:
        self.nvm_writes[cause] += 1

    @property
    def total_writes(self) -> int:
        return sum(self.nvm_writes.values())

    def mt_writes(self) -> int:
        return sum(n for c, n in self.nvm_writes.items() if c.startswith("mt"))

    @property
    def metadata_strict_writes(self) -> int:
        """Counter and tree-node writes issued as strict (write-through) persists."""
        return self.nvm_writes["counter"] + self.mt_writes()

    def by_cause(self) -> dict[str, int]:
        out = {c: 0 for c in WRITE_CAUSES}
        for cause, n in self.nvm_writes.items():
            out["mt" if cause.startswith("mt") else cause] += n
        return out

    def copy(self) -> "RunStats":
        new = RunStats(**{k: v for k, v in self.__dict__.items() if k != "nvm_writes"})
        new.nvm_writes = Counter(self.nvm_writes)
        return new


class PadLedger:
    """Every (key material, IV) pair that ever produced ciphertext leaving the chip."""

    def __init__(self):
        self.seen: dict[tuple[int, tuple], str] = {}
        self.duplicates: list[tuple[str, tuple]] = []

    def __len__(self):
        return len(self.seen)

    def record(self, key, iv) -> bool:
        """Insert; returns False and logs a duplicate if the pad was used before."""
        k = (key.material, tuple(iv))
        if k in self.seen:
            self.duplicates.append((key.name, tuple(iv)))
            return False
        self.seen[k] = key.name
        return True

    def copy(self) -> "PadLedger":
        new = PadLedger()
        new.seen = dict(self.seen)
        new.duplicates = list(self.duplicates)
        return new


def _slots_for(geometry: TreeGeometry, persistent_eighths):
    if persistent_eighths is None:
        return None
    if not 0 <= persistent_eighths <= ROOT_SLOTS:
        raise ConfigError(f"ratio {persistent_eighths}:{ROOT_SLOTS - persistent_eighths} invalid")
    return range(geometry.used_slots - persistent_eighths, geometry.used_slots)


def tier_counts(capacity: int, persistent_eighths=None) -> dict[int, int]:
    """Blocks per tier: DATA_TIER, counters (0) and tree levels 1..levels."""
    if capacity % PAGE_SIZE:
        raise ConfigError("capacity must be a multiple of 4KB")
    geometry = TreeGeometry.for_capacity(capacity)
    slots = _slots_for(geometry, persistent_eighths)
    share = capacity if persistent_eighths is None else capacity // ROOT_SLOTS * persistent_eighths
    out = {DATA_TIER: share // BLOCK_SIZE}
    for level in range(geometry.levels + 1):
        out[level] = geometry.count(level, slots)
    return out


def recovery_blocks(capacity: int, lowest_tier: int, persistent_eighths=None) -> int:
    """Blocks read or hashed when rebuilding from ``lowest_tier``."""
    if capacity == 0:
        return 0
    counts = tier_counts(capacity, persistent_eighths)
    levels = max(counts)
    if lowest_tier == DATA_TIER:
        return counts[DATA_TIER] + (levels + 1 if counts[DATA_TIER] else 0)
    if not 0 <= lowest_tier <= levels:
        raise ConfigError(f"tier {lowest_tier} outside 0..{levels} for this capacity")
    return sum(counts[t] for t in range(lowest_tier, levels + 1))


def analytic_recovery_time(capacity: int, lowest_tier: int, ratio=None, t_block: float = T_BLOCK) -> float:
    """Seconds to rebuild the tree from ``lowest_tier``.

    ``ratio`` (p, n) or p restricts the count to the persistent region.
    """
    if isinstance(ratio, tuple):
        ratio = ratio[0]
    return recovery_blocks(capacity, lowest_tier, ratio) * t_block


def parse_tier(text) -> int:
    s = str(text).strip().lower()
    if s in ("data", "-1"):
        return DATA_TIER
    if s in ("counters", "counter", "ctr", "0"):
        return COUNTER_TIER
    if s.startswith("l") or s.startswith("mt"):
        s = s.lstrip("mtl")
    try:
        tier = int(s)
    except ValueError:
        raise ConfigError(f"unknown tier {text!r}") from None
    if tier < DATA_TIER:
        raise ConfigError(f"unknown tier {text!r}")
    return tier


def tier_name(tier: int) -> str:
    return {DATA_TIER: "data", COUNTER_TIER: "counters"}.get(tier, f"L{tier}")


# reports ------------------------------------------------------------------

CSV_COLUMNS = ("policy", "capacity", "ratio", "workload", "ops", "reads", "writes",
               "w_data", "w_reencrypt", "w_counter", "w_mt", "w_writeback", "w_replay",
               "w_recovery", "w_total", "metadata_strict", "counter_hits", "counter_misses",
               "mt_hits", "mt_misses", "latency_ns", "wpq_stalls", "pads", "pad_duplicates",
               "crashes", "recoveries", "state_hash")


def report_row(stats: RunStats, info: dict) -> dict:
    causes = stats.by_cause()
    row = {c: info.get(c, "") for c in CSV_COLUMNS}
    row.update(
        reads=stats.reads, writes=stats.writes,
        w_data=causes["data"], w_reencrypt=causes["reencrypt"], w_counter=causes["counter"],
        w_mt=causes["mt"], w_writeback=causes["writeback"], w_replay=causes["replay"],
        w_recovery=causes["recovery"], w_total=stats.total_writes,
        metadata_strict=stats.metadata_strict_writes,
        latency_ns=stats.latency_ns, wpq_stalls=stats.wpq_stalls,
        crashes=stats.crashes, recoveries=stats.recoveries,
    )
    return row


def emit_report(rows, fmt: str = "text", config_echo=None) -> str:
    """Render rows from ``report_row`` as CSV or as an aligned text report."""
    if isinstance(rows, dict):
        rows = [rows]
    if fmt == "csv":
        out = io.StringIO()
        writer = csv.DictWriter(out, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
        return out.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    lines = []
    if config_echo:
        lines.append("# config")
        lines.extend(f"{k} = {v}" for k, v in config_echo.items())
        lines.append("")
    for i, row in enumerate(rows):
        if i:
            lines.append("")
        width = max(len(c) for c in CSV_COLUMNS)
        lines.extend(f"{c.ljust(width)}  {row[c]}" for c in CSV_COLUMNS)
    return "\n".join(lines) + "\n"


def model_rows(capacities, tiers, ratio=None, t_block: float = T_BLOCK) -> list[dict]:
    rows = []
    for cap in capacities:
        for tier in tiers:
            blocks = recovery_blocks(cap, tier, ratio)
            rows.append({"capacity_bytes": cap, "tier": tier_name(tier), "blocks": blocks,
                         "seconds": f"{blocks * t_block:.6f}"})
    return rows
