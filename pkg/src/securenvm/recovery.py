"""Post-crash recovery, corruption pinpointing, and crash-point testing.

Recovery order: drain the WPQ, replay the logged write record if READY_BIT
is still set, advance the volatile-key epoch, then rebuild the tree:

* strict: nothing to rebuild; only ECC-flagged blocks are checked.
* triad(P), persistent root slots: read tier P, recompute every tier above
  it and compare with the root register.  On a mismatch, descend one
  persisted tier at a time until the root matches, then report the nodes
  whose stored value differs from the recomputed one.
* triad(P), non-persistent root slots: lazy.  Level-1 nodes become all
  zero and the upper levels are recomputed from them.  Counters and data
  are left alone; a zero parent slot later marks a counter as reset.
* none: every counter and data block is reinitialised (eagerly).
"""

from __future__ import annotations

import csv
import io
import itertools
import random
from dataclasses import dataclass, field

from .analytics import PadLedger
from .core import BLOCK_SIZE, IV, PAGE_SIZE, ZERO_BLOCK, SplitCounterBlock
from .crypto import data_mac, mac64
from .devices import CTR, DATA, NODE, ctr_meta, node_meta
from .errors import CrashInjected, IntegrityViolation, SimulationError
from .merkle import ZERO_NODE, node_slot

VERIFIED, PARTIAL, FAILED = "verified", "partial", "failed"


@dataclass(frozen=True)
class UnverifiableRange:
    start: int
    end: int
    cause: str

    @property
    def size(self) -> int:
        return self.end - self.start


@dataclass
class RecoveryReport:
    policy: str
    outcome: str = VERIFIED
    rebuilt_levels: tuple = ()
    unverifiable: list = field(default_factory=list)
    persistent_work: int = 0
    nonpersistent_work: int = 0
    pinpoint_work: int = 0
    nonpersistent_blocks_touched: int = 0
    wpq_drained: int = 0
    replayed: bool = False
    t_block: float = 100e-9

    @property
    def simulated_work(self) -> int:
        return self.persistent_work + self.nonpersistent_work + self.pinpoint_work

    @property
    def wall_time(self) -> float:
        return self.simulated_work * self.t_block

    FIELDS = ("policy", "outcome", "rebuilt_levels", "replayed", "wpq_drained", "persistent_work",
              "nonpersistent_work", "pinpoint_work", "simulated_work", "wall_time_s",
              "nonpersistent_blocks_touched", "unverifiable")

    def as_dict(self) -> dict:
        levels = f"{self.rebuilt_levels[0]}..{self.rebuilt_levels[1]}" if self.rebuilt_levels else "-"
        return {
            "policy": self.policy, "outcome": self.outcome, "rebuilt_levels": levels,
            "replayed": int(self.replayed), "wpq_drained": self.wpq_drained,
            "persistent_work": self.persistent_work, "nonpersistent_work": self.nonpersistent_work,
            "pinpoint_work": self.pinpoint_work, "simulated_work": self.simulated_work,
            "wall_time_s": f"{self.wall_time:.9f}",
            "nonpersistent_blocks_touched": self.nonpersistent_blocks_touched,
            "unverifiable": ";".join(f"{r.start:#x}-{r.end:#x}:{r.cause}" for r in self.unverifiable),
        }

    def to_text(self) -> str:
        d = self.as_dict()
        lines = [f"{k} {d[k]}" for k in self.FIELDS if k != "unverifiable"]
        lines.append(f"unverifiable {len(self.unverifiable)}")
        lines.extend(f"  range {r.start:#x} {r.end:#x} {r.size} {r.cause}" for r in self.unverifiable)
        return "\n".join(lines) + "\n"

    def to_csv(self, header: bool = True) -> str:
        out = io.StringIO()
        writer = csv.DictWriter(out, fieldnames=self.FIELDS, lineterminator="\n")
        if header:
            writer.writeheader()
        writer.writerow(self.as_dict())
        return out.getvalue()


class _Recovery:
    """One recovery pass over a crashed controller."""

    def __init__(self, ctrl, t_block: float):
        self.ctrl = ctrl
        self.dev = ctrl.device
        self.g = ctrl.geometry
        self.report = RecoveryReport(ctrl.policy.label, t_block=t_block)
        self.np_slots = set(ctrl.v_slots)

    # stored-state access -----------------------------------------------------

    def stored(self, level: int, index: int) -> bytes:
        if level == 0:
            if self.g.slot_of(0, index) in self.np_slots:
                self.report.nonpersistent_blocks_touched += 1
            return self.dev.nvm.read(ctr_meta(index))[0]
        return self.dev.nvm.read(node_meta(level, index))[0]

    def mac_of(self, level: int, raw: bytes) -> int:
        return self.ctrl.counter_mac(raw) if level == 0 else mac64(self.ctrl.tree_key, raw)

    def store_nodes(self, nodes: dict) -> None:
        nvm = self.dev.nvm
        for (level, index), raw in sorted(nodes.items()):
            if nvm.read(node_meta(level, index))[0] != raw:
                self.dev.write_direct(node_meta(level, index), raw)

    def flag(self, level: int, index: int, cause: str) -> None:
        lo, hi = self.g.byte_coverage(level, index)
        self.report.unverifiable.append(UnverifiableRange(lo, hi, cause))

    # pinpointing -------------------------------------------------------------

    def chain_fault(self, level: int, index: int, trusted_level: int, trusted: dict):
        """Walk from a block up to its ancestor at ``trusted_level`` and check top-down.

        ``trusted`` maps (level, index) to trusted node bytes at that level
        (ignored when trusted_level is the root).  Returns the highest
        block whose MAC disagrees with its verified parent, or None.
        """
        chain = [(level, index)]
        while chain[-1][0] < trusted_level:
            plevel, pindex, _ = self.g.parent(*chain[-1])
            chain.append((plevel, pindex))
        values = {}
        for lvl, idx in chain[:-1]:
            values[(lvl, idx)] = self.stored(lvl, idx)
            self.report.pinpoint_work += 1
        for pos in range(len(chain) - 2, -1, -1):
            child = chain[pos]
            plevel, pindex, k = self.g.parent(*child)
            if plevel == self.g.root_level:
                expected = self.dev.regs.root[k]
            elif (plevel, pindex) in values:
                expected = node_slot(values[(plevel, pindex)], k)
            else:
                expected = node_slot(trusted[(plevel, pindex)], k)
            if self.mac_of(child[0], values[child]) != expected:
                return child
        return None

    def check_flagged(self, slots, trusted_level: int, trusted: dict) -> None:
        """ECC-flagged blocks below ``trusted_level`` in ``slots``: flag the ones that fail."""
        slots = set(slots)
        for meta in sorted(self.dev.nvm.flagged):
            kind, level, index = meta
            if kind == DATA:
                self.check_data(index, slots)
                continue
            tier = 0 if kind == CTR else level
            if self.g.slot_of(tier, index) not in slots or tier >= trusted_level:
                continue
            bad = self.chain_fault(tier, index, trusted_level, trusted)
            if bad is not None:
                what = "counter block" if bad[0] == 0 else f"L{bad[0]} node {bad[1]}"
                self.flag(bad[0], bad[1], f"corrupt {what}")

    def check_data(self, block: int, slots) -> None:
        page, offset = divmod(block, PAGE_SIZE // BLOCK_SIZE)
        if self.g.slot_of(0, page) not in slots:
            return
        ctr = SplitCounterBlock.from_bytes(self.dev.nvm.read(ctr_meta(page))[0])
        major, minor = ctr.pair(offset)
        if (major, minor) == (0, 0):
            return
        key = self.ctrl.select_key(block * BLOCK_SIZE)
        cipher, mac = self.dev.nvm.read((DATA, 0, block))
        self.report.pinpoint_work += 1
        if data_mac(self.ctrl.mac_key, key.material, IV(page, offset, major, minor), cipher) != mac:
            lo = block * BLOCK_SIZE
            self.report.unverifiable.append(UnverifiableRange(lo, lo + BLOCK_SIZE, "corrupt data block"))

    # policies ----------------------------------------------------------------

    def strict(self) -> None:
        self.check_flagged(range(self.g.used_slots), self.g.root_level, {})

    def persistent_subtree(self, persist_level: int) -> None:
        ctrl, g = self.ctrl, self.g
        slots = list(ctrl.p_slots)
        if not slots:
            return
        nodes, root, work = ctrl.compute_up(persist_level, lambda i: self.stored(persist_level, i), slots)
        self.report.persistent_work += work
        self.report.rebuilt_levels = (persist_level + 1, g.levels)
        good = [j for j in slots if root[j] == self.dev.regs.root[j]]
        self.store_nodes({k: v for k, v in nodes.items() if g.slot_of(*k) in good})
        trusted_level = persist_level
        # tier P verified for good slots; anything flagged below it is checked against it
        if persist_level > 0:
            trusted = {(persist_level, i): self.stored(persist_level, i)
                       for i in _flagged_ancestors(self, good, persist_level)}
            self.check_flagged(good, trusted_level, trusted)
        for j in slots:
            if j not in good:
                self.repair_slot(j, persist_level)

    def repair_slot(self, slot: int, persist_level: int) -> None:
        """Root slot ``slot`` mismatched when rebuilt from ``persist_level``: descend."""
        ctrl, g = self.ctrl, self.g
        for tier in range(persist_level - 1, -1, -1):
            nodes, root, work = ctrl.compute_up(tier, lambda i: self.stored(tier, i), [slot])
            self.report.pinpoint_work += work
            if root[slot] != self.dev.regs.root[slot]:
                continue
            for (level, index), raw in sorted(nodes.items()):
                if level <= persist_level and self.stored(level, index) != raw:
                    self.flag(level, index, f"corrupt L{level} node {index}")
            self.store_nodes(nodes)
            if tier > 0:
                trusted = {(tier, i): self.stored(tier, i) for i in g.level_indices(tier, [slot])}
                self.check_flagged([slot], tier, trusted)
            return
        self.localize_with_pins(slot)

    def localize_with_pins(self, slot: int) -> None:
        ctrl, g = self.ctrl, self.g
        pin_level = min(ctrl.pinned_levels) if ctrl.pinned_levels else None
        if pin_level is None:
            self.flag(g.root_level, slot, "root mismatch with no lower persisted tier")
            self.report.outcome = FAILED
            return
        nodes, _, work = ctrl.compute_up(0, lambda i: self.stored(0, i), [slot])
        self.report.pinpoint_work += work
        pins = self.dev.regs.pinned
        bad = [k for k in sorted(nodes) if k[0] == pin_level and nodes[k] != pins.get(k)]
        for level, index in bad:
            self.flag(level, index, f"subtree under pinned L{level} node {index} mismatched")
        bad_ranges = [g.coverage(*k) for k in bad]
        keep = {}
        for (level, index), raw in nodes.items():
            if level >= pin_level:
                keep[(level, index)] = pins.get((level, index), raw)
                continue
            lo, hi = g.coverage(level, index)
            if not any(blo <= lo and hi <= bhi for blo, bhi in bad_ranges):
                keep[(level, index)] = raw
        self.store_nodes(keep)

    def lazy_nonpersistent(self) -> None:
        lazy_recover_nonpersistent(self.ctrl, self.report)

    def eager(self) -> None:
        """No persistence: reinitialise every counter and data block."""
        ctrl, g = self.ctrl, self.g
        nvm = self.dev.nvm
        blocks = ctrl.region_map.capacity // BLOCK_SIZE
        nvm.data.clear()
        nvm.counters.clear()
        self.dev.stats.nvm_writes["recovery"] += blocks + g.counter_block_count
        self.dev.durable_version += 1
        nodes, root, _ = ctrl.compute_up(0, lambda i: ZERO_BLOCK)
        self.store_nodes(nodes)
        for j, value in root.items():
            self.dev.regs.root[j] = value
        self.dev.regs.pinned = {k: v for k, v in nodes.items() if k[0] in ctrl.pinned_levels}
        self.report.nonpersistent_work = blocks + g.levels + 1
        self.report.rebuilt_levels = (1, g.levels)


def _flagged_ancestors(rec: _Recovery, slots, level: int):
    """Indices at ``level`` that are ancestors of flagged blocks in ``slots``."""
    out = set()
    for kind, lvl, index in rec.dev.nvm.flagged:
        tier = 0 if kind == CTR else (lvl if kind == NODE else None)
        if kind == DATA or tier >= level:
            continue
        if rec.g.slot_of(tier, index) not in slots:
            continue
        while tier < level:
            tier, index, _ = rec.g.parent(tier, index)
        out.add(index)
    return out


def lazy_recover_nonpersistent(ctrl, report: RecoveryReport = None) -> RecoveryReport:
    """Zero the level-1 nodes of every non-persistent root slot and recompute above them."""
    g = ctrl.geometry
    dev = ctrl.device
    report = report or RecoveryReport(ctrl.policy.label)
    slots = list(ctrl.v_slots)
    if not slots:
        return report
    if g.levels == 0:
        for j in slots:
            dev.regs.root[j] = 0
        return report
    nodes, root, work = ctrl.compute_up(1, lambda i: ZERO_NODE, slots)
    nodes.update({(1, i): ZERO_NODE for i in g.level_indices(1, slots)})
    for (level, index), raw in sorted(nodes.items()):
        if dev.nvm.read(node_meta(level, index))[0] != raw:
            dev.write_direct(node_meta(level, index), raw)
    for j, value in root.items():
        dev.regs.root[j] = value
    for key in list(dev.regs.pinned):
        if key in nodes:
            dev.regs.pinned[key] = nodes[key]
    report.nonpersistent_work += work
    return report


def recover(ctrl, t_block: float = 100e-9, after_drain=None) -> RecoveryReport:
    """Bring a crashed controller back to a consistent, verifiable state.

    ``after_drain(device)`` runs once the write queue has reached NVM, which
    is where injected media faults belong.
    """
    dev = ctrl.device
    dev.counter_cache.clear()
    dev.mt_cache.clear()
    rec = _Recovery(ctrl, t_block)
    report = rec.report
    report.wpq_drained = dev.drain()
    if after_drain is not None:
        after_drain(dev)
    regs = dev.regs
    if regs.ready and regs.record is not None:
        for e in regs.record.entries:
            if e.strict:
                dev.enqueue(e.meta, e.payload, "replay", e.mac)
        dev.drain()
        report.replayed = True
    regs.clear()
    if ctrl.rotate_volatile_key:
        regs.epoch += 1
    ctrl.quarantine = []
    mode = ctrl.policy.mode
    if mode == "strict":
        rec.strict()
    elif mode == "triad":
        rec.persistent_subtree(ctrl.policy.level)
        rec.lazy_nonpersistent()
    else:
        rec.eager()
    dev.nvm.flagged.clear()
    if report.unverifiable and report.outcome == VERIFIED:
        report.outcome = PARTIAL
    ctrl.quarantine = [(r.start, r.end, r.cause) for r in report.unverifiable]
    dev.stats.recoveries += 1
    dev.durable_version += 1
    return report


# crash-point testing -----------------------------------------------------------

class _Timeline:
    """Shared history of one instrumented run; crash points index into it."""

    def __init__(self, base, ledger):
        self.base = base
        self.journal = []
        self.ledger = ledger

    def device(self, journal_len: int, wpq, regs):
        dev = self.base.durable_copy()
        nvm = dev.nvm
        for meta, payload, mac, count in self.journal[:journal_len]:
            nvm.write(meta, payload, mac, count)
        dev.wpq.entries.extend(wpq)
        dev.regs = regs.copy()
        return dev

    def pad_ledger(self, seen: int, duplicates: int) -> PadLedger:
        out = PadLedger()
        out.seen = dict(itertools.islice(self.ledger.seen.items(), seen))
        out.duplicates = self.ledger.duplicates[:duplicates]
        return out


@dataclass
class CrashPoint:
    """Durable state right after event ``event_id`` (0 = before the trace)."""

    event_id: int
    kind: str
    op_index: int
    version: int
    expected: dict
    written: tuple
    _timeline: _Timeline = field(repr=False)
    _state: tuple = field(repr=False)

    def device(self):
        journal_len, wpq, regs, _, _ = self._state
        return self._timeline.device(journal_len, wpq, regs)

    def ledger(self) -> PadLedger:
        _, _, _, seen, dups = self._state
        return self._timeline.pad_ledger(seen, dups)


@dataclass
class CrashVerdict:
    event_id: int
    kind: str
    op_index: int
    report: RecoveryReport
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


class _Tracker:
    """Follows acknowledged writes through the event stream."""

    def __init__(self, ctrl):
        self.ctrl = ctrl
        self.acked: dict[int, bytes] = {}
        self.pending = None
        self.current = None
        self.written: dict[int, None] = {}

    def on_event(self, kind: str) -> None:
        if self.current is None:
            return
        addr, plain = self.current
        if kind == "log":
            self.written[addr] = None
            if self.ctrl.region_map.is_persistent(addr):
                self.pending = (addr, plain)
        elif kind == "ready-clear":
            if self.pending is not None:
                self.acked[addr] = plain
            self.pending = None

    def expected(self) -> dict:
        out = dict(self.acked)
        if self.pending is not None:
            out[self.pending[0]] = self.pending[1]
        return out


def _apply(ctrl, op) -> None:
    if op.kind == "W":
        ctrl.write(op.addr, op.payload)
    else:
        ctrl.read(op.addr)


def crash_point_enumerate(trace, config):
    """Every event boundary of one run of ``trace``.

    Points between which nothing durable changed share their state (and
    their ``version``).
    """
    ctrl = config.build()
    dev = ctrl.device
    timeline = _Timeline(dev.durable_copy(), ctrl.ledger)
    dev.nvm.journal = timeline.journal
    tracker = _Tracker(ctrl)
    last = {"version": None}
    points = []
    op_index = -1

    def snapshot(event_id, kind):
        if dev.durable_version != last["version"]:
            last["version"] = dev.durable_version
            last["state"] = (len(timeline.journal), tuple(dev.wpq.entries), dev.regs.copy(),
                             len(ctrl.ledger.seen), len(ctrl.ledger.duplicates))
            last["expected"] = tracker.expected()
            last["written"] = tuple(tracker.written)
        points.append(CrashPoint(event_id, kind, op_index, last["version"], last["expected"],
                                 last["written"], timeline, last["state"]))

    def hook(event_id, kind, detail):
        tracker.on_event(kind)
        snapshot(event_id, kind)

    snapshot(0, "initial")
    yield from points
    points.clear()
    dev.hook = hook
    try:
        for op_index, op in enumerate(trace):
            tracker.current = (op.addr, op.payload) if op.kind == "W" else None
            _apply(ctrl, op)
            yield from points
            points.clear()
    finally:
        dev.hook = None
        dev.nvm.journal = None


def probe_payload(i: int) -> bytes:
    return (b"probe%08d" % i).ljust(BLOCK_SIZE, b"\xa5")


def check_crash_point(point: CrashPoint, config, probe: bool = True) -> CrashVerdict:
    """Crash at ``point``, recover, and check data recovery and pad uniqueness."""
    dev = point.device()
    ctrl = config.build(device=dev, ledger=point.ledger())
    dev.crash()
    report = recover(ctrl, config.t_block, config.apply_faults)
    violations = []
    if report.outcome != VERIFIED:
        violations.append(f"recovery {report.outcome}: "
                          + ", ".join(f"{r.start:#x}+{r.size}" for r in report.unverifiable))
    for addr, plain in sorted(point.expected.items()):
        try:
            got = ctrl.read(addr)
        except IntegrityViolation as exc:
            violations.append(f"persistent {addr:#x}: integrity violation ({exc})")
            continue
        if got != plain:
            violations.append(f"persistent {addr:#x}: lost acknowledged write")
    if probe:
        before = len(ctrl.ledger.duplicates)
        for i, addr in enumerate(point.written):
            try:
                ctrl.write(addr, probe_payload(i))
            except SimulationError as exc:
                violations.append(f"probe write {addr:#x}: {type(exc).__name__}: {exc}")
        for name, iv in ctrl.ledger.duplicates[before:]:
            violations.append(f"pad reuse: key {name} iv {tuple(iv)}")
    return CrashVerdict(point.event_id, point.kind, point.op_index, report, violations)


@dataclass
class CrashTestSummary:
    points: int = 0
    distinct_states: int = 0
    verdicts: list = field(default_factory=list)

    @property
    def failures(self) -> list:
        return [v for v in self.verdicts if not v.ok]

    @property
    def pad_reuse(self) -> int:
        return sum(1 for v in self.verdicts for msg in v.violations if msg.startswith("pad reuse"))

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_text(self) -> str:
        lines = [f"crash points {self.points}", f"distinct durable states {self.distinct_states}",
                 f"violating points {len(self.failures)}", f"pad reuse violations {self.pad_reuse}"]
        for v in self.failures:
            for msg in v.violations:
                lines.append(f"  point {v.event_id} ({v.kind}, op {v.op_index}): {msg}")
        lines.append("PASS" if self.ok else "FAIL")
        return "\n".join(lines) + "\n"


def crash_test(trace, config, mode="exhaustive", samples: int = 0, seed: int = 0,
               probe: bool = True) -> CrashTestSummary:
    """Check every crash point (or ``samples`` random ones, or one event id)."""
    trace = list(trace)
    points = list(crash_point_enumerate(trace, config))
    if mode == "random":
        rng = random.Random(seed)
        points = sorted(rng.sample(points, min(samples, len(points))), key=lambda p: p.event_id)
    elif isinstance(mode, int):
        points = [p for p in points if p.event_id == mode]
        if not points:
            raise SimulationError(f"trace has no event {mode}")
    summary = CrashTestSummary(points=len(points))
    cache = {}
    for point in points:
        key = point.version
        if key not in cache:
            cache[key] = check_crash_point(point, config, probe)
        v = cache[key]
        summary.verdicts.append(CrashVerdict(point.event_id, point.kind, point.op_index, v.report,
                                             v.violations))
    summary.distinct_states = len(cache)
    return summary


def run_with_crash(trace, config, event_id: int):
    """Live crash: abort at ``event_id``, recover, and finish the trace.

    The interrupted operation is dropped.  Returns (controller, report).
    """
    ctrl = config.build()
    dev = ctrl.device

    def hook(eid, kind, detail):
        if eid == event_id:
            raise CrashInjected(eid)

    dev.hook = hook
    report = None
    trace = list(trace)
    i = 0
    if event_id == 0:
        dev.hook = None
        dev.crash()
        report = recover(ctrl, config.t_block, config.apply_faults)
    while i < len(trace):
        try:
            _apply(ctrl, trace[i])
        except CrashInjected:
            dev.hook = None
            dev.crash()
            report = recover(ctrl, config.t_block, config.apply_faults)
        i += 1
    dev.hook = None
    return ctrl, report
