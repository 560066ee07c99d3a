"""Secure memory controller: verified reads, crash-consistent writes.

Write protocol (one operation at a time):

1. fetch and verify the counter block, bump the block's minor counter
   (re-encrypting the page on minor overflow);
2. encrypt, MAC, recompute the Merkle path and the new root;
3. log the full update to the persistent registers and set READY_BIT;
   the root register changes in the same step;
4. copy the strict tiers to the WPQ (data, then counter, then tree levels)
   and leave relaxed tiers dirty in the metadata caches;
5. clear READY_BIT.  The write is acknowledged here.

Which tiers are strict depends on the policy and on the region of the
address.  A crash between 3 and 5 is repaired by replaying the record.
"""

from __future__ import annotations

from dataclasses import dataclass

from .analytics import PadLedger, RunStats
from .core import (BLOCK_SIZE, BLOCKS_PER_PAGE, IV, MINOR_MAX, NON_PERSISTENT, PERSISTENT,
                   ZERO_BLOCK, ZERO_COUNTER, RegionMap, SplitCounterBlock, block_in_page,
                   bump_counter, check_address, page_index)
from .crypto import KeySet, data_mac, decrypt_block, encrypt_block, mac64
from .devices import (CTR, DATA, DeviceState, RecordEntry, WriteRecord, ctr_meta, data_meta,
                      node_meta)
from .errors import (AddressFault, ConfigError, IntegrityViolation, MajorCounterOverflow,
                     ZeroMacLoopExceeded)
from .merkle import TreeGeometry, build_level, node_slot, set_node_slot, slot_classes

ZERO_MAC_CAP = 64


@dataclass(frozen=True)
class PersistPolicy:
    """``strict``, ``triad`` with persist level P, or ``none``."""

    mode: str = "triad"
    level: int = 1

    def __post_init__(self):
        if self.mode not in ("strict", "triad", "none"):
            raise ConfigError(f"unknown policy mode {self.mode!r}")
        if self.level < 0:
            raise ConfigError("persist level must be >= 0")

    @classmethod
    def parse(cls, text: str) -> "PersistPolicy":
        s = text.strip().lower()
        if s == "strict":
            return cls("strict", 0)
        if s in ("none", "nopersist", "no-persist"):
            return cls("none", 0)
        if s.startswith("triad"):
            _, _, level = s.partition(":")
            try:
                return cls("triad", int(level or 1))
            except ValueError:
                raise ConfigError(f"bad persist level in {text!r}") from None
        raise ConfigError(f"policy {text!r} must be strict, triad:P or none")

    @property
    def label(self) -> str:
        return f"triad:{self.level}" if self.mode == "triad" else self.mode

    def strict_tiers(self, persistent: bool, levels: int) -> tuple[bool, int]:
        """(counter write-through?, highest write-through tree level)."""
        if self.mode == "strict":
            return True, levels
        if self.mode == "triad" and persistent:
            return True, self.level
        return False, 0


class SecureMemoryController:
    def __init__(self, region_map: RegionMap, policy: PersistPolicy, seed: int = 0,
                 wpq_depth: int = 16, counter_cache_bytes: int = 128 * 1024,
                 mt_cache_bytes: int = 128 * 1024, ways: int = 8, pin_top_levels: bool = False,
                 rotate_volatile_key: bool = True, counter_mac=None, device: DeviceState = None,
                 ledger: PadLedger = None, stats: RunStats = None):
        self.region_map = region_map
        self.policy = policy
        self.geometry = TreeGeometry.for_capacity(region_map.capacity)
        if policy.mode == "triad" and policy.level > self.geometry.levels:
            raise ConfigError(f"persist level {policy.level} exceeds the {self.geometry.levels} "
                              "in-memory tree levels of this capacity")
        self.p_slots, self.v_slots = slot_classes(self.geometry, region_map)
        self._v_slot_set = frozenset(self.v_slots)
        self.seed = seed
        base = KeySet(seed)
        self.tree_key = base.tree_key
        self.mac_key = base.mac_key
        self.counter_mac = counter_mac or (lambda raw: mac64(self.tree_key, raw))
        self.pin_top_levels = pin_top_levels
        self.rotate_volatile_key = rotate_volatile_key
        self.ledger = ledger if ledger is not None else PadLedger()
        g = self.geometry
        self._level_base = [0]
        for level in range(g.levels + 1):
            self._level_base.append(self._level_base[-1] + g.used_slots * g.strides[level])
        self.pinned_levels = ({l for l in (g.levels, g.levels - 1) if l >= 1}
                              if pin_top_levels else set())
        self.quarantine: list[tuple[int, int, str]] = []
        if device is None:
            device = DeviceState(stats if stats is not None else RunStats(), wpq_depth,
                                 counter_cache_bytes, mt_cache_bytes, ways)
            self._format(device)
        elif stats is not None:
            device.stats = stats
        self.device = device

    # setup ------------------------------------------------------------------

    def compute_up(self, base_tier: int, base_value, slots=None):
        """Recompute every tier above ``base_tier`` from ``base_value(index)``.

        Returns (nodes {(level, index): bytes}, root {slot: mac}, blocks
        read or hashed).
        """
        g = self.geometry
        if base_tier == 0:
            below = lambda i: self.counter_mac(base_value(i))
        else:
            below = lambda i: mac64(self.tree_key, base_value(i))
        nodes = {}
        for level in range(base_tier + 1, g.levels + 1):
            nodes.update(build_level(g, level, below, slots))
            below = (lambda lvl: lambda i: mac64(self.tree_key, nodes[(lvl, i)]))(level)
        slots = range(g.used_slots) if slots is None else slots
        root = {j: below(j * g.strides[g.levels]) for j in slots}
        work = sum(g.count(t, slots) for t in range(base_tier, g.levels + 1))
        return nodes, root, work

    def build_tree(self, counter_bytes, slots=None):
        nodes, root, _ = self.compute_up(0, counter_bytes, slots)
        return nodes, root

    def _format(self, device: DeviceState) -> None:
        nodes, root = self.build_tree(lambda i: ZERO_BLOCK)
        for (level, index), raw in nodes.items():
            device.nvm.nodes[(level, index)] = raw
        for j, value in root.items():
            device.regs.root[j] = value
        device.regs.pinned = {k: v for k, v in nodes.items() if k[0] in self.pinned_levels}

    @property
    def stats(self) -> RunStats:
        return self.device.stats

    @property
    def keys(self) -> KeySet:
        return KeySet(self.seed, self.device.regs.epoch)

    # helpers ------------------------------------------------------------------

    def region(self, addr: int) -> str:
        check_address(addr, self.region_map.capacity)
        return PERSISTENT if self.region_map.is_persistent(addr) else NON_PERSISTENT

    def select_key(self, addr: int):
        """Key follows counter durability: only regions whose counters may regress use the volatile key."""
        region = self.region(addr)
        keys = self.keys
        if self.policy.mode == "strict":
            return keys.persistent_key
        if self.policy.mode == "none" or region == NON_PERSISTENT:
            return keys.volatile_key
        return keys.persistent_key

    def _lazy_page(self, page: int) -> bool:
        return self.policy.mode == "triad" and self.geometry.slot_of(0, page) in self._v_slot_set

    def node_line(self, level: int, index: int) -> int:
        return self._level_base[level] + index

    def _check_op(self, addr: int) -> None:
        check_address(addr, self.region_map.capacity)
        if addr % BLOCK_SIZE:
            raise AddressFault(f"address {addr:#x} is not 64B aligned")
        for lo, hi, cause in self.quarantine:
            if lo <= addr < hi:
                self.stats.integrity_violations += 1
                raise IntegrityViolation(f"address {addr:#x} unverifiable after recovery ({cause})",
                                         kind="unverifiable", index=addr // BLOCK_SIZE)

    # verified fetches -----------------------------------------------------------

    def _expected_slot(self, level: int, index: int) -> int:
        plevel, pindex, k = self.geometry.parent(level, index)
        if plevel == self.geometry.root_level:
            return self.device.regs.root[k]
        return node_slot(self.fetch_node(plevel, pindex), k)

    def fetch_node(self, level: int, index: int) -> bytes:
        """Tree node, verified up to the first cached (trusted) ancestor."""
        pinned = self.device.regs.pinned.get((level, index)) if self.pinned_levels else None
        if pinned is not None:
            return pinned
        meta = node_meta(level, index)
        line = self.node_line(level, index)
        cached = self.device.mt_cache.lookup(meta, line)
        if cached is not None:
            return cached
        raw, _ = self.device.read_durable(meta)
        self.stats.tree_fetches += 1
        expected = self._expected_slot(level, index)
        if mac64(self.tree_key, raw) != expected:
            plevel, pindex, k = self.geometry.parent(level, index)
            raise IntegrityViolation(f"tree node ({level}, {index}) fails against ({plevel}, {pindex}) slot {k}",
                                     level=plevel, index=pindex)
        self.device.mt_cache.fill(meta, line, raw)
        return raw

    def fetch_counter(self, page: int) -> tuple[SplitCounterBlock, bool]:
        """(counter block, lazily-reset flag).  The flag marks a first touch after lazy recovery."""
        meta = ctr_meta(page)
        cached = self.device.counter_cache.lookup(meta, page)
        if cached is not None:
            return SplitCounterBlock.from_bytes(cached), False
        raw, _ = self.device.read_durable(meta)
        expected = self._expected_slot(0, page)
        if expected == 0 and self._lazy_page(page):
            return ZERO_COUNTER, True
        if self.counter_mac(raw) != expected:
            plevel, pindex, k = self.geometry.parent(0, page)
            raise IntegrityViolation(f"counter block {page} fails against ({plevel}, {pindex}) slot {k}",
                                     level=plevel, index=pindex)
        self.device.counter_cache.fill(meta, page, raw)
        return SplitCounterBlock.from_bytes(raw), False

    def _plaintext(self, page: int, offset: int, ctr: SplitCounterBlock, key, lazy: bool) -> bytes:
        major, minor = ctr.pair(offset)
        if lazy or (major, minor) == (0, 0):
            return ZERO_BLOCK
        block = page * BLOCKS_PER_PAGE + offset
        cipher, mac = self.device.read_durable(data_meta(block))
        iv = IV(page, offset, major, minor)
        if data_mac(self.mac_key, key.material, iv, cipher) != mac:
            raise IntegrityViolation(f"data MAC mismatch at block {block}", level=0, index=block, kind="data")
        return decrypt_block(cipher, key.material, iv)

    # operations ---------------------------------------------------------------

    def read(self, addr: int) -> bytes:
        self._check_op(addr)
        self.stats.reads += 1
        try:
            page, offset = page_index(addr), block_in_page(addr)
            ctr, lazy = self.fetch_counter(page)
            return self._plaintext(page, offset, ctr, self.select_key(addr), lazy)
        except IntegrityViolation:
            self.stats.integrity_violations += 1
            raise

    def write(self, addr: int, plaintext: bytes) -> WriteRecord:
        self._check_op(addr)
        if len(plaintext) != BLOCK_SIZE:
            raise ValueError("plaintext must be 64 bytes")
        self.stats.writes += 1
        try:
            record, pads, key = self._prepare_write(addr, bytes(plaintext))
        except IntegrityViolation:
            self.stats.integrity_violations += 1
            raise
        self.device.regs.log(record)
        for iv in pads:
            self.ledger.record(key, iv)
        self.device.emit("log", record)
        self.flush_record(record)
        self.device.regs.clear()
        self.device.emit("ready-clear")
        return record

    def _prepare_write(self, addr: int, plaintext: bytes):
        g = self.geometry
        page, offset = page_index(addr), block_in_page(addr)
        key = self.select_key(addr)
        old, lazy = self.fetch_counter(page)
        if lazy:
            self.stats.lazy_reinits += 1
        try:
            ctr, overflow = bump_counter(old, offset)
        except MajorCounterOverflow:
            self.stats.rekey_events += 1
            raise
        entries: dict[int, RecordEntry] = {}
        plains: dict[int, bytes] = {}
        pads = []

        def put(j, plain, cause):
            iv = IV(page, j, *ctr.pair(j))
            cipher = encrypt_block(plain, key.material, iv)
            mac = data_mac(self.mac_key, key.material, iv, cipher)
            entries[j] = RecordEntry(data_meta(page * BLOCKS_PER_PAGE + j), cipher, mac, True, cause)
            plains[j] = plain
            pads.append(iv)

        put(offset, plaintext, "data")
        if overflow:
            for j in range(BLOCKS_PER_PAGE):
                if j != offset:
                    put(j, self._plaintext(page, j, old, key, lazy), "reencrypt")

        raw = ctr.to_bytes()
        child_mac = self.counter_mac(raw)
        tries = 0
        while child_mac == 0:
            # a zero slot means "reset by lazy recovery"; never store one for a live counter
            tries += 1
            if tries > ZERO_MAC_CAP:
                raise ZeroMacLoopExceeded(f"counter block {page} kept a zero MAC after {ZERO_MAC_CAP} re-encryptions")
            self.stats.zero_mac_events += 1
            candidates = [(offset + d) % BLOCKS_PER_PAGE for d in range(1, BLOCKS_PER_PAGE)]
            j = next((c for c in candidates if ctr.minors[c] < MINOR_MAX), None)
            if j is None:
                raise ZeroMacLoopExceeded(f"counter block {page}: no minor counter left to bump")
            plain = plains[j] if j in plains else self._plaintext(page, j, ctr, key, lazy)
            ctr, _ = bump_counter(ctr, j)
            put(j, plain, "reencrypt")
            raw = ctr.to_bytes()
            child_mac = self.counter_mac(raw)

        persistent = self.region_map.is_persistent(addr)
        ctr_strict, mt_strict = self.policy.strict_tiers(persistent, g.levels)
        data_entries = [entries[offset]] + [entries[j] for j in sorted(entries) if j != offset]
        record_entries = data_entries + [RecordEntry(ctr_meta(page), raw, 0, ctr_strict, "counter")]

        pinned = {}
        level, index = 0, page
        while level < g.levels:
            plevel, pindex, k = g.parent(level, index)
            node = set_node_slot(self.fetch_node(plevel, pindex), k, child_mac)
            record_entries.append(RecordEntry(node_meta(plevel, pindex), node, 0,
                                              plevel <= mt_strict, f"mt{plevel}"))
            if plevel in self.pinned_levels:
                pinned[(plevel, pindex)] = node
            child_mac = mac64(self.tree_key, node)
            level, index = plevel, pindex
        _, _, slot = g.parent(level, index)
        root = list(self.device.regs.root)
        root[slot] = child_mac
        return WriteRecord(record_entries, tuple(root), pinned), pads, key

    def flush_record(self, record: WriteRecord) -> None:
        """Copy strict entries to the WPQ in record order; relaxed ones stay dirty in cache."""
        dev = self.device
        for e in record.entries:
            kind, level, index = e.meta
            if kind == DATA:
                dev.enqueue(e.meta, e.payload, e.cause, e.mac)
            elif kind == CTR:
                region = PERSISTENT if self.region_map.is_persistent(index * 4096) else NON_PERSISTENT
                dev.counter_cache.write(e.meta, index, e.payload, e.strict, region, cause="counter")
                dev.emit("cache-update", e.meta, durable=False)
            else:
                dev.mt_cache.write(e.meta, self.node_line(level, index), e.payload, e.strict, cause=e.cause)
                dev.emit("cache-update", e.meta, durable=False)

    # logical view (oracle support) ---------------------------------------------

    def logical_counter(self, page: int) -> bytes:
        """Current counter contents: dirty cache line, else WPQ, else NVM (no verification)."""
        cached = self.device.counter_cache.peek(ctr_meta(page), page)
        if cached is not None:
            return cached
        entry = self.device.wpq.latest(ctr_meta(page))
        return entry.payload if entry else self.device.nvm.read(ctr_meta(page))[0]

    def logical_node(self, level: int, index: int) -> bytes:
        meta = node_meta(level, index)
        cached = self.device.mt_cache.peek(meta, self.node_line(level, index))
        if cached is not None:
            return cached
        entry = self.device.wpq.latest(meta)
        return entry.payload if entry else self.device.nvm.read(meta)[0]

    def logical_root(self) -> list[int]:
        return list(self.device.regs.root)
