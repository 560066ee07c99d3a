"""Hardware state: NVM array, metadata caches, WPQ, persistent registers.

Durable: NvmArray, WritePendingQueue, PersistentRegisters (which include
the root register and the volatile-key epoch).  Volatile: the counter
cache and the Merkle-tree cache.  ``DeviceState.crash`` wipes exactly the
volatile part.

Every durable location has a metadata address ``(kind, level, index)``:
``(DATA, 0, block)``, ``(CTR, 0, page)`` or ``(NODE, level, index)``.
"""

from __future__ import annotations

import hashlib
import io
import struct
from collections import Counter, OrderedDict, deque
from dataclasses import dataclass, field

from .core import BLOCK_SIZE, ROOT_SLOTS, ZERO_BLOCK

DATA, CTR, NODE = 0, 1, 2
KIND_NAMES = {DATA: "data", CTR: "counter", NODE: "node"}

READ_NS = 60
WRITE_NS = 150


def data_meta(block: int):
    return (DATA, 0, block)


def ctr_meta(page: int):
    return (CTR, 0, page)


def node_meta(level: int, index: int):
    return (NODE, level, index)


class NvmArray:
    """Durable array.  Unwritten data blocks and counters read as zeros."""

    def __init__(self):
        self.data: dict[int, tuple[bytes, int]] = {}
        self.counters: dict[int, bytes] = {}
        self.nodes: dict[tuple[int, int], bytes] = {}
        self.write_count: Counter = Counter()
        self.flagged: set = set()
        self.journal: list | None = None

    @property
    def total_writes(self) -> int:
        return sum(self.write_count.values())

    def read(self, meta) -> tuple[bytes, int]:
        kind, level, index = meta
        if kind == DATA:
            return self.data.get(index, (ZERO_BLOCK, 0))
        if kind == CTR:
            return self.counters.get(index, ZERO_BLOCK), 0
        return self.nodes.get((level, index), ZERO_BLOCK), 0

    def write(self, meta, payload: bytes, mac: int = 0, count: bool = True) -> None:
        kind, level, index = meta
        if kind == DATA:
            self.data[index] = (payload, mac)
        elif kind == CTR:
            self.counters[index] = payload
        else:
            self.nodes[(level, index)] = payload
        if count:
            self.write_count[meta] += 1
        if self.journal is not None:
            self.journal.append((meta, payload, mac, count))

    def copy(self) -> "NvmArray":
        new = NvmArray()
        new.data = dict(self.data)
        new.counters = dict(self.counters)
        new.nodes = dict(self.nodes)
        new.write_count = Counter(self.write_count)
        new.flagged = set(self.flagged)
        return new


@dataclass
class WpqEntry:
    meta: tuple
    payload: bytes
    mac: int = 0
    cause: str = "data"


class WritePendingQueue:
    """Bounded FIFO inside the persistence domain."""

    def __init__(self, depth: int = 16):
        if depth < 1:
            raise ValueError("WPQ depth must be at least 1")
        self.depth = depth
        self.entries: deque[WpqEntry] = deque()

    def __len__(self):
        return len(self.entries)

    @property
    def full(self) -> bool:
        return len(self.entries) >= self.depth

    def latest(self, meta):
        for entry in reversed(self.entries):
            if entry.meta == meta:
                return entry
        return None

    def copy(self) -> "WritePendingQueue":
        new = WritePendingQueue(self.depth)
        new.entries = deque(self.entries)
        return new


@dataclass
class RecordEntry:
    meta: tuple
    payload: bytes
    mac: int = 0
    strict: bool = True
    cause: str = "data"


@dataclass
class WriteRecord:
    """Everything one write changes, logged before any copy to the WPQ."""

    entries: list[RecordEntry]
    root: tuple[int, ...]
    pinned: dict = field(default_factory=dict)


class PersistentRegisters:
    """Processor-side durable state: write record + READY_BIT, root, epoch."""

    def __init__(self):
        self.ready = False
        self.record: WriteRecord | None = None
        self.root = [0] * ROOT_SLOTS
        self.pinned: dict[tuple[int, int], bytes] = {}
        self.epoch = 0

    @staticmethod
    def slots_required(persist_level: int) -> int:
        """Data, counter, one per strictly persisted tree level, and the root."""
        return 2 + persist_level + 1

    def log(self, record: WriteRecord) -> None:
        self.record = record
        self.root = list(record.root)
        self.pinned.update(record.pinned)
        self.ready = True

    def clear(self) -> None:
        self.ready = False
        self.record = None

    def copy(self) -> "PersistentRegisters":
        new = PersistentRegisters()
        new.ready = self.ready
        new.record = self.record
        new.root = list(self.root)
        new.pinned = dict(self.pinned)
        new.epoch = self.epoch
        return new


class MetadataCache:
    """Set-associative LRU cache of 64B metadata lines.

    ``sink(meta, payload, cause)`` receives write-through writes and dirty
    evictions; DeviceState wires it to the WPQ.
    """

    def __init__(self, name: str, size_bytes: int = 128 * 1024, ways: int = 8, sink=None):
        lines = size_bytes // BLOCK_SIZE
        if lines < ways or lines % ways:
            raise ValueError(f"{name}: {size_bytes}B cannot hold whole {ways}-way sets")
        self.name = name
        self.ways = ways
        self.num_sets = lines // ways
        self.sets = [OrderedDict() for _ in range(self.num_sets)]
        self.sink = sink
        self.hits = 0
        self.misses = 0
        self.evictions = 0
        self.writebacks = 0

    def __len__(self):
        return sum(len(s) for s in self.sets)

    def _set(self, line_addr: int) -> OrderedDict:
        return self.sets[line_addr % self.num_sets]

    def lookup(self, meta, line_addr: int):
        """Payload on hit (LRU touched), None on miss."""
        s = self._set(line_addr)
        line = s.get(meta)
        if line is None:
            self.misses += 1
            return None
        self.hits += 1
        s.move_to_end(meta)
        return line[0]

    def peek(self, meta, line_addr: int):
        line = self._set(line_addr).get(meta)
        return None if line is None else line[0]

    def is_dirty(self, meta, line_addr: int) -> bool:
        line = self._set(line_addr).get(meta)
        return bool(line and line[1])

    def fill(self, meta, line_addr: int, payload: bytes, dirty: bool = False, region: str = "") -> None:
        s = self._set(line_addr)
        if meta in s:
            line = s[meta]
            s[meta] = [payload, dirty or line[1], region or line[2]]
            s.move_to_end(meta)
            return
        if len(s) >= self.ways:
            victim, (vpayload, vdirty, _) = s.popitem(last=False)
            self.evictions += 1
            if vdirty:
                self.writebacks += 1
                if self.sink:
                    self.sink(victim, vpayload, "writeback")
        s[meta] = [payload, dirty, region]

    def write(self, meta, line_addr: int, payload: bytes, write_through: bool, region: str = "",
              cause: str = "") -> None:
        """Update a line.  Write-through sends it to the sink now and leaves it clean."""
        self.fill(meta, line_addr, payload, dirty=False, region=region)
        line = self._set(line_addr)[meta]
        if write_through:
            line[1] = False
            if self.sink:
                self.sink(meta, payload, cause or "write-through")
        else:
            line[1] = True

    def access(self, meta, line_addr: int, intent: str, policy: str = "write-back", payload=None):
        """Single-call form: returns (hit, evictions this call caused)."""
        before = self.evictions
        hit = self.lookup(meta, line_addr) is not None
        if intent == "write":
            self.write(meta, line_addr, payload if payload is not None else ZERO_BLOCK,
                       write_through=(policy == "write-through"))
        elif not hit:
            self.fill(meta, line_addr, payload if payload is not None else ZERO_BLOCK)
        return hit, self.evictions - before

    def clear(self) -> None:
        for s in self.sets:
            s.clear()

    def dirty_lines(self):
        for s in self.sets:
            for meta, (payload, dirty, _) in s.items():
                if dirty:
                    yield meta, payload


@dataclass(frozen=True)
class Fault:
    meta: tuple
    bit: int
    flagged: bool = True


class FaultInjector:
    """Deterministic bit flips applied to NVM contents.

    Flagged faults model errors that ECC detects but cannot correct; the
    recovery procedure is told about them.
    """

    def __init__(self, faults=()):
        self.faults = list(faults)

    @staticmethod
    def flip(nvm: NvmArray, meta, bit: int) -> None:
        payload, mac = nvm.read(meta)
        if bit < 8 * BLOCK_SIZE:
            raw = bytearray(payload)
            raw[bit // 8] ^= 1 << (bit % 8)
            payload = bytes(raw)
        elif meta[0] == DATA and bit < 8 * BLOCK_SIZE + 64:
            mac ^= 1 << (bit - 8 * BLOCK_SIZE)
        else:
            raise ValueError(f"bit {bit} outside block {meta}")
        nvm.write(meta, payload, mac, count=False)

    def apply(self, nvm: NvmArray) -> None:
        for f in self.faults:
            self.flip(nvm, f.meta, f.bit)
            if f.flagged:
                nvm.flagged.add(f.meta)


class DeviceState:
    """All hardware state plus the event stream used for crash points.

    ``hook(event_id, kind, detail)`` runs after every event; it may raise
    CrashInjected to abort the operation in progress.
    """

    def __init__(self, stats, wpq_depth: int = 16, counter_cache_bytes: int = 128 * 1024,
                 mt_cache_bytes: int = 128 * 1024, ways: int = 8,
                 read_ns: int = READ_NS, write_ns: int = WRITE_NS):
        self.stats = stats
        self.nvm = NvmArray()
        self.wpq = WritePendingQueue(wpq_depth)
        self.regs = PersistentRegisters()
        self.counter_cache = MetadataCache("counter", counter_cache_bytes, ways, sink=self.enqueue)
        self.mt_cache = MetadataCache("merkle", mt_cache_bytes, ways, sink=self.enqueue)
        self.read_ns = read_ns
        self.write_ns = write_ns
        self.hook = None
        self.event_id = 0
        self.durable_version = 0

    # events ---------------------------------------------------------------

    def emit(self, kind: str, detail=None, durable: bool = True) -> None:
        self.event_id += 1
        if durable:
            self.durable_version += 1
        if self.hook is not None:
            self.hook(self.event_id, kind, detail)

    # durable access -------------------------------------------------------

    def read_durable(self, meta) -> tuple[bytes, int]:
        entry = self.wpq.latest(meta)
        if entry is not None:
            return entry.payload, entry.mac
        self.stats.nvm_reads += 1
        self.stats.latency_ns += self.read_ns
        return self.nvm.read(meta)

    def _drain_one(self) -> None:
        entry = self.wpq.entries.popleft()
        self.nvm.write(entry.meta, entry.payload, entry.mac)
        self.stats.latency_ns += self.write_ns

    def enqueue(self, meta, payload: bytes, cause: str, mac: int = 0) -> None:
        if self.wpq.full:
            self.stats.wpq_stalls += 1
            self._drain_one()
            self.emit("wpq-drain", meta)
        self.wpq.entries.append(WpqEntry(meta, payload, mac, cause))
        self.stats.count_write(cause)
        self.emit("wpq-enqueue", (cause, meta))

    def drain(self) -> int:
        n = len(self.wpq)
        while self.wpq.entries:
            self._drain_one()
        if n:
            self.emit("wpq-drain-all", n)
        return n

    def write_direct(self, meta, payload: bytes, cause: str = "recovery", mac: int = 0) -> None:
        """Recovery-time write that bypasses the WPQ."""
        self.nvm.write(meta, payload, mac)
        self.stats.count_write(cause)
        self.stats.latency_ns += self.write_ns
        self.durable_version += 1

    # crash ----------------------------------------------------------------

    def crash(self) -> "DeviceState":
        self.counter_cache.clear()
        self.mt_cache.clear()
        self.stats.crashes += 1
        return self

    def durable_copy(self) -> "DeviceState":
        """A new device sharing nothing mutable, with cold caches."""
        new = DeviceState.__new__(DeviceState)
        new.stats = self.stats.copy()
        new.nvm = self.nvm.copy()
        new.wpq = self.wpq.copy()
        new.regs = self.regs.copy()
        new.counter_cache = MetadataCache("counter", self.counter_cache.num_sets * self.counter_cache.ways * BLOCK_SIZE,
                                          self.counter_cache.ways, sink=new.enqueue)
        new.mt_cache = MetadataCache("merkle", self.mt_cache.num_sets * self.mt_cache.ways * BLOCK_SIZE,
                                     self.mt_cache.ways, sink=new.enqueue)
        new.read_ns = self.read_ns
        new.write_ns = self.write_ns
        new.hook = None
        new.event_id = self.event_id
        new.durable_version = self.durable_version
        return new

    # hashing / snapshots --------------------------------------------------

    def durable_bytes(self) -> bytes:
        return dump_snapshot(self)

    def durable_hash(self) -> str:
        return hashlib.sha256(self.durable_bytes()).hexdigest()

    def full_hash(self) -> str:
        h = hashlib.sha256(self.durable_bytes())
        for cache in (self.counter_cache, self.mt_cache):
            for s in cache.sets:
                for meta, (payload, dirty, _) in s.items():
                    h.update(repr(meta).encode())
                    h.update(payload)
                    h.update(b"D" if dirty else b"C")
        return h.hexdigest()


# Snapshot format ------------------------------------------------------------
#
# b"SNVMSNAP" u16 version, then tagged sections in fixed order, each
# 4-byte tag + u64 entry count.  All integers little-endian.

SNAP_MAGIC = b"SNVMSNAP"
SNAP_VERSION = 1
_META = struct.Struct("<BBQ")
_U64 = struct.Struct("<Q")


def _w_meta(out, meta):
    out.write(_META.pack(*meta))


def _r_meta(buf):
    return _META.unpack(buf.read(_META.size))


def _w_str(out, s: str):
    raw = s.encode()
    out.write(struct.pack("<B", len(raw)))
    out.write(raw)


def _r_str(buf) -> str:
    (n,) = struct.unpack("<B", buf.read(1))
    return buf.read(n).decode()


def _section(out, tag: bytes, count: int):
    out.write(tag)
    out.write(_U64.pack(count))


def _expect(buf, tag: bytes) -> int:
    got = buf.read(4)
    if got != tag:
        raise ValueError(f"snapshot: expected section {tag!r}, found {got!r}")
    return _U64.unpack(buf.read(8))[0]


def dump_snapshot(dev: DeviceState) -> bytes:
    out = io.BytesIO()
    out.write(SNAP_MAGIC)
    out.write(struct.pack("<H", SNAP_VERSION))
    nvm = dev.nvm
    _section(out, b"DATA", len(nvm.data))
    for block in sorted(nvm.data):
        payload, mac = nvm.data[block]
        out.write(_U64.pack(block) + payload + _U64.pack(mac))
    _section(out, b"CTRS", len(nvm.counters))
    for page in sorted(nvm.counters):
        out.write(_U64.pack(page) + nvm.counters[page])
    _section(out, b"NODE", len(nvm.nodes))
    for level, index in sorted(nvm.nodes):
        out.write(struct.pack("<B", level) + _U64.pack(index) + nvm.nodes[(level, index)])
    _section(out, b"WCNT", len(nvm.write_count))
    for meta in sorted(nvm.write_count):
        _w_meta(out, meta)
        out.write(_U64.pack(nvm.write_count[meta]))
    _section(out, b"FLAG", len(nvm.flagged))
    for meta in sorted(nvm.flagged):
        _w_meta(out, meta)
    _section(out, b"WPQ ", len(dev.wpq))
    out.write(_U64.pack(dev.wpq.depth))
    for e in dev.wpq.entries:
        _w_meta(out, e.meta)
        out.write(e.payload + _U64.pack(e.mac))
        _w_str(out, e.cause)
    regs = dev.regs
    _section(out, b"REGS", 1)
    out.write(struct.pack("<BQ", regs.ready, regs.epoch))
    out.write(struct.pack("<8Q", *regs.root))
    out.write(_U64.pack(len(regs.pinned)))
    for level, index in sorted(regs.pinned):
        out.write(struct.pack("<B", level) + _U64.pack(index) + regs.pinned[(level, index)])
    rec = regs.record
    out.write(struct.pack("<B", rec is not None))
    if rec is not None:
        out.write(struct.pack("<8Q", *rec.root))
        out.write(_U64.pack(len(rec.pinned)))
        for level, index in sorted(rec.pinned):
            out.write(struct.pack("<B", level) + _U64.pack(index) + rec.pinned[(level, index)])
        out.write(_U64.pack(len(rec.entries)))
        for e in rec.entries:
            _w_meta(out, e.meta)
            out.write(e.payload + _U64.pack(e.mac) + struct.pack("<B", e.strict))
            _w_str(out, e.cause)
    return out.getvalue()


def load_snapshot(blob: bytes, stats, **device_kwargs) -> DeviceState:
    """Rebuild a DeviceState (cold caches) from ``dump_snapshot`` output."""
    buf = io.BytesIO(blob)
    if buf.read(8) != SNAP_MAGIC:
        raise ValueError("not a device snapshot")
    (version,) = struct.unpack("<H", buf.read(2))
    if version != SNAP_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    dev = DeviceState(stats, **device_kwargs)
    nvm = dev.nvm
    for _ in range(_expect(buf, b"DATA")):
        block = _U64.unpack(buf.read(8))[0]
        payload = buf.read(BLOCK_SIZE)
        nvm.data[block] = (payload, _U64.unpack(buf.read(8))[0])
    for _ in range(_expect(buf, b"CTRS")):
        page = _U64.unpack(buf.read(8))[0]
        nvm.counters[page] = buf.read(BLOCK_SIZE)
    for _ in range(_expect(buf, b"NODE")):
        (level,) = struct.unpack("<B", buf.read(1))
        index = _U64.unpack(buf.read(8))[0]
        nvm.nodes[(level, index)] = buf.read(BLOCK_SIZE)
    for _ in range(_expect(buf, b"WCNT")):
        meta = _r_meta(buf)
        nvm.write_count[meta] = _U64.unpack(buf.read(8))[0]
    for _ in range(_expect(buf, b"FLAG")):
        nvm.flagged.add(_r_meta(buf))
    n = _expect(buf, b"WPQ ")
    dev.wpq = WritePendingQueue(_U64.unpack(buf.read(8))[0])
    for _ in range(n):
        meta = _r_meta(buf)
        payload = buf.read(BLOCK_SIZE)
        mac = _U64.unpack(buf.read(8))[0]
        dev.wpq.entries.append(WpqEntry(meta, payload, mac, _r_str(buf)))
    _expect(buf, b"REGS")
    regs = dev.regs
    ready, regs.epoch = struct.unpack("<BQ", buf.read(9))
    regs.ready = bool(ready)
    regs.root = list(struct.unpack("<8Q", buf.read(64)))
    for _ in range(_U64.unpack(buf.read(8))[0]):
        (level,) = struct.unpack("<B", buf.read(1))
        index = _U64.unpack(buf.read(8))[0]
        regs.pinned[(level, index)] = buf.read(BLOCK_SIZE)
    (has_rec,) = struct.unpack("<B", buf.read(1))
    if has_rec:
        root = struct.unpack("<8Q", buf.read(64))
        pinned = {}
        for _ in range(_U64.unpack(buf.read(8))[0]):
            (level,) = struct.unpack("<B", buf.read(1))
            index = _U64.unpack(buf.read(8))[0]
            pinned[(level, index)] = buf.read(BLOCK_SIZE)
        entries = []
        for _ in range(_U64.unpack(buf.read(8))[0]):
            meta = _r_meta(buf)
            payload = buf.read(BLOCK_SIZE)
            mac = _U64.unpack(buf.read(8))[0]
            (strict,) = struct.unpack("<B", buf.read(1))
            entries.append(RecordEntry(meta, payload, mac, bool(strict), _r_str(buf)))
        regs.record = WriteRecord(entries, root, pinned)
    if buf.read(1):
        raise ValueError("trailing bytes after snapshot")
    return dev
