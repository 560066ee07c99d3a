"""8-ary Merkle tree over split-counter blocks.

Layout: the on-chip root register has 8 MAC slots and slot ``j`` is the
top of an independent subtree over the ``j``-th eighth of the counter
blocks.  Levels are numbered from the counters up: level 0 is the counter
blocks, levels ``1..levels`` are 64B nodes kept in memory, and the root is
level ``levels + 1``.  Each node holds eight little-endian 64-bit MACs, one
per child.  Children that do not exist (ragged edges) contribute 0.

Nodes are addressed ``(level, index)``.  Within a level, slot ``j`` owns
indices ``[j * stride, j * stride + count_j)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .core import BLOCK_SIZE, PAGE_SIZE, ROOT_SLOTS, ZERO_BLOCK, RegionMap
from .crypto import mac64
from .errors import ConfigError, IntegrityViolation

ARITY = 8
_NODE = struct.Struct("<8Q")
ZERO_NODE = ZERO_BLOCK


def node_slots(node: bytes) -> tuple[int, ...]:
    return _NODE.unpack(node)


def pack_node(slots) -> bytes:
    return _NODE.pack(*slots)


def node_slot(node: bytes, k: int) -> int:
    return int.from_bytes(node[8 * k:8 * k + 8], "little")


def set_node_slot(node: bytes, k: int, value: int) -> bytes:
    return node[:8 * k] + value.to_bytes(8, "little") + node[8 * k + 8:]


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class TreeGeometry:
    counter_block_count: int
    span: int = field(init=False)
    used_slots: int = field(init=False)
    levels: int = field(init=False)
    strides: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        c = self.counter_block_count
        if c < 1:
            raise ConfigError("tree needs at least one counter block")
        span = _ceil_div(c, ROOT_SLOTS)
        strides = [span]
        while strides[-1] > 1:
            strides.append(_ceil_div(strides[-1], ARITY))
        object.__setattr__(self, "span", span)
        object.__setattr__(self, "used_slots", _ceil_div(c, span))
        object.__setattr__(self, "levels", len(strides) - 1)
        object.__setattr__(self, "strides", tuple(strides))

    @classmethod
    def for_capacity(cls, capacity: int) -> "TreeGeometry":
        return cls(capacity // PAGE_SIZE)

    @property
    def root_level(self) -> int:
        return self.levels + 1

    @property
    def tiers(self) -> int:
        """Counters plus every hash level including the root."""
        return self.levels + 2

    def slot_counters(self, slot: int) -> int:
        if slot >= self.used_slots:
            return 0
        return min(self.span, self.counter_block_count - slot * self.span)

    def slot_count(self, slot: int, level: int) -> int:
        """Number of existing nodes at ``level`` under root slot ``slot``."""
        n = self.slot_counters(slot)
        if n == 0:
            return 0
        return _ceil_div(n, ARITY ** level)

    def level_indices(self, level: int, slots=None):
        stride = self.strides[level]
        for j in (range(self.used_slots) if slots is None else slots):
            base = j * stride
            yield from range(base, base + self.slot_count(j, level))

    def count(self, level: int, slots=None) -> int:
        return sum(self.slot_count(j, level)
                   for j in (range(self.used_slots) if slots is None else slots))

    @property
    def nodes_per_level(self) -> list[int]:
        """Entry ``l`` is the node count at level ``l``; entry 0 is the counters."""
        return [self.count(l) for l in range(self.levels + 1)] + [1]

    def exists(self, level: int, index: int) -> bool:
        stride = self.strides[level]
        j, local = divmod(index, stride)
        return j < self.used_slots and local < self.slot_count(j, level)

    def slot_of(self, level: int, index: int) -> int:
        return index // self.strides[level]

    def parent(self, level: int, index: int) -> tuple[int, int, int]:
        """(parent level, parent index, slot within parent).  The root has index 0."""
        j, local = divmod(index, self.strides[level])
        if level == self.levels:
            return self.root_level, 0, j
        pidx = j * self.strides[level + 1] + local // ARITY
        return level + 1, pidx, local % ARITY

    def children(self, level: int, index: int) -> list[tuple[int, int]]:
        """(child slot, child index at level-1) for existing children."""
        if level == self.root_level:
            return [(j, j * self.strides[self.levels]) for j in range(self.used_slots)]
        j, local = divmod(index, self.strides[level])
        stride_below = self.strides[level - 1]
        have = self.slot_count(j, level - 1)
        out = []
        for k in range(ARITY):
            child_local = local * ARITY + k
            if child_local < have:
                out.append((k, j * stride_below + child_local))
        return out

    def path(self, counter_index: int) -> list[tuple[int, int]]:
        """Ancestors of a counter block from level 1 up to (root_level, slot)."""
        out = []
        level, index = 0, counter_index
        while level < self.levels:
            level, index, _ = self.parent(level, index)
            out.append((level, index))
        out.append((self.root_level, self.slot_of(0, counter_index)))
        return out

    def coverage(self, level: int, index: int) -> tuple[int, int]:
        """Counter-block range [lo, hi) under a node (root: index is the slot)."""
        if level == self.root_level:
            lo = index * self.span
            return lo, lo + self.slot_counters(index)
        j, local = divmod(index, self.strides[level])
        lo = j * self.span + local * ARITY ** level
        hi = min(lo + ARITY ** level, j * self.span + self.slot_counters(j))
        return lo, hi

    def byte_coverage(self, level: int, index: int) -> tuple[int, int]:
        lo, hi = self.coverage(level, index)
        return lo * PAGE_SIZE, hi * PAGE_SIZE


def build_level(geometry: TreeGeometry, level: int, child_mac, slots=None) -> dict:
    """Compute every node at ``level`` (>=1) from ``child_mac(index)`` of level-1."""
    out = {}
    for index in geometry.level_indices(level, slots):
        slots_ = [0] * ARITY
        for k, child in geometry.children(level, index):
            slots_[k] = child_mac(child)
        out[(level, index)] = pack_node(slots_)
    return out


def build_full(geometry: TreeGeometry, key: int, counter_bytes, slots=None):
    """From-scratch tree.  ``counter_bytes(i)`` returns counter block ``i``.

    Returns (nodes dict keyed (level, index), root slot list).  With
    ``slots`` only those root slots' subtrees are built; other root
    entries are returned as None.
    """
    nodes: dict = {}
    below = lambda i: mac64(key, counter_bytes(i))
    for level in range(1, geometry.levels + 1):
        built = build_level(geometry, level, below, slots)
        nodes.update(built)
        below = (lambda lvl: lambda i: mac64(key, nodes[(lvl, i)]))(level)
    root = [0] * ROOT_SLOTS
    top = geometry.levels
    for j in range(geometry.used_slots):
        if slots is not None and j not in slots:
            root[j] = None
            continue
        root[j] = below(j * geometry.strides[top]) if top else mac64(key, counter_bytes(j * geometry.span))
    return nodes, root


class MerkleTree:
    """Self-contained tree over an in-memory counter store.

    This is the reference model: the memory controller keeps its tree in
    simulated NVM and caches, and tests compare it against this class and
    against ``build_full``.
    """

    def __init__(self, geometry: TreeGeometry, key: int, counters=None):
        self.geometry = geometry
        self.key = key
        self.counters: dict[int, bytes] = dict(counters or {})
        self.nodes, self.root = build_full(geometry, key, self.counter)

    def counter(self, index: int) -> bytes:
        return self.counters.get(index, ZERO_BLOCK)

    def node(self, level: int, index: int) -> bytes:
        return self.nodes[(level, index)]

    def set_counter(self, index: int, raw: bytes) -> list[tuple[int, int]]:
        if len(raw) != BLOCK_SIZE:
            raise ValueError("counter block must be 64 bytes")
        self.counters[index] = raw
        return self.update_path(index)

    def update_path(self, counter_index: int) -> list[tuple[int, int]]:
        """Recompute ancestors of an already-updated counter; return them in order."""
        g = self.geometry
        path = g.path(counter_index)
        child_mac = mac64(self.key, self.counter(counter_index))
        level, index = 0, counter_index
        for plevel, pindex in path:
            _, _, k = g.parent(level, index)
            if plevel == g.root_level:
                self.root[k] = child_mac
            else:
                node = set_node_slot(self.nodes[(plevel, pindex)], k, child_mac)
                self.nodes[(plevel, pindex)] = node
                child_mac = mac64(self.key, node)
            level, index = plevel, pindex
        return path

    def verify_path(self, counter_index: int, trusted=frozenset()) -> list[tuple[int, int]]:
        """Check a counter up to the first trusted node or the root.

        Returns the nodes whose slots were consulted.  Raises
        IntegrityViolation naming the lowest node whose slot disagreed.
        """
        g = self.geometry
        checked = []
        raw = self.counter(counter_index)
        level, index = 0, counter_index
        while True:
            plevel, pindex, k = g.parent(level, index)
            mac = mac64(self.key, raw)
            if plevel == g.root_level:
                expected = self.root[k]
            else:
                expected = node_slot(self.nodes[(plevel, pindex)], k)
            checked.append((plevel, pindex))
            if mac != expected:
                raise IntegrityViolation(
                    f"MAC mismatch under node ({plevel}, {pindex}) slot {k}", level=plevel, index=pindex)
            if plevel == g.root_level or (plevel, pindex) in trusted:
                return checked
            raw = self.nodes[(plevel, pindex)]
            level, index = plevel, pindex

    def dump(self) -> bytes:
        return dump_tree(self.geometry, self.nodes.__getitem__, self.root)


def dump_tree(geometry: TreeGeometry, node, root) -> bytes:
    """Level-order dump: root register, then levels top..1, 64B little-endian nodes."""
    parts = [pack_node([r or 0 for r in root])]
    for level in range(geometry.levels, 0, -1):
        for index in geometry.level_indices(level):
            parts.append(node((level, index)))
    return b"".join(parts)


def load_tree(geometry: TreeGeometry, blob: bytes):
    """Inverse of dump_tree: returns (nodes dict, root list)."""
    expected = BLOCK_SIZE * (1 + sum(geometry.count(l) for l in range(1, geometry.levels + 1)))
    if len(blob) != expected:
        raise ValueError(f"tree dump is {len(blob)} bytes, geometry needs {expected}")
    root = list(node_slots(blob[:BLOCK_SIZE]))
    pos = BLOCK_SIZE
    nodes = {}
    for level in range(geometry.levels, 0, -1):
        for index in geometry.level_indices(level):
            nodes[(level, index)] = blob[pos:pos + BLOCK_SIZE]
            pos += BLOCK_SIZE
    return nodes, root


def slot_classes(geometry: TreeGeometry, region_map: RegionMap) -> tuple[list[int], list[int]]:
    """Root slots split into (persistent, non-persistent)."""
    if geometry.counter_block_count * PAGE_SIZE != region_map.capacity:
        raise ConfigError("tree geometry and region map disagree on capacity")
    persistent, volatile = [], []
    for j in range(geometry.used_slots):
        lo, hi = geometry.byte_coverage(geometry.root_level, j)
        p_lo = region_map.is_persistent(lo)
        if p_lo != region_map.is_persistent(hi - 1):
            raise ConfigError(f"root slot {j} straddles the persistent boundary")
        (persistent if p_lo else volatile).append(j)
    return persistent, volatile


def partition(geometry: TreeGeometry, region_map: RegionMap) -> tuple[set, set]:
    """Assign every non-root node to the persistent or non-persistent subtree."""
    p_slots, v_slots = slot_classes(geometry, region_map)
    p_nodes, v_nodes = set(), set()
    for level in range(1, geometry.levels + 1):
        p_nodes.update((level, i) for i in geometry.level_indices(level, p_slots))
        v_nodes.update((level, i) for i in geometry.level_indices(level, v_slots))
    return p_nodes, v_nodes
