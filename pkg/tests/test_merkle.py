import random

import pytest
from hypothesis import given, strategies as st

from securenvm.core import PAGE_SIZE, RegionMap
from securenvm.crypto import mac64
from securenvm.errors import ConfigError, IntegrityViolation
from securenvm.merkle import (MerkleTree, TreeGeometry, build_full, dump_tree, load_tree, node_slot,
                              node_slots, pack_node, partition, set_node_slot, slot_classes)

KEY = 0x5EED


def oracle_roots(counters, key=KEY):
    """Root slots computed by plain repeated grouping, no geometry object involved."""
    n = len(counters)
    span = -(-n // 8)
    levels, width = 0, span
    while width > 1:
        width = -(-width // 8)
        levels += 1
    roots = [0] * 8
    for j in range(8):
        macs = [mac64(key, c) for c in counters[j * span:(j + 1) * span]]
        if not macs:
            continue
        for _ in range(levels):
            groups = [macs[i:i + 8] for i in range(0, len(macs), 8)]
            macs = [mac64(key, pack_node(g + [0] * (8 - len(g)))) for g in groups]
        roots[j] = macs[0]
    return roots


def random_counter(rng):
    return bytes(rng.getrandbits(8) for _ in range(64))


class TestGeometry:
    def test_256_counters(self):
        g = TreeGeometry(256)
        assert g.levels == 2 and g.root_level == 3 and g.tiers == 4
        assert g.nodes_per_level == [256, 32, 8, 1]
        assert g.path(0) == [(1, 0), (2, 0), (3, 0)]
        assert g.path(255)[-1] == (3, 7)

    def test_16gb_has_nine_tiers(self):
        g = TreeGeometry.for_capacity(16 << 30)
        assert g.levels == 7 and g.tiers == 9

    @given(st.integers(1, 5000))
    def test_levels_partition_counters(self, n):
        g = TreeGeometry(n)
        lo_hi = [g.coverage(g.root_level, j) for j in range(g.used_slots)]
        assert lo_hi[0][0] == 0 and lo_hi[-1][1] == n
        assert all(a[1] == b[0] for a, b in zip(lo_hi, lo_hi[1:]))
        for level in range(1, g.levels + 1):
            total = 0
            for idx in g.level_indices(level):
                lo, hi = g.coverage(level, idx)
                total += hi - lo
                assert len(g.children(level, idx)) >= 1
            assert total == n

    @given(st.integers(1, 3000), st.data())
    def test_parent_child_inverse(self, n, data):
        g = TreeGeometry(n)
        c = data.draw(st.integers(0, n - 1))
        level, index = 0, c
        while level < g.levels:
            plevel, pindex, k = g.parent(level, index)
            assert (k, index) in g.children(plevel, pindex)
            level, index = plevel, pindex
        _, slot_idx, k = g.parent(level, index)
        assert k == g.slot_of(0, c)

    def test_l1_node_covers_32kb(self):
        g = TreeGeometry.for_capacity(64 << 20)
        lo, hi = g.byte_coverage(1, 5)
        assert hi - lo == 32 * 1024
        lo, hi = g.byte_coverage(g.root_level, 3)
        assert hi - lo == (64 << 20) // 8


@given(st.integers(1, 700), st.integers(0, 2 ** 32))
def test_build_full_matches_oracle(n, seed):
    rng = random.Random(seed)
    counters = [random_counter(rng) if rng.random() < 0.3 else bytes(64) for _ in range(n)]
    _, root = build_full(TreeGeometry(n), KEY, counters.__getitem__)
    assert root == oracle_roots(counters)


@given(st.lists(st.tuples(st.integers(0, 255), st.integers(0, 2 ** 64)), max_size=200))
def test_incremental_matches_rebuild(updates):
    g = TreeGeometry(256)
    tree = MerkleTree(g, KEY)
    for idx, value in updates:
        tree.set_counter(idx, value.to_bytes(9, "little")[:8] * 8)
    nodes, root = build_full(g, KEY, tree.counter)
    assert root == tree.root
    assert nodes == tree.nodes


def test_verify_path_and_tamper_location():
    g = TreeGeometry(256)
    tree = MerkleTree(g, KEY)
    tree.set_counter(77, b"\x01" * 64)
    assert tree.verify_path(77)[-1] == (3, 0)
    # trusted cached parent stops the walk early
    parent = g.path(77)[0]
    assert tree.verify_path(77, trusted={parent}) == [parent]
    tree.counters[77] = b"\x02" * 64
    with pytest.raises(IntegrityViolation) as info:
        tree.verify_path(77)
    assert (info.value.level, info.value.index) == parent
    tree.counters[77] = b"\x01" * 64
    l1 = tree.nodes[parent]
    tree.nodes[parent] = set_node_slot(l1, 0, node_slot(l1, 0) ^ 1)
    with pytest.raises(IntegrityViolation) as info:
        tree.verify_path(77)
    assert info.value.level == 2


def test_dump_roundtrip():
    g = TreeGeometry(256)
    tree = MerkleTree(g, KEY, {3: b"\x09" * 64})
    blob = tree.dump()
    assert len(blob) == 64 * (1 + 32 + 8)
    nodes, root = load_tree(g, blob)
    assert nodes == tree.nodes and root == tree.root
    assert dump_tree(g, nodes.__getitem__, root) == blob
    with pytest.raises(ValueError):
        load_tree(g, blob[:-1])


def test_node_packing():
    slots = list(range(1, 9))
    raw = pack_node(slots)
    assert node_slots(raw) == tuple(slots)
    assert node_slot(raw, 2) == 3
    assert node_slots(set_node_slot(raw, 7, 0))[7] == 0


@pytest.mark.parametrize("p", [0, 1, 4, 7, 8])
def test_slot_classes_follow_ratio(p):
    rm = RegionMap.from_ratio(1 << 20, p)
    g = TreeGeometry.for_capacity(rm.capacity)
    persistent, volatile = slot_classes(g, rm)
    assert len(persistent) == p and len(volatile) == 8 - p
    p_nodes, v_nodes = partition(g, rm)
    assert not p_nodes & v_nodes
    assert len(p_nodes) + len(v_nodes) == sum(g.nodes_per_level[1:-1])


def test_slot_classes_geometry_mismatch():
    with pytest.raises(ConfigError):
        slot_classes(TreeGeometry(100), RegionMap.from_ratio(1 << 20, 4))
