import random

import pytest

from securenvm.analytics import recovery_blocks
from securenvm.config import SimConfig, parse_fault
from securenvm.devices import Fault, node_meta
from securenvm.errors import IntegrityViolation
from securenvm.merkle import ZERO_NODE
from securenvm.recovery import (RecoveryReport, UnverifiableRange, crash_point_enumerate, crash_test,
                                lazy_recover_nonpersistent, recover, run_with_crash)
from securenvm.workload import SyntheticSpec, TraceOp, generate, replay

from conftest import MB, policy

P_BASE = 32 * MB


def cfg_for(mode, **kw):
    return SimConfig(policy=policy(mode), **kw)


def run(cfg, spec):
    c = cfg.build()
    replay(generate(spec, cfg.region_map), c)
    return c


MIXED = SyntheticSpec("mixed", 64, 1, 300, seed=4)


@pytest.mark.parametrize("level", [0, 1, 2, 4])
def test_clean_crash_rebuilds_from_persist_level(level):
    cfg = cfg_for(f"triad:{level}")
    c = run(cfg, MIXED)
    c.device.crash()
    rep = recover(c)
    assert rep.outcome == "verified" and not rep.unverifiable
    assert rep.rebuilt_levels == (level + 1, c.geometry.levels)
    assert rep.persistent_work == recovery_blocks(cfg.capacity, level, 4)
    assert rep.nonpersistent_work == recovery_blocks(cfg.capacity, 1, 4)
    assert rep.nonpersistent_blocks_touched == 0
    assert rep.wall_time == pytest.approx(rep.simulated_work * 100e-9)


def test_strict_needs_no_reconstruction():
    c = run(cfg_for("strict"), MIXED)
    c.device.crash()
    rep = recover(c)
    assert rep.outcome == "verified" and rep.simulated_work == 0


def test_recovery_advances_epoch_unless_attack_demo():
    for demo, epoch in ((False, 1), (True, 0)):
        c = cfg_for("triad:1", attack_demo=demo).build()
        c.device.crash()
        recover(c)
        assert c.device.regs.epoch == epoch


def test_no_persist_reinitialises_everything():
    cfg = cfg_for("none")
    c = run(cfg, MIXED)
    c.device.crash()
    rep = recover(c)
    assert rep.nonpersistent_work == recovery_blocks(cfg.capacity, -1)
    assert c.read(P_BASE) == bytes(64)
    c.write(P_BASE, b"n" * 64)
    assert c.read(P_BASE) == b"n" * 64


def _event_ids(cfg, ops, kind):
    c = cfg.build()
    ids = []
    c.device.hook = lambda eid, k, d: ids.append(eid) if k == kind else None
    replay(ops, c)
    return ids


def test_crash_after_log_replays_record():
    cfg = cfg_for("triad:1")
    ops = [TraceOp("W", P_BASE, 1), TraceOp("W", P_BASE, 2)]
    log_id = _event_ids(cfg, ops, "log")[1]
    c, rep = run_with_crash(ops, cfg, log_id)
    assert rep.replayed
    assert c.read(P_BASE) == ops[1].payload
    assert c.stats.nvm_writes["replay"] >= 3


def test_crash_at_acknowledgement_needs_no_replay():
    cfg = cfg_for("triad:1")
    ops = [TraceOp("W", P_BASE, 1), TraceOp("W", P_BASE, 2)]
    ack_id = _event_ids(cfg, ops, "ready-clear")[0]
    c, rep = run_with_crash(ops[:1], cfg, ack_id)
    assert not rep.replayed
    assert c.read(P_BASE) == ops[0].payload
    c, _ = run_with_crash(ops, cfg, ack_id)
    assert c.read(P_BASE) == ops[1].payload


class TestCrashPoints:
    def test_empty_trace_single_point(self):
        points = list(crash_point_enumerate([], cfg_for("triad:1")))
        assert len(points) == 1 and points[0].event_id == 0

    def test_ten_writes_give_enough_points(self):
        cfg = cfg_for("triad:1")
        ops = generate(SyntheticSpec("persistent", 64, 0, 10), cfg.region_map)
        points = list(crash_point_enumerate(ops, cfg))
        assert len(points) >= 10 * (3 + 2)
        assert [p.event_id for p in points] == list(range(len(points)))

    @pytest.mark.parametrize("mode", ["strict", "triad:0", "triad:1", "triad:2"])
    def test_exhaustive_small_trace(self, mode):
        cfg = cfg_for(mode)
        ops = generate(SyntheticSpec("mixed", 64, 1, 40, seed=2), cfg.region_map)
        summary = crash_test(ops, cfg)
        assert summary.ok, summary.to_text()
        assert summary.points > summary.distinct_states > 1

    def test_random_mode_samples(self):
        cfg = cfg_for("triad:1")
        ops = generate(SyntheticSpec("mixed", 64, 1, 30, seed=2), cfg.region_map)
        summary = crash_test(ops, cfg, "random", samples=10, seed=3)
        assert summary.points == 10 and summary.ok

    def test_live_crash_matches_snapshot(self):
        cfg = cfg_for("triad:1")
        ops = generate(SyntheticSpec("mixed", 128, 1, 30, seed=8), cfg.region_map)
        points = list(crash_point_enumerate(ops, cfg))
        for point in random.Random(1).sample(points, 12):
            dev = point.device()
            snap = cfg.build(device=dev, ledger=point.ledger())
            dev.crash()
            recover(snap)
            live, _ = run_with_crash(ops[:point.op_index + 1], cfg, point.event_id)
            assert live.device.durable_hash() == snap.device.durable_hash(), point.event_id

    def test_remaining_persistent_writes_succeed_after_crash(self):
        cfg = cfg_for("triad:1")
        ops = generate(SyntheticSpec("persistent", 64, 0, 40, seed=1), cfg.region_map)
        c, _ = run_with_crash(ops, cfg, 60)
        last = {op.addr: op.payload for op in ops[20:]}
        for addr, payload in last.items():
            assert c.read(addr) == payload


def test_attack_demo_reuses_pads_only_without_rotation():
    ops = [TraceOp("W", 0, 1), TraceOp("W", 0, 2), TraceOp("R", 0)]
    demo = crash_test(ops, cfg_for("triad:1", attack_demo=True))
    safe = crash_test(ops, cfg_for("triad:1"))
    assert demo.pad_reuse >= 1 and not demo.ok
    assert safe.pad_reuse == 0 and safe.ok


class TestLazy:
    def test_zeroed_level1_and_matching_root(self):
        c = run(cfg_for("triad:1"), SyntheticSpec("non-persistent", 64, 0, 500, seed=1))
        c.device.crash()
        rep = recover(c)
        g = c.geometry
        assert all(c.device.nvm.read(node_meta(1, i))[0] == ZERO_NODE
                   for i in g.level_indices(1, c.v_slots))
        _, root, _ = c.compute_up(1, lambda i: ZERO_NODE, c.v_slots)
        assert all(c.device.regs.root[j] == root[j] for j in c.v_slots)
        assert rep.nonpersistent_blocks_touched == 0

    def test_first_touch_reinitialises(self):
        c = run(cfg_for("triad:1"), SyntheticSpec("non-persistent", 64, 0, 100, seed=1))
        c.device.crash()
        recover(c)
        assert c.read(0) == bytes(64)
        c.write(64, b"z" * 64)
        assert c.stats.lazy_reinits == 1
        assert c.read(64) == b"z" * 64 and c.read(0) == bytes(64)

    def test_standalone_entry_point(self):
        c = cfg_for("triad:1").build()
        rep = lazy_recover_nonpersistent(c)
        assert rep.nonpersistent_work == recovery_blocks(64 * MB, 1, 4)

    def test_all_persistent_map_has_nothing_to_do(self):
        c = SimConfig(policy=policy("triad:1"), persistent_eighths=8).build()
        assert lazy_recover_nonpersistent(c).nonpersistent_work == 0


class TestPinpoint:
    ADDR = P_BASE + 3 * 4096

    def corrupt(self, mode, fault, **kw):
        cfg = cfg_for(mode, **kw)
        c = run(cfg, SyntheticSpec("persistent", 64, 0, 300, seed=3))
        c.device.drain()
        cfg.replace(faults=(fault,)).apply_faults(c.device)
        c.device.crash()
        return c, recover(c)

    def l1_of(self, addr):
        g = cfg_for("triad:1").geometry
        return g.parent(0, addr // 4096)[1]

    def test_counter_under_p1(self):
        c, rep = self.corrupt("triad:1", parse_fault(f"counter {self.ADDR:#x} 5", 64 * MB))
        assert [(r.start, r.size) for r in rep.unverifiable] == [(self.ADDR, 4096)]
        assert rep.outcome == "partial"
        with pytest.raises(IntegrityViolation):
            c.read(self.ADDR)
        assert c.read(self.ADDR + 4096) is not None

    @pytest.mark.parametrize("flagged", [True, False])
    def test_l1_node_under_p1(self, flagged):
        _, rep = self.corrupt("triad:1", Fault(node_meta(1, self.l1_of(self.ADDR)), 77, flagged))
        assert [(r.start, r.size) for r in rep.unverifiable] == [(P_BASE, 32 * 1024)]

    def test_counter_under_p0_loses_root_slot(self):
        _, rep = self.corrupt("triad:0", parse_fault(f"counter {self.ADDR:#x} 5", 64 * MB))
        assert [r.size for r in rep.unverifiable] == [64 * MB // 8]
        assert rep.outcome == "failed"

    def test_pinned_registers_shrink_the_span(self):
        _, rep = self.corrupt("triad:0", parse_fault(f"counter {self.ADDR:#x} 5", 64 * MB),
                              pin_top_levels=True)
        assert len(rep.unverifiable) == 1 and rep.unverifiable[0].size < 64 * MB // 8

    def test_data_block(self):
        _, rep = self.corrupt("strict", parse_fault(f"data {self.ADDR:#x} 520", 64 * MB))
        assert [(r.start, r.size) for r in rep.unverifiable] == [(self.ADDR, 64)]

    def test_strict_counter(self):
        _, rep = self.corrupt("strict", parse_fault(f"counter {self.ADDR:#x} 5", 64 * MB))
        assert [(r.start, r.size) for r in rep.unverifiable] == [(self.ADDR, 4096)]

    def test_nonpersistent_corruption_is_irrelevant(self):
        _, rep = self.corrupt("triad:1", parse_fault("counter 0x1000 5", 64 * MB))
        assert rep.outcome == "verified"


def test_report_serialisation():
    rep = RecoveryReport("triad:1", "partial", (2, 4), [UnverifiableRange(0x1000, 0x2000, "corrupt counter block")],
                         persistent_work=10, nonpersistent_work=5)
    assert rep.to_text().splitlines() == [
        "policy triad:1", "outcome partial", "rebuilt_levels 2..4", "replayed 0", "wpq_drained 0",
        "persistent_work 10", "nonpersistent_work 5", "pinpoint_work 0", "simulated_work 15",
        "wall_time_s 0.000001500", "nonpersistent_blocks_touched 0", "unverifiable 1",
        "  range 0x1000 0x2000 4096 corrupt counter block",
    ]
    header, row = rep.to_csv().splitlines()
    assert header.startswith("policy,outcome,rebuilt_levels")
    assert row.endswith("0x1000-0x2000:corrupt counter block")
