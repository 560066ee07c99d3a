import pytest

from securenvm.config import SimConfig, config_from_settings, load_config, parse_fault, settings_from_ini
from securenvm.controller import PersistPolicy
from securenvm.devices import ctr_meta, data_meta, node_meta
from securenvm.errors import ConfigError

MB = 1 << 20

INI = """
[memory]
capacity = 16MB
ratio = 1:7
[policy]
mode = triad:2
pin_top_levels = yes
[cache]
counter_cache = 64KB
ways = 4
[run]
seed = 0x10
[faults]
a = counter 0xe00000 3
b = node 1 0 7 unflagged
"""


def test_ini_loading(tmp_path):
    path = tmp_path / "sim.ini"
    path.write_text(INI)
    cfg = load_config(path)
    assert cfg.capacity == 16 * MB and cfg.persistent_eighths == 1
    assert cfg.policy == PersistPolicy("triad", 2) and cfg.pin_top_levels
    assert cfg.counter_cache_bytes == 64 * 1024 and cfg.ways == 4 and cfg.seed == 16
    assert [f.meta for f in cfg.faults] == [ctr_meta(0xE00), node_meta(1, 0)]
    assert [f.flagged for f in cfg.faults] == [True, False]


def test_flags_override_file(tmp_path):
    path = tmp_path / "sim.ini"
    path.write_text(INI)
    cfg = load_config(path, mode="strict", ratio="4:4", seed=None)
    assert cfg.policy.mode == "strict" and cfg.persistent_eighths == 4 and cfg.seed == 16


@pytest.mark.parametrize("text,match", [
    ("[memory]\nsize = 1MB\n", "unknown key"),
    ("[bogus]\nx = 1\n", "unknown section"),
    ("[policy]\nmode = triad:9\n", "exceeds"),
    ("[memory]\nratio = 5:5\n", "p\\+n=8"),
    ("[run]\nattack_demo = maybe\n", "yes/no"),
    ("[cache]\nways = 3\n", "whole 3-way sets"),
    ("[faults]\nx = counter 0x999999999 3\n", "outside capacity"),
    ("[faults]\nx = node 9 0 3\n", "does not exist"),
    ("no section header\n", "config file"),
])
def test_invalid_configs(text, match):
    with pytest.raises(ConfigError, match=match):
        config_from_settings(settings_from_ini(text))


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/sim.ini")


def test_fault_parsing():
    assert parse_fault("data 0x40 520", MB).meta == data_meta(1)
    for bad in ("data 0x40 576", "counter 0x40", "disk 1 2", "node 1 x 2"):
        with pytest.raises(ConfigError):
            parse_fault(bad, MB)


def test_build_shares_formatted_memory_but_not_state():
    cfg = SimConfig()
    a, b = cfg.build(), cfg.build()
    a.write(32 * MB, b"a" * 64)
    assert b.read(32 * MB) == bytes(64)
    assert a.device.regs.root != b.device.regs.root


def test_echo_is_stable():
    assert SimConfig().echo()["policy"] == "triad:1"
    assert SimConfig(persistent_eighths=1).echo()["ratio"] == "1:7"
