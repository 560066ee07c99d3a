"""Simulation configuration: validation, INI loading, controller factory.

INI layout (every key optional; command-line flags override file values)::

    [memory]
    capacity = 64MB
    ratio = 4:4
    [policy]
    mode = triad:1
    pin_top_levels = no
    [cache]
    counter_cache = 128KB
    mt_cache = 128KB
    ways = 8
    wpq_depth = 16
    [run]
    seed = 0
    t_block = 100e-9
    attack_demo = no
    [faults]
    f1 = counter 0x3ff0000 17
    f2 = node 1 12 3 unflagged
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .analytics import T_BLOCK
from .controller import PersistPolicy, SecureMemoryController
from .core import (BLOCK_SIZE, PAGE_SIZE, RegionMap, check_address, format_size, parse_ratio,
                   parse_size)
from .devices import Fault, FaultInjector, ctr_meta, data_meta, node_meta
from .errors import AddressFault, ConfigError
from .merkle import TreeGeometry

_PRISTINE: dict = {}


def parse_fault(text: str, capacity: int) -> Fault:
    """``data|counter <addr> <bit>`` or ``node <level> <index> <bit>``, optional ``unflagged``."""
    words = text.split()
    flagged = True
    if words and words[-1].lower() in ("unflagged", "silent"):
        flagged = False
        words = words[:-1]
    try:
        kind = words[0].lower()
        if kind in ("data", "counter") and len(words) == 3:
            addr, bit = int(words[1], 0), int(words[2], 0)
            check_address(addr, capacity)
            meta = data_meta(addr // BLOCK_SIZE) if kind == "data" else ctr_meta(addr // PAGE_SIZE)
        elif kind == "node" and len(words) == 4:
            meta = node_meta(int(words[1], 0), int(words[2], 0))
            bit = int(words[3], 0)
        else:
            raise ValueError
    except AddressFault as exc:
        raise ConfigError(f"fault {text!r}: {exc}") from None
    except (ValueError, IndexError):
        raise ConfigError(f"bad fault spec {text!r}") from None
    limit = 8 * BLOCK_SIZE + (64 if meta[0] == 0 else 0)
    if not 0 <= bit < limit:
        raise ConfigError(f"fault bit {bit} outside 0..{limit - 1}")
    return Fault(meta, bit, flagged)


@dataclass(frozen=True)
class SimConfig:
    capacity: int = 64 << 20
    persistent_eighths: int = 4
    policy: PersistPolicy = PersistPolicy("triad", 1)
    seed: int = 0
    wpq_depth: int = 16
    counter_cache_bytes: int = 128 * 1024
    mt_cache_bytes: int = 128 * 1024
    ways: int = 8
    t_block: float = T_BLOCK
    pin_top_levels: bool = False
    attack_demo: bool = False
    faults: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        rm = self.region_map
        g = TreeGeometry.for_capacity(rm.capacity)
        if self.policy.mode == "triad" and self.policy.level > g.levels:
            raise ConfigError(f"persist level {self.policy.level} exceeds the {g.levels} tree levels "
                              f"of a {format_size(self.capacity)} memory")
        if self.wpq_depth < 1:
            raise ConfigError("wpq_depth must be >= 1")
        for name in ("counter_cache_bytes", "mt_cache_bytes"):
            size = getattr(self, name)
            if self.ways < 1 or size < BLOCK_SIZE * self.ways or size % (BLOCK_SIZE * self.ways):
                raise ConfigError(f"{name}={size} does not hold whole {self.ways}-way sets of 64B lines")
        if self.t_block <= 0:
            raise ConfigError("t_block must be positive")
        for f in self.faults:
            kind, level, index = f.meta
            if kind == 2 and not (1 <= level <= g.levels and g.exists(level, index)):
                raise ConfigError(f"fault targets tree node ({level}, {index}), which does not exist")
            if kind != 2 and index >= (self.capacity // (BLOCK_SIZE if kind == 0 else PAGE_SIZE)):
                raise ConfigError(f"fault targets block {index} beyond capacity")

    @property
    def region_map(self) -> RegionMap:
        return RegionMap.from_ratio(self.capacity, self.persistent_eighths)

    @property
    def geometry(self) -> TreeGeometry:
        return TreeGeometry.for_capacity(self.capacity)

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    def build(self, device=None, ledger=None, counter_mac=None) -> SecureMemoryController:
        """A controller over ``device`` or over a freshly formatted memory."""
        kwargs = dict(seed=self.seed, wpq_depth=self.wpq_depth,
                      counter_cache_bytes=self.counter_cache_bytes, mt_cache_bytes=self.mt_cache_bytes,
                      ways=self.ways, pin_top_levels=self.pin_top_levels,
                      rotate_volatile_key=not self.attack_demo, counter_mac=counter_mac, ledger=ledger)
        if device is None and counter_mac is None:
            key = (self.capacity, self.persistent_eighths, self.seed, self.pin_top_levels,
                   self.wpq_depth, self.counter_cache_bytes, self.mt_cache_bytes, self.ways)
            pristine = _PRISTINE.get(key)
            if pristine is None:
                pristine = SecureMemoryController(self.region_map, self.policy, **kwargs).device
                _PRISTINE[key] = pristine
            device = pristine.durable_copy()
        ctrl = SecureMemoryController(self.region_map, self.policy, device=device, **kwargs)
        return ctrl

    def apply_faults(self, device) -> None:
        FaultInjector(self.faults).apply(device.nvm)

    def echo(self) -> dict:
        p = self.persistent_eighths
        return {
            "capacity": format_size(self.capacity),
            "ratio": f"{p}:{8 - p}",
            "policy": self.policy.label,
            "seed": self.seed,
            "wpq_depth": self.wpq_depth,
            "counter_cache": format_size(self.counter_cache_bytes),
            "mt_cache": format_size(self.mt_cache_bytes),
            "ways": self.ways,
            "t_block": self.t_block,
            "pin_top_levels": self.pin_top_levels,
            "attack_demo": self.attack_demo,
            "faults": len(self.faults),
        }


_BOOL = {"1": True, "yes": True, "true": True, "on": True,
         "0": False, "no": False, "false": False, "off": False}


def _bool(text: str, name: str) -> bool:
    try:
        return _BOOL[str(text).strip().lower()]
    except KeyError:
        raise ConfigError(f"{name}: expected yes/no, got {text!r}") from None


def _int(text: str, name: str) -> int:
    try:
        return int(str(text).strip(), 0)
    except ValueError:
        raise ConfigError(f"{name}: expected an integer, got {text!r}") from None


KNOWN_KEYS = {
    "memory": {"capacity", "ratio"},
    "policy": {"mode", "pin_top_levels"},
    "cache": {"counter_cache", "mt_cache", "ways", "wpq_depth"},
    "run": {"seed", "t_block", "attack_demo"},
}


def settings_from_ini(text: str) -> dict:
    """Parse INI text into a flat settings dict (unknown keys are errors)."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config file: {exc}") from None
    out: dict = {}
    for section in parser.sections():
        if section == "faults":
            out["faults"] = [v for _, v in sorted(parser.items(section))]
            continue
        if section not in KNOWN_KEYS:
            raise ConfigError(f"config file: unknown section [{section}]")
        for key, value in parser.items(section):
            if key not in KNOWN_KEYS[section]:
                raise ConfigError(f"config file: unknown key {key!r} in [{section}]")
            out[key] = value
    return out


def config_from_settings(settings: dict) -> SimConfig:
    """Build a validated SimConfig from string-or-typed settings."""
    s = dict(settings)
    kw: dict = {}
    if s.get("capacity") is not None:
        kw["capacity"] = parse_size(s["capacity"])
    if s.get("ratio") is not None:
        kw["persistent_eighths"] = parse_ratio(s["ratio"])
    if s.get("mode") is not None:
        mode = s["mode"]
        kw["policy"] = mode if isinstance(mode, PersistPolicy) else PersistPolicy.parse(mode)
    if s.get("seed") is not None:
        kw["seed"] = _int(s["seed"], "seed")
    if s.get("wpq_depth") is not None:
        kw["wpq_depth"] = _int(s["wpq_depth"], "wpq_depth")
    if s.get("counter_cache") is not None:
        kw["counter_cache_bytes"] = parse_size(s["counter_cache"])
    if s.get("mt_cache") is not None:
        kw["mt_cache_bytes"] = parse_size(s["mt_cache"])
    if s.get("ways") is not None:
        kw["ways"] = _int(s["ways"], "ways")
    if s.get("t_block") is not None:
        try:
            kw["t_block"] = float(s["t_block"])
        except ValueError:
            raise ConfigError(f"t_block: expected seconds, got {s['t_block']!r}") from None
    for name in ("pin_top_levels", "attack_demo"):
        if s.get(name) is not None:
            value = s[name]
            kw[name] = value if isinstance(value, bool) else _bool(value, name)
    cfg = SimConfig(**kw)
    faults = s.get("faults") or ()
    if faults:
        cfg = cfg.replace(faults=tuple(f if isinstance(f, Fault) else parse_fault(f, cfg.capacity)
                                       for f in faults))
    return cfg


def load_config(path=None, **overrides) -> SimConfig:
    """File settings (if any) overlaid with non-None overrides."""
    settings = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                settings = settings_from_ini(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    settings.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_settings(settings)
