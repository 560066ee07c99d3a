"""Traces: text format, synthetic strided generators, replay.

Trace format, one op per line::

    # comment
    W 0x2000000 00000000deadbeef
    R 0x2000000

Write payloads are expanded from the 64-bit seed with splitmix64, eight
little-endian lanes.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from functools import lru_cache

from .core import BLOCK_SIZE, NON_PERSISTENT, PERSISTENT, RegionMap
from .errors import ConfigError, IntegrityViolation, SimulationError

MASK64 = (1 << 64) - 1
MIXED = "mixed"


def splitmix64(state: int) -> tuple[int, int]:
    """(next state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


@lru_cache(maxsize=1 << 14)
def expand_payload(seed: int) -> bytes:
    out = []
    state = seed & MASK64
    for _ in range(BLOCK_SIZE // 8):
        state, word = splitmix64(state)
        out.append(word.to_bytes(8, "little"))
    return b"".join(out)


@dataclass(frozen=True)
class TraceOp:
    kind: str
    addr: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("R", "W"):
            raise ConfigError(f"trace op kind must be R or W, not {self.kind!r}")
        if self.addr < 0 or self.addr % BLOCK_SIZE:
            raise ConfigError(f"trace address {self.addr:#x} is not 64B aligned")
        if not 0 <= self.seed <= MASK64:
            raise ConfigError("payload seed must fit in 64 bits")

    @property
    def payload(self) -> bytes:
        return expand_payload(self.seed) if self.kind == "W" else b""

    def line(self) -> str:
        if self.kind == "W":
            return f"W {self.addr:#x} {self.seed:016x}"
        return f"R {self.addr:#x}"


def parse_trace(text: str) -> list[TraceOp]:
    ops = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        try:
            kind = words[0].upper()
            if kind == "R" and len(words) == 2:
                ops.append(TraceOp("R", int(words[1], 16)))
            elif kind == "W" and len(words) == 3:
                ops.append(TraceOp("W", int(words[1], 16), int(words[2], 16)))
            else:
                raise ValueError("expected 'R <addr>' or 'W <addr> <seed>'")
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"trace line {lineno}: {exc}") from None
    return ops


def format_trace(ops) -> str:
    return "".join(op.line() + "\n" for op in ops)


def load_trace(path) -> list[TraceOp]:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_trace(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read trace {path}: {exc.strerror}") from None


def validate_trace(ops, region_map: RegionMap) -> list[str]:
    """Problems that would stop a replay under ``region_map``; empty when fine."""
    problems = []
    for i, op in enumerate(ops):
        if op.addr >= region_map.capacity:
            problems.append(f"op {i}: address {op.addr:#x} beyond capacity {region_map.capacity:#x}")
    return problems


# synthetic workloads ---------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Sequential strided writes, each followed by ``rw_ratio`` reads of recent writes.

    ``span`` bounds the footprint (bytes, default the whole region); the
    stream wraps inside it.
    """

    region: str = PERSISTENT
    stride: int = 64
    rw_ratio: int = 0
    op_count: int = 1000
    seed: int = 0
    span: int = 0

    def __post_init__(self):
        if self.region not in (PERSISTENT, NON_PERSISTENT, MIXED):
            raise ConfigError(f"region must be persistent, non-persistent or mixed, not {self.region!r}")
        if self.stride <= 0 or self.stride % BLOCK_SIZE:
            raise ConfigError(f"stride {self.stride} must be a positive multiple of 64B")
        if self.rw_ratio < 0 or self.op_count < 0 or self.span < 0:
            raise ConfigError("rw_ratio, op_count and span must be non-negative")


def _ranges(region: str, region_map: RegionMap) -> list[tuple[int, int]]:
    """Byte ranges making up a region (the non-persistent one may be split)."""
    p_lo, p_hi = region_map.persistent_start, region_map.persistent_end
    if region == PERSISTENT:
        out = [(p_lo, p_hi)]
    else:
        out = [(0, p_lo), (p_hi, region_map.capacity)]
    return [(lo, hi) for lo, hi in out if hi > lo]


class _Stream:
    def __init__(self, spec: SyntheticSpec, region: str, region_map: RegionMap, rng: random.Random):
        ranges = _ranges(region, region_map)
        if not ranges:
            raise ConfigError(f"the {region} region is empty under ratio "
                              f"{region_map.ratio[0]}:{region_map.ratio[1]}")
        self.lo, hi = ranges[0]
        self.span = hi - self.lo
        if spec.span:
            self.span = min(self.span, spec.span)
        if self.span < spec.stride:
            raise ConfigError(f"span {self.span} smaller than stride {spec.stride}")
        self.span -= self.span % spec.stride
        self.stride = spec.stride
        self.rw_ratio = spec.rw_ratio
        self.rng = rng
        self.pos = 0
        self.recent: list[int] = []

    def group(self) -> list[TraceOp]:
        addr = self.lo + self.pos
        self.pos = (self.pos + self.stride) % self.span
        ops = [TraceOp("W", addr, self.rng.getrandbits(64))]
        self.recent = (self.recent + [addr])[-8:]
        for _ in range(self.rw_ratio):
            ops.append(TraceOp("R", self.rng.choice(self.recent)))
        return ops


def generate(spec: SyntheticSpec, region_map: RegionMap) -> list[TraceOp]:
    """Deterministic op list; mixed specs alternate persistent and non-persistent groups."""
    rng = random.Random(spec.seed)
    if spec.region == MIXED:
        streams = [_Stream(spec, PERSISTENT, region_map, rng), _Stream(spec, NON_PERSISTENT, region_map, rng)]
    else:
        streams = [_Stream(spec, spec.region, region_map, rng)]
    ops: list[TraceOp] = []
    turn = 0
    while len(ops) < spec.op_count:
        ops.extend(streams[turn % len(streams)].group())
        turn += 1
    return ops[:spec.op_count]


BUNDLED = {
    "stride-128-r2": SyntheticSpec(PERSISTENT, 128, 2, 3000),
    "stride-1024-r2": SyntheticSpec(PERSISTENT, 1024, 2, 3000),
    "stride-256-r2": SyntheticSpec(PERSISTENT, 256, 2, 3000),
    "stride-512-r3": SyntheticSpec(PERSISTENT, 512, 3, 3000),
    "mix": SyntheticSpec(MIXED, 64, 2, 3000),
    "volatile-256-r1": SyntheticSpec(NON_PERSISTENT, 256, 1, 3000),
}


def bundled(name: str, seed: int = 0, op_count: int = 0) -> SyntheticSpec:
    try:
        spec = BUNDLED[name]
    except KeyError:
        raise ConfigError(f"unknown workload {name!r}; choose from {', '.join(BUNDLED)}") from None
    return SyntheticSpec(spec.region, spec.stride, spec.rw_ratio, op_count or spec.op_count, seed, spec.span)


# replay ---------------------------------------------------------------------

def replay(ops, ctrl):
    """Apply ``ops`` in order; returns the controller's RunStats.

    Errors keep their type and gain ``trace_position``.
    """
    for i, op in enumerate(ops):
        try:
            if op.kind == "W":
                ctrl.write(op.addr, op.payload)
            else:
                ctrl.read(op.addr)
        except SimulationError as exc:
            exc.trace_position = i
            if isinstance(exc, IntegrityViolation):
                exc.args = (f"op {i} ({op.line()}): {exc.args[0]}",)
            raise
    return ctrl.stats
