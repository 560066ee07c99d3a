"""Address geometry, region partitioning and the block-level value types.

Geometry is fixed: 64B blocks, 4KB pages, one 64B split-counter block per
page.  Only the capacity is configurable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

from .errors import AddressFault, ConfigError, MajorCounterOverflow

BLOCK_SIZE = 64
PAGE_SIZE = 4096
BLOCKS_PER_PAGE = PAGE_SIZE // BLOCK_SIZE
MINOR_BITS = 7
MINOR_MAX = (1 << MINOR_BITS) - 1
MAJOR_MAX = (1 << 64) - 1
ROOT_SLOTS = 8
ZERO_BLOCK = bytes(BLOCK_SIZE)

PERSISTENT = "persistent"
NON_PERSISTENT = "non-persistent"


def block_index(addr: int) -> int:
    return addr // BLOCK_SIZE


def page_index(addr: int) -> int:
    return addr // PAGE_SIZE


def block_in_page(addr: int) -> int:
    return (addr % PAGE_SIZE) // BLOCK_SIZE


_UNITS = {"": 1, "B": 1, "K": 1 << 10, "KB": 1 << 10, "M": 1 << 20, "MB": 1 << 20,
          "G": 1 << 30, "GB": 1 << 30, "T": 1 << 40, "TB": 1 << 40}


def parse_size(text) -> int:
    """Parse '64MB', '16G', '3TB', '4096' or a hex literal into bytes (binary units)."""
    if isinstance(text, int):
        return text
    s = str(text).strip().upper()
    if s.startswith("0X"):
        return int(s, 16)
    num = s.rstrip("KMGTB")
    unit = s[len(num):]
    if unit not in _UNITS or not num:
        raise ConfigError(f"cannot parse size {text!r}")
    try:
        value = float(num)
    except ValueError:
        raise ConfigError(f"cannot parse size {text!r}") from None
    out = value * _UNITS[unit]
    if out != int(out):
        raise ConfigError(f"size {text!r} is not a whole number of bytes")
    return int(out)


def format_size(n: int) -> str:
    for unit, scale in (("TB", 1 << 40), ("GB", 1 << 30), ("MB", 1 << 20), ("KB", 1 << 10)):
        if n >= scale and n % scale == 0:
            return f"{n // scale}{unit}"
    return f"{n}B"


@dataclass(frozen=True)
class RegionMap:
    """One contiguous persistent range inside the physical capacity.

    The persistent length must be an exact multiple of capacity/8 and
    start on such a boundary, so every root MAC slot covers exactly one
    region type.
    """

    capacity: int
    persistent_start: int
    persistent_len: int

    def __post_init__(self):
        cap = self.capacity
        if cap <= 0 or cap % (ROOT_SLOTS * PAGE_SIZE):
            raise ConfigError(
                f"capacity {cap} must be a positive multiple of {ROOT_SLOTS * PAGE_SIZE} bytes")
        eighth = cap // ROOT_SLOTS
        if self.persistent_len < 0 or self.persistent_len > cap:
            raise ConfigError("persistent length outside capacity")
        if self.persistent_len % eighth:
            raise ConfigError(
                f"persistent length {self.persistent_len} is not a multiple of capacity/8; "
                "allowed ratios are 0:8, 1:7, ..., 8:0")
        if self.persistent_start % eighth or self.persistent_start + self.persistent_len > cap:
            raise ConfigError("persistent range must start on a capacity/8 boundary and fit")

    @classmethod
    def from_ratio(cls, capacity: int, persistent_eighths: int, at_end: bool = True) -> "RegionMap":
        """Build a map with ``persistent_eighths``/8 of memory persistent.

        ``at_end`` places the persistent range at the top of memory, like a
        ``memmap=4G!12G`` carve-out on a 16GB part.
        """
        if not 0 <= persistent_eighths <= ROOT_SLOTS:
            raise ConfigError(f"ratio {persistent_eighths}:{ROOT_SLOTS - persistent_eighths} invalid")
        plen = capacity // ROOT_SLOTS * persistent_eighths
        start = capacity - plen if at_end else 0
        return cls(capacity, start, plen)

    @property
    def ratio(self) -> tuple[int, int]:
        p = self.persistent_len * ROOT_SLOTS // self.capacity
        return p, ROOT_SLOTS - p

    @property
    def persistent_end(self) -> int:
        return self.persistent_start + self.persistent_len

    def is_persistent(self, addr: int) -> bool:
        return self.persistent_start <= addr < self.persistent_end

    def slot_is_persistent(self, slot: int) -> bool:
        return self.is_persistent(slot * (self.capacity // ROOT_SLOTS))


def parse_ratio(text: str) -> int:
    """'1:7' -> 1.  Returns the persistent eighths."""
    try:
        p, n = (int(x) for x in str(text).split(":"))
    except ValueError:
        raise ConfigError(f"ratio {text!r} must look like p:n") from None
    if p < 0 or n < 0 or p + n != ROOT_SLOTS:
        raise ConfigError(f"ratio {text!r} must satisfy p+n=8")
    return p


def check_address(addr: int, capacity: int) -> None:
    if addr < 0 or addr >= capacity:
        raise AddressFault(f"address {addr:#x} outside capacity {capacity:#x}")


def region_of(addr: int, region_map: RegionMap) -> str:
    check_address(addr, region_map.capacity)
    return PERSISTENT if region_map.is_persistent(addr) else NON_PERSISTENT


class IV(NamedTuple):
    page_id: int
    page_offset: int
    major: int
    minor: int

    def to_bytes(self, lane: int = 0) -> bytes:
        """Fixed 64B little-endian serialisation, ``lane`` in the last byte."""
        buf = bytearray(BLOCK_SIZE)
        buf[0:8] = self.page_id.to_bytes(8, "little")
        buf[8] = self.page_offset
        buf[9:17] = self.major.to_bytes(8, "little")
        buf[17] = self.minor
        buf[63] = lane
        return bytes(buf)


@dataclass(frozen=True)
class SplitCounterBlock:
    """One 64-bit major counter plus 64 seven-bit minor counters (one page)."""

    major: int = 0
    minors: tuple[int, ...] = (0,) * BLOCKS_PER_PAGE

    def __post_init__(self):
        if len(self.minors) != BLOCKS_PER_PAGE:
            raise ValueError("a counter block holds exactly 64 minor counters")
        if not 0 <= self.major <= MAJOR_MAX:
            raise ValueError("major counter out of range")
        if any(not 0 <= m <= MINOR_MAX for m in self.minors):
            raise ValueError("minor counter out of range")

    def to_bytes(self) -> bytes:
        packed = 0
        for i, m in enumerate(self.minors):
            packed |= m << (MINOR_BITS * i)
        return self.major.to_bytes(8, "little") + packed.to_bytes(56, "little")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SplitCounterBlock":
        if len(raw) != BLOCK_SIZE:
            raise ValueError("counter block must be 64 bytes")
        major = int.from_bytes(raw[:8], "little")
        packed = int.from_bytes(raw[8:], "little")
        minors = tuple((packed >> (MINOR_BITS * i)) & MINOR_MAX for i in range(BLOCKS_PER_PAGE))
        return cls(major, minors)

    def pair(self, offset: int) -> tuple[int, int]:
        return self.major, self.minors[offset]


ZERO_COUNTER = SplitCounterBlock()


def iv_for(addr: int, ctr: SplitCounterBlock) -> IV:
    off = block_in_page(addr)
    return IV(page_index(addr), off, ctr.major, ctr.minors[off])


def bump_counter(ctr: SplitCounterBlock, offset: int) -> tuple[SplitCounterBlock, bool]:
    """Advance the minor counter of one block.

    On minor overflow the major counter advances and every minor resets to
    zero; the caller must re-encrypt the whole page.  A wrapping major
    counter raises MajorCounterOverflow (re-keying is out of scope).
    """
    if not 0 <= offset < BLOCKS_PER_PAGE:
        raise ValueError(f"block offset {offset} outside page")
    if ctr.minors[offset] < MINOR_MAX:
        minors = list(ctr.minors)
        minors[offset] += 1
        return SplitCounterBlock(ctr.major, tuple(minors)), False
    if ctr.major == MAJOR_MAX:
        raise MajorCounterOverflow("major counter exhausted; memory must be re-keyed")
    return SplitCounterBlock(ctr.major + 1), True
