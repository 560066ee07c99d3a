"""Deterministic toy cryptography: keyed 64-bit MAC, counter-mode pads, keys.

None of this is secure.  The primitives are bit-exact and documented in
docs/CRYPTO.md so that golden values are portable; what matters to the
simulator is determinism and that pad reuse is observable.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

from .core import BLOCK_SIZE, IV

MASK64 = (1 << 64) - 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
FMIX_C1 = 0xFF51AFD7ED558CCD
FMIX_C2 = 0xC4CEB9FE1A85EC53
PAD_LANES = BLOCK_SIZE // 8
DATA_MAC_LANE = 0xFF


def fmix64(h: int) -> int:
    h ^= h >> 33
    h = (h * FMIX_C1) & MASK64
    h ^= h >> 33
    h = (h * FMIX_C2) & MASK64
    h ^= h >> 33
    return h


@lru_cache(maxsize=1 << 18)
def _mac64(key: int, data: bytes) -> int:
    h = FNV_OFFSET ^ key
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & MASK64
    return fmix64(h)


def mac64(key: int, data: bytes) -> int:
    """FNV-1a-64 over exactly 64 bytes, key folded into the offset basis, then fmix64."""
    if len(data) != BLOCK_SIZE:
        raise ValueError(f"mac64 input must be {BLOCK_SIZE} bytes, got {len(data)}")
    return _mac64(key & MASK64, bytes(data))


def gen_pad(key: int, iv: IV) -> bytes:
    """64B one-time pad: lane i is mac64(key, iv serialised with lane i)."""
    return b"".join(mac64(key, iv.to_bytes(lane)).to_bytes(8, "little") for lane in range(PAD_LANES))


def xor_bytes(a: bytes, b: bytes) -> bytes:
    return (int.from_bytes(a, "little") ^ int.from_bytes(b, "little")).to_bytes(len(a), "little")


def encrypt_block(plain: bytes, key: int, iv: IV) -> bytes:
    if len(plain) != BLOCK_SIZE:
        raise ValueError("plaintext must be 64 bytes")
    return xor_bytes(plain, gen_pad(key, iv))


decrypt_block = encrypt_block


def data_mac(mac_key: int, enc_key: int, iv: IV, ciphertext: bytes) -> int:
    """MAC stored beside a data block, bound to its ciphertext, counter and key.

    The encryption key is folded in so ciphertext from an earlier volatile
    epoch cannot be replayed against a reused IV.
    """
    inner = mac64(mac_key ^ enc_key, iv.to_bytes(DATA_MAC_LANE))
    return mac64(inner, ciphertext)


def derive_key(seed: int, label: str) -> int:
    raw = label.encode()[:BLOCK_SIZE].ljust(BLOCK_SIZE, b"\0")
    return mac64(seed, raw)


@dataclass(frozen=True)
class Key:
    name: str
    material: int


@dataclass(frozen=True)
class KeySet:
    """Keys derived from a master seed.

    The volatile key is a pure function of (seed, epoch); the epoch itself
    lives in the processor's persistent registers and advances on each
    recovery.
    """

    master_seed: int
    volatile_epoch: int = 0

    @property
    def persistent_key(self) -> Key:
        return Key("persistent", derive_key(self.master_seed, "persistent-key"))

    @property
    def volatile_key(self) -> Key:
        return Key(f"volatile@{self.volatile_epoch}",
                   derive_key(self.master_seed, f"volatile-key/{self.volatile_epoch}"))

    @property
    def tree_key(self) -> int:
        return derive_key(self.master_seed, "merkle-tree-key")

    @property
    def mac_key(self) -> int:
        return derive_key(self.master_seed, "data-mac-key")

    def next_epoch(self) -> "KeySet":
        return KeySet(self.master_seed, self.volatile_epoch + 1)
