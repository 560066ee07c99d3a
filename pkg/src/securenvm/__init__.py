"""Secure NVM simulator: counter-mode encryption, Merkle tree integrity,
selective metadata persistence, crash recovery."""

from .analytics import PadLedger, RunStats, analytic_recovery_time, recovery_blocks
from .config import SimConfig, load_config
from .controller import PersistPolicy, SecureMemoryController
from .core import IV, RegionMap, SplitCounterBlock, parse_size
from .errors import (AddressFault, ConfigError, CrashInjected, IntegrityViolation,
                     MajorCounterOverflow, SimulationError, ZeroMacLoopExceeded)
from .merkle import MerkleTree, TreeGeometry, build_full
from .recovery import RecoveryReport, crash_point_enumerate, crash_test, recover
from .workload import SyntheticSpec, TraceOp, generate, parse_trace, replay

__version__ = "0.1.0"

__all__ = [
    "AddressFault", "ConfigError", "CrashInjected", "IV", "IntegrityViolation",
    "MajorCounterOverflow", "MerkleTree", "PadLedger", "PersistPolicy", "RecoveryReport",
    "RegionMap", "RunStats", "SecureMemoryController", "SimConfig", "SimulationError",
    "SplitCounterBlock", "SyntheticSpec", "TraceOp", "TreeGeometry", "ZeroMacLoopExceeded",
    "analytic_recovery_time", "build_full", "crash_point_enumerate", "crash_test", "generate",
    "load_config", "parse_size", "parse_trace", "recover", "recovery_blocks", "replay",
]
