"""Exception types raised by the simulator."""


class SimulationError(Exception):
    """Base class for every error the simulator raises on purpose."""


class ConfigError(SimulationError, ValueError):
    """Invalid configuration: bad ratio, persist level, capacity, trace line..."""


class AddressFault(SimulationError, ValueError):
    """Address outside the configured capacity or not block aligned."""


class IntegrityViolation(SimulationError):
    """A MAC or Merkle tree check failed.

    ``level`` is the tree level of the node whose stored slot disagreed
    (0 means the data-block MAC), ``index`` the node or block index.
    """

    def __init__(self, message, level=None, index=None, kind="tree"):
        super().__init__(message)
        self.level = level
        self.index = index
        self.kind = kind


class MajorCounterOverflow(SimulationError):
    """A 64-bit major counter wrapped. Re-keying is not simulated."""


class ZeroMacLoopExceeded(SimulationError):
    """The zero-MAC re-encryption loop did not converge within its cap."""


class CrashInjected(Exception):
    """Raised from an event hook to abort an operation at a crash point.

    Deliberately not a SimulationError: it is control flow, not a fault.
    """

    def __init__(self, event_id):
        super().__init__(f"crash injected at event {event_id}")
        self.event_id = event_id
