"""Exception types shared across the toolchain and simulator."""


class LpuError(Exception):
    """Base class for all toolchain/simulator errors."""


class CapacityExceeded(LpuError):
    """Model + KV footprint does not fit the target memory. Carries the deficit in bytes."""

    def __init__(self, deficit_bytes, message=None):
        self.deficit_bytes = deficit_bytes
        super().__init__(message or f"capacity exceeded by {deficit_bytes:.3e} bytes")


class InvalidDeviceCount(LpuError):
    pass


class UnmappedTensor(LpuError):
    pass


class IndexOutOfRange(LpuError):
    pass


class UnknownBlock(LpuError):
    pass


class RegisterPressureExceeded(LpuError):
    pass


class CyclicDependency(LpuError):
    pass


class MalformedBinary(LpuError):
    pass


class InvalidSamplingParams(LpuError):
    pass


class Deadlock(LpuError):
    """No runnable instruction while work remains; indicates a chaining bug."""


class IllegalPartition(LpuError):
    pass


class CrossRing(LpuError):
    pass


class BufferOverflow(LpuError):
    """Sync staging buffer occupancy exceeded its configured size."""
