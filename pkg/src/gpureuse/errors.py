"""Exception hierarchy shared by every module."""


class GpuReuseError(Exception):
    pass


class ConfigError(GpuReuseError):
    pass


class OrderingError(GpuReuseError):
    """A stats event arrived with a timestamp older than the last one seen."""


class InsufficientMemory(GpuReuseError):
    pass


class NotFound(GpuReuseError, KeyError):
    pass


class EvictPinned(GpuReuseError):
    pass


class OverlapMove(GpuReuseError):
    pass


class DestinationOccupied(GpuReuseError):
    pass


class Infeasible(GpuReuseError):
    pass


class InstanceTooLarge(GpuReuseError):
    pass


class PoolExhausted(GpuReuseError):
    pass
