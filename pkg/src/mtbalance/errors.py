"""Exception hierarchy. Every failure a balancing method can legitimately hit
during training derives from BalancingError so the harness can record it as a
crashed trial instead of unwinding the whole experiment."""


class BalancingError(Exception):
    """Base class for recoverable optimizer/model failures."""


class SingularMatrixError(BalancingError):
    """A linear system is singular within the pivot tolerance."""


class DegenerateGeometryError(BalancingError):
    """Task gradients are geometrically degenerate for the requested method
    (e.g. duplicated gradients make the equal-projection system singular)."""


class ZeroGradientError(BalancingError):
    """A per-task gradient is numerically zero where a method needs its norm."""

    def __init__(self, task, message=None):
        self.task = task
        super().__init__(message or f"task {task!r} has a numerically zero gradient")


class NonPositiveLossError(BalancingError):
    """A loss value is <= 0 where a method takes its log or reciprocal."""

    def __init__(self, task, value):
        self.task = task
        self.value = value
        super().__init__(f"task {task!r} has non-positive loss {value!r}")


class NonFiniteLossError(BalancingError):
    """A forward pass produced a NaN/Inf loss."""

    def __init__(self, task, value):
        self.task = task
        self.value = value
        super().__init__(f"task {task!r} produced non-finite loss {value!r}")


class MetricError(BalancingError):
    """Metric inputs are malformed (misaligned structure, zero baseline)."""


class IdxFormatError(BalancingError):
    """An IDX file failed validation (bad magic, truncation, count mismatch)."""


class ConfigError(BalancingError):
    """A trial configuration or config file is invalid."""
