"""Exception hierarchy shared by all meshsla modules."""


class MeshSlaError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(MeshSlaError):
    pass


class CycleError(ConfigError):
    pass


class DanglingReference(ConfigError):
    pass


class MissingServiceTime(ConfigError):
    pass


class DivisionByZeroThreshold(MeshSlaError):
    pass


class EmptySamples(MeshSlaError):
    pass


class InsufficientSamples(MeshSlaError):
    pass


class ArrivalGapError(ConfigError):
    pass


class UnknownService(MeshSlaError):
    pass


class UnknownClass(MeshSlaError):
    pass


class InvalidMix(ConfigError):
    pass


class EmptyWindow(MeshSlaError):
    pass


class NoConvergence(MeshSlaError):
    pass


class SweepTooShort(ConfigError):
    pass


class NoFeasibleRow(MeshSlaError):
    pass


class MissingProfile(MeshSlaError):
    pass


class GridMismatch(MeshSlaError):
    pass


class InfeasibleBudget(MeshSlaError):
    pass


class Infeasible(MeshSlaError):
    """No allocation satisfies every SLA.

    ``class_id`` names the class that blocks feasibility and ``gap_ms`` how far
    its best achievable bound sits above the (scaled) target.
    """

    def __init__(self, message, class_id=None, gap_ms=None):
        super().__init__(message)
        self.class_id = class_id
        self.gap_ms = gap_ms


class EmptyProfile(MeshSlaError):
    pass


class InstanceTooLarge(MeshSlaError):
    pass


class ZeroMeasuredLatency(MeshSlaError):
    pass


class ZeroThreshold(MeshSlaError):
    pass


class ZeroTotalLoad(MeshSlaError):
    pass


class SchemaError(ConfigError):
    pass
