"""Exception hierarchy shared across the package.

Every error family carries a process exit code so the command line front end
can map failures to stable, scriptable statuses (documented in the README).
"""


class MixmemError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(MixmemError):
    """Bad run configuration: unknown key, unparsable value, invalid setting."""

    exit_code = 2


class FormatError(MixmemError):
    """Base for binary file format violations."""

    exit_code = 3


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncationError(FormatError):
    """File ended early. Message names the byte offset where data ran out."""


class DimMismatchError(FormatError):
    """Header dimensions disagree with the payload or the running config."""


class DimensionError(MixmemError):
    """Tensor operands have incompatible shapes."""

    exit_code = 4


class NumericError(MixmemError):
    """Non-finite values where finite ones are required."""

    exit_code = 5


class TrainingDivergedError(NumericError):
    """Loss became non-finite during optimization. Message names the step."""


class ProtocolError(MixmemError):
    """Evaluation protocol precondition violated (sizes, ranges, shapes)."""

    exit_code = 6


class PoolError(MixmemError):
    """Memory pool misuse: empty pool, inconsistent entry dimensions."""

    exit_code = 7


class CapacityError(PoolError):
    """Requested more entries than the pool holds."""


class LabelError(MixmemError):
    """Label tensor contains values outside {0, 1} or has a bad shape."""

    exit_code = 6


class ScheduleError(MixmemError):
    """Invalid diffusion schedule parameters."""

    exit_code = 8


class SamplingError(MixmemError):
    """Reverse diffusion produced non-finite values. Message names the step."""

    exit_code = 8


class GradCheckError(MixmemError):
    """Gradient verification could not run (non-deterministic loss, bad input)."""

    exit_code = 9
