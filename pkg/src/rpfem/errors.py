"""Exception taxonomy shared across the package.

The CLI maps ConfigError/FormatError to exit code 2 (user error) and every
other RpfemError to exit code 1 (internal failure).
"""


class RpfemError(Exception):
    pass


class DimensionError(RpfemError):
    """Tensor or graph shapes do not line up."""


class ContractError(RpfemError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class ConfigError(RpfemError):
    """User-supplied configuration or paths are invalid."""


class FormatError(RpfemError):
    """An input or serialized file is malformed."""


class TrainingDiverged(RpfemError):
    """Loss became non-finite during optimization."""
