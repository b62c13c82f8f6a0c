"""Exception types raised across the package."""


class SharnnError(Exception):
    pass


class DimensionError(SharnnError, ValueError):
    pass


class ConfigError(SharnnError, ValueError):
    pass


class DataError(SharnnError, ValueError):
    pass


class ContractError(SharnnError, RuntimeError):
    pass


class NonFiniteError(SharnnError, FloatingPointError):
    """A loss or gradient became NaN/inf."""


class GradCheckError(SharnnError):
    pass


class CheckpointError(SharnnError):
    pass


class FormatError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass
