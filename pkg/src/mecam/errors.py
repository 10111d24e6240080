"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericError -> 3.
"""


class MecamError(Exception):
    pass


class ConfigError(MecamError, ValueError):
    """Invalid configuration or usage."""


class ShapeError(MecamError, ValueError):
    pass


class NumericError(MecamError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class DataError(MecamError):
    pass


class MissingFileError(DataError, FileNotFoundError):
    pass


class LabelRangeError(DataError, ValueError):
    pass


class ManifestError(DataError, ValueError):
    pass


class NetpbmError(DataError, ValueError):
    pass


class BadImageMagic(NetpbmError):
    pass


class UnsupportedMaxval(NetpbmError):
    pass


class TruncatedImage(NetpbmError):
    pass


class CheckpointError(DataError):
    pass


class BadMagic(CheckpointError):
    pass


class UnsupportedVersion(CheckpointError):
    pass


class CRCMismatch(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass
