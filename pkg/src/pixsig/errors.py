"""Exception taxonomy shared by all pixsig modules.

The CLI maps these onto process exit codes, so library code should raise
the most specific class that applies instead of bare ValueError.
"""


class PixsigError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PixsigError):
    """Invalid configuration, shapes, or operation preconditions. Exit code 2."""


class FormatError(PixsigError):
    """Malformed file on disk (IDX, tensor container, JSON layout). Exit code 3."""


class GateFailure(PixsigError):
    """A quality gate was not met (attack success, accuracy floor). Exit code 4."""


class NumericError(PixsigError):
    """Non-finite values or broken numeric contracts at runtime. Exit code 5."""
