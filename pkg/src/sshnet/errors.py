"""Exception types shared across the package.

Every deliberate failure path raises one of these, so the CLI can map
validation problems to exit code 1 and runtime problems to exit code 2.
"""


class SshnetError(Exception):
    """Base class for package errors."""


class ShapeError(SshnetError, ValueError):
    """Operands have incompatible or unsupported shapes."""


class ConfigError(SshnetError, ValueError):
    """A configuration value violates a documented precondition."""


class FormatError(SshnetError, ValueError):
    """A tensor file or manifest is malformed; message names the field."""


class DataValidationError(SshnetError, ValueError):
    """Loaded feature data violates a dataset invariant."""


class GradCheckError(SshnetError, RuntimeError):
    """The gradient checker could not run (e.g. non-deterministic loss)."""


class TrainingError(SshnetError, RuntimeError):
    """Training hit a non-finite gradient or similar runtime failure."""


class BenchmarkWarning(UserWarning):
    """Benchmark configuration is legal but statistically weak."""
