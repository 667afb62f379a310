"""Exception types shared across the package.

The CLI maps these onto process exit codes (see ``tasksample.cli``).
"""


class ArgumentError(ValueError):
    """Bad argument values: empty point sets, k > n, malformed sizes."""


class ConfigurationError(ArgumentError):
    """A required artifact (checkpoint, dataset) is missing or inconsistent."""


class FormatError(Exception):
    """A checkpoint or dataset file failed to parse."""


class TrainingError(RuntimeError):
    """Training diverged (NaN/inf loss or gradient)."""
