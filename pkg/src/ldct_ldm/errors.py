"""Exception types shared across the package.

Plain argument problems raise ``ValueError``; the classes here mark failures
the CLI maps to distinct exit codes.
"""


class ConfigError(ValueError):
    """Invalid or mutually incompatible configuration (exit code 2)."""


class MissingPrerequisite(FileNotFoundError):
    """A required artifact (dataset, checkpoint) does not exist (exit code 3)."""


class NumericError(FloatingPointError):
    """Non-finite values in a loss or tensor (exit code 4)."""


class ContractError(RuntimeError):
    """A protocol precondition was violated, e.g. an unfrozen encoder."""


class ChecksumError(IOError):
    """Stored payload does not match its recorded checksum."""


class FormatError(IOError):
    """A file is not in the expected container format or version."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4
