"""Error taxonomy shared by the whole toolkit.

Each class maps to a process exit code in the command-line driver:
usage errors exit 1, data errors exit 2, internal errors exit 3.
"""


class SeglmError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 3


class UsageError(SeglmError):
    """Bad flags, malformed configuration, misuse of an API contract."""

    exit_code = 1


class ConfigError(UsageError):
    """Invalid or inconsistent configuration values (e.g. shape mismatch)."""


class DataError(SeglmError):
    """Missing or malformed input artifacts (corpora, vocabularies, checkpoints)."""

    exit_code = 2


class InternalError(SeglmError):
    """Invariant violation inside the toolkit, e.g. a non-finite loss."""

    exit_code = 3
