"""Exception hierarchy shared by every stage of the toolkit.

All data-facing failures derive from :class:`KernelRulesError` so the CLI can
map them to a single exit code. Anything else that escapes is a bug.
"""


class KernelRulesError(Exception):
    """Base class for all expected (data/config) failures."""


class FormatError(KernelRulesError):
    """A file does not conform to its documented on-disk format."""


class EmptyInputError(KernelRulesError):
    """An input that must contain at least one record is empty."""


class IoError(KernelRulesError):
    """A path could not be read or written."""


class AlignmentError(KernelRulesError):
    """Two structures that must share kernel ids / dimensions do not."""


class MissingColumnError(KernelRulesError):
    """An operation requires an optional column that is absent."""


class DegenerateInputError(KernelRulesError):
    """Training data lacks the variety the learner needs (e.g. one class)."""


class ParseError(KernelRulesError):
    """Rule text is syntactically malformed."""

    def __init__(self, message, line=None, column=None):
        if line is not None:
            message = f"line {line}, column {column}: {message}"
        super().__init__(message)
        self.line = line
        self.column = column


class StratificationError(KernelRulesError):
    """The exception-predicate structure of a rule program is not stratified."""


class CollisionError(KernelRulesError):
    """Two kernels would end up with the same predicate name."""


class EmptyRegionError(KernelRulesError):
    """Every candidate activation region for a kernel is empty."""


class MissingDataError(KernelRulesError):
    """A kernel that needs labelling has no feature-map/mask data."""


class ConfigError(KernelRulesError):
    """A run configuration value is out of range or inconsistent."""
