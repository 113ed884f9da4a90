"""Exception hierarchy.

Every error raised by the package derives from :class:`RefdxError`. The
``exit_code`` attribute is what the command line returns when the error
escapes a subcommand.
"""


class RefdxError(Exception):
    exit_code = 3


class ShapeError(RefdxError, ValueError):
    """Array shapes or lengths are incompatible."""


class DomainError(RefdxError, ValueError):
    """An argument lies outside the domain of the operation."""


class NumericError(RefdxError, ArithmeticError):
    """A non-finite or degenerate value appeared during computation."""

    exit_code = 4


class StateError(RefdxError, RuntimeError):
    """An object was used before it reached the required state."""


class ConfigError(RefdxError, ValueError):
    """A configuration value or combination is invalid."""


class CaseLookupError(RefdxError, KeyError):
    """A case id does not resolve inside the corpus."""

    def __str__(self):
        return Exception.__str__(self)


class CorpusLoadError(RefdxError):
    """Base class for corpus ingestion failures."""


class DimMismatchError(CorpusLoadError):
    pass


class TruncatedBlobError(CorpusLoadError):
    pass


class DuplicateIdError(CorpusLoadError):
    pass


class ManifestError(CorpusLoadError):
    pass


class UsageError(RefdxError):
    """Bad command-line usage or configuration file layout."""

    exit_code = 1
