"""Exception hierarchy.

Anything derived from :class:`DataError` means the inputs were bad (corrupt
file, missing labels, inconsistent manifest) rather than the caller misusing
the API; the CLI maps it to exit status 2.
"""


class DataError(Exception):
    pass


class FormatError(DataError, ValueError):
    """Base class for binary container problems (MILB bags, MILW checkpoints)."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class NonFiniteError(FormatError):
    pass


class InvalidBagError(DataError, ValueError):
    """A bag violates its invariants (duplicate coords, shape mismatch, ...)."""


class ManifestError(DataError):
    pass


class SplitError(DataError, ValueError):
    pass


class TrainingError(DataError):
    pass
