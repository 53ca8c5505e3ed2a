"""Exception types shared across the package.

The CLI maps these onto stable exit codes (see cli.py), so library code
should raise the most specific type that applies.
"""


class MultilidError(Exception):
    """Base class for all errors raised by this package."""


class BadInputError(MultilidError):
    """Malformed or inconsistent user input: files, tags, specs, flags."""


class AudioFormatError(BadInputError):
    """Audio that is not PCM16 mono at the expected sample rate."""


class TooShortError(MultilidError):
    """Input sequence shorter than the network's minimum receptive field."""


class NumericsError(MultilidError):
    """Non-finite values where finite ones are required (e.g. training loss)."""


class CompatibilityError(MultilidError):
    """Model, registry and corpus artifacts that do not belong together."""
