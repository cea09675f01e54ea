"""Exception types shared across the package.

The CLI maps these to exit codes: ValidationError/ParseError/ConfigError -> 2,
MissingArtifactError/MissingPredictionError -> 3, NumericalError -> 4.
"""


class NoduleSegError(Exception):
    """Base class for package errors."""


class ValidationError(NoduleSegError):
    """Input violates a documented precondition or invariant."""


class ParseError(NoduleSegError):
    """Malformed file content; message names the offending line."""


class ConfigError(NoduleSegError):
    """Bad or unknown configuration value."""


class MissingArtifactError(NoduleSegError):
    """An upstream artifact (dataset, prompts, bundles, checkpoint) is absent."""


class MissingPredictionError(MissingArtifactError):
    """Recorded-segmenter backend has no prediction file for a prompt."""


class NumericalError(NoduleSegError):
    """Non-finite loss or other numerical failure during training."""
