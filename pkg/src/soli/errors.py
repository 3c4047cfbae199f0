"""Exception hierarchy shared by every module of the package."""


class SoliError(Exception):
    """Base class for all errors raised by this package."""


class ProfileError(SoliError, ValueError):
    """Malformed augmentation profile name or out-of-range field."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ProfileTooAggressiveError(SoliError, ValueError):
    """A profile would shrink an image below one pixel."""


class ImageError(SoliError, ValueError):
    pass


class ManifestError(SoliError, ValueError):
    """Invalid manifest content; ``lines`` holds the 1-based offending lines."""

    def __init__(self, message, lines=()):
        super().__init__(message)
        self.lines = tuple(lines)


class SamplingError(SoliError, RuntimeError):
    pass


class ShapeError(SoliError, ValueError):
    pass


class VocabularyError(SoliError, ValueError):
    pass


class GradientStateError(SoliError, RuntimeError):
    """backward() called without a fresh forward graph."""


class NonFiniteGradientError(SoliError, FloatingPointError):
    def __init__(self, message, names=()):
        super().__init__(message)
        self.names = tuple(names)


class CheckpointError(SoliError, RuntimeError):
    pass


class SpecMismatchError(CheckpointError):
    pass


class ConfigError(SoliError, ValueError):
    pass


class DegenerateBatchError(SoliError, ValueError):
    pass
