"""Exception types shared across the package."""


class MarginForgeError(Exception):
    """Base class for all package-specific errors."""


class DegenerateInputError(MarginForgeError):
    """A vector or matrix row is degenerate (e.g. zero norm)."""


class InfeasibleConfigError(MarginForgeError):
    """The requested geometric configuration cannot exist."""


class InvalidSpecError(MarginForgeError):
    """A loss/regularizer spec violates its invariants."""


class InvalidCountsError(MarginForgeError):
    """Class counts are missing, non-positive, or malformed."""


class MissingClassError(MarginForgeError):
    """One or more class indices have no samples."""

    def __init__(self, missing):
        self.missing = sorted(int(i) for i in missing)
        super().__init__(f"classes with no samples: {self.missing}")


class NumericOverflowError(MarginForgeError):
    """A computation produced non-finite values."""


class TrainingDivergedError(MarginForgeError):
    """An optimization or training run produced a non-finite loss."""


class ConfigError(MarginForgeError):
    """Experiment configuration failed to parse or validate."""
