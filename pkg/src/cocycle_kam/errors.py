"""Exception hierarchy; messages match the documented error strings."""


class CocycleKamError(Exception):
    """Base class for domain errors."""


class ArithmeticConditionError(CocycleKamError):
    pass


class OutsideStrip(CocycleKamError):
    pass


class ResonantFrequency(CocycleKamError):
    pass


class GrowthOverflow(CocycleKamError):
    pass


class RotationFormLost(CocycleKamError):
    pass


class RotationNumberNotResolved(CocycleKamError):
    pass


class KamError(CocycleKamError):
    """A KAM stage failed; ``details`` carries the measured quantities."""

    def __init__(self, message: str, details: dict | None = None):
        super().__init__(message)
        self.details = details or {}
