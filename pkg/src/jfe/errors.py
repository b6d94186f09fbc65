"""Exception types shared across the package."""


class JfeError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(JfeError, ValueError):
    """An operation received arguments outside its contract (shapes, labels, sizes)."""


class NumericDomainError(JfeError, ArithmeticError):
    """A computation left its numeric domain (log of non-positive, zero norm, NaN)."""


class ConfigurationError(JfeError, ValueError):
    """Invalid or inconsistent configuration."""


class EmptyInputError(JfeError, ValueError):
    """Input is too short to produce a single analysis frame."""


class ShortUtteranceError(JfeError, ValueError):
    """Utterance has too few frames for the requested operation."""


class TrainingDiverged(JfeError, RuntimeError):
    """Training produced a non-finite loss; the model is restored to the last good state."""

    def __init__(self, message, iteration=None, checkpoint=None):
        super().__init__(message)
        self.iteration = iteration
        self.checkpoint = checkpoint
