"""
Exception types raised by the Stein-Encoder toolkit.

The CLI maps ConfigError and ArtifactError to exit code 2 and every other
SteinEncoderError to exit code 1.
"""


class SteinEncoderError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(SteinEncoderError, ValueError):
    """Invalid configuration, manifest or command-line usage."""


class DataError(SteinEncoderError):
    """Input table could not be read or is unusable after filtering."""


class NuisanceError(SteinEncoderError):
    """The conditional working model Z | X could not be estimated."""


class DegenerateDirectionError(SteinEncoderError):
    """Every Stein candidate has zero strength, so no direction exists."""


class EigenConvergenceError(SteinEncoderError):
    """Power iteration did not converge; the spectrum is nearly degenerate."""

    def __init__(self, message: str, gap: float, iterations: int):
        super().__init__(message)
        self.gap = gap
        self.iterations = iterations


class TrainingDivergenceError(SteinEncoderError):
    """Training loss became non-finite."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class ArtifactError(SteinEncoderError):
    """A saved encoder or model is missing or incompatible with the input."""
