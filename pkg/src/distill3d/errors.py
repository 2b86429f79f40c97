"""Exception types shared across the engine."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class DenoiserUnavailable(RuntimeError):
    """A diffusion prior could not produce an estimate."""


class DenoiserTimeout(DenoiserUnavailable):
    pass


class MalformedResponse(DenoiserUnavailable):
    pass


class ProtocolVersionError(DenoiserUnavailable):
    pass


class EmbeddingError(ValueError):
    """An encoder produced a feature vector that cannot be normalised."""


class ConversionError(RuntimeError):
    """Radiance field to tetrahedral scene conversion produced no surface."""


class PhaseAbort(RuntimeError):
    def __init__(self, phase: int, iteration: int, reason: str):
        super().__init__(f"phase {phase} aborted at iteration {iteration}: {reason}")
        self.phase = phase
        self.iteration = iteration
