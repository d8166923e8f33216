"""Exception types raised across the pipeline."""


class SohError(ValueError):
    """Base class for all pipeline errors."""


class SchemaError(SohError):
    pass


class EmptyInputError(SohError):
    pass


class InsufficientDataError(SohError):
    pass


class AnchorNotReachedError(SohError):
    pass


class MalformedCurveError(SohError):
    pass


class InvalidNominalError(SohError):
    pass


class EmptyWindowError(SohError):
    pass


class MissingPhaseError(SohError):
    pass


class DegenerateDistributionError(SohError):
    """All values identical; kurtosis undefined.

    The remaining statistics are still available on ``partial``.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class UndefinedCorrelationError(SohError):
    pass


class NoInformativeFeaturesError(SohError):
    pass


class InvalidHyperparameterError(SohError):
    pass


class NonPositiveDefiniteError(SohError):
    pass


class FitFailureError(SohError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class InputDimensionError(SohError):
    pass


class NoModelsError(SohError):
    pass


class DivisionDomainError(SohError):
    pass


class ConfigError(SohError):
    def __init__(self, message, problems=None):
        super().__init__(message)
        self.problems = problems or []


class ArtifactError(SohError):
    pass
