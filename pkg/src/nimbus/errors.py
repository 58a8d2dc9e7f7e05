"""Exception hierarchy shared by every nimbus module."""


class NimbusError(Exception):
    """Base class for all library errors."""


class ValidationError(NimbusError, ValueError):
    """Input violates a documented precondition or invariant."""


class DegenerateGridError(ValidationError):
    pass


class LayoutError(ValidationError):
    """Channel layout does not contain what an operation needs."""


class DomainError(ValidationError):
    """Argument lies outside the mathematical domain of a formula."""


class FormatError(NimbusError):
    """File does not follow the expected binary layout."""


class CorruptionError(FormatError):
    pass


class PersistenceError(NimbusError, OSError):
    pass


class ShapeError(ValidationError):
    pass


class ContractError(NimbusError):
    pass


class NumericError(NimbusError, ArithmeticError):
    pass


class UndefinedACCError(NimbusError, ArithmeticError):
    """Anomaly correlation with zero anomaly variance in one field."""


class RolloutDivergenceError(NimbusError, ArithmeticError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite forecast at rollout step {step}")


class TrainingDivergenceError(NimbusError, ArithmeticError):
    def __init__(self, message: str, iteration: int | None = None, parameter: str | None = None):
        self.iteration = iteration
        self.parameter = parameter
        super().__init__(message)


class CnopError(NimbusError):
    def __init__(self, message: str, trace=None):
        self.trace = trace if trace is not None else []
        super().__init__(message)
