"""Exception hierarchy shared by the toolkit."""


class EITError(Exception):
    """Base class for all toolkit errors."""


class InvalidGeometry(EITError, ValueError):
    pass


class EmptyRegion(EITError, ValueError):
    pass


class DimensionMismatch(EITError, ValueError):
    pass


class SingularSystem(EITError, ArithmeticError):
    pass


class SingularRegularizedSystem(EITError, ArithmeticError):
    pass


class MaskMismatch(EITError, ValueError):
    pass


class NonFiniteIterate(EITError, ArithmeticError):
    pass


class DegenerateDataset(EITError, ValueError):
    pass


class RejectionOverflow(EITError, RuntimeError):
    """Target placement could not be satisfied within the attempt budget."""


class ConfigError(EITError, ValueError):
    pass


class ScenarioError(EITError):
    """Wraps a solver failure with the index of the scenario that caused it."""

    def __init__(self, index, cause):
        super().__init__(f"scenario {index}: {cause}")
        self.index = index
        self.cause = cause
