"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of a function."""


class DimensionError(ValueError):
    """Array shapes are inconsistent with each other or with the model."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value.

    ``index`` names the offending individual when one can be identified.
    """

    def __init__(self, message, index=None):
        if index is not None:
            message = f"{message} (individual {index})"
        super().__init__(message)
        self.index = index


class SaturationError(NumericError):
    """The survival-time root finder could not bracket a solution below t_max."""
