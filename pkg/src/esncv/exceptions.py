"""Exception hierarchy shared by all modules."""


class ESNCVError(Exception):
    """Base class for errors raised by this package."""


class ContractError(ESNCVError, ValueError):
    """Arguments violate an operation's shape or domain contract."""


class ConfigurationError(ESNCVError, ValueError):
    """A run is configured in a way that cannot produce any output."""


class WeightGenerationError(ESNCVError):
    """The random recurrent matrix came out degenerate."""


class SolverError(ESNCVError, ArithmeticError):
    """A readout linear system could not be solved reliably.

    ``condition`` holds the estimated condition number when known.
    """

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class WoodburyError(SolverError):
    """The low-rank update's inner matrix is singular for this fold and beta."""


class PlanningError(ESNCVError, ValueError):
    """A validation scheme does not fit the available data."""


class NormalizationError(ESNCVError, ValueError):
    """A score or transform needs variance the data does not have."""


class DataFormatError(ESNCVError, ValueError):
    """An input file does not follow its expected format."""


class FinalizeError(ESNCVError):
    """No usable split is left to build a final model from."""


class SearchError(ESNCVError):
    """Every grid point failed."""
