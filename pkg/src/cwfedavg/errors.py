"""Exception types raised across the simulator."""


class CwFedError(Exception):
    """Base class for all simulator errors."""


class ConfigError(CwFedError, ValueError):
    """Invalid or incomplete experiment configuration."""


class ShapeError(CwFedError, ValueError):
    """Parameter or data shapes do not line up."""


class NumericalError(CwFedError, FloatingPointError):
    """A loss or gradient became non-finite."""


class IdxParseError(CwFedError, ValueError):
    """Malformed IDX file."""


class PartitionError(CwFedError, ValueError):
    """The requested partition cannot be formed from the data."""


class EstimationError(CwFedError, ValueError):
    """Class distribution cannot be estimated (all-zero final layer)."""


class UndefinedCorrelationError(CwFedError, ValueError):
    """Correlation requested on a matrix with no variation."""
