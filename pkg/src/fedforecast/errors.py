"""Exception types shared across the package.

Every error raised by fedforecast derives from FedForecastError so callers
can catch one base type. The CLI maps these onto exit codes: config problems
exit 1, data problems exit 2, numeric divergence exits 3.
"""


class FedForecastError(Exception):
    """Base class for all fedforecast errors."""


class ConfigError(FedForecastError):
    """Invalid configuration value, unknown key, or inconsistent fields."""


class IoError(FedForecastError):
    """File could not be read or written."""


class SchemaError(FedForecastError):
    """CSV header is missing a required column."""


class ParseError(FedForecastError):
    """A CSV cell could not be parsed; message carries the line number."""


class GapError(FedForecastError):
    """Timestamps within a client are non-monotone or have missing hours."""


class InsufficientDataError(FedForecastError):
    """Too few observations for the requested window/split/statistic."""


class ShapeError(FedForecastError):
    """Array dimensions are inconsistent with the model or operation."""


class EmptyAggregationError(FedForecastError):
    """Aggregation was asked to average zero client updates."""


class AlignmentError(FedForecastError):
    """Series that must share timestamps do not."""


class NumericError(FedForecastError):
    """Non-finite values appeared where finite ones are required."""
