"""Exception hierarchy shared across the package."""


class PgaeError(Exception):
    """Base class for all package errors."""


class ConfigError(PgaeError):
    """Invalid configuration file or option."""


class DataError(PgaeError):
    """Malformed population file, trace file, or schema violation."""


class DesignError(PgaeError):
    """Invalid or degenerate sampling/experimentation design."""


class PredictorNotFittedError(PgaeError):
    """A refit-style predictor was queried before being fitted."""


class InsufficientLabeledDataError(PgaeError):
    """Too few labeled observations to fit conditional-moment regressors."""


class FoldStarvationError(PgaeError):
    """A cross-fitting fold has too little labeled data; use a smaller fold count."""


class StarvationError(PgaeError):
    """A policy failed to reach its treated-unit target within the sample cap."""
