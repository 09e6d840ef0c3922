"""Exception types shared across the package.

Each error carries a ``category`` string used by the CLI to pick an exit
code: "config" -> 2, "data" -> 3, "numeric" -> 4, "budget" -> 5.
"""


class MatcompError(Exception):
    category = "config"


class ConfigError(MatcompError):
    category = "config"


class DataError(MatcompError):
    category = "data"


class DimensionError(MatcompError):
    """Shapes of operands do not conform."""

    category = "data"


class SingularSystemError(MatcompError):
    category = "numeric"


class DivergenceError(MatcompError):
    category = "numeric"


class PredictionError(MatcompError):
    category = "data"


class BudgetError(MatcompError):
    category = "budget"
