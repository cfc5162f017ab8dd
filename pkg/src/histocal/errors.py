"""Exception and warning types shared across the package."""


class HistocalError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(HistocalError):
    """Malformed data passed to an operation (negative counts, bad rows...)."""


class ConfigError(HistocalError):
    """Invalid or inconsistent configuration values."""


class FoldError(HistocalError):
    """Invalid cross-validation fold (empty training set, unknown slide...)."""


class ShapeError(HistocalError):
    """Operands with incompatible shapes."""


class NumericError(HistocalError):
    """A numeric operation produced a non-finite result."""


class ContractError(HistocalError):
    """A caller or callee violated an API contract."""


class RetrievalError(HistocalError):
    """Gallery retrieval could not produce any candidate."""


class OracleError(HistocalError):
    """A verification oracle could not be applied (e.g. non-deterministic build)."""


class ContractWarning(UserWarning):
    """Recorded when inputs are legal but outside the intended regime."""
