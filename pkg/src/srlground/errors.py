"""Error taxonomy shared by all modules.

Exit-code mapping used by the CLI: ConfigError -> 2, DataError -> 3,
ContractError -> 4.
"""


class GroundingError(Exception):
    """Base class for all package errors."""


class ConfigError(GroundingError):
    """Invalid or inconsistent configuration."""


class DataError(GroundingError):
    """Malformed or missing input data (parse errors, missing files)."""


class ValidationError(DataError):
    """A record violated a corpus invariant."""


class ContractError(GroundingError):
    """An operation was called outside its contract."""


class ShapeError(ContractError):
    """Operands have incompatible shapes."""

    def __init__(self, op, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")
        self.shapes = shapes
