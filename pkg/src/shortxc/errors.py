class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class ParseError(ValueError):
    """Malformed input file; the message names the file and line."""
