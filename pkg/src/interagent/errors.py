"""Exception types shared across the package."""


class InterAgentError(Exception):
    pass


class DimensionError(InterAgentError, ValueError):
    """Operand shapes do not agree."""


class ContractError(InterAgentError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(InterAgentError, ValueError):
    pass


class DataError(InterAgentError, ValueError):
    pass


class FormatError(InterAgentError, ValueError):
    """A file on disk does not match the expected binary layout."""


class DegenerateInputError(InterAgentError, ValueError):
    pass


class SimulationFault(InterAgentError, RuntimeError):
    """The simulator produced a non-finite state."""
