"""Shared exception types."""


class ContractError(ValueError):
    """A caller violated an operation's precondition or shape contract."""


class OracleError(RuntimeError):
    """A test oracle (e.g. finite differences) hit a non-finite evaluation."""
