class ContractError(RuntimeError):
    """An internal invariant or call contract was violated by the caller."""
