class AssumptionError(ValueError):
    """A standing assumption on the problem data fails on the sampled grid."""


class SolverError(RuntimeError):
    """The discrete solver could not produce a valid solution."""
