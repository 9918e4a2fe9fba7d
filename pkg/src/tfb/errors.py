"""Exception types shared across the package.

The command line layer maps these onto exit codes: usage errors are
reported by argparse itself, :class:`DataError` signals malformed or
inconsistent input data, and :class:`NumericalError` signals a numerical
failure (divergence, infeasibility, singularity) during estimation.
"""


class DataError(ValueError):
    """Input data violates a documented precondition."""


class NumericalError(RuntimeError):
    """A numerical routine failed to converge or the problem is singular."""


class InfeasibleError(NumericalError):
    """A balancing problem has no feasible solution."""
