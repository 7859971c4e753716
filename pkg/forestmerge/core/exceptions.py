"""
Error hierarchy.

ValidationError covers broken preconditions and malformed inputs (CLI exit code 1);
NumericalError covers computations that cannot produce a finite answer (exit code 2).
"""


class ForestMergeError(Exception):
    """Base class for all forestmerge errors."""


class ValidationError(ForestMergeError, ValueError):
    """Input violates a precondition or a file format."""


class NumericalError(ForestMergeError, ArithmeticError):
    """A numerical step failed (non-SPD matrix, underflow, non-finite result)."""
