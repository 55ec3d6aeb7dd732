"""Kaczmarz-type row-action solvers for the matrix equation ``A X B = C``."""
from .solvers import Method, ResidualRel, SolutionRRN, SolveConfig, SolveReport, solve

__version__ = "0.1.0"

__all__ = ["Method", "ResidualRel", "SolutionRRN", "SolveConfig", "SolveReport", "solve", "__version__"]
