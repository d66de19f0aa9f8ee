"""Revised simplex LP solver and branch-and-bound MIP solver."""
from .builder import ModelBuilder
from .mip import MipOptions, resolve_with_added_rows, solve, solve_lp, solve_mip
from .mps import read_mps, write_mps
from .problem import (
    Basis, Infeasible, LinearProgram, LpSolution, MalformedProblem, MipSolution,
    NodeLimitExceeded, NumericalFailure, RowBlock, SolverError, Status,
)
from .simplex import SimplexOptions

__all__ = [
    "Basis", "Infeasible", "LinearProgram", "LpSolution", "MalformedProblem",
    "MipOptions", "MipSolution", "ModelBuilder", "NodeLimitExceeded", "NumericalFailure",
    "RowBlock", "SimplexOptions", "SolverError", "Status", "read_mps", "resolve_with_added_rows",
    "solve", "solve_lp", "solve_mip", "write_mps",
]
