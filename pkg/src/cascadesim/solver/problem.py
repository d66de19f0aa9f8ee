"""Problem and solution containers shared by the LP and MIP solvers."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
import scipy.sparse as sp


class SolverError(Exception):
    """Base class for solver failures."""


class MalformedProblem(SolverError):
    """Dimensions or bounds of a problem are inconsistent."""


class NumericalFailure(SolverError):
    """The simplex could not reach a verified optimum (iteration limit or singular basis)."""


class Infeasible(SolverError):
    """Raised by callers that require a feasible answer."""


class NodeLimitExceeded(SolverError):
    def __init__(self, message: str, incumbent: "MipSolution | None" = None):
        super().__init__(message)
        self.incumbent = incumbent


class Status(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


class RowBlock(NamedTuple):
    """Rows to append to an existing problem: ``lower <= matrix @ x <= upper``."""

    matrix: sp.spmatrix | np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    names: Optional[Sequence[str]] = None


@dataclass
class LinearProgram:
    """``min costs @ x + offset`` s.t. ``row_lower <= matrix @ x <= row_upper``,
    ``var_lower <= x <= var_upper`` and ``x[integrality]`` integer.

    Infinite bounds are given as ``±np.inf``.
    """

    costs: np.ndarray
    matrix: sp.csc_matrix
    row_lower: np.ndarray
    row_upper: np.ndarray
    var_lower: np.ndarray
    var_upper: np.ndarray
    integrality: Optional[np.ndarray] = None
    offset: float = 0.0
    var_names: Optional[list[str]] = None
    row_names: Optional[list[str]] = None
    name: str = "problem"

    def __post_init__(self):
        self.costs = np.asarray(self.costs, dtype=float).ravel()
        n = self.costs.size
        if sp.issparse(self.matrix):
            self.matrix = sp.csc_matrix(self.matrix, dtype=float)
        else:
            dense = np.asarray(self.matrix, dtype=float)
            if dense.size == 0:
                dense = dense.reshape(0, n)
            self.matrix = sp.csc_matrix(dense)
        self.row_lower = np.asarray(self.row_lower, dtype=float).ravel()
        self.row_upper = np.asarray(self.row_upper, dtype=float).ravel()
        self.var_lower = np.asarray(self.var_lower, dtype=float).ravel()
        self.var_upper = np.asarray(self.var_upper, dtype=float).ravel()
        if self.integrality is None:
            self.integrality = np.zeros(n, dtype=bool)
        else:
            self.integrality = np.asarray(self.integrality, dtype=bool).ravel()

    @property
    def num_vars(self) -> int:
        return self.costs.size

    @property
    def num_rows(self) -> int:
        return self.row_lower.size

    @property
    def is_mip(self) -> bool:
        return bool(self.integrality.any())

    def problems(self) -> list[str]:
        """Invariant violations, empty when the problem is well formed."""
        n, m = self.num_vars, self.num_rows
        out = []
        if self.matrix.shape != (m, n):
            out.append(f"matrix shape {self.matrix.shape} != ({m}, {n})")
        for label, arr, size in (
            ("row_upper", self.row_upper, m),
            ("var_lower", self.var_lower, n),
            ("var_upper", self.var_upper, n),
            ("integrality", self.integrality, n),
        ):
            if arr.size != size:
                out.append(f"{label} has length {arr.size}, expected {size}")
        if out:
            return out
        if not np.all(np.isfinite(self.costs)):
            out.append("non-finite cost coefficient")
        if np.any(np.isnan(self.matrix.data)) or not np.all(np.isfinite(self.matrix.data)):
            out.append("non-finite matrix coefficient")
        if np.any(np.isnan(self.var_lower)) or np.any(np.isnan(self.var_upper)):
            out.append("NaN variable bound")
        if np.any(np.isnan(self.row_lower)) or np.any(np.isnan(self.row_upper)):
            out.append("NaN row bound")
        bad = np.flatnonzero(self.var_lower > self.var_upper)
        if bad.size:
            out.append(f"variable lower > upper at {bad[:5].tolist()}")
        bad = np.flatnonzero(self.row_lower > self.row_upper)
        if bad.size:
            out.append(f"row lower > upper at {bad[:5].tolist()}")
        if np.any(self.var_lower == np.inf) or np.any(self.var_upper == -np.inf):
            out.append("variable bound fixed at infinity")
        return out

    def check(self) -> None:
        errs = self.problems()
        if errs:
            raise MalformedProblem("; ".join(errs))

    def with_rows(self, rows: RowBlock) -> "LinearProgram":
        block = rows.matrix
        block = sp.csc_matrix(block, dtype=float) if sp.issparse(block) else sp.csc_matrix(
            np.atleast_2d(np.asarray(block, dtype=float)))
        if block.shape[1] != self.num_vars:
            raise MalformedProblem(
                f"new rows reference {block.shape[1]} columns, problem has {self.num_vars}")
        lower = np.asarray(rows.lower, dtype=float).ravel()
        upper = np.asarray(rows.upper, dtype=float).ravel()
        if lower.size != block.shape[0] or upper.size != block.shape[0]:
            raise MalformedProblem("row bound length does not match new row count")
        names = None
        if self.row_names is not None:
            extra = list(rows.names) if rows.names is not None else [
                f"r{self.num_rows + i}" for i in range(block.shape[0])]
            names = list(self.row_names) + extra
        return LinearProgram(
            costs=self.costs,
            matrix=sp.vstack([self.matrix, block], format="csc"),
            row_lower=np.concatenate([self.row_lower, lower]),
            row_upper=np.concatenate([self.row_upper, upper]),
            var_lower=self.var_lower,
            var_upper=self.var_upper,
            integrality=self.integrality,
            offset=self.offset,
            var_names=self.var_names,
            row_names=names,
            name=self.name,
        )

    def with_var_bounds(self, lower: np.ndarray, upper: np.ndarray) -> "LinearProgram":
        return LinearProgram(
            costs=self.costs, matrix=self.matrix, row_lower=self.row_lower,
            row_upper=self.row_upper, var_lower=lower, var_upper=upper,
            integrality=self.integrality, offset=self.offset,
            var_names=self.var_names, row_names=self.row_names, name=self.name)

    def relaxed(self) -> "LinearProgram":
        return LinearProgram(
            costs=self.costs, matrix=self.matrix, row_lower=self.row_lower,
            row_upper=self.row_upper, var_lower=self.var_lower, var_upper=self.var_upper,
            integrality=None, offset=self.offset, var_names=self.var_names,
            row_names=self.row_names, name=self.name)

    def variable_name(self, j: int) -> str:
        return self.var_names[j] if self.var_names is not None else f"x{j}"

    def row_name(self, i: int) -> str:
        return self.row_names[i] if self.row_names is not None else f"r{i}"


# Nonbasic/basic markers for the simplex basis, one per structural or logical variable.
BASIC, AT_LOWER, AT_UPPER, AT_ZERO = 0, 1, 2, 3


@dataclass
class Basis:
    """Simplex basis over ``n`` structurals followed by ``m`` row logicals."""

    status: np.ndarray
    num_vars: int

    @property
    def num_rows(self) -> int:
        return self.status.size - self.num_vars

    def extended(self, extra_rows: int) -> "Basis":
        """Basis for the problem with ``extra_rows`` appended; new logicals start basic."""
        n, m = self.num_vars, self.num_rows
        status = np.concatenate([
            self.status[:n], self.status[n:], np.full(extra_rows, BASIC, dtype=np.int8)])
        assert status.size == n + m + extra_rows
        return Basis(status=status.astype(np.int8), num_vars=n)


@dataclass
class LpSolution:
    status: Status
    primal_values: np.ndarray
    dual_values: np.ndarray
    objective_value: float
    reduced_costs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    basis: Optional[Basis] = None
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


@dataclass
class MipSolution:
    status: Status
    incumbent_values: np.ndarray
    objective_value: float
    bound: float
    gap: float
    nodes: int = 0
    # Duals of the LP obtained by fixing the integer variables at the incumbent.
    dual_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    basis: Optional[Basis] = None

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL

    @property
    def primal_values(self) -> np.ndarray:
        return self.incumbent_values
