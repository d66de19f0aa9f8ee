"""LP entry points and LP-based branch and bound."""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field

import numpy as np

from .problem import (
    Basis, LinearProgram, LpSolution, MalformedProblem, MipSolution,
    NodeLimitExceeded, RowBlock, Status,
)
from .simplex import RevisedSimplex, SimplexOptions

log = logging.getLogger(__name__)


@dataclass
class MipOptions:
    integrality_tol: float = 1e-6
    relative_gap: float = 1e-6
    node_limit: int = 20000
    simplex: SimplexOptions = field(default_factory=SimplexOptions)


def solve_lp(problem: LinearProgram, options: SimplexOptions | None = None,
             warm_start: Basis | None = None) -> LpSolution:
    """Solve the continuous relaxation of ``problem`` (integrality is ignored)."""
    problem.check()
    return RevisedSimplex(problem, options).solve(warm_start)


def resolve_with_added_rows(problem: LinearProgram, new_rows: RowBlock,
                            previous: LpSolution | None = None,
                            options: SimplexOptions | None = None) -> LpSolution:
    """Solve ``problem`` augmented with ``new_rows``.

    When ``previous`` (the solution of ``problem``) carries a basis, the new
    logicals join it as basic variables and the simplex restarts from there.
    """
    augmented = problem.with_rows(new_rows)
    augmented.check()
    warm = None
    if previous is not None and previous.basis is not None:
        if previous.basis.num_vars != problem.num_vars or previous.basis.num_rows != problem.num_rows:
            raise MalformedProblem("previous solution does not belong to this problem")
        warm = previous.basis.extended(augmented.num_rows - problem.num_rows)
    return RevisedSimplex(augmented, options).solve(warm)


@dataclass(order=True)
class _Node:
    bound: float
    seq: int
    lower: np.ndarray = field(compare=False)
    upper: np.ndarray = field(compare=False)
    basis: Basis | None = field(compare=False, default=None)
    depth: int = field(compare=False, default=0)


def _branch_variable(x: np.ndarray, mask: np.ndarray, tol: float) -> int:
    """Most fractional masked variable, lowest index on ties; -1 if integral."""
    frac = np.abs(x - np.round(x))
    frac = np.where(mask, frac, 0.0)
    if frac.max(initial=0.0) <= tol:
        return -1
    # distance from 0.5 (smaller = more fractional); argmin picks the lowest index
    dist = np.where(mask & (frac > tol), np.abs(np.abs(x - np.floor(x)) - 0.5), np.inf)
    return int(np.argmin(dist))


def solve_mip(problem: LinearProgram, options: MipOptions | None = None,
              warm_start: Basis | None = None) -> MipSolution:
    """Branch and bound over LP relaxations.

    Node selection dives depth first (nearest-rounding child first) and falls
    back to the open node with the best bound whenever a dive ends.
    """
    opt = options or MipOptions()
    problem.check()
    mask = problem.integrality
    n = problem.num_vars
    lower0 = problem.var_lower.copy()
    upper0 = problem.var_upper.copy()
    lower0[mask] = np.ceil(lower0[mask] - opt.integrality_tol)
    upper0[mask] = np.floor(upper0[mask] + opt.integrality_tol)
    if np.any(lower0 > upper0):
        return MipSolution(Status.INFEASIBLE, np.full(n, np.nan), np.inf, np.inf, np.inf)

    relaxed = problem.relaxed()
    incumbent_x: np.ndarray | None = None
    incumbent_obj = np.inf
    incumbent_basis: list[Basis | None] = [None]
    seq = 0
    nodes = 0
    open_heap: list[_Node] = []
    root = _Node(-np.inf, seq, lower0, upper0, warm_start)
    current: _Node | None = root

    pruned_bound = [np.inf]

    def gap_closed(bound: float) -> bool:
        if incumbent_x is None:
            return False
        closed = incumbent_obj - bound <= opt.relative_gap * max(1.0, abs(incumbent_obj))
        if closed:
            pruned_bound[0] = min(pruned_bound[0], bound)
        return closed

    while current is not None:
        node = current
        current = None
        if gap_closed(node.bound):
            node = None
        if node is not None:
            nodes += 1
            if nodes > opt.node_limit:
                best = _finish(problem, relaxed, incumbent_x, incumbent_obj, opt,
                               _open_bound(open_heap, node.bound), nodes, incumbent_basis[0])
                raise NodeLimitExceeded(
                    f"node limit {opt.node_limit} exceeded on {problem.name}", best)
            sol = RevisedSimplex(relaxed.with_var_bounds(node.lower, node.upper),
                                 opt.simplex).solve(node.basis)
            if sol.status is Status.UNBOUNDED:
                if incumbent_x is None and nodes == 1:
                    return MipSolution(Status.UNBOUNDED, sol.primal_values, -np.inf, -np.inf, np.inf)
            elif sol.status is Status.OPTIMAL:
                if not gap_closed(sol.objective_value):
                    x = sol.primal_values
                    j = _branch_variable(x, mask, opt.integrality_tol)
                    if j < 0:
                        if sol.objective_value < incumbent_obj:
                            incumbent_obj = sol.objective_value
                            incumbent_x = x.copy()
                            incumbent_basis[0] = sol.basis
                    else:
                        down_up = np.floor(x[j])
                        children = []
                        lo_d, up_d = node.lower.copy(), node.upper.copy()
                        up_d[j] = down_up
                        lo_u, up_u = node.lower.copy(), node.upper.copy()
                        lo_u[j] = down_up + 1.0
                        seq += 1
                        down = _Node(sol.objective_value, seq, lo_d, up_d, sol.basis, node.depth + 1)
                        seq += 1
                        upn = _Node(sol.objective_value, seq, lo_u, up_u, sol.basis, node.depth + 1)
                        children = [down, upn] if x[j] - down_up < 0.5 else [upn, down]
                        current = children[0]
                        heapq.heappush(open_heap, children[1])
        if current is None:
            while open_heap:
                cand = heapq.heappop(open_heap)
                if not gap_closed(cand.bound):
                    current = cand
                    break
    return _finish(problem, relaxed, incumbent_x, incumbent_obj, opt, pruned_bound[0], nodes,
                   incumbent_basis[0])


def _open_bound(heap: list[_Node], current: float) -> float:
    bounds = [nd.bound for nd in heap] + [current]
    return min(bounds)


def _finish(problem, relaxed, incumbent_x, incumbent_obj, opt, open_bound, nodes,
            warm: Basis | None = None) -> MipSolution:
    n = problem.num_vars
    if incumbent_x is None:
        return MipSolution(Status.INFEASIBLE, np.full(n, np.nan), np.inf, np.inf, np.inf, nodes)
    mask = problem.integrality
    lower = problem.var_lower.copy()
    upper = problem.var_upper.copy()
    fixed = np.round(incumbent_x[mask])
    lower[mask] = fixed
    upper[mask] = fixed
    fixed_sol = RevisedSimplex(relaxed.with_var_bounds(lower, upper), opt.simplex).solve(warm)
    if fixed_sol.status is Status.OPTIMAL:
        x = fixed_sol.primal_values
        obj = fixed_sol.objective_value
        duals = fixed_sol.dual_values
        basis = fixed_sol.basis
    else:
        x, obj, duals, basis = incumbent_x, incumbent_obj, np.full(problem.num_rows, np.nan), None
    bound = obj if open_bound is None else min(open_bound, obj)
    gap = (obj - bound) / max(1.0, abs(obj))
    return MipSolution(Status.OPTIMAL, x, obj, bound, gap, nodes, duals, basis)


def solve(problem: LinearProgram, mip_options: MipOptions | None = None,
          warm_start: Basis | None = None) -> LpSolution | MipSolution:
    """Dispatch to :func:`solve_mip` or :func:`solve_lp` depending on integrality."""
    if problem.is_mip:
        return solve_mip(problem, mip_options, warm_start)
    simplex = mip_options.simplex if mip_options else None
    return solve_lp(problem, simplex, warm_start)
