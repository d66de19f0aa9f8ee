"""Bounded-variable revised primal simplex.

The problem is put in computational form ``A x - s = 0`` with one logical
``s_i`` per row carrying the row bounds. The basis inverse is kept as a sparse
LU factorization plus a product-form eta file that is rebuilt periodically.
Phase 1 minimizes the sum of bound infeasibilities of the basic variables, so
any basis (slack or warm-started) is a valid starting point.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .problem import (
    AT_LOWER, AT_UPPER, AT_ZERO, BASIC, Basis, LinearProgram, LpSolution,
    NumericalFailure, Status,
)

log = logging.getLogger(__name__)


@dataclass
class SimplexOptions:
    feasibility_tol: float = 1e-7
    optimality_tol: float = 1e-9
    pivot_tol: float = 1e-9
    # degenerate pivots tolerated before switching to Bland's rule
    bland_after: int = 50
    refactor_every: int = 40
    max_iterations: int | None = None
    dense_below: int = 120
    # "dual": shifted-cost dual simplex followed by a primal clean-up; "primal": two-phase primal
    method: str = "dual"


class _Factor:
    """LU of the basis matrix with a product-form eta file on top."""

    def __init__(self, B: sp.csc_matrix, dense: bool):
        self.m = B.shape[0]
        self.etas: list[tuple[int, np.ndarray]] = []
        self.dense = dense
        if dense:
            Bd = B.toarray()
            self.lu = la.lu_factor(Bd, check_finite=False)
            piv = np.abs(np.diag(self.lu[0]))
            if piv.size and piv.min() <= 1e-11 * max(1.0, piv.max()):
                raise RuntimeError("singular basis")
        else:
            self.lu = splu(B, permc_spec="COLAMD", options={"SymmetricMode": False})

    def ftran(self, a: np.ndarray) -> np.ndarray:
        if self.dense:
            w = la.lu_solve(self.lu, a, check_finite=False)
        else:
            w = self.lu.solve(a)
        for p, col in self.etas:
            t = w[p] / col[p]
            if t != 0.0:
                w -= t * col
            w[p] = t
        return w

    def btran(self, c: np.ndarray) -> np.ndarray:
        c = c.copy()
        for p, col in reversed(self.etas):
            cp = c[p]
            c[p] = (cp - (col @ c - col[p] * cp)) / col[p]
        if self.dense:
            return la.lu_solve(self.lu, c, trans=1, check_finite=False)
        return self.lu.solve(c, trans="T")

    def push(self, p: int, col: np.ndarray) -> None:
        self.etas.append((p, col))


class RevisedSimplex:
    def __init__(self, problem: LinearProgram, options: SimplexOptions | None = None):
        self.opt = options or SimplexOptions()
        self.n = problem.num_vars
        self.m = problem.num_rows
        n, m = self.n, self.m
        A = problem.matrix
        self.M = sp.hstack([A, -sp.identity(m, format="csc")], format="csc")
        self.MT = self.M.T.tocsr()
        self._cp, self._ci, self._cv = self.M.indptr, self.M.indices, self.M.data
        self.cost = np.concatenate([problem.costs, np.zeros(m)])
        self.lo = np.concatenate([problem.var_lower, problem.row_lower])
        self.up = np.concatenate([problem.var_upper, problem.row_upper])
        self.fixed = self.lo == self.up
        self.offset = problem.offset
        self.iterations = 0
        self.counts = {"phase1": 0, "flips": 0, "degenerate": 0}
        scale = np.abs(problem.costs).max() if n else 1.0
        self.dtol = self.opt.optimality_tol * max(1.0, scale)

    # -- basis management -------------------------------------------------
    def _nonbasic_value(self, j: int, st: int) -> float:
        if st == AT_LOWER:
            return self.lo[j]
        if st == AT_UPPER:
            return self.up[j]
        return 0.0

    def _default_status(self) -> np.ndarray:
        st = np.empty(self.n + self.m, dtype=np.int8)
        finite_lo = np.isfinite(self.lo)
        finite_up = np.isfinite(self.up)
        st[:] = AT_ZERO
        st[finite_up] = AT_UPPER
        st[finite_lo] = AT_LOWER
        # prefer the bound nearest zero for boxed structurals
        both = finite_lo & finite_up
        closer_up = both & (np.abs(self.up) < np.abs(self.lo))
        st[closer_up] = AT_UPPER
        return st

    def _install(self, status: np.ndarray) -> None:
        st = status.astype(np.int8).copy()
        head = np.flatnonzero(st == BASIC)
        if head.size != self.m:
            st = self._repair(st)
            head = np.flatnonzero(st == BASIC)
        # sanitize nonbasic statuses against the bounds
        nb = st != BASIC
        lo_ok = np.isfinite(self.lo)
        up_ok = np.isfinite(self.up)
        bad_lo = nb & (st == AT_LOWER) & ~lo_ok
        st[bad_lo] = np.where(up_ok[bad_lo], AT_UPPER, AT_ZERO)
        bad_up = nb & (st == AT_UPPER) & ~up_ok
        st[bad_up] = np.where(lo_ok[bad_up], AT_LOWER, AT_ZERO)
        bad_zero = nb & (st == AT_ZERO) & (lo_ok | up_ok)
        st[bad_zero] = np.where(lo_ok[bad_zero], AT_LOWER, AT_UPPER)
        self.status = st
        self.head = head
        x = np.zeros(self.n + self.m)
        x[st == AT_LOWER] = self.lo[st == AT_LOWER]
        x[st == AT_UPPER] = self.up[st == AT_UPPER]
        self.x = x
        self._refactor()

    def _repair(self, st: np.ndarray) -> np.ndarray:
        """Complete a basic set with logicals so it has exactly ``m`` independent columns.

        Structural candidates are kept greedily through an LU with partial
        pivoting; rows left uncovered receive their logical variable.
        """
        default = self._default_status()
        cand = np.flatnonzero(st[: self.n] == BASIC)
        st = st.copy()
        st[st == BASIC] = default[st == BASIC]
        keep = np.empty(0, dtype=int)
        covered = np.zeros(self.m, dtype=bool)
        if cand.size:
            Bc = self.M[:, cand].toarray()
            P, L, U = la.lu(Bc, check_finite=False)
            k = min(Bc.shape)
            diag = np.abs(np.diag(U[:k, :k]))
            scale = max(1.0, diag.max(initial=0.0))
            ok = np.flatnonzero(diag > 1e-9 * scale)
            # stop at the first dependent column to keep the triangular structure intact
            stop = next((j for j in range(k) if diag[j] <= 1e-9 * scale), k)
            ok = ok[ok < stop]
            keep = cand[ok]
            pivot_rows = np.argmax(P, axis=0)[: stop]
            covered[pivot_rows] = True
        st[keep] = BASIC
        st[self.n + np.flatnonzero(~covered)] = BASIC
        return st

    def _slack_basis(self) -> None:
        st = self._default_status()
        st[self.n:] = BASIC
        self._install(st)

    def _column(self, j: int) -> np.ndarray:
        col = np.zeros(self.m)
        a, b = self._cp[j], self._cp[j + 1]
        col[self._ci[a:b]] = self._cv[a:b]
        return col

    def _refactor(self) -> None:
        B = self.M[:, self.head]
        self.factor = _Factor(B.tocsc(), dense=self.m <= self.opt.dense_below)
        self._recompute_basic()

    def _recompute_basic(self) -> None:
        x = self.x
        x[self.head] = 0.0
        rhs = -(self.M @ x)
        x[self.head] = self.factor.ftran(rhs)

    # -- main loop ----------------------------------------------------------
    def solve(self, warm: Basis | None = None) -> LpSolution:
        if self.m == 0:
            return self._solve_unconstrained()
        started = False
        if warm is not None and warm.status.size == self.n + self.m:
            try:
                self._install(warm.status)
                started = True
            except (ValueError, RuntimeError):
                started = False
        if not started:
            self._slack_basis()
        max_iter = self.opt.max_iterations or 50 * (self.n + self.m) + 1000
        recovered = False
        while True:
            try:
                if self.opt.method == "dual":
                    res = self._dual(max_iter)
                    if res is not None:
                        return res
                return self._iterate(max_iter)
            except RuntimeError as exc:
                # singular refactorization; restart once from the slack basis
                if recovered:
                    raise NumericalFailure(f"basis factorization failed: {exc}") from exc
                log.debug("refactorization failed (%s); restarting from slack basis", exc)
                recovered = True
                self._slack_basis()

    def _iterate(self, max_iter: int) -> LpSolution:
        opt = self.opt
        ftol = opt.feasibility_tol
        n_tot = self.n + self.m
        lo, up, cost = self.lo, self.up, self.cost
        degenerate = 0
        bland = False
        since_refactor = 0
        verified_rounds = 0
        zero_cost = np.zeros(n_tot)
        while True:
            if self.iterations >= max_iter:
                raise NumericalFailure(
                    f"iteration limit {max_iter} reached (cycling safeguard exhausted)")
            if since_refactor >= opt.refactor_every:
                self._refactor()
                since_refactor = 0
            head = self.head
            xb = self.x[head]
            lb = lo[head]
            ub = up[head]
            below = xb < lb - ftol
            above = xb > ub + ftol
            phase1 = bool(below.any() or above.any())
            if phase1:
                cb = above.astype(float) - below.astype(float)
                cvec = zero_cost
            else:
                cb = cost[head]
                cvec = cost
            y = self.factor.btran(cb)
            d = cvec - self.MT @ y
            st = self.status
            movable = (st != BASIC) & ~self.fixed
            inc = movable & ((st == AT_LOWER) | (st == AT_ZERO)) & (d < -self.dtol)
            dec = movable & ((st == AT_UPPER) | (st == AT_ZERO)) & (d > self.dtol)
            cand = inc | dec
            if not cand.any():
                # verify against a fresh factorization before declaring the outcome
                if since_refactor > 0 and verified_rounds < 3:
                    self._refactor()
                    since_refactor = 0
                    verified_rounds += 1
                    continue
                if phase1:
                    return self._result(Status.INFEASIBLE, y, d)
                return self._result(Status.OPTIMAL, y, d)
            if bland:
                j = int(np.flatnonzero(cand)[0])
            else:
                score = np.where(cand, np.abs(d), -1.0)
                j = int(np.argmax(score))
            direction = 1.0 if inc[j] else -1.0
            col = self._column(j)
            alpha = self.factor.ftran(col)
            rate = -direction * alpha
            theta, p = self._ratio_test(rate, xb, lb, ub, below, above, j, bland)
            if theta == np.inf:
                if phase1:
                    raise NumericalFailure("unbounded ray during phase 1")
                return self._result(Status.UNBOUNDED, y, d)
            self.iterations += 1
            self.counts["phase1"] += phase1
            self.counts["flips"] += p < 0
            if theta <= 1e-12:
                self.counts["degenerate"] += 1
                degenerate += 1
                if degenerate >= opt.bland_after:
                    bland = True
            else:
                degenerate = 0
                bland = False
            self.x[j] += direction * theta
            if theta != 0.0:
                self.x[head] += theta * rate
            if p < 0:
                # bound flip of the entering variable
                self.status[j] = AT_UPPER if direction > 0 else AT_LOWER
                self.x[j] = up[j] if direction > 0 else lo[j]
                continue
            leaving = head[p]
            r = rate[p]
            # leaving variable lands on the bound it was heading to
            if r > 0:
                to_upper = not (below[p])
            else:
                to_upper = bool(above[p])
            if to_upper:
                self.status[leaving] = AT_UPPER
                self.x[leaving] = up[leaving]
            else:
                self.status[leaving] = AT_LOWER
                self.x[leaving] = lo[leaving]
            if not np.isfinite(self.x[leaving]):
                raise NumericalFailure("leaving variable assigned an infinite bound")
            self.status[j] = BASIC
            head[p] = j
            self.factor.push(p, alpha)
            since_refactor += 1
            if abs(alpha[p]) < 1e-7:
                self._refactor()
                since_refactor = 0

    def _dual(self, max_iter: int) -> LpSolution | None:
        """Dual simplex on shifted costs.

        Nonbasic variables are moved to the bound their reduced cost asks for;
        where no such bound exists the cost is shifted instead. The returned
        basis is primal feasible, so the caller finishes with primal phase 2 on
        the true costs. Returns an infeasible result if the dual is unbounded.
        """
        opt = self.opt
        ftol, ptol = opt.feasibility_tol, opt.pivot_tol
        lo, up = self.lo, self.up
        st = self.status
        n_tot = self.n + self.m
        rng = np.random.default_rng(12345)
        cost = self.cost.copy()
        # tiny perturbation against dual degeneracy, removed before the clean-up
        pert = (1e-7 + 1e-7 * np.abs(cost)) * rng.uniform(0.5, 1.0, n_tot)
        pert[self.n:] = 0.0
        y = self.factor.btran(cost[self.head])
        d = cost - self.MT @ y
        nb = (st != BASIC) & ~self.fixed
        fin_lo, fin_up = np.isfinite(lo), np.isfinite(up)
        both = nb & fin_lo & fin_up
        st[both & (d < 0)] = AT_UPPER
        st[both & (d >= 0)] = AT_LOWER
        cost += np.where(st == AT_UPPER, -pert, pert) * nb
        shift = np.zeros(n_tot)
        only_lo = nb & fin_lo & ~fin_up
        only_up = nb & ~fin_lo & fin_up
        free = nb & ~fin_lo & ~fin_up
        st[only_lo] = AT_LOWER
        st[only_up] = AT_UPPER
        st[free] = AT_ZERO
        d = cost - self.MT @ y
        shift[only_lo & (d < 0)] = -d[only_lo & (d < 0)] + 1e-7
        shift[only_up & (d > 0)] = -d[only_up & (d > 0)] - 1e-7
        shift[free] = -d[free]
        cost += shift
        x = self.x
        x[st == AT_LOWER] = lo[st == AT_LOWER]
        x[st == AT_UPPER] = up[st == AT_UPPER]
        x[st == AT_ZERO] = 0.0
        self._recompute_basic()
        w = np.ones(self.m)
        since_refactor = 0
        fresh = True
        while True:
            if self.iterations >= max_iter:
                raise NumericalFailure(f"iteration limit {max_iter} reached in the dual simplex")
            head = self.head
            if since_refactor >= opt.refactor_every or fresh:
                if not fresh:
                    self._refactor()
                y = self.factor.btran(cost[head])
                d = cost - self.MT @ y
                d[head] = 0.0
                since_refactor = 0
                fresh = False
            xb = x[head]
            lb, ub = lo[head], up[head]
            infeas = np.where(xb < lb - ftol, lb - xb, np.where(xb > ub + ftol, xb - ub, 0.0))
            if not infeas.any():
                if since_refactor > 0:
                    self._refactor()
                    fresh = True
                    continue
                self.counts["dual"] = self.counts.get("dual", 0) + 1
                return None
            r = int(np.argmax(infeas * infeas / w))
            leaving = head[r]
            to_lower = xb[r] < lb[r]
            e = np.zeros(self.m)
            e[r] = 1.0
            rho = self.factor.btran(e)
            arow = self.MT @ rho
            nbm = (st != BASIC) & ~self.fixed
            sgn = 1.0 if to_lower else -1.0
            # entering must move x_r toward its violated bound
            cand = nbm & (((st == AT_LOWER) & (sgn * arow < -ptol)) |
                          ((st == AT_UPPER) & (sgn * arow > ptol)) |
                          ((st == AT_ZERO) & (np.abs(arow) > ptol)))
            if not cand.any():
                return self._result(Status.INFEASIBLE, y, d)
            idx = np.flatnonzero(cand)
            a = np.abs(arow[idx])
            dd = np.abs(d[idx])
            bound = ((dd + self.dtol) / a).min()
            ok = dd / a <= bound
            q = int(idx[ok][np.argmax(a[ok])])
            col = self._column(q)
            alpha = self.factor.ftran(col)
            arq = alpha[r]
            if abs(arq - arow[q]) > 1e-7 * max(1.0, abs(arq)) or abs(arq) < ptol:
                if since_refactor == 0:
                    raise RuntimeError("unstable pivot in the dual simplex")
                self._refactor()
                fresh = True
                continue
            theta_d = d[q] / arow[q]
            if (to_lower and theta_d > 0) or (not to_lower and theta_d < 0):
                theta_d = 0.0
            target = lb[r] if to_lower else ub[r]
            delta = (xb[r] - target) / arq
            self.iterations += 1
            if abs(theta_d) <= 1e-12:
                self.counts["degenerate"] += 1
            x[q] += delta
            x[head] -= delta * alpha
            d -= theta_d * arow
            d[q] = 0.0
            # dual steepest-edge weights
            tau = self.factor.ftran(rho)
            ratio = alpha / arq
            wr = w[r]
            w = np.maximum(w - 2.0 * ratio * tau + ratio * ratio * wr, 1e-8)
            w[r] = max(wr / (arq * arq), 1e-8)
            st[leaving] = AT_LOWER if to_lower else AT_UPPER
            x[leaving] = target
            st[q] = BASIC
            head[r] = q
            self.factor.push(r, alpha)
            since_refactor += 1

    def _ratio_test(self, rate, xb, lb, ub, below, above, j, bland):
        ptol = self.opt.pivot_tol
        ftol = self.opt.feasibility_tol
        m = rate.size
        t_exact = np.full(m, np.inf)
        t_relax = np.full(m, np.inf)
        neg = rate < -ptol
        pos = rate > ptol
        feas = ~(below | above)
        # feasible basics block at the bound they move toward
        mask = neg & feas & np.isfinite(lb)
        t_exact[mask] = (xb[mask] - lb[mask]) / -rate[mask]
        t_relax[mask] = (xb[mask] - lb[mask] + ftol) / -rate[mask]
        mask = pos & feas & np.isfinite(ub)
        t_exact[mask] = (ub[mask] - xb[mask]) / rate[mask]
        t_relax[mask] = (ub[mask] - xb[mask] + ftol) / rate[mask]
        # infeasible basics block when they reach the violated bound
        mask = pos & below
        t_exact[mask] = (lb[mask] - xb[mask]) / rate[mask]
        t_relax[mask] = t_exact[mask]
        mask = neg & above
        t_exact[mask] = (xb[mask] - ub[mask]) / -rate[mask]
        t_relax[mask] = t_exact[mask]
        np.maximum(t_exact, 0.0, out=t_exact)
        flip = self.up[j] - self.lo[j]
        if bland:
            theta = t_exact.min() if m else np.inf
            if flip <= theta:
                return flip, -1
            if theta == np.inf:
                return np.inf, -1
            ties = np.flatnonzero(t_exact <= theta + 1e-12)
            p = int(ties[np.argmin(self.head[ties])])
            return float(t_exact[p]), p
        bound = t_relax.min() if m else np.inf
        if flip <= bound and flip <= (t_exact.min() if m else np.inf):
            return flip, -1
        if bound == np.inf:
            return np.inf, -1
        cands = np.flatnonzero(t_exact <= bound)
        p = int(cands[np.argmax(np.abs(rate[cands]))])
        return float(t_exact[p]), p

    def _result(self, status: Status, y: np.ndarray, d: np.ndarray) -> LpSolution:
        n = self.n
        x = self.x[:n].copy()
        if status is Status.OPTIMAL:
            obj = float(self.cost[:n] @ x) + self.offset
            duals = y.copy()
            rc = d[:n].copy()
        else:
            obj = np.inf if status is Status.INFEASIBLE else -np.inf
            duals = np.full(self.m, np.nan)
            rc = np.full(n, np.nan)
        return LpSolution(
            status=status, primal_values=x, dual_values=duals, objective_value=obj,
            reduced_costs=rc, basis=Basis(self.status.copy(), n), iterations=self.iterations)

    def _solve_unconstrained(self) -> LpSolution:
        n = self.n
        c = self.cost[:n]
        x = np.zeros(n)
        st = np.empty(n, dtype=np.int8)
        for j in range(n):
            lo, up = self.lo[j], self.up[j]
            if c[j] > 0 or (c[j] == 0 and np.isfinite(lo)):
                if not np.isfinite(lo):
                    return LpSolution(Status.UNBOUNDED, x, np.zeros(0), -np.inf)
                x[j], st[j] = lo, AT_LOWER
            elif c[j] < 0 or np.isfinite(up):
                if not np.isfinite(up):
                    return LpSolution(Status.UNBOUNDED, x, np.zeros(0), -np.inf)
                x[j], st[j] = up, AT_UPPER
            else:
                st[j] = AT_ZERO
        return LpSolution(Status.OPTIMAL, x, np.zeros(0), float(c @ x) + self.offset,
                          reduced_costs=c.copy(), basis=Basis(st, n))
