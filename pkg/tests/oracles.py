"""Independent brute-force oracles used by the test-suite.

Nothing here imports the code under test.
"""
from __future__ import annotations

import itertools

import numpy as np


def lp_by_vertex_enumeration(c, A, row_lower, row_upper, var_lower, var_upper):
    """Optimal objective of a bounded LP by enumerating all basic solutions.

    Returns ``None`` when the feasible set is empty. Every variable must have
    finite bounds so the polytope is bounded.
    """
    c = np.asarray(c, float)
    A = np.atleast_2d(np.asarray(A, float))
    n = c.size
    planes = []  # (normal, rhs)
    for i in range(A.shape[0]):
        if np.isfinite(row_lower[i]):
            planes.append((A[i], row_lower[i]))
        if np.isfinite(row_upper[i]):
            planes.append((A[i], row_upper[i]))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        planes.append((e, var_lower[j]))
        planes.append((e, var_upper[j]))
    best = None
    for combo in itertools.combinations(range(len(planes)), n):
        M = np.array([planes[k][0] for k in combo])
        if abs(np.linalg.det(M)) < 1e-10:
            continue
        x = np.linalg.solve(M, np.array([planes[k][1] for k in combo]))
        act = A @ x
        tol = 1e-8
        if np.any(act < row_lower - tol) or np.any(act > row_upper + tol):
            continue
        if np.any(x < var_lower - tol) or np.any(x > var_upper + tol):
            continue
        val = float(c @ x)
        if best is None or val < best:
            best = val
    return best


def mip_by_enumeration(c, A, row_lower, row_upper, n_binary):
    """Minimum of a pure binary program ``x in {0,1}^n``; ``None`` if infeasible."""
    c = np.asarray(c, float)
    A = np.atleast_2d(np.asarray(A, float))
    X = np.array(list(itertools.product((0.0, 1.0), repeat=n_binary)))
    act = X @ A.T
    ok = np.all((act >= np.asarray(row_lower) - 1e-9) & (act <= np.asarray(row_upper) + 1e-9), axis=1)
    if not ok.any():
        return None
    return float(np.min(X[ok] @ c))


def weighted_std(values, weights, center=None):
    values = np.asarray(values, float)
    w = np.asarray(weights, float)
    mu = float(np.sum(w * values)) if center is None else center
    return float(np.sqrt(np.sum(w * (values - mu) ** 2)))


def gaussian_weights(values, s, width):
    values = np.asarray(values, float)
    if width == 0:
        w = (values == values[s]).astype(float)
    else:
        w = np.exp(-((values - values[s]) ** 2) / (2 * width * width))
    return w / w.sum()


def bisect_kernel_width(values, s, target, lo=0.0, hi=None, iters=200):
    """Kernel width whose weighted std (about the weighted mean) hits ``target``.

    Plain bisection on a single bracketing interval; assumes the std grows
    with the width inside ``[lo, hi]``.
    """
    values = np.asarray(values, float)
    if hi is None:
        hi = 10 * (values.max() - values.min())
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if weighted_std(values, gaussian_weights(values, s, mid)) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def trueup_extensive_form(cost, nominal, lo, hi, home, n_areas, points, rho, c_unserved, c_curtail):
    """Scenario-wise recourse LP over weighted deviation points (no ramps).

    ``points`` is a list of ``(hour, weight, xi)`` with ``xi`` per area. Each
    point gets its own recourse ``r`` per unit, moving in the direction of its
    area's deviation, plus area unserved and curtailment. The nominal schedule
    ``g0`` is shared, bounded by ``lo``/``hi`` and pays ``rho`` per MW moved
    away from ``nominal``. Returns the optimal objective.
    """
    from scipy.optimize import linprog

    cost = np.asarray(cost, float)
    nominal = np.asarray(nominal, float)
    nT, H = nominal.shape
    P = len(points)
    # layout: g0 (nT*H) | up (nT*H) | dn (nT*H) | per point: r (nT), u (A), c (A)
    n_nom = 3 * nT * H
    width = nT + 2 * n_areas
    n = n_nom + P * width
    c = np.zeros(n)
    c[:nT * H] = np.repeat(cost, H)
    c[nT * H:n_nom] = rho
    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    lb[nT * H:n_nom] = 0.0
    lb[:nT * H] = np.asarray(lo, float).ravel()
    ub[:nT * H] = np.asarray(hi, float).ravel()
    A_eq, b_eq, A_ub, b_ub = [], [], [], []

    def g(i, h):
        return i * H + h

    for i in range(nT):
        for h in range(H):
            row = np.zeros(n)
            row[g(i, h)] = 1.0
            row[nT * H + g(i, h)] = -1.0
            row[2 * nT * H + g(i, h)] = 1.0
            A_eq.append(row)
            b_eq.append(nominal[i, h])
    for a in range(n_areas):
        for h in range(H):
            row = np.zeros(n)
            members = [i for i in range(nT) if home[i] == a]
            for i in members:
                row[g(i, h)] = 1.0
            A_eq.append(row)
            b_eq.append(nominal[members, h].sum())
    for p, (h, w, xi) in enumerate(points):
        base = n_nom + p * width
        c[base:base + nT] = w * cost
        c[base + nT:base + nT + n_areas] = w * c_unserved
        c[base + nT + n_areas:base + width] = w * c_curtail
        lb[base + nT:base + width] = 0.0
        for i in range(nT):
            if xi[home[i]] >= 0:
                lb[base + i] = 0.0
            else:
                ub[base + i] = 0.0
        for a in range(n_areas):
            if xi[a] >= 0:
                ub[base + nT + n_areas + a] = 0.0
            else:
                ub[base + nT + a] = 0.0
        for a in range(n_areas):
            row = np.zeros(n)
            for i in range(nT):
                if home[i] == a:
                    row[base + i] = 1.0
            row[base + nT + a] = 1.0
            row[base + nT + n_areas + a] = -1.0
            A_eq.append(row)
            b_eq.append(xi[a])
        for i in range(nT):
            row = np.zeros(n)
            row[g(i, h)] = 1.0
            row[base + i] = 1.0
            A_ub.append(row)
            b_ub.append(hi[i, h])
            A_ub.append(-row)
            b_ub.append(-lo[i, h])
    res = linprog(c, A_ub=np.array(A_ub), b_ub=np.array(b_ub), A_eq=np.array(A_eq), b_eq=np.array(b_eq),
                  bounds=list(zip(lb, ub)), method="highs")
    assert res.status == 0, res.message
    return float(res.fun)


def highs_solve(problem, var_lower=None, var_upper=None, integer=True):
    """Solve a LinearProgram with scipy's HiGHS; returns (objective incl. offset, x) or (None, None)."""
    from scipy.optimize import Bounds, LinearConstraint, milp
    lo = problem.var_lower if var_lower is None else var_lower
    hi = problem.var_upper if var_upper is None else var_upper
    integ = np.zeros(problem.num_vars)
    if integer and problem.integrality is not None:
        integ = np.asarray(problem.integrality, float)
    res = milp(problem.costs, integrality=integ, bounds=Bounds(lo, hi),
               constraints=LinearConstraint(problem.matrix, problem.row_lower, problem.row_upper))
    if res.status != 0:
        return None, None
    return float(res.fun) + problem.offset, res.x


def merit_order(load, offers):
    """Fill ``load`` from (price, quantity) offers cheapest first; returns per-offer quantities."""
    out = np.zeros(len(offers))
    left = float(load)
    for k in sorted(range(len(offers)), key=lambda k: offers[k][0]):
        out[k] = min(left, offers[k][1])
        left -= out[k]
    return out
