"""Array-oriented construction of :class:`LinearProgram` instances."""
from __future__ import annotations

import itertools

import numpy as np
import scipy.sparse as sp

from .problem import LinearProgram


class ModelBuilder:
    """Accumulates variable blocks, row blocks and coefficient triplets.

    Variables and rows are created in named groups of arbitrary shape; the
    returned index arrays carry that shape so coefficients can be added with
    broadcasting. Repeated (row, col) entries are summed.
    """

    def __init__(self, name: str = "problem"):
        self.name = name
        self.num_vars = 0
        self.num_rows = 0
        self.offset = 0.0
        self._lb: list[np.ndarray] = []
        self._ub: list[np.ndarray] = []
        self._cost: list[np.ndarray] = []
        self._int: list[np.ndarray] = []
        self._rlb: list[np.ndarray] = []
        self._rub: list[np.ndarray] = []
        self._ri: list[np.ndarray] = []
        self._ci: list[np.ndarray] = []
        self._v: list[np.ndarray] = []
        self._extra_cost: list[tuple[np.ndarray, np.ndarray]] = []
        self.var_groups: dict[str, np.ndarray] = {}
        self.row_groups: dict[str, np.ndarray] = {}

    def add_vars(self, name: str, shape, lb=0.0, ub=np.inf, cost=0.0, integer=False) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        size = int(np.prod(shape)) if shape else 1
        idx = np.arange(self.num_vars, self.num_vars + size).reshape(shape)
        self.num_vars += size
        self._lb.append(np.broadcast_to(np.asarray(lb, dtype=float), shape).ravel().copy())
        self._ub.append(np.broadcast_to(np.asarray(ub, dtype=float), shape).ravel().copy())
        self._cost.append(np.broadcast_to(np.asarray(cost, dtype=float), shape).ravel().copy())
        self._int.append(np.broadcast_to(np.asarray(integer, dtype=bool), shape).ravel().copy())
        self._register(self.var_groups, name, idx)
        return idx

    def add_rows(self, name: str, shape, lb=-np.inf, ub=np.inf) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        size = int(np.prod(shape)) if shape else 1
        idx = np.arange(self.num_rows, self.num_rows + size).reshape(shape)
        self.num_rows += size
        self._rlb.append(np.broadcast_to(np.asarray(lb, dtype=float), shape).ravel().copy())
        self._rub.append(np.broadcast_to(np.asarray(ub, dtype=float), shape).ravel().copy())
        self._register(self.row_groups, name, idx)
        return idx

    @staticmethod
    def _register(groups: dict, name: str, idx: np.ndarray) -> None:
        key = name
        for k in itertools.count(1):
            if key not in groups:
                break
            key = f"{name}#{k}"
        groups[key] = idx

    def add_terms(self, rows, cols, vals=1.0) -> None:
        rows, cols, vals = np.broadcast_arrays(
            np.asarray(rows), np.asarray(cols), np.asarray(vals, dtype=float))
        keep = vals != 0.0
        self._ri.append(rows[keep].ravel().astype(np.int64))
        self._ci.append(cols[keep].ravel().astype(np.int64))
        self._v.append(vals[keep].ravel().astype(float))

    def add_cost(self, cols, vals) -> None:
        cols, vals = np.broadcast_arrays(np.asarray(cols), np.asarray(vals, dtype=float))
        self._extra_cost.append((cols.ravel().astype(np.int64), vals.ravel().copy()))

    def set_bounds(self, cols, lb=None, ub=None) -> None:
        """Overwrite bounds of already created variables (applied at build time)."""
        lbs = np.concatenate(self._lb) if self._lb else np.zeros(0)
        ubs = np.concatenate(self._ub) if self._ub else np.zeros(0)
        cols = np.asarray(cols)
        if lb is not None:
            lbs[cols] = lb
        if ub is not None:
            ubs[cols] = ub
        self._lb, self._ub = [lbs], [ubs]

    def build(self, with_names: bool = False) -> LinearProgram:
        n, m = self.num_vars, self.num_rows
        cost = np.concatenate(self._cost) if self._cost else np.zeros(0)
        for cols, vals in self._extra_cost:
            np.add.at(cost, cols, vals)
        if self._ri:
            ri = np.concatenate(self._ri)
            ci = np.concatenate(self._ci)
            vv = np.concatenate(self._v)
        else:
            ri = ci = np.zeros(0, dtype=np.int64)
            vv = np.zeros(0)
        A = sp.csc_matrix((vv, (ri, ci)), shape=(m, n))
        A.sum_duplicates()
        A.eliminate_zeros()
        var_names = row_names = None
        if with_names:
            var_names = _names(self.var_groups, n, "x")
            row_names = _names(self.row_groups, m, "r")
        return LinearProgram(
            costs=cost,
            matrix=A,
            row_lower=np.concatenate(self._rlb) if self._rlb else np.zeros(0),
            row_upper=np.concatenate(self._rub) if self._rub else np.zeros(0),
            var_lower=np.concatenate(self._lb) if self._lb else np.zeros(0),
            var_upper=np.concatenate(self._ub) if self._ub else np.zeros(0),
            integrality=np.concatenate(self._int) if self._int else np.zeros(0, dtype=bool),
            offset=self.offset,
            var_names=var_names,
            row_names=row_names,
            name=self.name,
        )


def _names(groups: dict[str, np.ndarray], total: int, fallback: str) -> list[str]:
    names = [f"{fallback}{i}" for i in range(total)]
    for gname, idx in groups.items():
        base = gname.replace("#", "_")
        for pos, k in np.ndenumerate(idx):
            suffix = ",".join(str(p) for p in pos)
            names[int(k)] = f"{base}[{suffix}]" if suffix else base
    return names
