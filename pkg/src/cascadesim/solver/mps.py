"""Fixed-field MPS export (and a reader used for round-trip checks)."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .problem import LinearProgram, MalformedProblem

_INF = 1e30


def _fmt(v: float) -> str:
    s = repr(float(v))
    if len(s) > 12:
        s = f"{v:.6e}" if abs(v) >= 1e6 or (v != 0 and abs(v) < 1e-4) else f"{v:.10g}"
        if len(s) > 12:
            s = f"{v:.5e}"
    return s


def _mps_name(name: str, used: dict[str, int]) -> str:
    # fixed MPS names are at most 8 characters without blanks
    clean = "".join(ch for ch in name if not ch.isspace())[:8] or "X"
    if clean in used:
        used[clean] += 1
        tag = str(used[clean])
        clean = clean[: 8 - len(tag)] + tag
        while clean in used:
            used[clean] = used.get(clean, 0) + 1
            clean = clean[:7] + chr(65 + used[clean] % 26)
    used.setdefault(clean, 0)
    return clean


def _line(a="", b="", c="", d="", e="", f="") -> str:
    # columns 2-3, 5-12, 15-22, 25-36, 40-47, 50-61
    out = f" {a:<2} {b:<8}  {c:<8}  {d:>12}"
    if e:
        out += f"   {e:<8}  {f:>12}"
    return out.rstrip()


def write_mps(problem: LinearProgram, path: str | Path) -> Path:
    """Write ``problem`` as fixed-field MPS. Names are shortened to 8 characters."""
    problem.check()
    path = Path(path)
    n, m = problem.num_vars, problem.num_rows
    used: dict[str, int] = {"COST": 0}
    cnames = [_mps_name(f"C{j}", used) for j in range(n)]
    rnames = [_mps_name(f"R{i}", used) for i in range(m)]
    lines = [f"NAME          {problem.name[:8]}", "ROWS", " N  COST"]
    lo, up = problem.row_lower, problem.row_upper
    kinds = []
    for i in range(m):
        if lo[i] == up[i]:
            k = "E"
        elif np.isfinite(lo[i]) and not np.isfinite(up[i]):
            k = "G"
        elif np.isfinite(up[i]) and not np.isfinite(lo[i]):
            k = "L"
        elif np.isfinite(lo[i]) and np.isfinite(up[i]):
            k = "L"
        else:
            k = "N"
        kinds.append(k)
        lines.append(f" {k}  {rnames[i]}")
    lines.append("COLUMNS")
    A = problem.matrix.tocsc()
    in_int = False
    marker = 0
    for j in range(n):
        if problem.integrality[j] != in_int:
            tag = "'INTORG'" if problem.integrality[j] else "'INTEND'"
            lines.append(f"    MARKER{marker:<4}  'MARKER'                 {tag}")
            marker += 1
            in_int = bool(problem.integrality[j])
        entries = []
        if problem.costs[j] != 0.0:
            entries.append(("COST", problem.costs[j]))
        for p in range(A.indptr[j], A.indptr[j + 1]):
            entries.append((rnames[A.indices[p]], A.data[p]))
        if not entries:
            entries.append(("COST", 0.0))
        for k in range(0, len(entries), 2):
            pair = entries[k:k + 2]
            if len(pair) == 2:
                lines.append(_line("", cnames[j], pair[0][0], _fmt(pair[0][1]), pair[1][0], _fmt(pair[1][1])))
            else:
                lines.append(_line("", cnames[j], pair[0][0], _fmt(pair[0][1])))
    if in_int:
        lines.append(f"    MARKER{marker:<4}  'MARKER'                 'INTEND'")
    lines.append("RHS")
    if problem.offset != 0.0:
        lines.append(_line("", "RHS", "COST", _fmt(-problem.offset)))
    for i in range(m):
        k = kinds[i]
        val = {"E": lo[i], "G": lo[i], "L": up[i]}.get(k)
        if val is not None and val != 0.0:
            lines.append(_line("", "RHS", rnames[i], _fmt(val)))
    ranges = [i for i in range(m) if kinds[i] == "L" and np.isfinite(lo[i]) and lo[i] != up[i]]
    if ranges:
        lines.append("RANGES")
        for i in ranges:
            lines.append(_line("", "RNG", rnames[i], _fmt(up[i] - lo[i])))
    lines.append("BOUNDS")
    for j in range(n):
        lb, ub = problem.var_lower[j], problem.var_upper[j]
        name = cnames[j]
        if problem.integrality[j] and lb == 0.0 and ub == 1.0:
            lines.append(_line("BV", "BND", name))
            continue
        if lb == ub:
            lines.append(_line("FX", "BND", name, _fmt(lb)))
            continue
        if not np.isfinite(lb) and not np.isfinite(ub):
            lines.append(_line("FR", "BND", name))
            continue
        if not np.isfinite(lb):
            lines.append(_line("MI", "BND", name))
        elif lb != 0.0:
            lines.append(_line("LO", "BND", name, _fmt(lb)))
        if np.isfinite(ub):
            lines.append(_line("UP", "BND", name, _fmt(ub)))
        elif problem.integrality[j]:
            lines.append(_line("PL", "BND", name))
    lines.append("ENDATA")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_mps(path: str | Path) -> LinearProgram:
    """Parse an MPS file (fixed or free spacing, no blanks in names)."""
    text = Path(path).read_text().splitlines()
    section = None
    rows: dict[str, int] = {}
    kinds: list[str] = []
    obj_row = None
    cols: dict[str, int] = {}
    entries: list[tuple[int, int, float]] = []
    costs: dict[int, float] = {}
    rhs: dict[int, float] = {}
    rng: dict[int, float] = {}
    bounds: list[tuple[str, int, float]] = []
    integer: set[int] = set()
    in_int = False
    offset = 0.0
    name = "problem"
    for raw in text:
        if not raw.strip() or raw.startswith("*"):
            continue
        if not raw[0].isspace():
            head = raw.split()
            section = head[0]
            if section == "NAME" and len(head) > 1:
                name = head[1]
            continue
        f = raw.split()
        if section == "ROWS":
            kind, rname = f[0], f[1]
            if kind == "N":
                if obj_row is None:
                    obj_row = rname
                continue
            rows[rname] = len(kinds)
            kinds.append(kind)
        elif section == "COLUMNS":
            if len(f) >= 3 and f[1] == "'MARKER'":
                in_int = f[2] == "'INTORG'"
                continue
            cname = f[0]
            if cname not in cols:
                cols[cname] = len(cols)
            j = cols[cname]
            if in_int:
                integer.add(j)
            for k in range(1, len(f) - 1, 2):
                rname, val = f[k], float(f[k + 1])
                if rname == obj_row:
                    costs[j] = costs.get(j, 0.0) + val
                elif rname in rows:
                    entries.append((rows[rname], j, val))
        elif section == "RHS":
            items = f[1:] if len(f) % 2 == 1 else f
            for k in range(0, len(items) - 1, 2):
                rname, val = items[k], float(items[k + 1])
                if rname == obj_row:
                    offset = -val
                else:
                    rhs[rows[rname]] = val
        elif section == "RANGES":
            items = f[1:] if len(f) % 2 == 1 else f
            for k in range(0, len(items) - 1, 2):
                rng[rows[items[k]]] = float(items[k + 1])
        elif section == "BOUNDS":
            kind = f[0]
            cname = f[2]
            val = float(f[3]) if len(f) > 3 else 0.0
            bounds.append((kind, cols[cname], val))
    n, m = len(cols), len(kinds)
    lo = np.zeros(n)
    up = np.full(n, np.inf)
    for kind, j, val in bounds:
        if kind == "UP":
            up[j] = val
            if val < 0 and lo[j] == 0.0:
                lo[j] = -np.inf
        elif kind == "LO":
            lo[j] = val
        elif kind == "FX":
            lo[j] = up[j] = val
        elif kind == "FR":
            lo[j], up[j] = -np.inf, np.inf
        elif kind == "MI":
            lo[j] = -np.inf
        elif kind == "PL":
            up[j] = np.inf
        elif kind == "BV":
            lo[j], up[j] = 0.0, 1.0
        else:
            raise MalformedProblem(f"unsupported bound type {kind}")
    rlo = np.empty(m)
    rup = np.empty(m)
    for i, k in enumerate(kinds):
        b = rhs.get(i, 0.0)
        r = rng.get(i)
        if k == "E":
            rlo[i] = rup[i] = b
            if r is not None:
                if r >= 0:
                    rup[i] = b + r
                else:
                    rlo[i] = b + r
        elif k == "L":
            rup[i] = b
            rlo[i] = b - abs(r) if r is not None else -np.inf
        elif k == "G":
            rlo[i] = b
            rup[i] = b + abs(r) if r is not None else np.inf
    c = np.zeros(n)
    for j, v in costs.items():
        c[j] = v
    if entries:
        ri, ci, vv = zip(*entries)
    else:
        ri, ci, vv = (), (), ()
    A = sp.csc_matrix((vv, (ri, ci)), shape=(m, n))
    mask = np.zeros(n, dtype=bool)
    mask[list(integer)] = True
    return LinearProgram(c, A, rlo, rup, lo, up, mask, offset=offset, name=name)
