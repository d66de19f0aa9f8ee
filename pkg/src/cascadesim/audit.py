"""Post-hoc feasibility audit of a result store.

Reads only the store directory: the partitions and ``meta.json`` (which
carries the system model). Operating limits are checked on the realized
(true-up) trajectory, energy balance on every layer:

* minimum up and down times of committed units,
* ramp limits, with start-up and shut-down allowances,
* reservoir water balance and storage bounds,
* bus energy balance for the scheduling layers and balancing-area energy
  balance for the true-up, whose redispatch is area-wide.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .store import ResultStore
from .system_model import SystemModel, parse_system

M3S_TO_HM3_PER_HOUR = 0.0036
TRUE_UP = "true_up"
SCHEDULING = ("week_ahead", "day_ahead", "hour_ahead")


@dataclass
class Tolerances:
    balance: float = 1e-6       # MW
    water: float = 1e-9         # hm³
    ramp: float = 1e-6          # MW
    bounds: float = 1e-6        # hm³


@dataclass
class AuditReport:
    violations: list = field(default_factory=list)
    checked: dict = field(default_factory=dict)     # check -> number of tested quantities
    worst: dict = field(default_factory=dict)       # check -> largest residual seen

    @property
    def ok(self) -> bool:
        return not self.violations

    def _note(self, check: str, residual: np.ndarray, tol: float, describe) -> None:
        residual = np.asarray(residual, float)
        self.checked[check] = self.checked.get(check, 0) + int(residual.size)
        if residual.size:
            self.worst[check] = max(self.worst.get(check, 0.0), float(np.max(residual)))
        for pos in zip(*np.nonzero(residual > tol)):
            self.violations.append({"check": check, "amount": float(residual[pos]), **describe(pos)})

    def to_dict(self) -> dict:
        return {"ok": self.ok, "checked": self.checked, "worst": self.worst, "violations": self.violations}


class _Table:
    """Values of one (scenario, layer) as dense (entities, hours) arrays."""

    def __init__(self, df: pd.DataFrame, hours: np.ndarray):
        self.hours = hours
        self.pos = {int(h): i for i, h in enumerate(hours)}
        self.groups = {k: g for k, g in df.groupby("metric", sort=False)}

    def get(self, metric: str, ids: list[str], fill: float = 0.0) -> np.ndarray:
        out = np.full((len(ids), self.hours.size), fill)
        g = self.groups.get(metric)
        if g is None:
            return out
        row = {e: i for i, e in enumerate(ids)}
        r = g["entity_id"].map(row)
        ok = r.notna().to_numpy()
        cols = g["timestamp"].map(self.pos).to_numpy()[ok]
        out[r.to_numpy()[ok].astype(int), cols.astype(int)] = g["value"].to_numpy()[ok]
        return out

    def has(self, metric: str) -> bool:
        return metric in self.groups


def audit_store(root: str | Path, tol: Optional[Tolerances] = None,
                scenarios: Optional[list[int]] = None) -> AuditReport:
    tol = tol or Tolerances()
    store = ResultStore(root)
    meta = store.meta()
    if "system" not in meta:
        raise ValueError(f"{root} has no meta.json with a system model")
    model = parse_system(meta["system"])
    report = AuditReport()
    for s in store.scenarios() if scenarios is None else scenarios:
        df = store.read(s)
        for layer, part in df.groupby("layer", sort=True):
            hours = np.unique(part["timestamp"].to_numpy())
            tab = _Table(part, hours)
            if layer == TRUE_UP:
                _area_balance(report, model, tab, s, tol)
                _commitment(report, model, tab, s)
                _ramps(report, model, tab, s, tol)
                _water(report, model, tab, s, tol)
            else:
                _bus_balance(report, model, tab, s, layer, tol)
                if layer == "day_ahead":
                    _schedule_water(report, model, tab, s, layer, tol, int(meta["run"]["start_hour"]))
    return report


def _injections(model: SystemModel, tab: _Table) -> np.ndarray:
    """(buses, hours) supply minus demand at every bus, network flows included."""
    bix = {b.id: i for i, b in enumerate(model.network.buses)}
    buses = list(bix)
    net = np.zeros((len(buses), tab.hours.size))

    def add(ids_bus, arr, sign=1.0):
        for k, b in enumerate(ids_bus):
            net[bix[b]] += sign * arr[k]

    add([t.bus_id for t in model.thermal], tab.get("thermal_generation", [t.id for t in model.thermal]))
    add([h.bus_id for h in model.hydro], tab.get("hydro_generation", [h.id for h in model.hydro]))
    add([u.bus_id for u in model.vre_units], tab.get("vre_generation", [u.id for u in model.vre_units]))
    net += tab.get("deficit", buses) + tab.get("demand_response", buses) - tab.get("surplus", buses)
    net -= tab.get("load", buses)
    mk = [m.bus_id for m in model.network.markets]
    add(mk, tab.get("market_buy", mk))
    add(mk, tab.get("market_sell", mk), -1.0)
    circ = model.network.circuits
    flow = tab.get("flow", [c.id for c in circ])
    add([c.to_bus for c in circ], flow)
    add([c.from_bus for c in circ], flow, -1.0)
    return net


def _bus_balance(report, model, tab, s, layer, tol) -> None:
    net = _injections(model, tab)
    buses = [b.id for b in model.network.buses]
    report._note("bus_balance", np.abs(net), tol.balance,
                 lambda p: {"scenario": s, "layer": layer, "entity": buses[p[0]], "hour": int(tab.hours[p[1]])})


def _area_balance(report, model, tab, s, tol) -> None:
    areas = [a.id for a in model.areas]
    if areas:
        of = model.area_of_bus()
        a_of = np.array([areas.index(of[b.id]) for b in model.network.buses])
    else:
        areas, a_of = ["system"], np.zeros(len(model.network.buses), int)
    net = np.zeros((len(areas), tab.hours.size))
    np.add.at(net, a_of, _injections(model, tab))
    net += tab.get("unserved", areas) - tab.get("curtailment", areas)
    report._note("area_balance", np.abs(net), tol.balance,
                 lambda p: {"scenario": s, "layer": TRUE_UP, "entity": areas[p[0]], "hour": int(tab.hours[p[1]])})


def _runs(seq: np.ndarray) -> list[tuple[int, int, bool]]:
    """(start, length, value) of the constant runs of a boolean sequence."""
    out, start = [], 0
    for t in range(1, seq.size + 1):
        if t == seq.size or seq[t] != seq[start]:
            out.append((start, t - start, bool(seq[start])))
            start = t
    return out


def _commitment(report, model, tab, s) -> None:
    ids = [t.id for t in model.thermal]
    on = tab.get("commitment", ids) > 0.5
    outage = tab.get("outage", ids) > 0.5
    n = 0
    for i, t in enumerate(model.thermal):
        if not t.committed:
            continue
        init_on = t.initial_status > 0
        init_len = abs(t.initial_status)
        runs = _runs(on[i])
        for k, (a, length, val) in enumerate(runs):
            n += 1
            if a + length == on.shape[1]:
                continue       # cut by the horizon
            total = length + (init_len if a == 0 and val == init_on else 0)
            need = t.min_up_time if val else t.min_down_time
            if val and outage[i, a + length]:
                continue       # forced off
            if total < need:
                report.violations.append({"check": "min_up" if val else "min_down", "scenario": s,
                                          "layer": TRUE_UP, "entity": t.id, "hour": int(tab.hours[a]),
                                          "amount": float(need - total)})
    report.checked["min_up_down"] = report.checked.get("min_up_down", 0) + n


def _ramps(report, model, tab, s, tol) -> None:
    ids = [t.id for t in model.thermal]
    g = tab.get("thermal_generation", ids)
    outage = tab.get("outage", ids) > 0.5
    com = np.array([t.committed for t in model.thermal])
    on = np.where(com[:, None], tab.get("commitment", ids) > 0.5, ~outage)
    g_prev = np.array([t.initial_generation if t.initial_status > 0 else 0.0 for t in model.thermal])
    on_prev = np.array([t.initial_status > 0 if t.committed else True for t in model.thermal])
    G = np.column_stack([g_prev, g])
    O = np.column_stack([on_prev, on]).astype(float)
    ru = np.array([t.ramp_up for t in model.thermal])[:, None]
    rd = np.array([t.ramp_down for t in model.thermal])[:, None]
    pmin = np.array([t.min_generation_when_on for t in model.thermal])[:, None]
    su, sd = np.maximum(ru, pmin), np.maximum(rd, pmin)
    started = np.maximum(O[:, 1:] - O[:, :-1], 0.0)
    stopped = np.maximum(O[:, :-1] - O[:, 1:], 0.0)
    with np.errstate(invalid="ignore"):
        up_lim = np.where(O[:, :-1] > 0, ru, 0.0) + np.where(started > 0, su, 0.0)
        dn_lim = np.where(O[:, 1:] > 0, rd, 0.0) + np.where(stopped > 0, sd, 0.0)
    dn_lim = np.where(outage, np.inf, dn_lim)
    step = G[:, 1:] - G[:, :-1]
    resid = np.maximum(np.maximum(step - up_lim, -step - dn_lim), 0.0)
    resid = np.where(np.isfinite(resid), resid, 0.0)
    report._note("ramp", resid, tol.ramp,
                 lambda p: {"scenario": s, "layer": TRUE_UP, "entity": ids[p[0]], "hour": int(tab.hours[p[1]])})


def _water(report, model, tab, s, tol) -> None:
    hydro = model.hydro
    hid = [h.id for h in hydro]
    res = [h for h in hydro if h.kind == "reservoir"]
    rid = [h.id for h in res]
    q, sp, inflow = tab.get("turbined", hid), tab.get("spill", hid), tab.get("inflow", hid)
    v = tab.get("storage", rid, np.nan)
    v0 = np.array([h.initial_storage for h in res])
    V = np.column_stack([v0, v])
    idx = {h: i for i, h in enumerate(hid)}
    resid = np.zeros((len(res), tab.hours.size))
    for r, h in enumerate(res):
        i = idx[h.id]
        up = sum(q[j] + sp[j] for j, hj in enumerate(hydro) if hj.downstream_id == h.id)
        rhs = V[r, :-1] + M3S_TO_HM3_PER_HOUR * (inflow[i] - q[i] - sp[i] + up)
        resid[r] = np.abs(V[r, 1:] - rhs)
    report._note("water_balance", resid, tol.water,
                 lambda p: {"scenario": s, "layer": TRUE_UP, "entity": rid[p[0]], "hour": int(tab.hours[p[1]])})
    lo = np.array([h.min_storage for h in res])[:, None]
    hi = np.array([h.max_storage for h in res])[:, None]
    out = np.maximum(np.maximum(lo - v, v - hi), 0.0)
    report._note("storage_bounds", out, tol.bounds,
                 lambda p: {"scenario": s, "layer": TRUE_UP, "entity": rid[p[0]], "hour": int(tab.hours[p[1]])})
    # run-of-river plants pass what reaches them
    ror = [i for i, h in enumerate(hydro) if h.kind != "reservoir"]
    if ror:
        r_res = np.zeros((len(ror), tab.hours.size))
        for k, i in enumerate(ror):
            up = sum(q[j] + sp[j] for j, hj in enumerate(hydro) if hj.downstream_id == hydro[i].id)
            r_res[k] = M3S_TO_HM3_PER_HOUR * np.abs(q[i] + sp[i] - inflow[i] - up)
        report._note("water_balance", r_res, tol.water,
                     lambda p: {"scenario": s, "layer": TRUE_UP, "entity": hid[ror[p[0]]],
                                "hour": int(tab.hours[p[1]])})


def _schedule_water(report, model, tab, s, layer, tol, start_hour: int) -> None:
    """Water balance between consecutive hours inside each 24-hour schedule."""
    hydro = model.hydro
    hid = [h.id for h in hydro]
    res = [h for h in hydro if h.kind == "reservoir"]
    rid = [h.id for h in res]
    q, sp, inflow = tab.get("turbined", hid), tab.get("spill", hid), tab.get("inflow", hid)
    v = tab.get("storage", rid, np.nan)
    inner = ((tab.hours[1:] - start_hour) % 24 != 0) & (np.diff(tab.hours) == 1)
    idx = {h: i for i, h in enumerate(hid)}
    resid = np.zeros((len(res), int(inner.sum())))
    for r, h in enumerate(res):
        i = idx[h.id]
        up = sum(q[j] + sp[j] for j, hj in enumerate(hydro) if hj.downstream_id == h.id)
        rhs = v[r, :-1] + M3S_TO_HM3_PER_HOUR * (inflow[i] - q[i] - sp[i] + up)[1:]
        resid[r] = np.abs(v[r, 1:] - rhs)[inner]
    hrs = tab.hours[1:][inner]
    report._note("water_balance", resid, tol.water,
                 lambda p: {"scenario": s, "layer": layer, "entity": rid[p[0]], "hour": int(hrs[p[1]])})


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="Audit a result store for feasibility violations.")
    ap.add_argument("store")
    args = ap.parse_args(argv)
    rep = audit_store(args.store)
    json.dump(rep.to_dict(), sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0 if rep.ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
