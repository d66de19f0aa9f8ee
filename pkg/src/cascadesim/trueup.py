"""Real-time true-up: a three-hour affine-decision-rule redispatch.

Hour 1 is the realization; hours 2 and 3 are represented by the highest-weight
forecast scenarios. Thermal output follows ``g = g0 + beta * xi`` where ``xi``
is the area net-load deviation from the hour-ahead forecast. Commitments,
hydro releases, line flows and market positions stay at the hour-ahead
setpoints. Each area also has a priced slack participant that takes the share
of the deviation the units cannot, as unserved energy or curtailment.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .formulation import HM3_PER_FLOW_HOUR, SURPLUS_COST, deficit_widths, fuel_cost
from .scheduling import SystemState
from .solver import LinearProgram, ModelBuilder, SimplexOptions, Status, solve_lp
from .system_model import SystemModel

HORIZON = 3


class MalformedState(ValueError):
    pass


class SolverFailure(RuntimeError):
    pass


@dataclass
class TrueUpConfig:
    max_scenarios: int = 10           # hours 2-3 keep the highest-weight scenarios
    ramps: bool = True
    unserved_cost: Optional[float] = None      # default: first deficit step
    curtail_cost: float = SURPLUS_COST
    redispatch_cost: Optional[float] = None    # default: max thermal marginal cost + 1
    simplex: SimplexOptions = field(default_factory=SimplexOptions)


@dataclass
class TrueUpData:
    """Observed and forecast inputs for one true-up hour."""

    hour: int
    realized_net: np.ndarray      # (areas,) MW realized load - VRE
    forecast_net: np.ndarray      # (areas, 3) MW hour-ahead forecast for hours h..h+2
    scenario_net: np.ndarray      # (K, areas, 2) MW for hours h+1, h+2
    probabilities: np.ndarray     # (K,)
    outage: np.ndarray            # (thermal,) bool, state after this hour's draw
    inflow: np.ndarray            # (hydro,) m³/s realized


@dataclass
class TrueUpProblem:
    model: SystemModel
    state: SystemState
    data: TrueUpData
    problem: LinearProgram
    idx: dict
    xi_real: np.ndarray           # (areas,)
    xi_scen: np.ndarray           # (K, areas, 2)
    home: np.ndarray              # (thermal,) area index
    nominal: np.ndarray           # (thermal, 3) hour-ahead dispatch of available units
    costs: np.ndarray             # (thermal,) $/MWh
    unserved_cost: float
    curtail_cost: float
    hydro: tuple = ()             # realized (generation, turbined, spill, end storage)

    @property
    def num_nominal(self) -> int:
        return int(self.idx["g0"].size + self.idx["dev"].size)


@dataclass
class AffinePolicy:
    nominal: np.ndarray           # (thermal, 3) MW
    beta: np.ndarray              # (thermal, areas)
    beta_slack: np.ndarray        # (areas,)

    def dispatch(self, xi: np.ndarray, hour: int = 0) -> np.ndarray:
        return self.nominal[:, hour] + self.beta @ np.asarray(xi, float)


@dataclass
class TrueUpOutcome:
    hour: int
    dispatch: np.ndarray          # (thermal,) MW
    deployment: np.ndarray        # (areas,) MW of thermal reserve deployed
    unserved: np.ndarray          # (areas,) MWh
    curtailment: np.ndarray       # (areas,) MWh
    xi: np.ndarray                # (areas,) MW
    cost: float                   # realized hour cost, $
    objective: float              # ADR objective over the three hours, $
    commit: np.ndarray            # (thermal,) 0/1 realized
    outage: np.ndarray            # (thermal,) bool
    hydro_gen: np.ndarray         # (hydro,) MW
    turbined: np.ndarray          # (hydro,) m³/s
    spill: np.ndarray             # (hydro,) m³/s
    inflow: np.ndarray            # (hydro,) m³/s
    storage: np.ndarray           # (reservoirs,) hm³ end of hour
    gas_burn: np.ndarray          # (contracts,) MMBtu
    state: Optional[SystemState] = None


# ---------------------------------------------------------------------------- helpers
def area_index(model: SystemModel) -> tuple[np.ndarray, int]:
    """Area of every bus; a model without areas is one area."""
    if not model.areas:
        return np.zeros(len(model.network.buses), int), 1
    of = model.area_of_bus()
    ids = {a.id: i for i, a in enumerate(model.areas)}
    return np.array([ids[of[b.id]] for b in model.network.buses], int), len(model.areas)


def area_net_load(model: SystemModel, load: np.ndarray, vre: np.ndarray) -> np.ndarray:
    """(areas, ...) net load from bus load (buses, ...) and VRE output (units, ...)."""
    bus_area, nA = area_index(model)
    bix = model.bus_index()
    load = np.asarray(load, float)
    vre = np.asarray(vre, float)
    out = np.zeros((nA,) + load.shape[1:])
    np.add.at(out, bus_area, load)
    for k, u in enumerate(model.vre_units):
        out[bus_area[bix[u.bus_id]]] -= vre[k]
    return out


def thermal_home(model: SystemModel) -> np.ndarray:
    bus_area, _ = area_index(model)
    bix = model.bus_index()
    return np.array([bus_area[bix[t.bus_id]] for t in model.thermal], int)


def select_scenarios(weights: np.ndarray, k: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the ``k`` largest weights (ties by index) and their renormalized weights."""
    w = np.asarray(weights, float)
    order = np.lexsort((np.arange(w.size), -w))[:k]
    order = np.sort(order)
    p = w[order]
    tot = p.sum()
    if tot <= 0:
        raise MalformedState("scenario weights sum to zero")
    return order, p / tot


def outage_step(model: SystemModel, outage: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One hour of the two-state Markov outage process.

    A unit in service fails with probability lambda, a failed one is repaired
    with probability mu = 1/MTTR; lambda is set so the stationary unavailability
    equals the forced outage rate.
    """
    out = np.asarray(outage, bool).copy()
    u = rng.random(len(model.thermal))
    for i, t in enumerate(model.thermal):
        mu = 1.0 / max(t.mean_time_to_repair, 1.0)
        f = min(max(t.forced_outage_rate, 0.0), 0.999)
        lam = f * mu / (1.0 - f)
        out[i] = (u[i] >= mu) if out[i] else (u[i] < lam)
    return out


def _unit_reserve(model: SystemModel, state: SystemState, hours: np.ndarray) -> np.ndarray:
    """(thermal, len(hours)) MW of reserve allocated to each unit, all products."""
    from .formulation import _providers
    nT = len(model.thermal)
    if state.reserves is None:
        return np.full((nT, len(hours)), np.inf)
    start, arr = state.reserves
    k = np.clip(np.asarray(hours) - start, 0, arr.shape[-1] - 1)
    out = np.zeros((nT, len(hours)))
    for p_i, (kind, ui, _) in enumerate(_providers(model)):
        if kind == "thermal":
            out[ui] += arr[p_i][:, k].sum(axis=0)
    return np.maximum(out, 0.0)


# ---------------------------------------------------------------------------- build / solve
def build_trueup(model: SystemModel, state: SystemState, data: TrueUpData,
                 cfg: Optional[TrueUpConfig] = None) -> TrueUpProblem:
    cfg = cfg or TrueUpConfig()
    sp = state.setpoints
    nT = len(model.thermal)
    _, nA = area_index(model)
    if sp is None:
        raise MalformedState("no hour-ahead setpoints in the state")
    if sp.get("hour") != state.hour or data.hour != state.hour:
        raise MalformedState(f"setpoints for hour {sp.get('hour')}, state at {state.hour}, "
                             f"true-up for {data.hour}")
    g_ha = np.asarray(sp["thermal_gen"], float)
    on = np.asarray(sp["commit"], float) > 0.5
    if g_ha.shape != (nT, HORIZON) or on.shape != (nT, HORIZON):
        raise MalformedState("setpoints do not cover three hours of every thermal unit")
    probs = np.asarray(data.probabilities, float)
    scen = np.asarray(data.scenario_net, float)
    if scen.ndim != 3 or scen.shape[1:] != (nA, 2) or scen.shape[0] != probs.size or probs.size < 1:
        raise MalformedState(f"scenario net load has shape {scen.shape}, expected (K, {nA}, 2)")
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise MalformedState("scenario weights must be nonnegative and sum to 1")
    if np.asarray(data.forecast_net).shape != (nA, HORIZON) or np.asarray(data.realized_net).shape != (nA,):
        raise MalformedState("area forecast or realization has the wrong shape")
    outage = np.asarray(data.outage, bool)
    if outage.shape != (nT,):
        raise MalformedState("outage vector has the wrong length")

    home = thermal_home(model)
    avail = ~outage
    # units without a commitment class run anywhere in [0, capacity]
    flexible = np.array([not t.committed for t in model.thermal], bool)
    on = (on | flexible[:, None]) & avail[:, None]
    cap = np.array([t.capacity for t in model.thermal])
    pmin = np.array([t.min_generation_when_on for t in model.thermal])
    ru = np.array([t.ramp_up for t in model.thermal])
    rd = np.array([t.ramp_down for t in model.thermal])
    cost = np.array([t.variable_cost for t in model.thermal]) + fuel_cost(model)
    rho = cfg.redispatch_cost if cfg.redispatch_cost is not None else float(cost.max(initial=0.0)) + 1.0
    c_u = cfg.unserved_cost if cfg.unserved_cost is not None else float(deficit_widths(model)[1][0])
    c_c = cfg.curtail_cost

    # setpoints of units that dropped out are lost and join the deviation
    lost = np.zeros((nA, HORIZON))
    np.add.at(lost, home, np.where(avail[:, None], 0.0, g_ha))
    nominal = np.where(avail[:, None], g_ha, 0.0)
    # hydro output lost to the realized inflow joins the deviation too
    hydro = realize_hydro(model, state.storage, data.inflow, np.asarray(sp["turbined"])[:, 0],
                          np.asarray(sp["spill"])[:, 0], np.asarray(sp["hydro_gen"])[:, 0])
    bus_area, _ = area_index(model)
    bix = model.bus_index()
    for i, h in enumerate(model.hydro):
        lost[bus_area[bix[h.bus_id]], 0] += np.asarray(sp["hydro_gen"])[i, 0] - hydro[0][i]
    xi_real = np.asarray(data.realized_net, float) - data.forecast_net[:, 0] + lost[:, 0]
    xi_scen = scen - np.asarray(data.forecast_net, float)[None, :, 1:] + lost[None, :, 1:]
    K = probs.size

    lo = np.where(flexible[:, None], 0.0, pmin[:, None]) * on
    hi = cap[:, None] * on
    mb = ModelBuilder(f"true_up_h{state.hour}")
    g0 = mb.add_vars("g0", (nT, HORIZON), lb=lo, ub=hi, cost=cost[:, None] * np.ones(HORIZON))
    dev = mb.add_vars("dev", (2, nT, HORIZON), lb=0.0, cost=rho)
    rows = mb.add_rows("nominal_track", (nT, HORIZON), lb=nominal, ub=nominal)
    mb.add_terms(rows, g0, 1.0)
    mb.add_terms(rows, dev[0], -1.0)
    mb.add_terms(rows, dev[1], 1.0)
    target = np.zeros((nA, HORIZON))
    np.add.at(target, home, nominal)
    rows = mb.add_rows("nominal_balance", (nA, HORIZON), lb=target, ub=target)
    for i in range(nT):
        mb.add_terms(rows[home[i]], g0[i], 1.0)

    # realized deployment within each unit's allocated reserve bounds beta directly;
    # the lookahead hours are held to unit limits and ramps only
    res = _unit_reserve(model, state, np.array([state.hour]))[:, 0]
    dev_real = np.abs(xi_real)[home]
    with np.errstate(divide="ignore", invalid="ignore"):
        lim = np.where(dev_real > 0, res / np.where(dev_real > 0, dev_real, 1.0), np.inf)
    beta_ub = np.zeros((nT, nA))
    beta_ub[np.arange(nT), home] = np.where(avail, lim, 0.0)
    # expected deviation each unit would follow, for the cost of beta
    exp_xi = xi_real + (probs[:, None, None] * xi_scen).sum(axis=0).sum(axis=1)
    beta = mb.add_vars("beta", (nT, nA), lb=0.0, ub=beta_ub, cost=cost[:, None] * exp_xi[None, :])
    c_slack = (np.where(xi_real > 0, c_u, c_c) * np.abs(xi_real)
               + (probs[:, None, None] * np.where(xi_scen > 0, c_u, c_c) * np.abs(xi_scen)).sum(axis=(0, 2)))
    slack = mb.add_vars("beta_slack", (nA,), lb=0.0, ub=1.0, cost=c_slack)
    rows = mb.add_rows("participation", (nA,), lb=1.0, ub=1.0)
    mb.add_terms(rows, slack, 1.0)
    for i in range(nT):
        mb.add_terms(rows[home[i]], beta[i, home[i]], 1.0)

    # unit limits at every point: realization (hour 1) and each scenario (hours 2-3)
    pts = [(0, xi_real)] + [(k + 1, xi_scen[s, :, k]) for s in range(K) for k in range(2)]
    lim_rows = mb.add_rows("unit_limit", (len(pts), nT),
                           lb=np.array([lo[:, h] for h, _ in pts]), ub=np.array([hi[:, h] for h, _ in pts]))
    for p_i, (h, xi) in enumerate(pts):
        mb.add_terms(lim_rows[p_i], g0[:, h], 1.0)
        mb.add_terms(lim_rows[p_i], beta[np.arange(nT), home], xi[home])

    if cfg.ramps and nT:
        su, sd = np.maximum(ru, pmin), np.maximum(rd, pmin)
        prev_on = np.column_stack([(state.on | flexible) & avail, on[:, :-1]]).astype(float)
        cur_on = on.astype(float)
        started = np.maximum(cur_on - prev_on, 0.0)
        stopped = np.maximum(prev_on - cur_on, 0.0)
        up_lim = (np.where(prev_on > 0, ru[:, None], 0.0) + np.where(started > 0, su[:, None], 0.0))
        dn_lim = (np.where(cur_on > 0, rd[:, None], 0.0) + np.where(stopped > 0, sd[:, None], 0.0))
        dn_lim = np.where(avail[:, None], dn_lim, np.inf)
        ramped = np.flatnonzero(np.isfinite(ru) | np.isfinite(rd))
        if ramped.size:
            r0 = mb.add_rows("ramp_h1", (ramped.size,), lb=(state.generation - dn_lim[:, 0])[ramped],
                             ub=(state.generation + up_lim[:, 0])[ramped])
            mb.add_terms(r0, g0[ramped, 0], 1.0)
            mb.add_terms(r0, beta[ramped, home[ramped]], xi_real[home[ramped]])
            for k in (1, 2):
                rk = mb.add_rows(f"ramp_h{k + 1}", (K, ramped.size), lb=-dn_lim[ramped, k] * np.ones((K, 1)),
                                 ub=up_lim[ramped, k] * np.ones((K, 1)))
                prev_xi = (np.broadcast_to(xi_real, (K, nA)) if k == 1 else xi_scen[:, :, 0])
                for s in range(K):
                    mb.add_terms(rk[s], g0[ramped, k], 1.0)
                    mb.add_terms(rk[s], g0[ramped, k - 1], -1.0)
                    d_xi = xi_scen[s, :, k - 1] - prev_xi[s]
                    mb.add_terms(rk[s], beta[ramped, home[ramped]], d_xi[home[ramped]])

    idx = dict(g0=g0, dev=dev, beta=beta, beta_slack=slack, unit_limit=lim_rows)
    return TrueUpProblem(model, state, data, mb.build(), idx, xi_real, xi_scen, home, nominal, cost, c_u, c_c,
                        hydro)


def solve_trueup(tp: TrueUpProblem, cfg: Optional[TrueUpConfig] = None,
                 warm_start=None) -> tuple[AffinePolicy, TrueUpOutcome]:
    cfg = cfg or TrueUpConfig()
    sol = solve_lp(tp.problem, cfg.simplex, warm_start)
    if sol.status is not Status.OPTIMAL:
        raise SolverFailure(f"{tp.problem.name}: {sol.status.value}")
    x = sol.primal_values
    idx = tp.idx
    nT = len(tp.model.thermal)
    policy = AffinePolicy(x[idx["g0"]].copy(), x[idx["beta"]].copy(), x[idx["beta_slack"]].copy())
    model, state, data = tp.model, tp.state, tp.data
    sp = state.setpoints
    avail = ~np.asarray(data.outage, bool)
    flexible = np.array([not t.committed for t in model.thermal], bool)
    on = ((np.asarray(sp["commit"][:, 0]) > 0.5) | flexible) & avail
    pmin = np.array([t.min_generation_when_on for t in model.thermal])
    cap = np.array([t.capacity for t in model.thermal])
    # realized point; clip solver round-off into the unit range
    raw = policy.nominal[:, 0] + policy.beta[np.arange(nT), tp.home] * tp.xi_real[tp.home]
    g = np.clip(raw, np.where(flexible, 0.0, pmin) * on, cap * on)
    on = np.where(flexible, g > 1e-9, on)
    _, nA = area_index(model)
    deployed = np.zeros(nA)
    np.add.at(deployed, tp.home, g - policy.nominal[:, 0])
    slack = tp.xi_real - deployed       # share left to the slack participant
    unserved = np.maximum(slack, 0.0)
    curtail = np.maximum(-slack, 0.0)
    cost = float(tp.costs @ g + tp.unserved_cost * unserved.sum() + tp.curtail_cost * curtail.sum())
    hydro_gen, turb, spill, storage = tp.hydro
    burn = np.zeros(len(model.contracts))
    for c_i, c in enumerate(model.contracts):
        for i, t in enumerate(model.thermal):
            if t.fuel_contract_id == c.id:
                burn[c_i] += c.heat_rate(t.id) * g[i]
    out = TrueUpOutcome(
        hour=state.hour, dispatch=g, deployment=deployed, unserved=unserved, curtailment=curtail,
        xi=tp.xi_real.copy(), cost=cost, objective=float(sol.objective_value), commit=on.astype(float),
        outage=np.asarray(data.outage, bool).copy(), hydro_gen=hydro_gen, turbined=turb, spill=spill,
        inflow=np.asarray(data.inflow, float).copy(), storage=storage, gas_burn=burn,
    )
    out.state = apply_outcome(model, state, out)
    return policy, out


def realize_hydro(model: SystemModel, storage: np.ndarray, inflow: np.ndarray, turbined: np.ndarray,
                  spill: np.ndarray, generation: np.ndarray):
    """Hour-ahead hydro releases adjusted to the realized inflow.

    Reservoirs keep their releases unless storage would leave its bounds: water
    above the top is spilled, a shortfall below the bottom cuts spill then
    turbining. Run-of-river plants pass what arrives, turbining up to their
    setpoint. Returns (generation, turbined, spill, end storage).
    """
    hydro = model.hydro
    gen, q, s = (np.asarray(a, float).copy() for a in (generation, turbined, spill))
    inflow = np.asarray(inflow, float)
    res_ix = [i for i, h in enumerate(hydro) if h.is_reservoir]
    r_of = {i: r for r, i in enumerate(res_ix)}
    new = np.asarray(storage, float).copy()
    for i in _topological(model):
        h = hydro[i]
        up = sum(q[j] + s[j] for j, hj in enumerate(hydro) if hj.downstream_id == h.id)
        q_sp = q[i]
        if h.is_reservoir:
            v0 = storage[r_of[i]]
            v = v0 + HM3_PER_FLOW_HOUR * (inflow[i] + up - q[i] - s[i])
            if v > h.max_storage:
                s[i] += (v - h.max_storage) / HM3_PER_FLOW_HOUR
            elif v < h.min_storage:
                short = (h.min_storage - v) / HM3_PER_FLOW_HOUR
                cut = min(short, max(s[i] - h.spill_bounds[0], 0.0))
                s[i] -= cut
                q[i] = max(q[i] - (short - cut), 0.0)
            new[r_of[i]] = v0 + HM3_PER_FLOW_HOUR * (inflow[i] + up - q[i] - s[i])
        else:
            avail = max(inflow[i] + up, 0.0)
            q[i] = min(q[i], avail)
            s[i] = avail - q[i]
        if q[i] < q_sp:
            pts = tuple(zip(*h.production_segments))
            gen[i] = max(gen[i] - (np.interp(q_sp, *pts) - np.interp(q[i], *pts)), 0.0)
    return gen, q, s, new


def _topological(model: SystemModel) -> list[int]:
    from .system_model import topological_hydro
    ids = {h.id: i for i, h in enumerate(model.hydro)}
    return [ids[h.id] for h in topological_hydro(model)]


def apply_outcome(model: SystemModel, state: SystemState, outcome: TrueUpOutcome) -> SystemState:
    """State at the start of the next hour."""
    new = state.copy()
    on = np.asarray(outcome.commit) > 0.5
    same = on == state.on
    new.hours_in_state = np.where(same, state.hours_in_state + 1.0, 1.0)
    new.on = on
    new.generation = np.asarray(outcome.dispatch, float).copy()
    new.storage = np.asarray(outcome.storage, float).copy()
    new.gas_remaining = state.gas_remaining - outcome.gas_burn
    new.outage = np.asarray(outcome.outage, bool).copy()
    new.hour = state.hour + 1
    new.setpoints = None
    return new


__all__ = [
    "AffinePolicy", "MalformedState", "SolverFailure", "TrueUpConfig", "TrueUpData", "TrueUpOutcome",
    "TrueUpProblem", "apply_outcome", "area_index", "area_net_load", "build_trueup", "outage_step",
    "realize_hydro", "select_scenarios", "solve_trueup", "thermal_home",
]
