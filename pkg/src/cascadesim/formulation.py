"""Shared multi-period hydrothermal model used by the SDDP stage and the
week-, day- and hour-ahead scheduling layers.

Every per-period variable and row group keeps the period axis last, which is
what :func:`shift_basis` relies on to warm-start a rolled horizon.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .solver import Basis, LinearProgram, ModelBuilder
from .solver.problem import AT_LOWER, AT_UPPER, AT_ZERO, BASIC
from .system_model import RESERVE_PRODUCTS, SystemModel

# hm³ per (m³/s · h)
HM3_PER_FLOW_HOUR = 3600.0 / 1e6
SURPLUS_COST = 1000.0
RESERVE_SHORTFALL_COST = 2000.0
FLOOD_COST = 5000.0            # $/hm³ above a flood-control level

CONTINUOUS, COMMITTED, FIXED = "continuous", "committed", "fixed"


class InfeasibleStage(RuntimeError):
    pass


@dataclass
class PeriodInputs:
    durations: np.ndarray          # (P,) hours
    load: np.ndarray               # (buses, P) MW
    vre: np.ndarray                # (vre units, P) MW
    inflow: np.ndarray             # (hydro, P) m³/s incremental
    storage0: np.ndarray           # (reservoirs,) hm³
    storage_cap: np.ndarray        # (reservoirs, P) hm³
    thermal_available: Optional[np.ndarray] = None   # (thermal, P) 0/1
    day: Optional[np.ndarray] = None                 # (P,) day index for gas rows

    @property
    def P(self) -> int:
        return int(self.durations.size)

    @property
    def starts(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.durations)[:-1]])


@dataclass
class UnitState:
    """Thermal boundary conditions at the start of a horizon."""

    on: np.ndarray            # (thermal,) bool
    hours_in_state: np.ndarray  # (thermal,) hours
    generation: np.ndarray    # (thermal,) MW


@dataclass
class PeriodOptions:
    commitment: Sequence[str] = ()               # per thermal unit
    integer_periods: Optional[np.ndarray] = None  # (thermal, P) bool for committed units
    fixed_on: Optional[np.ndarray] = None        # (thermal, P) 0/1 for fixed units
    unit_state: Optional[UnitState] = None
    ramps: bool = False
    reserves: str = "none"                       # none | optimize | fixed
    fixed_reserves: Optional[np.ndarray] = None  # (providers, products, P)
    gas: str = "priced"                          # priced | nominate | bounded
    gas_volume: Optional[np.ndarray] = None      # (contracts, days) MMBtu for bounded
    gas_overdraft_factor: float = 10.0           # premium multiple of the contract price
    end_cuts: Optional[tuple[np.ndarray, np.ndarray]] = None  # (intercepts (K,), gradients (K, R))
    end_value: Optional[np.ndarray] = None       # (reservoirs,) $/hm³
    end_target: Optional[np.ndarray] = None      # (reservoirs,) hm³
    end_target_penalty: float = 0.0              # $/hm³
    markets: bool = True
    startup_costs: bool = True


@dataclass
class PeriodModel:
    model: SystemModel
    inputs: PeriodInputs
    options: PeriodOptions
    builder: ModelBuilder
    idx: dict
    problem: LinearProgram
    periodic: set = field(default_factory=set)

    def basis_layout(self):
        return self.builder.var_groups, self.builder.row_groups


def _providers(model: SystemModel) -> list[tuple[str, int, int]]:
    """Reserve providers as (kind, unit index, area index): home area plus shared areas."""
    area_of = model.area_of_bus()
    area_idx = {a.id: i for i, a in enumerate(model.areas)}
    out = []
    for i, t in enumerate(model.thermal):
        out.append(("thermal", i, area_idx[area_of[t.bus_id]]))
    for i, h in enumerate(model.hydro):
        if h.is_reservoir:
            out.append(("hydro", i, area_idx[area_of[h.bus_id]]))
    for a_i, a in enumerate(model.areas):
        for rid in a.shared_resource_ids:
            for kind, units in (("thermal", model.thermal), ("hydro", model.hydro)):
                for i, u in enumerate(units):
                    if u.id == rid and (kind, i, a_i) not in out:
                        if kind == "hydro" and not u.is_reservoir:
                            continue
                        out.append((kind, i, a_i))
    return out


def _ramp_down_hours(unit, g0: float) -> float:
    """Hours a running unit needs before its output fits the shutdown ramp."""
    sd = max(unit.ramp_down, unit.min_generation_when_on)
    if g0 <= sd + 1e-9 or not np.isfinite(unit.ramp_down):
        return 0.0
    return float(np.ceil((g0 - sd) / unit.ramp_down - 1e-9))


def deficit_widths(model: SystemModel) -> tuple[np.ndarray, np.ndarray]:
    """(width fraction, cost) per deficit step; the last step is unbounded."""
    frac = np.array([f for f, _ in model.deficit_cost])
    cost = np.array([c for _, c in model.deficit_cost])
    widths = np.diff(np.concatenate([[0.0], frac]))
    widths[-1] = np.inf
    return widths, cost


def fuel_cost(model: SystemModel) -> np.ndarray:
    """$/MWh of contract fuel per thermal unit (0 without contract)."""
    out = np.zeros(len(model.thermal))
    for i, t in enumerate(model.thermal):
        if t.fuel_contract_id is not None:
            c = model.contract(t.fuel_contract_id)
            out[i] = c.price * c.heat_rate(t.id)
    return out


def build_period_model(model: SystemModel, inputs: PeriodInputs, opts: PeriodOptions,
                       name: str = "stage") -> PeriodModel:
    mb = ModelBuilder(name)
    P = inputs.P
    dur = np.asarray(inputs.durations, float)
    starts = inputs.starts
    nB = len(model.network.buses)
    bus_ix = model.bus_index()
    thermal, hydro = model.thermal, model.hydro
    nT, nH = len(thermal), len(hydro)
    res_list = [i for i, h in enumerate(hydro) if h.is_reservoir]
    res_pos = {h: r for r, h in enumerate(res_list)}
    nR = len(res_list)
    idx: dict = {}
    periodic: set = set()

    def pv(name, shape, **kw):
        periodic.add(name)
        return mb.add_vars(name, tuple(shape) + (P,), **kw)

    def pr(name, shape, **kw):
        periodic.add(name)
        return mb.add_rows(name, tuple(shape) + (P,), **kw)

    avail = np.ones((nT, P)) if inputs.thermal_available is None else np.asarray(inputs.thermal_available, float)
    modes = list(opts.commitment) or [CONTINUOUS] * nT
    cap = np.array([t.capacity for t in thermal])
    pmin = np.array([t.min_generation_when_on for t in thermal])
    fcost = fuel_cost(model)

    # ---------------------------------------------------------------- balance
    vre_bus = np.zeros((nB, P))
    for k, unit in enumerate(model.vre_units):
        vre_bus[bus_ix[unit.bus_id]] += inputs.vre[k]
    net = inputs.load - vre_bus
    bal = pr("balance", (nB,), lb=net, ub=net)
    idx.update(balance=bal, vre_bus=vre_bus)

    # ---------------------------------------------------------------- thermal
    var_cost = np.array([t.variable_cost for t in thermal])
    per_mwh = var_cost + (fcost if opts.gas in ("priced", "bounded") else 0.0)
    g = pv("thermal_gen", (nT,), lb=0.0, ub=cap[:, None] * avail, cost=per_mwh[:, None] * dur)
    idx["thermal_gen"] = g
    tb = np.array([bus_ix[t.bus_id] for t in thermal], dtype=int)
    if nT:
        mb.add_terms(bal[tb], g, 1.0)

    com = [i for i in range(nT) if modes[i] == COMMITTED]
    fix = [i for i in range(nT) if modes[i] == FIXED]
    idx["committed_units"] = np.array(com, dtype=int)
    state = opts.unit_state
    u = y = z = None
    if com:
        integ = np.zeros((len(com), P), bool)
        if opts.integer_periods is not None:
            integ = np.asarray(opts.integer_periods, bool)[com]
        ub_u = (avail[com] > 0).astype(float)
        u = pv("commit", (len(com),), lb=0.0, ub=ub_u, integer=integ)
        sc = np.array([thermal[i].startup_cost for i in com]) if opts.startup_costs else np.zeros(len(com))
        y = pv("startup", (len(com),), lb=0.0, ub=1.0, cost=sc[:, None] * np.ones(P))
        z = pv("shutdown", (len(com),), lb=0.0, ub=1.0)
        idx.update(commit=u, startup=y, shutdown=z)
        on0 = np.array([bool(state.on[i]) for i in com]) if state else np.zeros(len(com), bool)
        cnt0 = np.array([state.hours_in_state[i] for i in com]) if state else np.full(len(com), 1e9)
        # capacity and minimum generation
        rows = pr("gen_max", (len(com),), ub=0.0)
        mb.add_terms(rows, g[com], 1.0)
        mb.add_terms(rows, u, -cap[com][:, None])
        idx["gen_max"] = rows
        rows = pr("gen_min", (len(com),), lb=0.0)
        mb.add_terms(rows, g[com], 1.0)
        mb.add_terms(rows, u, -pmin[com][:, None])
        # transitions u_t - u_{t-1} - y_t + z_t = 0
        rhs = np.zeros((len(com), P))
        rhs[:, 0] = on0.astype(float)
        rows = pr("transition", (len(com),), lb=rhs, ub=rhs)
        mb.add_terms(rows, u, 1.0)
        mb.add_terms(rows[:, 1:], u[:, :-1], -1.0)
        mb.add_terms(rows, y, -1.0)
        mb.add_terms(rows, z, 1.0)
        # turn-on / turn-off covers over the hour windows
        ri, ci, rj, cj = [], [], [], []
        up_rows = pr("min_up", (len(com),), ub=0.0)
        dn_rows = pr("min_down", (len(com),), ub=1.0)
        lb_u = np.zeros((len(com), P))
        ub_force = ub_u.copy()
        for k, i in enumerate(com):
            UT, DT = thermal[i].min_up_time, thermal[i].min_down_time
            for t in range(P):
                for tau in range(t + 1):
                    if starts[tau] > starts[t] - UT:
                        ri.append(up_rows[k, t]); ci.append(y[k, tau])
                    if starts[tau] > starts[t] - DT:
                        rj.append(dn_rows[k, t]); cj.append(z[k, tau])
                if on0[k] and starts[t] < UT - cnt0[k]:
                    lb_u[k, t] = 1.0
                if on0[k] and starts[t] < _ramp_down_hours(thermal[i], state.generation[i]):
                    lb_u[k, t] = 1.0
                if not on0[k] and starts[t] < DT - cnt0[k]:
                    ub_force[k, t] = 0.0
        mb.add_terms(np.array(ri, int), np.array(ci, int), 1.0)
        mb.add_terms(up_rows, u, -1.0)
        mb.add_terms(np.array(rj, int), np.array(cj, int), 1.0)
        mb.add_terms(dn_rows, u, 1.0)
        lb_u = np.minimum(lb_u, ub_u)   # an outage overrides a forced on-state
        mb.set_bounds(u.ravel(), lb=lb_u.ravel(), ub=np.minimum(ub_u, ub_force).ravel())
    fixed_on = np.zeros((nT, P))
    if fix:
        fon = np.asarray(opts.fixed_on, float)[fix] * (avail[fix] > 0)
        fixed_on[fix] = fon
        mb.set_bounds(g[fix].ravel(), lb=(fon * pmin[fix][:, None]).ravel(),
                      ub=(fon * cap[fix][:, None] * avail[fix]).ravel())
        if opts.startup_costs and state is not None:
            prev = np.concatenate([np.array([state.on[i] for i in fix], float)[:, None], fon[:, :-1]], axis=1)
            starts_fixed = np.maximum(fon - prev, 0.0)
            mb.offset += float(np.sum(starts_fixed * np.array([thermal[i].startup_cost for i in fix])[:, None]))
    idx["fixed_on"] = fixed_on

    # ramps (hourly layers only); outage periods drop the down-ramp limit
    if opts.ramps and state is not None and nT:
        ru = np.array([t.ramp_up for t in thermal])
        rd = np.array([t.ramp_down for t in thermal])
        for i in range(nT):
            if ru[i] >= cap[i] and rd[i] >= cap[i]:
                continue
            su = max(ru[i], pmin[i])
            sd = max(rd[i], pmin[i])
            g0 = float(state.generation[i])
            if modes[i] == COMMITTED:
                k = com.index(i)
                ub_up = np.zeros(P)
                ub_up[0] = g0 + ru[i] * float(state.on[i])
                up = pr(f"ramp_up_{i}", (), ub=ub_up)
                # g_t - g_{t-1} - RU u_{t-1} - SU y_t <= 0
                mb.add_terms(up, g[i], 1.0)
                mb.add_terms(up[1:], g[i, :-1], -1.0)
                mb.add_terms(up[1:], u[k, :-1], -ru[i])
                mb.add_terms(up, y[k], -su)
                ub_dn = np.zeros(P)
                ub_dn[0] = -g0
                ub_dn = np.where(avail[i] > 0, ub_dn, np.inf)
                dn = pr(f"ramp_down_{i}", (), ub=ub_dn)
                # g_{t-1} - g_t - RD u_t - SD z_t <= 0
                mb.add_terms(dn, g[i], -1.0)
                mb.add_terms(dn[1:], g[i, :-1], 1.0)
                mb.add_terms(dn, u[k], -rd[i])
                mb.add_terms(dn, z[k], -sd)
            else:
                on = fixed_on[i] if modes[i] == FIXED else np.ones(P)
                first = float(state.on[i]) if modes[i] == FIXED else 1.0
                on_prev = np.concatenate([[first], on[:-1]])
                hi = ru[i] * on_prev + su * np.maximum(on - on_prev, 0.0)
                lo = -(rd[i] * on + sd * np.maximum(on_prev - on, 0.0))
                lo = np.where(avail[i] > 0, lo, -np.inf)
                lo[0] += g0
                hi[0] = max(hi[0] + g0, pmin[i] * on[0] * avail[i, 0])
                rows = pr(f"ramp_{i}", (), lb=lo, ub=hi)
                mb.add_terms(rows, g[i], 1.0)
                mb.add_terms(rows[1:], g[i, :-1], -1.0)

    # ---------------------------------------------------------------- hydro
    segs = [h.segments() for h in hydro]
    nK = max((len(s) for s in segs), default=0)
    width = np.zeros((nH, nK))
    slope = np.zeros((nH, nK))
    for i, s in enumerate(segs):
        for k, (w, r) in enumerate(s):
            width[i, k], slope[i, k] = w, r
    q = pv("turbine", (nH, nK), lb=0.0, ub=width[:, :, None] * np.ones(P))
    spill_lo = np.array([h.spill_bounds[0] for h in hydro])
    spill_hi = np.array([h.spill_bounds[1] for h in hydro])
    s_var = pv("spill", (nH,), lb=spill_lo[:, None] * np.ones(P), ub=spill_hi[:, None] * np.ones(P))
    idx.update(turbine=q, spill=s_var, slope=slope)
    hb = np.array([bus_ix[h.bus_id] for h in hydro], dtype=int)
    if nH:
        mb.add_terms(bal[hb][:, None, :], q, slope[:, :, None])
    vmin = np.array([hydro[i].min_storage for i in res_list])[:, None] * np.ones(P)
    vmax = np.array([hydro[i].max_storage for i in res_list])[:, None] * np.ones(P)
    v = pv("storage", (nR,), lb=vmin, ub=vmax)
    idx["storage"] = v
    flood = np.maximum(np.asarray(inputs.storage_cap, float).reshape(nR, P), vmin)
    if nR and np.any(flood < vmax):
        # flood-control levels are soft so a falling level never strands the stage
        over = pv("flood_excess", (nR,), lb=0.0, cost=FLOOD_COST)
        rows = pr("flood_level", (nR,), ub=flood)
        mb.add_terms(rows, v, 1.0)
        mb.add_terms(rows, over, -1.0)
        idx["flood_excess"] = over
    upstream = {i: [j for j, hj in enumerate(hydro) if hj.downstream_id == h.id] for i, h in enumerate(hydro)}
    conv = HM3_PER_FLOW_HOUR * dur
    wb_rhs = conv * inputs.inflow[res_list] if nR else np.zeros((0, P))
    wb_rhs = wb_rhs.copy()
    if nR:
        wb_rhs[:, 0] += inputs.storage0
    wb = pr("water_balance", (nR,), lb=wb_rhs, ub=wb_rhs)
    idx["water_balance"] = wb
    ror = [i for i, h in enumerate(hydro) if not h.is_reservoir]
    rb = pr("ror_balance", (len(ror),), lb=inputs.inflow[ror], ub=inputs.inflow[ror])
    idx["ror_balance"] = rb
    for i, h in enumerate(hydro):
        if h.is_reservoir:
            r = res_pos[i]
            row = wb[r]
            mb.add_terms(row, v[r], 1.0)
            mb.add_terms(row[1:], v[r, :-1], -1.0)
            mb.add_terms(row[None, :], q[i], conv[None, :])
            mb.add_terms(row, s_var[i], conv)
            for j in upstream[i]:
                mb.add_terms(row[None, :], q[j], -conv[None, :])
                mb.add_terms(row, s_var[j], -conv)
        else:
            row = rb[ror.index(i)]
            mb.add_terms(row[None, :], q[i], 1.0)
            mb.add_terms(row, s_var[i], 1.0)
            for j in upstream[i]:
                mb.add_terms(row[None, :], q[j], -1.0)
                mb.add_terms(row, s_var[j], -1.0)

    # ---------------------------------------------------------------- network
    circuits = model.network.circuits
    nC = len(circuits)
    ccap = np.array([c.capacity for c in circuits])
    f = pv("flow", (nC,), lb=-ccap[:, None] * np.ones(P), ub=ccap[:, None] * np.ones(P))
    idx["flow"] = f
    for c_i, c in enumerate(circuits):
        mb.add_terms(bal[bus_ix[c.from_bus]], f[c_i], -1.0)
        mb.add_terms(bal[bus_ix[c.to_bus]], f[c_i], 1.0)
    dc = [c_i for c_i, c in enumerate(circuits) if c.susceptance is not None]
    if dc:
        from .system_model import islands
        ref = {sorted(isl)[0] for isl in islands(model)}
        th_lb = np.array([0.0 if b.id in ref else -np.inf for b in model.network.buses])
        th_ub = np.array([0.0 if b.id in ref else np.inf for b in model.network.buses])
        theta = pv("angle", (nB,), lb=th_lb[:, None] * np.ones(P), ub=th_ub[:, None] * np.ones(P))
        rows = pr("dc_flow", (len(dc),), lb=0.0, ub=0.0)
        for r_i, c_i in enumerate(dc):
            c = circuits[c_i]
            mb.add_terms(rows[r_i], f[c_i], 1.0)
            mb.add_terms(rows[r_i], theta[bus_ix[c.from_bus]], -c.susceptance)
            mb.add_terms(rows[r_i], theta[bus_ix[c.to_bus]], c.susceptance)

    # ---------------------------------------------------------------- deficit, demand response, surplus
    widths, dcost = deficit_widths(model)
    nD = widths.size
    fin = np.isfinite(widths)
    d_ub = np.where(fin[None, :, None], np.where(fin, widths, 0.0)[None, :, None] * inputs.load[:, None, :],
                    np.inf)
    d = pv("deficit", (nB, nD), lb=0.0, ub=d_ub, cost=dcost[None, :, None] * dur[None, None, :])
    mb.add_terms(bal[:, None, :], d, 1.0)
    idx["deficit"] = d
    nE = max((len(b.elastic_segments) for b in model.network.buses), default=0)
    if nE:
        e_ub = np.zeros((nB, nE, P))
        e_cost = np.zeros((nB, nE, P))
        for b_i, b in enumerate(model.network.buses):
            for k, (price, qty) in enumerate(b.elastic_segments):
                e_ub[b_i, k] = np.minimum(qty, inputs.load[b_i])
                e_cost[b_i, k] = price * dur
        e = pv("demand_response", (nB, nE), lb=0.0, ub=e_ub, cost=e_cost)
        mb.add_terms(bal[:, None, :], e, 1.0)
        idx["demand_response"] = e
    sp_ = pv("surplus", (nB,), lb=0.0, cost=SURPLUS_COST * dur[None, :] * np.ones((nB, 1)))
    mb.add_terms(bal, sp_, -1.0)
    idx["surplus"] = sp_

    # ---------------------------------------------------------------- markets
    markets = model.network.markets if opts.markets else ()
    nM = len(markets)
    nSb = max((len(mk.buy_segments) for mk in markets), default=0)
    nSs = max((len(mk.sell_segments) for mk in markets), default=0)
    if nM and nSb:
        ub = np.zeros((nM, nSb, P)); c = np.zeros((nM, nSb, P))
        for m_i, mk in enumerate(markets):
            for k, (price, qty) in enumerate(mk.buy_segments):
                ub[m_i, k], c[m_i, k] = qty, price * dur
        buy = pv("market_buy", (nM, nSb), lb=0.0, ub=ub, cost=c)
        for m_i, mk in enumerate(markets):
            mb.add_terms(bal[bus_ix[mk.bus_id]][None, :], buy[m_i], 1.0)
        idx["market_buy"] = buy
    if nM and nSs:
        ub = np.zeros((nM, nSs, P)); c = np.zeros((nM, nSs, P))
        for m_i, mk in enumerate(markets):
            for k, (price, qty) in enumerate(mk.sell_segments):
                ub[m_i, k], c[m_i, k] = qty, -price * dur
        sell = pv("market_sell", (nM, nSs), lb=0.0, ub=ub, cost=c)
        for m_i, mk in enumerate(markets):
            mb.add_terms(bal[bus_ix[mk.bus_id]][None, :], sell[m_i], -1.0)
        idx["market_sell"] = sell

    # ---------------------------------------------------------------- reserves
    if opts.reserves != "none" and model.areas:
        provs = _providers(model)
        idx["providers"] = provs
        nPv, nPr, nA = len(provs), len(RESERVE_PRODUCTS), len(model.areas)
        hmax = np.array([h.max_generation for h in hydro])
        if opts.reserves == "optimize":
            r = pv("reserve", (nPv, nPr), lb=0.0)
            idx["reserve"] = r
            req = np.zeros((nA, nPr))
            for a_i, a in enumerate(model.areas):
                for prod, val in a.reserve_requirement:
                    req[a_i, RESERVE_PRODUCTS.index(prod)] = val
            short = pv("reserve_short", (nA, nPr), lb=0.0,
                       cost=RESERVE_SHORTFALL_COST * dur[None, None, :] * np.ones((nA, nPr, 1)))
            idx["reserve_short"] = short
            rq = pr("reserve_req", (nA, nPr), lb=req[:, :, None] * np.ones(P))
            mb.add_terms(rq, short, 1.0)
            for p_i, (kind, ui, a_i) in enumerate(provs):
                mb.add_terms(rq[a_i], r[p_i], 1.0)
            # regulation limited by ramp capability
            ru_lim = np.array([min(thermal[ui].ramp_up, thermal[ui].capacity) if kind == "thermal"
                               else np.inf for kind, ui, _ in provs])
            reg = RESERVE_PRODUCTS.index("regulation")
            mb.set_bounds(r[:, reg].ravel(), ub=(ru_lim[:, None] * np.ones(P)).ravel())
            for i in range(nT):
                pv_i = [p_i for p_i, (kind, ui, _) in enumerate(provs) if kind == "thermal" and ui == i]
                if modes[i] == COMMITTED:
                    hub = np.zeros(P)
                else:
                    hub = cap[i] * (fixed_on[i] if modes[i] == FIXED else np.ones(P)) * avail[i]
                rows = pr(f"headroom_{i}", (), ub=hub)
                mb.add_terms(rows, g[i], 1.0)
                for p_i in pv_i:
                    mb.add_terms(rows[None, :], r[p_i], 1.0)
                if modes[i] == COMMITTED:
                    mb.add_terms(rows, u[com.index(i)], -cap[i])
            for i in range(nH):
                pv_i = [p_i for p_i, (kind, ui, _) in enumerate(provs) if kind == "hydro" and ui == i]
                if not pv_i:
                    continue
                rows = pr(f"hydro_headroom_{i}", (), ub=hmax[i])
                mb.add_terms(rows[None, :], q[i], slope[i][:, None])
                for p_i in pv_i:
                    mb.add_terms(rows[None, :], r[p_i], 1.0)
        else:
            fr = np.asarray(opts.fixed_reserves, float).sum(axis=1)  # (providers, P)
            idx["fixed_reserve_total"] = fr
            for i in range(nT):
                tot = sum(fr[p_i] for p_i, (kind, ui, _) in enumerate(provs) if kind == "thermal" and ui == i)
                if np.all(np.asarray(tot) == 0):
                    continue
                if modes[i] == COMMITTED:
                    # the allocation is held only while the unit is on
                    rows = pr(f"headroom_{i}", (), ub=0.0)
                    mb.add_terms(rows, g[i], 1.0)
                    mb.add_terms(rows, u[com.index(i)], -np.maximum(cap[i] - tot, pmin[i]) * np.ones(P))
                else:
                    on = fixed_on[i] if modes[i] == FIXED else np.ones(P)
                    hi = np.maximum(cap[i] * on * avail[i] - tot, pmin[i] * on * avail[i])
                    lo_now = (pmin[i] * on * avail[i]) if modes[i] == FIXED else np.zeros(P)
                    mb.set_bounds(g[i], lb=lo_now, ub=hi)
            for i in range(nH):
                tot = sum(fr[p_i] for p_i, (kind, ui, _) in enumerate(provs) if kind == "hydro" and ui == i)
                if np.all(np.asarray(tot) == 0):
                    continue
                rows = pr(f"hydro_headroom_{i}", (), ub=np.maximum(hmax[i] - tot, 0.0))
                mb.add_terms(rows[None, :], q[i], slope[i][:, None])

    # ---------------------------------------------------------------- gas
    day = np.zeros(P, int) if inputs.day is None else np.asarray(inputs.day, int)
    n_days = int(day.max()) + 1 if P else 0
    contract_units = {c.id: [i for i, t in enumerate(thermal) if t.fuel_contract_id == c.id]
                      for c in model.contracts}
    if opts.gas in ("nominate", "bounded") and model.contracts:
        nG = len(model.contracts)
        if opts.gas == "nominate":
            lo = np.array([c.take_or_pay_min for c in model.contracts])[:, None] * np.ones(n_days)
            hi = np.array([c.daily_nomination_max for c in model.contracts])[:, None] * np.ones(n_days)
            price = np.array([c.price for c in model.contracts])[:, None] * np.ones(n_days)
            nom = mb.add_vars("gas_nomination", (nG, n_days), lb=lo, ub=hi, cost=price)
            idx["gas_nomination"] = nom
            rows = mb.add_rows("gas_use", (nG, n_days), ub=0.0)
            mb.add_terms(rows, nom, -1.0)
        else:
            vol = np.asarray(opts.gas_volume, float)
            rows = mb.add_rows("gas_use", (nG, n_days), ub=vol[:, :n_days])
            # fuel beyond the nominated volume is bought at a premium
            price = np.array([c.price for c in model.contracts])
            over = mb.add_vars("gas_overdraft", (nG, n_days), lb=0.0,
                               cost=opts.gas_overdraft_factor * price[:, None] * np.ones(n_days))
            mb.add_terms(rows, over, -1.0)
            idx["gas_overdraft"] = over
        idx["gas_use"] = rows
        for c_i, c in enumerate(model.contracts):
            for i in contract_units[c.id]:
                hr = c.heat_rate(thermal[i].id)
                mb.add_terms(rows[c_i, day], g[i], hr * dur)

    # ---------------------------------------------------------------- end of horizon
    if opts.end_cuts is not None and nR and len(opts.end_cuts[0]):
        alpha, beta = opts.end_cuts
        theta = mb.add_vars("future_cost", (), lb=-np.inf, cost=1.0)
        rows = mb.add_rows("fcf_cut", (len(alpha),), lb=np.asarray(alpha, float))
        mb.add_terms(rows, theta, 1.0)
        mb.add_terms(rows[:, None], v[:, -1][None, :], -np.asarray(beta, float))
        idx.update(future_cost=theta, fcf_cut=rows)
    if opts.end_value is not None and nR:
        mb.add_cost(v[:, -1], -np.asarray(opts.end_value, float))
    if opts.end_target is not None and nR and opts.end_target_penalty > 0:
        dev = mb.add_vars("target_dev", (2, nR), lb=0.0, cost=opts.end_target_penalty)
        rows = mb.add_rows("target", (nR,), lb=opts.end_target, ub=opts.end_target)
        mb.add_terms(rows, v[:, -1], 1.0)
        mb.add_terms(rows, dev[0], -1.0)
        mb.add_terms(rows, dev[1], 1.0)
        idx["target_dev"] = dev

    problem = mb.build()
    return PeriodModel(model, inputs, opts, mb, idx, problem, periodic)


def shift_basis(old: PeriodModel, basis: Basis, new: PeriodModel, shift: int = 1) -> Basis:
    """Map ``basis`` of ``old`` onto ``new`` with per-period groups moved ``shift`` periods earlier.

    Groups missing from either side fall back to nonbasic structurals and basic
    logicals; the simplex repairs the resulting basic count.
    """
    n_old = old.problem.num_vars
    st_old = basis.status
    n_new, m_new = new.problem.num_vars, new.problem.num_rows
    st = np.full(n_new + m_new, AT_LOWER, dtype=np.int8)
    st[n_new:] = BASIC
    st[:n_new] = _default_nonbasic(new.problem)
    for groups_old, groups_new, off_old, off_new in (
        (old.builder.var_groups, new.builder.var_groups, 0, 0),
        (old.builder.row_groups, new.builder.row_groups, n_old, n_new),
    ):
        for name, gi_new in groups_new.items():
            gi_old = groups_old.get(name)
            if gi_old is None or gi_old.shape != gi_new.shape:
                continue
            base = name.split("#")[0]
            if base in new.periodic and gi_new.ndim >= 1 and gi_new.shape[-1] > shift:
                src = np.concatenate([gi_old[..., shift:],
                                      np.repeat(gi_old[..., -1:], shift, axis=-1)], axis=-1)
            else:
                src = gi_old
            st[off_new + gi_new.ravel()] = st_old[off_old + src.ravel()]
    return Basis(st, n_new)


def _default_nonbasic(problem: LinearProgram) -> np.ndarray:
    lo, up = problem.var_lower, problem.var_upper
    st = np.full(lo.size, AT_ZERO, dtype=np.int8)
    st[np.isfinite(up)] = AT_UPPER
    st[np.isfinite(lo)] = AT_LOWER
    return st


def extract(pm: PeriodModel, x: np.ndarray, duals: Optional[np.ndarray] = None) -> dict[str, np.ndarray]:
    """Decision arrays (period axis last) from a primal/dual solution of ``pm``."""
    idx, model, P = pm.idx, pm.model, pm.inputs.P
    nT = len(model.thermal)
    out: dict[str, np.ndarray] = {}
    g = x[idx["thermal_gen"]]
    out["thermal_gen"] = g
    on = idx["fixed_on"].copy()
    modes = list(pm.options.commitment) or [CONTINUOUS] * nT
    for i in range(nT):
        if modes[i] == CONTINUOUS:
            on[i] = (g[i] > 1e-9).astype(float)
    com = idx["committed_units"]
    if com.size:
        on[com] = np.round(x[idx["commit"]])
    out["commit"] = on
    q = x[idx["turbine"]]
    out["turbined"] = q.sum(axis=1)
    out["hydro_gen"] = np.einsum("hkp,hk->hp", q, idx["slope"])
    out["spill"] = x[idx["spill"]]
    out["storage"] = x[idx["storage"]]
    out["flow"] = x[idx["flow"]]
    out["deficit"] = x[idx["deficit"]].sum(axis=1)
    out["surplus"] = x[idx["surplus"]]
    out["demand_response"] = (x[idx["demand_response"]].sum(axis=1) if "demand_response" in idx
                              else np.zeros_like(out["surplus"]))
    nM = len(model.network.markets) if pm.options.markets else 0
    out["market_buy"] = x[idx["market_buy"]].sum(axis=1) if "market_buy" in idx else np.zeros((nM, P))
    out["market_sell"] = x[idx["market_sell"]].sum(axis=1) if "market_sell" in idx else np.zeros((nM, P))
    if "reserve" in idx:
        out["reserve"] = x[idx["reserve"]]
    if "gas_nomination" in idx:
        out["gas_nomination"] = x[idx["gas_nomination"]]
    if "flood_excess" in idx:
        out["flood_excess"] = x[idx["flood_excess"]]
    out["gas_use"] = gas_use(model, g, pm.inputs)
    if duals is not None:
        out["water_value"] = np.maximum(-duals[idx["water_balance"]], 0.0)
        if "fcf_cut" in idx:
            out["cut_duals"] = duals[idx["fcf_cut"]]
    return out


def gas_use(model: SystemModel, gen: np.ndarray, inputs: PeriodInputs) -> np.ndarray:
    """MMBtu burned per (contract, day) for a (thermal, P) generation array."""
    day = np.zeros(inputs.P, int) if inputs.day is None else np.asarray(inputs.day, int)
    n_days = int(day.max()) + 1 if inputs.P else 0
    out = np.zeros((len(model.contracts), n_days))
    for c_i, c in enumerate(model.contracts):
        for i, t in enumerate(model.thermal):
            if t.fuel_contract_id == c.id:
                np.add.at(out[c_i], day, c.heat_rate(t.id) * gen[i] * inputs.durations)
    return out


def system_series(model: SystemModel, sset, scenario: int, hours: np.ndarray
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(load (buses, H), vre (units, H), inflow (hydro, H)) for one scenario.

    Units sharing a site split the site series in proportion to capacity.
    Hours index the scenario set modulo its length.
    """
    hours = np.asarray(hours) % sset.horizon_hours
    load = np.zeros((len(model.network.buses), hours.size))
    for b_i, b in enumerate(model.network.buses):
        if b.load_site is not None:
            load[b_i] = sset.series("load", b.load_site)[scenario, hours]
    site_cap: dict = {}
    for u in model.vre_units:
        site_cap[(u.variable, u.site)] = site_cap.get((u.variable, u.site), 0.0) + u.capacity
    vre = np.zeros((len(model.vre_units), hours.size))
    for k, u in enumerate(model.vre_units):
        share = u.capacity / site_cap[(u.variable, u.site)] if site_cap[(u.variable, u.site)] > 0 else 0.0
        vre[k] = share * sset.series(u.variable, u.site)[scenario, hours]
    inflow = np.zeros((len(model.hydro), hours.size))
    for i, h in enumerate(model.hydro):
        inflow[i] = sset.series("inflow", h.inflow_site)[scenario, hours]
    return load, vre, inflow


def adapt_basis(basis: Optional[Basis], problem: LinearProgram) -> Optional[Basis]:
    """Reuse ``basis`` for a problem that only appended variables and rows."""
    if basis is None:
        return None
    n_old, m_old = basis.num_vars, basis.num_rows
    n, m = problem.num_vars, problem.num_rows
    if n < n_old or m < m_old:
        return None
    st = np.empty(n + m, dtype=np.int8)
    st[:n_old] = basis.status[:n_old]
    st[n_old:n] = _default_nonbasic(problem)[n_old:n]
    st[n:n + m_old] = basis.status[n_old:]
    st[n + m_old:] = BASIC
    return Basis(st, n)
