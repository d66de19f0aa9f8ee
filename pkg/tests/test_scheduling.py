import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cascadesim.formulation import (
    HM3_PER_FLOW_HOUR, PeriodInputs, PeriodOptions, UnitState, build_period_model, COMMITTED, CONTINUOUS,
)
from cascadesim.scheduling import (
    DAY_AHEAD, HOUR_AHEAD, WEEK_AHEAD, Forecast, SchedulingConfig, SystemState, build_day_ahead,
    build_hour_ahead, build_week_ahead, extract_and_fix, solve_stage,
)
from cascadesim.sddp import block_durations
from cascadesim.solver import solve_lp
from cascadesim.system_model import (
    BalancingArea, Bus, Circuit, FuelContract, HydroPlant, MarketCurve, Network, SystemModel, ThermalPlant,
)

from oracles import highs_solve, lp_by_vertex_enumeration, merit_order


def one_bus(units, markets=(), reserve=(), contracts=()):
    return SystemModel(
        network=Network((Bus("b", load_site="b"),), markets=tuple(markets)),
        thermal=tuple(units), contracts=tuple(contracts),
        areas=(BalancingArea("a", ("b",), tuple(reserve)),),
        deficit_cost=((1.0, 10_000.0),),
    )


def forecast(load, start=0, n_hydro=0, inflow=None):
    load = np.atleast_2d(np.asarray(load, float))
    H = load.shape[1]
    inflow = np.zeros((n_hydro, H)) if inflow is None else np.asarray(inflow, float)
    return Forecast(start, load, np.zeros((0, H)), inflow)


def fixed_u(pm, pattern):
    lo, hi = pm.problem.var_lower.copy(), pm.problem.var_upper.copy()
    cols = pm.idx["commit"].ravel()
    lo[cols] = hi[cols] = np.asarray(pattern, float).ravel()
    return lo, hi


# ---------------------------------------------------------------- week ahead
def test_week_ahead_has_21_periods_and_no_slow_means_lp():
    m = one_bus([ThermalPlant("f", "b", 100.0, 10.0, 30.0, commitment_class="fast")])
    pm = build_week_ahead(m, SystemState.initial(m), forecast(np.full(168, 50.0)), None, 0)
    assert pm.inputs.P == 21 and pm.inputs.durations.sum() == 168
    assert pm.problem.integrality is None or not pm.problem.integrality.any()


def _spike_system():
    slow = ThermalPlant("s", "b", 100.0, 40.0, 90.0, min_up_time=48, min_down_time=130,
                        commitment_class="slow", startup_cost=500.0, initial_status=-200)
    peak = ThermalPlant("p", "b", 100.0, 0.0, 80.0)
    return one_bus([slow, peak])


def _spike_load():
    load = np.full(168, 50.0)
    for d in range(7):
        load[24 * d:24 * d + 7] = 20.0 + 4.0 * d     # nights differ so the optimum is unique
    load[72 + 7:72 + 19] = 150.0                     # one 12-hour block
    return load


def test_slow_unit_pattern_matches_enumeration():
    m = _spike_system()
    pm = build_week_ahead(m, SystemState.initial(m), forecast(_spike_load()), None, 0)
    assert int(pm.problem.integrality.sum()) == 21
    res = solve_stage(pm, WEEK_AHEAD)

    edges = np.concatenate([[0], np.cumsum(block_durations())]).astype(int)
    # Two on-runs need >= 48 h on plus >= 130 h off in between, which exceeds the week,
    # so every feasible pattern is all-off or one contiguous run.
    assert 48 + 130 > 168
    patterns = [np.zeros(21)]
    for a in range(21):
        for b in range(a + 1, 22):
            if b == 21 or edges[b] - edges[a] >= 48:
                p = np.zeros(21)
                p[a:b] = 1.0
                patterns.append(p)
    scored = []
    for p in patterns:
        obj, _ = highs_solve(pm.problem, *fixed_u(pm, p), integer=False)
        assert obj is not None
        scored.append((obj, tuple(p)))
    scored.sort()
    best, runner_up = scored[0], scored[1]
    assert runner_up[0] > best[0] + 1.0
    assert res.objective == pytest.approx(best[0], rel=1e-7)
    assert tuple(res.decisions["commit"][0]) == best[1]
    assert res.decisions["commit"][0][10] == 1.0    # the spike block


def _naive_bigm_bound(cost_g, cost_p, cap, pmin, startup, UT, DT, load, c_def=10_000.0, c_sur=1000.0):
    """LP relaxation of the aggregated big-M commitment model built from scratch."""
    from scipy.optimize import linprog
    P = len(load)
    # columns: g, gp, deficit, surplus, u, y, z
    n = 7 * P
    G, GP, D, S, U, Y, Z = (np.arange(P) + k * P for k in range(7))
    c = np.zeros(n)
    c[G], c[GP], c[D], c[S], c[Y] = cost_g, cost_p, c_def, c_sur, startup
    A_eq, b_eq, A_ub, b_ub = [], [], [], []
    for t in range(P):
        row = np.zeros(n)
        row[[G[t], GP[t], D[t]]] = 1.0
        row[S[t]] = -1.0
        A_eq.append(row); b_eq.append(load[t])
        row = np.zeros(n)
        row[U[t]] = 1.0
        if t:
            row[U[t - 1]] = -1.0
        row[Y[t]], row[Z[t]] = -1.0, 1.0
        A_eq.append(row); b_eq.append(0.0)
        row = np.zeros(n); row[G[t]] = 1.0; row[U[t]] = -cap
        A_ub.append(row); b_ub.append(0.0)
        row = np.zeros(n); row[G[t]] = -1.0; row[U[t]] = pmin
        A_ub.append(row); b_ub.append(0.0)
        # len * y_t <= sum of u over the following window
        w = range(t, min(t + UT, P))
        row = np.zeros(n); row[Y[t]] = len(w); row[U[list(w)]] -= 1.0
        A_ub.append(row); b_ub.append(0.0)
        w = range(t, min(t + DT, P))
        row = np.zeros(n); row[Z[t]] = len(w); row[U[list(w)]] += 1.0
        A_ub.append(row); b_ub.append(float(len(w)))
    bounds = [(0, None)] * (4 * P) + [(0, 1)] * (3 * P)
    bounds[P:2 * P] = [(0, 200.0)] * P
    res = linprog(c, A_ub=np.array(A_ub), b_ub=b_ub, A_eq=np.array(A_eq), b_eq=b_eq, bounds=bounds,
                  method="highs")
    assert res.status == 0
    return res.fun


def test_strong_relaxation_at_least_naive_bigm():
    P = 12
    load = np.array([30, 80, 20, 90, 95, 40, 10, 70, 85, 20, 60, 90], float)
    unit = ThermalPlant("u", "b", 100.0, 50.0, 10.0, min_up_time=5, min_down_time=5,
                        startup_cost=2000.0, initial_status=-100)
    peak = ThermalPlant("p", "b", 200.0, 0.0, 100.0)
    m = one_bus([unit, peak])
    inputs = PeriodInputs(np.ones(P), load[None, :], np.zeros((0, P)), np.zeros((0, P)), np.zeros(0),
                          np.zeros((0, P)))
    opts = PeriodOptions(commitment=[COMMITTED, CONTINUOUS], integer_periods=np.ones((2, P), bool),
                         unit_state=UnitState(np.array([False, False]), np.array([100.0, 100.0]), np.zeros(2)),
                         markets=False)
    pm = build_period_model(m, inputs, opts, name="tight_h0")
    assert int(pm.problem.integrality.sum()) <= 12
    strong = solve_lp(pm.problem).objective_value
    naive = _naive_bigm_bound(10.0, 100.0, 100.0, 50.0, 2000.0, 5, 5, load)
    assert strong >= naive - 1e-6
    mip, _ = highs_solve(pm.problem)
    assert strong <= mip + 1e-6


# ---------------------------------------------------------------- day ahead
def test_slow_unit_fixed_off_stays_off():
    slow = ThermalPlant("s", "b", 300.0, 50.0, 5.0, min_up_time=48, min_down_time=48,
                        commitment_class="slow", initial_status=-100)
    peak = ThermalPlant("p", "b", 100.0, 0.0, 80.0)
    m = one_bus([slow, peak])
    st0 = SystemState.initial(m)
    st0.plans[WEEK_AHEAD] = (0, np.zeros((2, 168)))
    res = solve_stage(build_day_ahead(m, st0, forecast(np.full(24, 250.0))), DAY_AHEAD)
    assert np.all(res.decisions["thermal_gen"][0] == 0.0)
    assert np.all(res.decisions["commit"][0] == 0.0)
    assert np.all(res.decisions["deficit"][0] > 0)


def test_reserve_headroom_matches_enumeration():
    cheap = ThermalPlant("a", "b", 100.0, 0.0, 10.0)
    mid = ThermalPlant("m", "b", 100.0, 30.0, 50.0, commitment_class="intermediate", initial_status=-5)
    m = one_bus([cheap, mid], reserve=[("contingency", 10.0)])
    res = solve_stage(build_day_ahead(m, SystemState.initial(m), forecast(np.full(24, 100.0))), DAY_AHEAD)
    # one hour by hand for each on/off state of the second plant:
    # gA, gM, rA, rM, shortfall, deficit
    A = np.array([[1, 1, 0, 0, 0, 1], [1, 0, 1, 0, 0, 0], [0, 1, 0, 1, 0, 0], [0, 0, 1, 1, 1, 0]], float)
    c = np.array([10, 50, 0, 0, 2000.0, 10_000.0])
    hourly = {}
    for u in (0, 1):
        hourly[u] = lp_by_vertex_enumeration(
            c, A, np.array([100, -np.inf, -np.inf, 10]), np.array([100, 100, 100 * u, np.inf]),
            np.array([0, 30 * u, 0, 0, 0, 0]), np.array([100, 100 * u, 100, 100 * u, 10, 100.0]))
    best = min(hourly.values())
    assert res.objective == pytest.approx(24 * best, rel=1e-9)
    u_best = min(hourly, key=hourly.get)
    assert np.all(res.decisions["commit"][1] == u_best)
    g, r = res.decisions["thermal_gen"], res.decisions["reserve"]
    np.testing.assert_array_less(g + r.sum(axis=1), 100.0 + 1e-7)
    assert np.all(r[:, 1].sum(axis=0) >= 10.0 - 1e-7)


def test_zero_demand_is_all_off_and_free():
    units = [ThermalPlant("i", "b", 100.0, 30.0, 20.0, min_up_time=4, min_down_time=4,
                          commitment_class="intermediate", startup_cost=100.0, initial_status=-10),
             ThermalPlant("f", "b", 50.0, 10.0, 40.0, commitment_class="fast", initial_status=-10)]
    m = one_bus(units)
    res = solve_stage(build_day_ahead(m, SystemState.initial(m), forecast(np.zeros(24))), DAY_AHEAD)
    assert res.objective == pytest.approx(0.0, abs=1e-9)
    assert not res.decisions["commit"].any()


# ---------------------------------------------------------------- hour ahead
def test_no_fast_units_gives_lp():
    units = [ThermalPlant("i", "b", 100.0, 30.0, 20.0, min_up_time=4, commitment_class="intermediate",
                          initial_status=5, initial_generation=50.0),
             ThermalPlant("c", "b", 100.0, 0.0, 40.0)]
    m = one_bus(units)
    pm = build_hour_ahead(m, SystemState.initial(m), forecast(np.full(24, 60.0)))
    assert pm.problem.integrality is None or not pm.problem.integrality.any()


def test_cheap_market_segments_fill_in_price_order():
    thermal = ThermalPlant("t", "b", 200.0, 0.0, 50.0)
    segs = ((20.0, 30.0), (40.0, 50.0), (100.0, 1000.0))
    m = one_bus([thermal], markets=[MarketCurve("b", buy_segments=segs)])
    res = solve_stage(build_hour_ahead(m, SystemState.initial(m), forecast(np.full(24, 100.0))), HOUR_AHEAD)
    expect = merit_order(100.0, [(50.0, 200.0)] + list(segs))
    assert res.decisions["thermal_gen"][0, 0] == pytest.approx(expect[0], abs=1e-7)
    assert res.decisions["market_buy"][0, 0] == pytest.approx(expect[1:].sum(), abs=1e-7)
    buy = res.pm.idx["market_buy"]
    from cascadesim.solver import solve as raw_solve
    x = raw_solve(res.pm.problem).primal_values
    np.testing.assert_allclose(x[buy[0, :, 0]], expect[1:], atol=1e-7)


def _fast_fleet():
    units = [ThermalPlant(f"f{k}", "b", 50.0, 20.0, c, min_up_time=3, min_down_time=3, startup_cost=s,
                          commitment_class="fast", initial_status=-10)
             for k, (c, s) in enumerate([(20.0, 300.0), (30.0, 100.0), (40.0, 50.0)])]
    units.append(ThermalPlant("backup", "b", 200.0, 0.0, 500.0))
    return one_bus(units)


def test_integrality_beyond_hour_six_keeps_hour_one():
    m = _fast_fleet()
    load = 70.0 + 45.0 * np.sin(np.arange(24) / 24 * 2 * np.pi)
    out = {}
    for h_int in (6, 24):
        cfg = SchedulingConfig(hour_ahead_integer_hours=h_int)
        pm = build_hour_ahead(m, SystemState.initial(m), forecast(load), cfg=cfg)
        assert int(pm.problem.integrality.sum()) == 3 * h_int
        out[h_int] = solve_stage(pm, HOUR_AHEAD, cfg)
    np.testing.assert_array_equal(out[6].decisions["commit"][:, 0], out[24].decisions["commit"][:, 0])
    np.testing.assert_allclose(out[6].decisions["thermal_gen"][:, 0], out[24].decisions["thermal_gen"][:, 0],
                               atol=1e-6)


# ---------------------------------------------------------------- hand-off
def _chain_system():
    contract = FuelContract("c", daily_nomination_max=5000.0, take_or_pay_min=0.0, price=3.0,
                            heat_rates=(("gas", 8.0),))
    units = [ThermalPlant("slow", "b", 150.0, 60.0, 15.0, min_up_time=48, min_down_time=48,
                          commitment_class="slow", initial_status=100, initial_generation=100.0),
             ThermalPlant("mid", "b", 80.0, 20.0, 25.0, min_up_time=4, min_down_time=4,
                          commitment_class="intermediate", initial_status=-10),
             ThermalPlant("gas", "b", 60.0, 10.0, 5.0, commitment_class="fast", fuel_contract_id="c",
                          initial_status=-10),
             ThermalPlant("backup", "b", 300.0, 0.0, 400.0)]
    return one_bus(units, reserve=[("contingency", 15.0)], contracts=[contract])


def test_layer_hand_off_chain():
    m = _chain_system()
    load = 150.0 + 60.0 * np.sin(np.arange(168) / 24 * 2 * np.pi)
    fc = forecast(load)
    st0 = SystemState.initial(m)
    week = solve_stage(build_week_ahead(m, st0, fc, None, 0), WEEK_AHEAD)
    st1 = extract_and_fix(st0, week, m)
    assert set(st1.plans) == {WEEK_AHEAD} and st1.reserves is None and st1.nominations is None
    assert st1.plans[WEEK_AHEAD][1].shape == (4, 168)

    day_pm = build_day_ahead(m, st1, fc)
    np.testing.assert_array_equal(day_pm.idx["fixed_on"][0], st1.plans[WEEK_AHEAD][1][0, :24])
    day = solve_stage(day_pm, DAY_AHEAD)
    st2 = extract_and_fix(st1, day, m)
    nom = day.decisions["gas_nomination"][:, 0]
    np.testing.assert_array_equal(st2.gas_remaining, nom)

    hour_pm = build_hour_ahead(m, st2, fc)
    lp = hour_pm.problem
    gas_rows = hour_pm.idx["gas_use"]
    assert gas_rows.shape == (1, 1) and lp.row_upper[gas_rows[0, 0]] == nom[0]
    later = build_hour_ahead(m, st2, fc, current_hour=12)
    rows = later.idx["gas_use"]
    assert later.problem.row_upper[rows[0, 0]] == nom[0]
    assert later.problem.row_upper[rows[0, 1]] == 5000.0
    # intermediate commitments and reserves from the day become generation bounds
    g = hour_pm.idx["thermal_gen"][1]
    on = day.decisions["commit"][1]
    held = day.decisions["reserve"][1].sum(axis=0)
    np.testing.assert_array_equal(lp.var_lower[g], on * 20.0)
    np.testing.assert_allclose(lp.var_upper[g], np.maximum(80.0 * on - held, 20.0 * on), atol=0)
    hour = solve_stage(hour_pm, HOUR_AHEAD)
    st3 = extract_and_fix(st2, hour, m)
    assert st3.setpoints["hour"] == 0
    np.testing.assert_array_equal(st3.setpoints["commit"][:3, 0], hour.decisions["commit"][:3, 0])


# ---------------------------------------------------------------- invariants
def _hydro_system():
    seg = ((0.0, 0.0), (100.0, 90.0))
    buses = (Bus("n", load_site="n"), Bus("s", load_site="s"))
    hydro = (HydroPlant("up", "reservoir", "n", 50.0, 5.0, 100.0, seg, "up", 20.0, downstream_id="dn"),
             HydroPlant("dn", "reservoir", "s", 30.0, 2.0, 120.0, seg, "dn", 10.0))
    thermal = (ThermalPlant("t", "s", 200.0, 0.0, 60.0),)
    return SystemModel(Network(buses, (Circuit("c", "n", "s", 80.0),)), hydro=hydro, thermal=thermal,
                       areas=(BalancingArea("a", ("n", "s")),), deficit_cost=((1.0, 10_000.0),))


@settings(max_examples=8, deadline=None)
@given(scale=st.floats(0.2, 2.0), inflow=st.floats(0.0, 150.0), seed=st.integers(0, 1000))
def test_balance_and_water_invariants(scale, inflow, seed):
    m = _hydro_system()
    rng = np.random.default_rng(seed)
    load = scale * rng.uniform(20, 120, size=(2, 24))
    infl = inflow * rng.uniform(0.5, 1.5, size=(2, 24))
    st0 = SystemState.initial(m)
    res = solve_stage(build_day_ahead(m, st0, Forecast(0, load, np.zeros((0, 24)), infl)), DAY_AHEAD)
    d = res.decisions
    net = np.zeros((2, 24))
    net[1] += d["thermal_gen"][0]
    net[0] += d["hydro_gen"][0]
    net[1] += d["hydro_gen"][1]
    net[0] -= d["flow"][0]
    net[1] += d["flow"][0]
    net += d["deficit"] - d["surplus"] + d["demand_response"]
    np.testing.assert_allclose(net, load, atol=1e-6)
    v = np.concatenate([st0.storage[:, None], d["storage"]], axis=1)
    q, s = d["turbined"], d["spill"]
    up_rel = q[0] + s[0]
    np.testing.assert_allclose(v[0, 1:], v[0, :-1] + HM3_PER_FLOW_HOUR * (infl[0] - up_rel), atol=1e-9)
    np.testing.assert_allclose(v[1, 1:], v[1, :-1] + HM3_PER_FLOW_HOUR * (infl[1] + up_rel - q[1] - s[1]),
                               atol=1e-9)


def test_min_up_down_respected_with_inherited_counters():
    m = _fast_fleet()
    st0 = SystemState.initial(m)
    st0.on[:3] = [True, False, True]
    st0.hours_in_state[:3] = [1, 1, 5]
    st0.generation[:3] = [30.0, 0.0, 30.0]
    load = np.where(np.arange(24) % 6 < 3, 10.0, 130.0)
    cfg = SchedulingConfig(hour_ahead_integer_hours=24)
    res = solve_stage(build_hour_ahead(m, st0, forecast(load), cfg=cfg), HOUR_AHEAD, cfg)
    u = res.decisions["commit"][:3]
    for k in range(3):
        seq = [(bool(st0.on[k]), int(st0.hours_in_state[k]))]
        for on, grp in itertools.groupby(u[k] > 0.5):
            n = len(list(grp))
            if on == seq[-1][0]:
                seq[-1] = (on, seq[-1][1] + n)
            else:
                seq.append((on, n))
        for on, n in seq[:-1]:               # the last run may continue past the horizon
            assert n >= 3, (k, seq)
