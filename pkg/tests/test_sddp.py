import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from cascadesim.sddp import (
    BLOCKS_PER_WEEK, Cut, FutureCostFunction, SddpConfig, block_average, block_durations,
    build_stage, evaluate_fcf, run_sddp, stage_solution,
)
from cascadesim.solver import read_mps, solve_lp, write_mps

from toys import COSTS, cost_to_go, extensive_form, toy_hydrothermal, toy_stage_data

TOY_INFLOWS = np.array([[20.0, 100.0], [10.0, 80.0]])


def test_block_layout():
    d = block_durations()
    assert d.size == BLOCKS_PER_WEEK == 21
    assert d.sum() == 168
    hourly = np.arange(168.0)
    avg = block_average(hourly)
    assert avg[0] == pytest.approx(3.0)          # hours 0..6
    assert avg[1] == pytest.approx(12.5)         # hours 7..18


def test_stage_structure_one_state_row_per_reservoir():
    m = toy_hydrothermal()
    data = toy_stage_data(TOY_INFLOWS)
    fcf = FutureCostFunction(["H"], [[], []])
    pm = build_stage(m, data, 0, fcf, 0, np.array([50.0]))
    assert pm.idx["water_balance"].shape == (1, 21)
    assert "fcf_cut" not in pm.idx
    assert not pm.problem.is_mip
    fcf.add(1, Cut(100.0, np.array([-2.0])))
    pm = build_stage(m, data, 0, fcf, 0, np.array([50.0]))
    assert pm.idx["fcf_cut"].shape == (1,)


def test_stage_lp_matches_external_solver(tmp_path):
    m = toy_hydrothermal()
    data = toy_stage_data(TOY_INFLOWS)
    fcf = FutureCostFunction(["H"], [[], [Cut(5e5, np.array([-3000.0])), Cut(2e5, np.array([-100.0]))]])
    pm = build_stage(m, data, 0, fcf, 1, np.array([50.0]))
    lp = read_mps(write_mps(pm.problem, tmp_path / "stage.mps"))
    ours = solve_lp(pm.problem)
    A = lp.matrix.toarray()
    fin_lo, fin_hi = np.isfinite(lp.row_lower), np.isfinite(lp.row_upper)
    eq = fin_lo & fin_hi & (lp.row_lower == lp.row_upper)
    A_ub = np.vstack([A[fin_hi & ~eq], -A[fin_lo & ~eq]])
    b_ub = np.concatenate([lp.row_upper[fin_hi & ~eq], -lp.row_lower[fin_lo & ~eq]])
    ref = linprog(lp.costs, A_ub=A_ub, b_ub=b_ub, A_eq=A[eq], b_eq=lp.row_lower[eq],
                  bounds=list(zip(lp.var_lower, np.where(np.isinf(lp.var_upper), None, lp.var_upper))),
                  method="highs")
    assert ours.objective_value == pytest.approx(ref.fun + lp.offset, rel=1e-6)


def test_evaluate_fcf_conventions():
    fcf = FutureCostFunction(["r"], [[]])
    assert evaluate_fcf(fcf, 0, [10.0]) == 0.0
    fcf.add(0, Cut(100.0, np.array([-2.0])))
    assert evaluate_fcf(fcf, 0, [10.0]) == 80.0


def test_evaluate_fcf_is_max_over_cuts():
    rng = np.random.default_rng(3)
    alpha = rng.normal(100, 20, 5)
    beta = rng.normal(0, 3, (5, 2))
    fcf = FutureCostFunction(["a", "b"], [[Cut(a, b) for a, b in zip(alpha, beta)]])
    for x in rng.uniform(0, 50, (20, 2)):
        expected = max(alpha[k] + beta[k, 0] * x[0] + beta[k, 1] * x[1] for k in range(5))
        assert evaluate_fcf(fcf, 0, x) == pytest.approx(expected, abs=1e-9)


def test_fcf_text_roundtrip(tmp_path):
    fcf = FutureCostFunction(["a", "b"], [[Cut(1.5, np.array([0.1, -2.0]), 3)], [], [Cut(-7.0, np.array([1e-17, 3.0]), 9)]], 4)
    back = FutureCostFunction.load(fcf.save(tmp_path / "f.txt"))
    assert back.reservoir_ids == ["a", "b"] and back.start_week == 4 and back.weeks == 3
    for t in range(3):
        a0, b0 = fcf.arrays(t)
        a1, b1 = back.arrays(t)
        assert np.array_equal(a0, a1) and np.array_equal(b0, b1)
    assert back.cuts[2][0].iteration == 9


def test_cut_gradient_length_checked():
    fcf = FutureCostFunction(["a"], [[]])
    with pytest.raises(ValueError):
        fcf.add(0, Cut(0.0, np.array([1.0, 2.0])))


def test_deterministic_two_stage_matches_single_lp():
    m = toy_hydrothermal()
    inflows = np.array([[30.0], [60.0]])
    fcf, log = run_sddp(m, toy_stage_data(inflows), 2, config=SddpConfig(max_iterations=20, stop_on_confidence=False))
    ref = extensive_form(50.0, inflows)
    assert log.lower_bound[-1] == pytest.approx(ref, rel=1e-6)


def test_two_stage_two_scenario_matches_extensive_form():
    m = toy_hydrothermal()
    fcf, log = run_sddp(m, toy_stage_data(TOY_INFLOWS), 2,
                        config=SddpConfig(max_iterations=30, stop_on_confidence=False))
    ref = extensive_form(50.0, TOY_INFLOWS)
    assert abs(log.lower_bound[-1] - ref) <= 1e-4 * abs(ref)
    assert np.all(np.diff(log.lower_bound) >= -1e-6)
    assert len(log.lower_bound) <= 30


def test_cuts_never_exceed_true_cost_to_go():
    m = toy_hydrothermal()
    fcf, _ = run_sddp(m, toy_stage_data(TOY_INFLOWS), 2, config=SddpConfig(max_iterations=10))
    for v in np.random.default_rng(0).uniform(0, 100, 20):
        assert evaluate_fcf(fcf, 1, [v]) <= cost_to_go(v, TOY_INFLOWS, 1) + 1e-6
        assert evaluate_fcf(fcf, 0, [v]) <= cost_to_go(v, TOY_INFLOWS, 0) + 1e-6


def test_cut_gradient_equals_stage_water_dual():
    m = toy_hydrothermal()
    inflows = np.array([[20.0], [90.0]])
    data = toy_stage_data(inflows)
    fcf, _ = run_sddp(m, data, 2, config=SddpConfig(max_iterations=1))
    empty = FutureCostFunction(["H"], [[], []])
    v_hat = stage_solution(m, data, 0, empty, 0, np.array([50.0]))["storage"][:, -1]
    dual = stage_solution(m, data, 1, empty, 0, v_hat)["state_dual"]
    cut = fcf.cuts[1][0]
    assert cut.gradient == pytest.approx(dual, abs=1e-9)
    assert evaluate_fcf(fcf, 1, v_hat) == pytest.approx(cost_to_go(v_hat[0], inflows, 1), rel=1e-9)


def test_zero_inflow_thermal_only_cost():
    m = toy_hydrothermal(v0=0.0)
    data = toy_stage_data(np.zeros((2, 1)), load=150.0)
    _, log = run_sddp(m, data, 2, config=SddpConfig(max_iterations=5))
    per_hour = 100 * COSTS[0] + 50 * COSTS[1]
    assert log.lower_bound[-1] == pytest.approx(2 * 168 * per_hour, rel=1e-9)


@settings(max_examples=8, deadline=None)
@given(st.lists(st.floats(0, 150), min_size=2, max_size=2), st.lists(st.floats(0, 150), min_size=2, max_size=2),
       st.floats(0, 100))
def test_lower_bound_monotone_and_valid(w0, w1, v0):
    inflows = np.array([w0, w1])
    m = toy_hydrothermal(v0=v0)
    _, log = run_sddp(m, toy_stage_data(inflows), 2, config=SddpConfig(max_iterations=6, stop_on_confidence=False))
    assert np.all(np.diff(log.lower_bound) >= -1e-6)
    assert log.lower_bound[-1] <= extensive_form(v0, inflows) * (1 + 1e-9) + 1e-6
