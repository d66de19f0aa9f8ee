import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cascadesim.scenario import (
    IncompleteYear, InsufficientHistory, ParModel, ScenarioSet, SingularFit, fit_par, from_history, generate,
    read_binary, read_csv, week_of_hour, weekly_aggregate, write_binary, write_csv,
)


def ar1(n: int, phi: float, sigma: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    z = np.zeros(n)
    for t in range(1, n):
        z[t] = phi * z[t - 1] + sigma * rng.standard_normal()
    return z


def simple_model(names, phi=0.5, sigma=1.0, mean=10.0, std=2.0, log_space=False, corr=None, P=2, period=24,
                 initial=None) -> ParModel:
    n = len(names)
    return ParModel(list(names), np.full((P, n), mean), np.full((P, n), std), np.full((P, n, 1), phi),
                    np.full((P, n), sigma), np.eye(n) if corr is None else np.asarray(corr, float),
                    np.full(n, log_space), np.full(n, np.inf), None, period, P * period,
                    None if initial is None else np.asarray(initial, float))


# ------------------------------------------------------------------------ fit
def test_fit_recovers_ar1_coefficient():
    x = 50.0 + 3.0 * ar1(10_000, 0.7, 1.0, seed=4)
    m = fit_par({("load", "a"): x}, order=1, n_periods=1, period_hours=100, log_space=())
    assert m.phi[0, 0, 0] == pytest.approx(0.7, abs=0.1)


def test_fit_identical_sites_fully_correlated():
    x = 50.0 + ar1(2000, 0.5, 1.0, seed=1)
    m = fit_par({("load", "a"): x, ("load", "b"): x.copy()}, n_periods=2, period_hours=100, log_space=())
    assert m.correlation[0, 1] == pytest.approx(1.0, abs=1e-9)


def test_fit_rejects_constant_and_short_history():
    with pytest.raises(SingularFit):
        fit_par({("load", "a"): np.full(400, 5.0)}, n_periods=2, period_hours=100, log_space=())
    with pytest.raises(InsufficientHistory):
        fit_par({("load", "a"): np.arange(300.0)}, n_periods=2, period_hours=100, log_space=())


# ------------------------------------------------------------------------ generate
def test_noiseless_generation_follows_recursion():
    m = simple_model([("inflow", "r"), ("load", "b")], phi=0.8, sigma=0.0, initial=[[1.5], [-2.0]])
    ss = generate(m, 4, 60, seed=3)
    z = np.array([1.5, -2.0])
    for t in range(60):
        z = 0.8 * z
        expect = 10.0 + 2.0 * z
        for s in range(4):
            assert ss.series("inflow", "r")[s, t] == pytest.approx(expect[0], rel=1e-15)
            assert ss.series("load", "b")[s, t] == pytest.approx(expect[1], rel=1e-15)


def test_identity_correlation_gives_uncorrelated_residuals():
    m = simple_model([("load", "a"), ("load", "b")], phi=0.0, sigma=1.0)
    ss = generate(m, 500, 24, seed=9)
    a, b = ss.data["load"][0].ravel(), ss.data["load"][1].ravel()
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.1


def test_target_correlation_reproduced():
    m = simple_model([("load", "a"), ("load", "b")], phi=0.0, sigma=1.0, corr=[[1, 0.6], [0.6, 1]])
    ss = generate(m, 500, 24, seed=9)
    assert np.corrcoef(ss.data["load"][0].ravel(), ss.data["load"][1].ravel())[0, 1] == pytest.approx(0.6, abs=0.05)


def test_same_seed_bit_identical_and_scenarios_independent_of_count():
    m = simple_model([("inflow", "r"), ("wind", "w")], log_space=True, mean=1.0, std=0.3)
    a = generate(m, 5, 100, seed=17)
    b = generate(m, 5, 100, seed=17)
    for v in a.data:
        assert a.data[v].tobytes() == b.data[v].tobytes()
    few = generate(m, 2, 100, seed=17)
    for v in a.data:
        assert few.data[v].tobytes() == a.data[v][:, :2].tobytes()
    assert generate(m, 1, 100, seed=18).data["inflow"][0, 0, 5] != a.data["inflow"][0, 0, 5]


@settings(max_examples=25, deadline=None)
@given(mean=st.floats(-5, 5), std=st.floats(0.1, 5), seed=st.integers(0, 10_000))
def test_generated_inflows_nonnegative(mean, std, seed):
    m = simple_model([("inflow", "r")], mean=mean, std=std, log_space=False)
    ss = generate(m, 3, 48, seed)
    assert np.all(ss.data["inflow"] >= 0)
    assert ss.diagnostics["truncation_frequency"] == pytest.approx(ss.diagnostics["truncated_values"] / 144)
    assert not ss.check()


def test_sample_mean_near_model_mean():
    m = simple_model([("load", "a")], phi=0.6, sigma=0.8, mean=20.0, std=3.0, initial=[[2.0]])
    ss = generate(m, 1000, 48, seed=5)
    hours = np.arange(48)
    mu = m.implied_mean(hours)[0]
    x = ss.data["load"][0]
    se = x.std(axis=0, ddof=1) / np.sqrt(x.shape[0])
    z = np.abs(x.mean(axis=0) - mu) / se
    if np.any(z > 3):
        warnings.warn(f"{int(np.sum(z > 3))} hours outside 3 standard errors")
    assert np.mean(z > 3) < 0.05


# ------------------------------------------------------------------------ history and aggregation
def test_from_history_passthrough_and_gaps():
    years = [np.arange(8760.0) + k for k in range(3)]
    ss = from_history({("load", "b"): years})
    assert ss.S == 3
    for k in range(3):
        np.testing.assert_array_equal(ss.series("load", "b")[k], years[k])
    bad = [years[0], years[1].copy()]
    bad[1][100] = np.nan
    with pytest.raises(IncompleteYear, match="hour 100"):
        from_history({("load", "b"): bad})
    with pytest.raises(IncompleteYear):
        from_history({("load", "b"): [np.zeros(8759)]})


def test_weekly_view_of_constant_inflow_year():
    ss = from_history({("inflow", "r"): [np.full(8760, 100.0)]})
    wk = weekly_aggregate(ss)["inflow"]
    assert wk.shape == (1, 1, 52)
    np.testing.assert_array_equal(wk, 100.0)


def test_weekly_energy_sum_and_flow_average():
    ss = ScenarioSet({"load": np.full((1, 1, 168), 10.0),
                      "inflow": np.tile([0.0, 200.0], 84).reshape(1, 1, 168)},
                     {"load": ["b"], "inflow": ["r"]})
    wk = weekly_aggregate(ss)
    assert wk["load"][0, 0, 0] == 1680.0
    assert wk["inflow"][0, 0, 0] == 100.0


def test_weekly_aggregate_matches_reshape_oracle():
    rng = np.random.default_rng(2)
    ss = ScenarioSet({"load": rng.random((2, 3, 168 * 4)), "inflow": rng.random((1, 3, 168 * 4))},
                     {"load": ["a", "b"], "inflow": ["r"]})
    wk = weekly_aggregate(ss)
    np.testing.assert_allclose(wk["load"], ss.data["load"].reshape(2, 3, 4, 168).sum(axis=-1), rtol=1e-13)
    np.testing.assert_allclose(wk["inflow"], ss.data["inflow"].reshape(1, 3, 4, 168).mean(axis=-1), rtol=1e-13)


def test_partial_week_dropped_with_warning():
    ss = ScenarioSet({"load": np.ones((1, 1, 200))}, {"load": ["b"]})
    with pytest.warns(UserWarning, match="32 hours"):
        wk = weekly_aggregate(ss)
    assert wk["load"].shape == (1, 1, 1)


def test_year_tail_hours_in_last_week():
    w = week_of_hour(np.array([0, 167, 168, 8735, 8736, 8759, 8760]))
    assert w.tolist() == [0, 0, 1, 51, 51, 51, 0]


# ------------------------------------------------------------------------ files
def test_binary_and_csv_round_trip(tmp_path):
    m = simple_model([("inflow", "r"), ("load", "a"), ("load", "b")], log_space=True, mean=1.0, std=0.5)
    ss = generate(m, 3, 30, seed=1)
    back = read_binary(write_binary(ss, tmp_path / "s.bin"))
    back_csv = read_csv(write_csv(ss, tmp_path / "s.csv"))
    for other in (back, back_csv):
        assert other.sites == ss.sites
        for v in ss.data:
            assert other.data[v].tobytes() == ss.data[v].tobytes()


def test_binary_layout_order(tmp_path):
    ss = ScenarioSet({"load": np.arange(12.0).reshape(2, 3, 2)}, {"load": ["a", "b"]})
    raw = (write_binary(ss, tmp_path / "s.bin")).read_bytes()
    assert raw[:8] == b"CSSCEN01"
    (hlen,) = struct.unpack_from("<I", raw, 8)
    body = np.frombuffer(raw[12 + hlen:], "<f8")
    # (variable, site, scenario, hour) order
    assert body.tolist() == list(np.arange(12.0))
