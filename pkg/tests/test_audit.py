import shutil

import numpy as np
import pytest

from cascadesim.audit import audit_store, main as audit_main
from cascadesim.engine import run
from cascadesim.store import Batch, ResultStore
from cascadesim.system_model import parse_system

from conftest import desk_run_config


@pytest.fixture(scope="module")
def clean_store(tmp_path_factory):
    cfg = desk_run_config("desk_24h.json", tmp_path_factory.mktemp("audit"), hours=30, scenarios=1,
                          workers=1, sddp_iterations=2)
    summary = run(cfg)
    assert not summary["failures"]
    return cfg.output_dir / "store"


def tampered(src, dst, edit):
    """Copy the store at ``src`` to ``dst`` after applying ``edit`` to scenario 0's records."""
    shutil.copytree(src, dst)
    store = ResultStore(dst)
    df = store.read(0)
    edit(df)
    store.partition_path(0).unlink()
    w = store.writer(0)
    w.append(Batch(df["layer"].to_numpy(object), df["timestamp"].to_numpy(), df["entity_kind"].to_numpy(object),
                   df["entity_id"].to_numpy(object), df["metric"].to_numpy(object), df["value"].to_numpy()))
    w.finalize()
    return dst


def _row(df, layer, metric, entity, hour):
    m = (df["layer"] == layer) & (df["metric"] == metric) & (df["entity_id"] == entity) & (df["timestamp"] == hour)
    (i,) = np.flatnonzero(m.to_numpy())
    return i


def _model(store_dir):
    return parse_system(ResultStore(store_dir).meta()["system"])


def test_clean_run_has_no_violations(clean_store):
    rep = audit_store(clean_store)
    assert rep.ok, rep.violations[:5]
    assert {"ramp", "water_balance", "min_up_down"} <= set(rep.checked)
    assert rep.worst["water_balance"] <= 1e-9
    assert audit_main([str(clean_store)]) == 0


def test_water_balance_tamper_detected(clean_store, tmp_path):
    res = next(h for h in _model(clean_store).hydro if h.kind == "reservoir")

    def edit(df):
        df.loc[_row(df, "true_up", "storage", res.id, 5), "value"] += 1e-6

    rep = audit_store(tampered(clean_store, tmp_path / "s", edit))
    hits = [v for v in rep.violations if v["check"] == "water_balance"]
    assert hits and all(v["entity"] == res.id for v in hits)
    assert {v["hour"] for v in hits} == {5, 6}


def test_bus_balance_tamper_detected(clean_store, tmp_path):
    unit = _model(clean_store).thermal[0]

    def edit(df):
        df.loc[_row(df, "day_ahead", "thermal_generation", unit.id, 3), "value"] += 1e-3

    rep = audit_store(tampered(clean_store, tmp_path / "s", edit))
    assert [v["check"] for v in rep.violations] == ["bus_balance"]
    assert rep.violations[0]["hour"] == 3


def test_ramp_tamper_detected(clean_store, tmp_path):
    model = _model(clean_store)
    df0 = ResultStore(clean_store).read(0)
    k, unit = next((k, t) for k, t in enumerate(model.thermal) if np.isfinite(t.ramp_up) and t.ramp_up < t.capacity
                   and df0["value"].to_numpy()[_row(df0, "true_up", "thermal_generation", t.id, 10)]
                   + t.ramp_up + 1.0 <= t.capacity)

    def edit(df):
        prev = df["value"].to_numpy()[_row(df, "true_up", "thermal_generation", unit.id, 10)]
        df.loc[_row(df, "true_up", "thermal_generation", unit.id, 11), "value"] = prev + unit.ramp_up + 1.0

    rep = audit_store(tampered(clean_store, tmp_path / "s", edit))
    assert any(v["check"] == "ramp" and v["entity"] == unit.id for v in rep.violations)


def test_short_off_run_detected(clean_store, tmp_path):
    model = _model(clean_store)
    df0 = ResultStore(clean_store).read(0)
    val = df0["value"].to_numpy()
    unit = next(t for t in model.thermal if t.committed and t.min_down_time > 1
                and all(val[_row(df0, "true_up", "commitment", t.id, h)] > 0.5 for h in (9, 10, 11)))

    def edit(df):
        df.loc[_row(df, "true_up", "commitment", unit.id, 10), "value"] = 0.0

    rep = audit_store(tampered(clean_store, tmp_path / "s", edit))
    hits = [v for v in rep.violations if v["check"] == "min_down"]
    assert len(hits) == 1 and hits[0]["entity"] == unit.id and hits[0]["hour"] == 10
    assert audit_main([str(tmp_path / "s")]) == 1
