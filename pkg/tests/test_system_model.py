import copy
import dataclasses
import json

import pytest
from hypothesis import given, settings, strategies as st

from cascadesim.fixtures import cyclic_system, desk_system, manifest, minimal_system
from cascadesim.system_model import (
    HydroPlant, ParseError, ThermalPlant, ValidationError, load_system, parse_system, replace, to_json,
    topological_hydro, validate, write_system,
)

from conftest import FIXTURES


def test_minimal_file_loads():
    m = load_system(FIXTURES / "minimal_system.json")
    assert len(m.thermal) == 1 and m.bus_ids == ["b1"]
    assert validate(m) == []


def test_cycle_rejected_with_message():
    with pytest.raises(ValidationError, match="cycle") as ei:
        load_system(FIXTURES / "cyclic_system.json")
    assert any("cycle" in v for v in ei.value.violations)
    assert any("cycle" in v for v in validate(cyclic_system()))


def test_desk_fixture_counts_match_manifest():
    man = json.loads((FIXTURES / "manifest.json").read_text())
    m = load_system(FIXTURES / "desk_system.json")
    got = manifest(m)
    assert got == man["desk_system.json"]
    assert (got["hydro"], got["thermal"], got["buses"], got["circuits"], got["areas"], got["market_buses"]) == \
        (6, 10, 6, 8, 3, 2)
    assert got["cascades"] == 1
    assert m == desk_system()


def test_min_up_zero_names_plant():
    m = minimal_system()
    bad = replace(m, thermal=(dataclasses.replace(m.thermal[0], min_up_time=0),))
    v = validate(bad)
    assert len(v) == 1 and "t1" in v[0] and "min_up_time" in v[0]


def _plant(points):
    return HydroPlant("H", "reservoir", "b1", 10.0, 0.0, points[-1][0], tuple(points), "H", 5.0)


def _slope_oracle(points):
    """Offending (k-1, k) segment pairs by direct slope comparison."""
    s = [(p1 - p0) / (q1 - q0) for (q0, p0), (q1, p1) in zip(points, points[1:])]
    return [(k - 1, k) for k in range(1, len(s)) if s[k] > s[k - 1] + 1e-12]


@settings(max_examples=60)
@given(widths=st.lists(st.floats(0.5, 20), min_size=2, max_size=6),
       slopes=st.lists(st.floats(0.0, 3.0), min_size=6, max_size=6))
def test_concavity_check_matches_slope_oracle(widths, slopes):
    pts = [(0.0, 0.0)]
    for w, s in zip(widths, slopes):
        q, p = pts[-1]
        pts.append((q + w, p + s * w))
    got = [v for v in validate(replace(minimal_system(), hydro=(_plant(pts),))) if "concave" in v]
    expect = _slope_oracle(pts)
    assert len(got) == len(expect)
    for (a, b), msg in zip(expect, got):
        assert f"segments {a} and {b}" in msg


def test_errors_reported_all_at_once():
    m = minimal_system()
    t = m.thermal[0]
    bad = replace(m, thermal=(dataclasses.replace(t, min_up_time=0, min_down_time=0, bus_id="nowhere"),
                              dataclasses.replace(t, min_generation_when_on=500.0)))
    v = validate(bad)
    assert any("min_up_time" in x for x in v)
    assert any("min_down_time" in x for x in v)
    assert any("unknown bus" in x for x in v)
    assert any("duplicate thermal id t1" in x for x in v)
    assert any("min generation" in x for x in v)


def test_parse_errors_are_located_and_complete(tmp_path):
    doc = to_json(minimal_system())
    doc["thermal"][0]["capacity"] = "lots"
    doc["thermal"][0]["colour"] = "blue"
    del doc["network"]["buses"][0]["id"]
    with pytest.raises(ParseError) as ei:
        parse_system(doc, "sys.json")
    msgs = "\n".join(ei.value.errors) if hasattr(ei.value, "errors") else str(ei.value)
    assert "sys.json.thermal[0].capacity" in msgs
    assert "sys.json.thermal[0].colour: unknown field" in msgs
    assert "sys.json.network.buses[0].id: missing required field" in msgs
    p = tmp_path / "broken.json"
    p.write_text('{"schema_version": 1,\n  "network": }')
    with pytest.raises(ParseError, match=r"broken.json:2:"):
        load_system(p)


def test_schema_version_mandatory():
    doc = to_json(minimal_system())
    del doc["schema_version"]
    with pytest.raises(ParseError, match="schema_version"):
        parse_system(doc)
    doc["schema_version"] = 99
    with pytest.raises(ParseError, match="unsupported"):
        parse_system(doc)


@pytest.mark.parametrize("make", [minimal_system, desk_system])
def test_round_trip(tmp_path, make):
    m = make()
    back = load_system(write_system(m, tmp_path / "s.json"))
    assert back == m


def test_identical_bytes_identical_models(tmp_path):
    raw = (FIXTURES / "desk_system.json").read_bytes()
    (tmp_path / "a.json").write_bytes(raw)
    (tmp_path / "b.json").write_bytes(raw)
    assert load_system(tmp_path / "a.json") == load_system(tmp_path / "b.json")


def test_run_of_river_storage_and_islands():
    m = desk_system()
    ror = next(h for h in m.hydro if not h.is_reservoir)
    bad = replace(m, hydro=tuple(dataclasses.replace(h, max_storage=5.0) if h is ror else h for h in m.hydro))
    assert any("run-of-river" in v for v in validate(bad))
    net = dataclasses.replace(m.network, circuits=())
    assert any("not connected" in v for v in validate(replace(m, network=net)))
    assert not any("not connected" in v for v in validate(replace(m, network=dataclasses.replace(
        net, allow_islands=True))))


def test_topological_order_upstream_first():
    m = desk_system()
    order = [h.id for h in topological_hydro(m)]
    pos = {h: i for i, h in enumerate(order)}
    for h in m.hydro:
        if h.downstream_id:
            assert pos[h.id] < pos[h.downstream_id]


def test_model_is_immutable():
    m = minimal_system()
    with pytest.raises(dataclasses.FrozenInstanceError):
        m.name = "x"
    t = copy.copy(m.thermal[0])
    assert isinstance(t, ThermalPlant)
