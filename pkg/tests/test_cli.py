import csv
import json

import pytest

from cascadesim.cli import EXIT_FATAL, EXIT_INVALID, EXIT_OK, main

from conftest import FIXTURES

CFG = str(FIXTURES / "desk_24h.json")


def _simulate(out, capsys, *extra):
    code = main(["simulate", "--config", CFG, "--scenarios", "1", "--workers", "1",
                 "--set", "sddp.max_iterations=2", "--output-dir", str(out), "--json", *extra])
    return code, json.loads(capsys.readouterr().out)


@pytest.fixture(scope="module")
def run24(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    code = main(["simulate", "--config", CFG, "--scenarios", "1", "--workers", "1",
                 "--set", "sddp.max_iterations=2", "--output-dir", str(out)])
    return code, out


def test_validate_cyclic_fixture_fails(capsys):
    assert main(["validate", str(FIXTURES / "cyclic_system.json")]) == EXIT_INVALID
    assert "cycle" in capsys.readouterr().err


def test_validate_good_inputs(capsys):
    assert main(["validate", str(FIXTURES / "minimal_system.json"), "--json"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out) == {"ok": True, "violations": []}
    assert main(["validate", "--config", CFG]) == EXIT_OK


def test_unknown_flag_and_bad_config_exit_invalid(capsys, tmp_path):
    assert main(["simulate", "--config", CFG, "--colour", "red"]) == EXIT_INVALID
    assert main(["simulate", "--config", str(tmp_path / "missing.json")]) == EXIT_INVALID
    assert main(["simulate", "--config", CFG, "--set", "colour=red", "--dry-run"]) == EXIT_INVALID
    assert "unknown" in capsys.readouterr().err


def test_dry_run_counts(capsys, tmp_path):
    code, summary = _simulate(tmp_path / "dry", capsys, "--dry-run", "--hours", "8760")
    assert code == EXIT_OK
    assert summary["total_problems"] == 17937
    assert not (tmp_path / "dry").exists()


def test_simulate_stamps_and_solves_fifty(run24):
    code, out = run24
    assert code == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["total_problems"] == 50
    stamped = json.loads((out / "config.json").read_text())
    assert stamped["seed"] == 7 and stamped["scenarios"]["count"] == 1
    assert "--workers=1" in json.loads((out / "overrides.json").read_text())


def test_stamped_config_reproduces_store(run24, tmp_path):
    _, out = run24
    again = tmp_path / "again"
    assert main(["simulate", "--config", str(out / "config.json"), "--output-dir", str(again)]) == EXIT_OK
    a = sorted(p.name for p in (out / "store").iterdir())
    assert a == sorted(p.name for p in (again / "store").iterdir())
    for name in a:
        assert (out / "store" / name).read_bytes() == (again / "store" / name).read_bytes()


def test_query_and_exports(run24, tmp_path, capsys):
    _, out = run24
    assert main(["query", "--output-dir", str(out), "--metric", "hydro_generation", "--layers", "true_up",
                 "--aggregate", "sum", "--group-by", "layer,timestamp", "--json"]) == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["rows"] == 24
    csv_path = tmp_path / "q.csv"
    assert main(["export", "--output-dir", str(out), "--metric", "hydro_generation", "--export", "csv",
                 "--out", str(csv_path)]) == EXIT_OK
    rows = list(csv.DictReader(open(csv_path)))
    assert {r["layer"] for r in rows} == {"week_ahead", "day_ahead", "hour_ahead", "true_up"}
    svg = tmp_path / "h.svg"
    assert main(["query", "--output-dir", str(out), "--metric", "hydro_generation", "--layers", "all",
                 "--aggregate", "sum", "--group-by", "layer,timestamp", "--export", "svg",
                 "--out", str(svg)]) == EXIT_OK
    text = svg.read_text()
    assert text.startswith("<?xml") and all(layer in text for layer in ("week_ahead", "true_up"))


def test_query_errors(run24, tmp_path, capsys):
    _, out = run24
    assert main(["query", "--output-dir", str(out), "--metric", "nonsense"]) == EXIT_INVALID
    assert "unknown metric" in capsys.readouterr().err
    assert main(["query", "--output-dir", str(out), "--layers", "monthly"]) == EXIT_INVALID
    assert main(["query", "--output-dir", str(tmp_path)]) == EXIT_INVALID


def test_fatal_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "store"
    bad.mkdir()
    (bad / "meta.json").write_text("{}")
    (bad / "part-00000.csp").write_bytes(b"garbage")
    assert main(["query", "--output-dir", str(tmp_path)]) == EXIT_FATAL
    assert "fatal" in capsys.readouterr().err
