from pathlib import Path

import pytest

from cascadesim.engine import RunConfig
from cascadesim.scenario import ParModel
from cascadesim.system_model import load_system

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def desk_model():
    return load_system(FIXTURES / "desk_system.json")


@pytest.fixture(scope="session")
def desk_par():
    return ParModel.load(FIXTURES / "desk_par.npz")


def desk_run_config(name: str, out: Path, **changes) -> RunConfig:
    cfg = RunConfig.load(FIXTURES / name)
    cfg.output_dir = Path(out)
    for k, v in changes.items():
        setattr(cfg, k, v)
    return cfg


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
