"""Authoring script for the bundled fixtures.

``python -m cascadesim.fixtures OUTDIR`` writes:

* ``minimal_system.json`` with one bus and one thermal plant
* ``cyclic_system.json`` whose cascade loops (fails validation)
* ``desk_system.json``: desk-scale replica of a hydro-dominated system
* ``desk_par.npz``: scenario model for the desk system
* ``desk_24h.json``, ``desk_6day.json``, ``desk_week.json``: run configs
* ``manifest.json``: entity counts used by the tests
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from .scenario import HOURS_PER_WEEK, HOURS_PER_YEAR, WEEKS_PER_YEAR, ParModel
from .system_model import (
    BalancingArea, Bus, Circuit, FuelContract, HydroPlant, MarketCurve, Network, SystemModel,
    ThermalPlant, VreUnit, validate, write_system,
)

DEFICIT = ((0.05, 1000.0), (0.15, 3000.0), (1.0, 10000.0))


def minimal_system() -> SystemModel:
    return SystemModel(
        network=Network((Bus("b1", load_site="b1"),)),
        thermal=(ThermalPlant("t1", "b1", capacity=100.0, min_generation_when_on=0.0, variable_cost=30.0),),
        areas=(BalancingArea("a1", ("b1",)),),
        deficit_cost=((1.0, 10000.0),),
        name="minimal",
    )


def cyclic_system() -> SystemModel:
    seg = ((0.0, 0.0), (100.0, 90.0))
    hydro = (
        HydroPlant("A", "reservoir", "b1", 100.0, 0.0, 100.0, seg, "A", 50.0, downstream_id="B"),
        HydroPlant("B", "reservoir", "b1", 100.0, 0.0, 100.0, seg, "B", 50.0, downstream_id="A"),
    )
    return SystemModel(network=Network((Bus("b1", load_site="b1"),)), hydro=hydro,
                       areas=(BalancingArea("a1", ("b1",)),), name="cyclic")


def _flood(cap: float, wet_cap: float) -> tuple[float, ...]:
    return tuple(wet_cap if 12 <= w <= 22 else cap for w in range(WEEKS_PER_YEAR))


def desk_system() -> SystemModel:
    buses = (
        Bus("B1", "B1", ((400.0, 20.0),)), Bus("B2", "B2"), Bus("B3", "B3"),
        Bus("B4", "B4"), Bus("B5", "B5", ((350.0, 15.0),)), Bus("B6", "B6"),
    )
    circuits = (
        Circuit("L12", "B1", "B2", 700.0), Circuit("L23", "B2", "B3", 600.0),
        Circuit("L34", "B3", "B4", 500.0), Circuit("L45", "B4", "B5", 600.0),
        Circuit("L56", "B5", "B6", 500.0), Circuit("L61", "B6", "B1", 400.0),
        Circuit("L14", "B1", "B4", 450.0), Circuit("L25", "B2", "B5", 350.0),
    )
    markets = (
        MarketCurve("B1", buy_segments=((45.0, 200.0), (60.0, 200.0), (90.0, 300.0)),
                    sell_segments=((30.0, 200.0), (20.0, 300.0))),
        MarketCurve("B5", buy_segments=((50.0, 150.0), (80.0, 250.0)),
                    sell_segments=((28.0, 150.0), (15.0, 200.0))),
    )
    hydro = (
        HydroPlant("H1", "reservoir", "B1", 3000.0, 300.0, 800.0,
                   ((0.0, 0.0), (400.0, 360.0), (800.0, 640.0)), "H1", 1800.0, "H2",
                   (0.0, 5000.0), _flood(3000.0, 2600.0)),
        HydroPlant("H2", "run_of_river", "B1", 0.0, 0.0, 1000.0,
                   ((0.0, 0.0), (500.0, 200.0), (1000.0, 360.0)), "H2", 0.0, "H3"),
        HydroPlant("H3", "reservoir", "B2", 1500.0, 100.0, 1100.0,
                   ((0.0, 0.0), (600.0, 480.0), (1100.0, 800.0)), "H3", 900.0, "H4",
                   (0.0, 6000.0), _flood(1500.0, 1300.0)),
        HydroPlant("H4", "run_of_river", "B3", 0.0, 0.0, 1200.0,
                   ((0.0, 0.0), (600.0, 180.0), (1200.0, 330.0)), "H4", 0.0, "H5"),
        HydroPlant("H5", "reservoir", "B4", 2500.0, 200.0, 1300.0,
                   ((0.0, 0.0), (700.0, 490.0), (1300.0, 840.0)), "H5", 1500.0, "H6",
                   (0.0, 8000.0), _flood(2500.0, 2200.0)),
        HydroPlant("H6", "run_of_river", "B4", 0.0, 0.0, 1400.0,
                   ((0.0, 0.0), (700.0, 150.0), (1400.0, 280.0)), "H6", 0.0, None),
    )
    thermal = (
        ThermalPlant("T1", "B2", 400.0, 200.0, 25.0, 48, 48, 100.0, 100.0, "slow",
                     startup_cost=8000.0, forced_outage_rate=0.02, mean_time_to_repair=48.0,
                     initial_status=60, initial_generation=300.0),
        ThermalPlant("T2", "B5", 300.0, 150.0, 28.0, 24, 24, 80.0, 80.0, "slow",
                     startup_cost=5000.0, forced_outage_rate=0.02, mean_time_to_repair=36.0,
                     initial_status=-30, initial_generation=0.0),
        ThermalPlant("T3", "B3", 250.0, 100.0, 8.0, 6, 4, 120.0, 120.0, "intermediate", "G1",
                     startup_cost=2000.0, forced_outage_rate=0.03, mean_time_to_repair=12.0,
                     initial_status=8, initial_generation=150.0),
        ThermalPlant("T4", "B6", 200.0, 80.0, 8.0, 4, 4, 100.0, 100.0, "intermediate", "G1",
                     startup_cost=1500.0, forced_outage_rate=0.03, mean_time_to_repair=12.0,
                     initial_status=-6, initial_generation=0.0),
        ThermalPlant("T5", "B4", 150.0, 60.0, 45.0, 3, 3, 75.0, 75.0, "intermediate",
                     startup_cost=900.0, forced_outage_rate=0.03, mean_time_to_repair=10.0,
                     initial_status=-5, initial_generation=0.0),
        ThermalPlant("T6", "B1", 100.0, 20.0, 90.0, 1, 1, 100.0, 100.0, "fast",
                     startup_cost=200.0, forced_outage_rate=0.04, mean_time_to_repair=6.0,
                     initial_status=-3, initial_generation=0.0),
        ThermalPlant("T7", "B5", 80.0, 15.0, 95.0, 2, 1, 80.0, 80.0, "fast",
                     startup_cost=150.0, forced_outage_rate=0.04, mean_time_to_repair=6.0,
                     initial_status=-3, initial_generation=0.0),
        ThermalPlant("T8", "B2", 120.0, 0.0, 60.0, forced_outage_rate=0.05, mean_time_to_repair=8.0),
        ThermalPlant("T9", "B6", 100.0, 0.0, 70.0, forced_outage_rate=0.05, mean_time_to_repair=8.0),
        ThermalPlant("T10", "B3", 60.0, 0.0, 120.0, forced_outage_rate=0.05, mean_time_to_repair=8.0),
    )
    contracts = (FuelContract("G1", 70000.0, 15000.0, 3.5, (("T3", 7.0), ("T4", 9.5))),)
    areas = (
        BalancingArea("A1", ("B1", "B2"), (("regulation", 30.0), ("contingency", 50.0))),
        BalancingArea("A2", ("B3", "B4"), (("regulation", 20.0), ("contingency", 40.0)), ("H3",)),
        BalancingArea("A3", ("B5", "B6"), (("regulation", 20.0), ("contingency", 40.0))),
    )
    vre = (
        VreUnit("W1", "wind", "B5", 300.0, "wind", "W1"),
        VreUnit("W2", "wind", "B6", 200.0, "wind", "W2"),
        VreUnit("S1", "solar", "B3", 150.0, "solar", "S1"),
        VreUnit("SH1", "small_hydro", "B2", 50.0, "small_hydro", "SH1"),
        VreUnit("I1", "independent", "B4", 80.0, "independent", "I1"),
    )
    return SystemModel(Network(buses, circuits, markets), hydro, thermal, contracts, areas, vre,
                       DEFICIT, name="desk")


def _seasonal(base: float, amp: float, peak_week: float) -> np.ndarray:
    w = np.arange(WEEKS_PER_YEAR)
    return base * (1.0 + amp * np.cos(2 * np.pi * (w - peak_week) / WEEKS_PER_YEAR))


def desk_par(model: SystemModel | None = None) -> ParModel:
    """Hand-specified PAR(1) model for every series the desk system references."""
    model = model or desk_system()
    names: list[tuple[str, str]] = []
    mean, std, phi, log_space, cap, diurnal = [], [], [], [], [], []
    inflow_base = {"H1": 500.0, "H2": 40.0, "H3": 150.0, "H4": 50.0, "H5": 200.0, "H6": 60.0}
    for h in model.hydro:
        b = inflow_base[h.inflow_site]
        names.append(("inflow", h.inflow_site))
        mean.append(np.log(_seasonal(b, 0.6, 18.0)))
        std.append(np.full(WEEKS_PER_YEAR, 0.25))
        phi.append(0.995)
        log_space.append(True)
        cap.append(np.inf)
        diurnal.append(np.ones(24))
    hod = np.arange(24)
    load_shape = 1.0 + 0.18 * np.sin(2 * np.pi * (hod - 9) / 24) + 0.06 * np.sin(4 * np.pi * (hod - 3) / 24)
    load_base = {"B1": 600.0, "B2": 400.0, "B3": 500.0, "B4": 450.0, "B5": 500.0, "B6": 350.0}
    for b in model.network.buses:
        names.append(("load", b.load_site))
        mean.append(_seasonal(load_base[b.id], 0.12, 2.0))
        std.append(0.04 * _seasonal(load_base[b.id], 0.12, 2.0))
        phi.append(0.95)
        log_space.append(False)
        cap.append(np.inf)
        diurnal.append(load_shape / load_shape.mean())
    solar_shape = np.clip(np.sin(np.pi * (hod - 6) / 13), 0.0, None)
    for u in model.vre_units:
        names.append((u.variable, u.site))
        if u.kind == "wind":
            mean.append(_seasonal(0.35 * u.capacity, 0.25, 10.0))
            std.append(np.full(WEEKS_PER_YEAR, 0.2 * u.capacity))
            phi.append(0.97)
            diurnal.append(np.ones(24))
        elif u.kind == "solar":
            mean.append(_seasonal(0.25 * u.capacity, 0.4, 25.0))
            std.append(np.full(WEEKS_PER_YEAR, 0.05 * u.capacity))
            phi.append(0.9)
            diurnal.append(solar_shape / solar_shape.mean())
        elif u.kind == "small_hydro":
            mean.append(_seasonal(0.5 * u.capacity, 0.4, 18.0))
            std.append(np.full(WEEKS_PER_YEAR, 0.05 * u.capacity))
            phi.append(0.99)
            diurnal.append(np.ones(24))
        else:
            # fixed injection series: no noise
            mean.append(np.full(WEEKS_PER_YEAR, 0.75 * u.capacity))
            std.append(np.zeros(WEEKS_PER_YEAR))
            phi.append(0.0)
            diurnal.append(np.ones(24))
        log_space.append(False)
        cap.append(u.capacity)
    n = len(names)
    phi_arr = np.repeat(np.array(phi)[None, :, None], WEEKS_PER_YEAR, axis=0)
    sigma = np.sqrt(1.0 - phi_arr[:, :, 0] ** 2)
    corr = np.eye(n)
    groups: dict[str, list[int]] = {}
    for i, (var, _) in enumerate(names):
        groups.setdefault(var, []).append(i)
    for var, rho in (("inflow", 0.7), ("load", 0.8), ("wind", 0.5)):
        for i in groups.get(var, []):
            for j in groups.get(var, []):
                if i != j:
                    corr[i, j] = rho
    return ParModel(names, np.array(mean).T, np.array(std).T, phi_arr, sigma, corr,
                    np.array(log_space), np.array(cap), np.array(diurnal),
                    HOURS_PER_WEEK, HOURS_PER_YEAR)


def desk_config(hours: int, scenarios: int = 10, workers: int = 4) -> dict:
    return {
        "system": "desk_system.json",
        "scenarios": {"par_model": "desk_par.npz", "count": scenarios},
        "hours": hours,
        "start_hour": 0,
        "seed": 7,
        "workers": workers,
        "forecast": {
            "week_ahead": {"kind": "cv", "value": 0.08},
            "day_ahead": {"kind": "cv", "value": 0.04},
            "hour_ahead": {"kind": "cv", "value": 0.01},
            "true_up": {"kind": "cv", "value": 0.0},
        },
        "perfect_forecast": False,
        "outages": True,
        "sddp": {"max_iterations": 8, "forward_paths": 10},
        "scheduling": {"hour_ahead_integer_hours": 6},
        "output_dir": f"runs/desk_{hours}h",
    }


def manifest(model: SystemModel) -> dict:
    return {
        "hydro": len(model.hydro),
        "reservoirs": len(model.reservoirs()),
        "run_of_river": len(model.hydro) - len(model.reservoirs()),
        "thermal": len(model.thermal),
        "committed_thermal": sum(t.committed for t in model.thermal),
        "contract_thermal": sum(t.fuel_contract_id is not None for t in model.thermal),
        "buses": len(model.network.buses),
        "circuits": len(model.network.circuits),
        "areas": len(model.areas),
        "market_buses": len(model.network.markets),
        "vre_units": len(model.vre_units),
        "cascades": sum(h.downstream_id is None for h in model.hydro),
    }


def write_all(outdir: str | Path) -> dict:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    desk = desk_system()
    assert not validate(desk), validate(desk)
    write_system(minimal_system(), out / "minimal_system.json")
    write_system(cyclic_system(), out / "cyclic_system.json")
    write_system(desk, out / "desk_system.json")
    desk_par(desk).save(out / "desk_par.npz")
    for name, hours in (("desk_24h", 24), ("desk_6day", 144), ("desk_week", HOURS_PER_WEEK)):
        cfg = desk_config(hours)
        if hours != HOURS_PER_WEEK:
            cfg["scenarios"]["count"] = 2
        (out / f"{name}.json").write_text(json.dumps(cfg, indent=2) + "\n")
    man = {"desk_system.json": manifest(desk), "minimal_system.json": manifest(minimal_system())}
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return man


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("outdir", nargs="?", default="fixtures")
    args = ap.parse_args(argv)
    write_all(args.outdir)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
