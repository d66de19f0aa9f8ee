"""Typed, immutable description of the power system and its JSON format.

The input file is one JSON object. ``schema_version`` is mandatory and
unknown keys are rejected at every level. Units: storage in hm³, water flow
in m³/s, power in MW, energy in MWh, money in $, gas in MMBtu.
README.md documents every field.
"""
from __future__ import annotations

import dataclasses
import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np

SCHEMA_VERSION = 1
WEEKS_PER_YEAR = 52

HYDRO_KINDS = ("reservoir", "run_of_river")
COMMITMENT_CLASSES = ("slow", "intermediate", "fast")
VRE_KINDS = ("wind", "solar", "small_hydro", "independent")
RESERVE_PRODUCTS = ("regulation", "contingency")


class ParseError(Exception):
    """The file is not valid JSON or does not follow the schema."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class ValidationError(Exception):
    """The model parsed but violates one or more invariants."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("\n".join(self.violations))


@dataclass(frozen=True)
class HydroPlant:
    id: str
    kind: str
    bus_id: str
    max_storage: float
    min_storage: float
    max_turbining: float
    production_segments: tuple[tuple[float, float], ...]
    inflow_site: str
    initial_storage: float = 0.0
    downstream_id: Optional[str] = None
    spill_bounds: tuple[float, float] = (0.0, float("inf"))
    flood_control_levels: tuple[float, ...] = ()

    @property
    def is_reservoir(self) -> bool:
        return self.kind == "reservoir"

    @property
    def max_generation(self) -> float:
        return float(np.interp(self.max_turbining, *zip(*self.production_segments)))

    def segments(self) -> list[tuple[float, float]]:
        """(flow width m³/s, MW per m³/s) for each linear piece up to ``max_turbining``."""
        out = []
        pts = self.production_segments
        for (q0, p0), (q1, p1) in zip(pts, pts[1:]):
            hi = min(q1, self.max_turbining)
            if hi <= q0:
                break
            out.append((hi - q0, (p1 - p0) / (q1 - q0)))
        return out

    def storage_cap(self, week: int) -> float:
        if self.flood_control_levels:
            return min(self.max_storage, self.flood_control_levels[week % len(self.flood_control_levels)])
        return self.max_storage


@dataclass(frozen=True)
class ThermalPlant:
    id: str
    bus_id: str
    capacity: float
    min_generation_when_on: float
    variable_cost: float
    min_up_time: int = 1
    min_down_time: int = 1
    ramp_up: float = float("inf")
    ramp_down: float = float("inf")
    commitment_class: Optional[str] = None
    fuel_contract_id: Optional[str] = None
    startup_cost: float = 0.0
    forced_outage_rate: float = 0.0
    mean_time_to_repair: float = 24.0
    # hours in current state at t=0: positive = on, negative = off
    initial_status: int = -24
    initial_generation: float = 0.0

    @property
    def committed(self) -> bool:
        return self.commitment_class is not None


@dataclass(frozen=True)
class FuelContract:
    id: str
    daily_nomination_max: float
    take_or_pay_min: float
    price: float
    heat_rates: tuple[tuple[str, float], ...]

    def heat_rate(self, plant_id: str) -> float:
        return dict(self.heat_rates)[plant_id]


@dataclass(frozen=True)
class Bus:
    id: str
    load_site: Optional[str] = None
    # demand response: (price $/MWh, MW) blocks of curtailable load
    elastic_segments: tuple[tuple[float, float], ...] = ()


@dataclass(frozen=True)
class Circuit:
    id: str
    from_bus: str
    to_bus: str
    capacity: float
    susceptance: Optional[float] = None


@dataclass(frozen=True)
class MarketCurve:
    bus_id: str
    # purchases: ascending price; sales: descending price
    buy_segments: tuple[tuple[float, float], ...] = ()
    sell_segments: tuple[tuple[float, float], ...] = ()


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    circuits: tuple[Circuit, ...] = ()
    markets: tuple[MarketCurve, ...] = ()
    allow_islands: bool = False


@dataclass(frozen=True)
class BalancingArea:
    id: str
    member_bus_ids: tuple[str, ...]
    reserve_requirement: tuple[tuple[str, float], ...] = ()
    shared_resource_ids: tuple[str, ...] = ()

    @property
    def total_requirement(self) -> float:
        return float(sum(v for _, v in self.reserve_requirement))


@dataclass(frozen=True)
class VreUnit:
    id: str
    kind: str
    bus_id: str
    capacity: float
    variable: str
    site: str


@dataclass(frozen=True)
class SystemModel:
    network: Network
    hydro: tuple[HydroPlant, ...] = ()
    thermal: tuple[ThermalPlant, ...] = ()
    contracts: tuple[FuelContract, ...] = ()
    areas: tuple[BalancingArea, ...] = ()
    vre_units: tuple[VreUnit, ...] = ()
    # (fraction of bus load, $/MWh) steps; the last step covers the remainder
    deficit_cost: tuple[tuple[float, float], ...] = ((1.0, 10_000.0),)
    name: str = "system"
    schema_version: int = SCHEMA_VERSION

    # -- lookups -------------------------------------------------------------
    @property
    def bus_ids(self) -> list[str]:
        return [b.id for b in self.network.buses]

    def bus_index(self) -> dict[str, int]:
        return {b.id: i for i, b in enumerate(self.network.buses)}

    def area_of_bus(self) -> dict[str, str]:
        return {b: a.id for a in self.areas for b in a.member_bus_ids}

    def reservoirs(self) -> list[HydroPlant]:
        return [h for h in self.hydro if h.is_reservoir]

    def contract(self, cid: str) -> FuelContract:
        return next(c for c in self.contracts if c.id == cid)

    def max_thermal_cost(self) -> float:
        return max((t.variable_cost for t in self.thermal), default=0.0)


# ---------------------------------------------------------------------------
# JSON parsing
# ---------------------------------------------------------------------------
_NUM = (int, float)


class _Reader:
    def __init__(self):
        self.errors: list[str] = []

    def obj(self, data: Any, path: str, spec: dict[str, tuple[Any, bool]]) -> dict:
        """Check keys/types of a JSON object against ``{key: (kind, required)}``.

        Returns the valid fields; ``self.complete`` tells whether every
        required field was present and valid.
        """
        self.complete = False
        if not isinstance(data, dict):
            self.errors.append(f"{path}: expected object, got {type(data).__name__}")
            return {}
        for key in data:
            if key not in spec:
                self.errors.append(f"{path}.{key}: unknown field")
        out = {}
        for key, (kind, required) in spec.items():
            if key not in data:
                if required:
                    self.errors.append(f"{path}.{key}: missing required field")
                continue
            val = data[key]
            if not self._check(val, kind, f"{path}.{key}"):
                continue
            out[key] = val
        self.complete = all(k in out for k, (_, req) in spec.items() if req)
        return out

    def _check(self, val, kind, path) -> bool:
        ok = True
        if kind == "num":
            ok = isinstance(val, _NUM) and not isinstance(val, bool)
        elif kind == "num?":
            ok = val is None or (isinstance(val, _NUM) and not isinstance(val, bool))
        elif kind == "int":
            ok = isinstance(val, int) and not isinstance(val, bool)
        elif kind == "str":
            ok = isinstance(val, str)
        elif kind == "str?":
            ok = val is None or isinstance(val, str)
        elif kind == "bool":
            ok = isinstance(val, bool)
        elif kind == "list":
            ok = isinstance(val, list)
        elif kind == "pairs":
            ok = isinstance(val, list) and all(
                isinstance(p, list) and len(p) == 2 and all(isinstance(v, _NUM) for v in p) for p in val)
        elif kind == "nums":
            ok = isinstance(val, list) and all(isinstance(v, _NUM) and not isinstance(v, bool) for v in val)
        elif kind == "strs":
            ok = isinstance(val, list) and all(isinstance(v, str) for v in val)
        elif kind == "dict":
            ok = isinstance(val, dict)
        if not ok:
            self.errors.append(f"{path}: expected {kind}, got {json.dumps(val)[:40]}")
        return ok

    def items(self, data: dict, key: str, path: str) -> list:
        val = data.get(key, [])
        return val if isinstance(val, list) else []


def _pairs(v) -> tuple[tuple[float, float], ...]:
    return tuple((float(a), float(b)) for a, b in v)


def _num(v) -> float:
    return float("inf") if v is None else float(v)


def parse_system(data: Any, source: str = "<input>") -> SystemModel:
    """Build a :class:`SystemModel` from decoded JSON, raising :class:`ParseError`."""
    r = _Reader()
    top = r.obj(data, source, {
        "schema_version": ("int", True), "name": ("str", False), "hydro": ("list", False),
        "thermal": ("list", False), "contracts": ("list", False), "network": ("dict", True),
        "areas": ("list", False), "vre": ("list", False), "deficit_cost": ("pairs", False),
    })
    if "schema_version" in top and top["schema_version"] != SCHEMA_VERSION:
        r.errors.append(f"{source}.schema_version: unsupported version {top['schema_version']}")

    hydro = []
    for i, h in enumerate(top.get("hydro", [])):
        p = f"{source}.hydro[{i}]"
        d = r.obj(h, p, {
            "id": ("str", True), "kind": ("str", True), "bus_id": ("str", True),
            "max_storage": ("num", True), "min_storage": ("num", True),
            "initial_storage": ("num", False), "max_turbining": ("num", True),
            "production_segments": ("pairs", True), "inflow_site": ("str", True),
            "downstream_id": ("str?", False), "spill_bounds": ("list", False),
            "flood_control_levels": ("nums", False),
        })
        if not r.complete:
            continue
        spill = d.get("spill_bounds", [0.0, None])
        if len(spill) != 2:
            r.errors.append(f"{p}.spill_bounds: expected [min, max]")
            spill = [0.0, None]
        hydro.append(HydroPlant(
            id=d["id"], kind=d["kind"], bus_id=d["bus_id"], max_storage=float(d["max_storage"]),
            min_storage=float(d["min_storage"]), max_turbining=float(d["max_turbining"]),
            production_segments=_pairs(d["production_segments"]), inflow_site=d["inflow_site"],
            initial_storage=float(d.get("initial_storage", d["min_storage"])),
            downstream_id=d.get("downstream_id"),
            spill_bounds=(float(spill[0] or 0.0), _num(spill[1])),
            flood_control_levels=tuple(float(v) for v in d.get("flood_control_levels", [])),
        ))

    thermal = []
    for i, t in enumerate(top.get("thermal", [])):
        p = f"{source}.thermal[{i}]"
        d = r.obj(t, p, {
            "id": ("str", True), "bus_id": ("str", True), "capacity": ("num", True),
            "min_generation_when_on": ("num", True), "variable_cost": ("num", True),
            "min_up_time": ("int", False), "min_down_time": ("int", False),
            "ramp_up": ("num?", False), "ramp_down": ("num?", False),
            "commitment_class": ("str?", False), "fuel_contract_id": ("str?", False),
            "startup_cost": ("num", False), "forced_outage_rate": ("num", False),
            "mean_time_to_repair": ("num", False), "initial_status": ("int", False),
            "initial_generation": ("num", False),
        })
        if not r.complete:
            continue
        thermal.append(ThermalPlant(
            id=d["id"], bus_id=d["bus_id"], capacity=float(d["capacity"]),
            min_generation_when_on=float(d["min_generation_when_on"]),
            variable_cost=float(d["variable_cost"]), min_up_time=d.get("min_up_time", 1),
            min_down_time=d.get("min_down_time", 1), ramp_up=_num(d.get("ramp_up")),
            ramp_down=_num(d.get("ramp_down")), commitment_class=d.get("commitment_class"),
            fuel_contract_id=d.get("fuel_contract_id"),
            startup_cost=float(d.get("startup_cost", 0.0)),
            forced_outage_rate=float(d.get("forced_outage_rate", 0.0)),
            mean_time_to_repair=float(d.get("mean_time_to_repair", 24.0)),
            initial_status=d.get("initial_status", -24),
            initial_generation=float(d.get("initial_generation", 0.0)),
        ))

    contracts = []
    for i, c in enumerate(top.get("contracts", [])):
        p = f"{source}.contracts[{i}]"
        d = r.obj(c, p, {
            "id": ("str", True), "daily_nomination_max": ("num", True),
            "take_or_pay_min": ("num", True), "price": ("num", True), "heat_rates": ("dict", True),
        })
        if not r.complete:
            continue
        rates = []
        for k, v in d["heat_rates"].items():
            if not isinstance(v, _NUM):
                r.errors.append(f"{p}.heat_rates.{k}: expected num")
                continue
            rates.append((k, float(v)))
        contracts.append(FuelContract(d["id"], float(d["daily_nomination_max"]),
                                      float(d["take_or_pay_min"]), float(d["price"]), tuple(rates)))

    net = r.obj(top.get("network", {}), f"{source}.network", {
        "buses": ("list", True), "circuits": ("list", False), "markets": ("list", False),
        "allow_islands": ("bool", False),
    })
    buses = []
    for i, b in enumerate(net.get("buses", [])):
        d = r.obj(b, f"{source}.network.buses[{i}]", {
            "id": ("str", True), "load_site": ("str?", False), "elastic_segments": ("pairs", False),
        })
        if r.complete:
            buses.append(Bus(d["id"], d.get("load_site"), _pairs(d.get("elastic_segments", []))))
    circuits = []
    for i, c in enumerate(net.get("circuits", [])):
        d = r.obj(c, f"{source}.network.circuits[{i}]", {
            "id": ("str", True), "from": ("str", True), "to": ("str", True),
            "capacity": ("num", True), "susceptance": ("num?", False),
        })
        if r.complete:
            sus = d.get("susceptance")
            circuits.append(Circuit(d["id"], d["from"], d["to"], float(d["capacity"]),
                                    None if sus is None else float(sus)))
    markets = []
    for i, mk in enumerate(net.get("markets", [])):
        d = r.obj(mk, f"{source}.network.markets[{i}]", {
            "bus_id": ("str", True), "buy_segments": ("pairs", False), "sell_segments": ("pairs", False),
        })
        if r.complete:
            markets.append(MarketCurve(d["bus_id"], _pairs(d.get("buy_segments", [])),
                                       _pairs(d.get("sell_segments", []))))

    areas = []
    for i, a in enumerate(top.get("areas", [])):
        p = f"{source}.areas[{i}]"
        d = r.obj(a, p, {
            "id": ("str", True), "member_bus_ids": ("strs", True),
            "reserve_requirement": ("dict", False), "shared_resource_ids": ("strs", False),
        })
        if not r.complete:
            continue
        req = []
        for k, v in d.get("reserve_requirement", {}).items():
            if k not in RESERVE_PRODUCTS:
                r.errors.append(f"{p}.reserve_requirement.{k}: unknown reserve product")
            elif not isinstance(v, _NUM):
                r.errors.append(f"{p}.reserve_requirement.{k}: expected num")
            else:
                req.append((k, float(v)))
        areas.append(BalancingArea(d["id"], tuple(d["member_bus_ids"]), tuple(req),
                                   tuple(d.get("shared_resource_ids", []))))

    vre = []
    for i, v in enumerate(top.get("vre", [])):
        d = r.obj(v, f"{source}.vre[{i}]", {
            "id": ("str", True), "kind": ("str", True), "bus_id": ("str", True),
            "capacity": ("num", True), "variable": ("str", True), "site": ("str", True),
        })
        if r.complete:
            vre.append(VreUnit(d["id"], d["kind"], d["bus_id"], float(d["capacity"]),
                               d["variable"], d["site"]))

    if r.errors:
        raise ParseError(r.errors)
    kwargs = {}
    if "deficit_cost" in top:
        kwargs["deficit_cost"] = _pairs(top["deficit_cost"])
    return SystemModel(
        network=Network(tuple(buses), tuple(circuits), tuple(markets), net.get("allow_islands", False)),
        hydro=tuple(hydro), thermal=tuple(thermal), contracts=tuple(contracts), areas=tuple(areas),
        vre_units=tuple(vre), name=top.get("name", "system"), schema_version=top["schema_version"],
        **kwargs)


def load_system(path: str | Path) -> SystemModel:
    """Read, parse and validate a system file."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ParseError([f"{path}: {exc}"]) from exc
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError([f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}"]) from exc
    model = parse_system(data, path.name)
    violations = validate(model)
    if violations:
        raise ValidationError(violations)
    return model


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------
def _dupes(ids: list[str]) -> list[str]:
    seen, out = set(), []
    for i in ids:
        if i in seen and i not in out:
            out.append(i)
        seen.add(i)
    return out


def production_curve_violations(plant: HydroPlant) -> list[str]:
    pts = plant.production_segments
    out = []
    if len(pts) < 2:
        return [f"hydro {plant.id}: production curve needs at least two points"]
    if pts[0] != (0.0, 0.0):
        out.append(f"hydro {plant.id}: production curve must start at (0, 0)")
    slopes = []
    for k, ((q0, p0), (q1, p1)) in enumerate(zip(pts, pts[1:])):
        if q1 <= q0:
            out.append(f"hydro {plant.id}: production flows not increasing at point {k + 1}")
            return out
        slopes.append((p1 - p0) / (q1 - q0))
    for k, s in enumerate(slopes):
        if s < 0:
            out.append(f"hydro {plant.id}: production decreasing on segment {k}")
    for k in range(1, len(slopes)):
        if slopes[k] > slopes[k - 1] + 1e-12:
            out.append(f"hydro {plant.id}: production curve not concave between segments "
                       f"{k - 1} and {k} (slopes {slopes[k - 1]:g} < {slopes[k]:g})")
    if pts[-1][0] < plant.max_turbining - 1e-9:
        out.append(f"hydro {plant.id}: production curve ends before max_turbining")
    return out


def cascade_cycles(hydro: tuple[HydroPlant, ...]) -> list[list[str]]:
    nxt = {h.id: h.downstream_id for h in hydro}
    cycles, done = [], set()
    for start in nxt:
        path, pos = [], start
        while pos is not None and pos in nxt and pos not in done:
            if pos in path:
                cycles.append(path[path.index(pos):])
                break
            path.append(pos)
            pos = nxt[pos]
        done.update(path)
    return cycles


def validate(model: SystemModel) -> list[str]:
    """All invariant violations of ``model`` (empty when valid)."""
    v: list[str] = []
    buses = model.bus_ids
    bus_set = set(buses)
    for kind, ids in (
        ("bus", buses), ("hydro", [h.id for h in model.hydro]),
        ("thermal", [t.id for t in model.thermal]), ("contract", [c.id for c in model.contracts]),
        ("circuit", [c.id for c in model.network.circuits]), ("area", [a.id for a in model.areas]),
        ("vre", [u.id for u in model.vre_units]),
    ):
        for d in _dupes(ids):
            v.append(f"duplicate {kind} id {d}")
    resources = [h.id for h in model.hydro] + [t.id for t in model.thermal] + [u.id for u in model.vre_units]
    for d in _dupes(resources):
        v.append(f"resource id {d} used by more than one resource")
    if not buses:
        v.append("network has no buses")

    hydro_ids = {h.id for h in model.hydro}
    for h in model.hydro:
        if h.kind not in HYDRO_KINDS:
            v.append(f"hydro {h.id}: unknown kind {h.kind}")
        if h.bus_id not in bus_set:
            v.append(f"hydro {h.id}: unknown bus {h.bus_id}")
        if h.downstream_id is not None and h.downstream_id not in hydro_ids:
            v.append(f"hydro {h.id}: unknown downstream plant {h.downstream_id}")
        if h.kind == "run_of_river" and (h.max_storage != 0 or h.min_storage != 0):
            v.append(f"hydro {h.id}: run-of-river plant must have zero storage")
        if h.min_storage < 0 or h.min_storage > h.max_storage:
            v.append(f"hydro {h.id}: storage bounds invalid ({h.min_storage}, {h.max_storage})")
        if not (h.min_storage - 1e-9 <= h.initial_storage <= h.max_storage + 1e-9):
            v.append(f"hydro {h.id}: initial storage outside bounds")
        if h.max_turbining < 0:
            v.append(f"hydro {h.id}: negative max_turbining")
        if h.spill_bounds[0] < 0 or h.spill_bounds[0] > h.spill_bounds[1]:
            v.append(f"hydro {h.id}: invalid spill bounds {h.spill_bounds}")
        if h.flood_control_levels:
            if len(h.flood_control_levels) != WEEKS_PER_YEAR:
                v.append(f"hydro {h.id}: flood_control_levels needs {WEEKS_PER_YEAR} weekly values")
            if any(lv < h.min_storage for lv in h.flood_control_levels):
                v.append(f"hydro {h.id}: flood control level below min storage")
        v.extend(production_curve_violations(h))
    for cyc in cascade_cycles(model.hydro):
        v.append("hydro cascade has a cycle: " + " -> ".join(cyc + [cyc[0]]))

    contract_ids = {c.id for c in model.contracts}
    thermal_ids = {t.id for t in model.thermal}
    for t in model.thermal:
        if t.bus_id not in bus_set:
            v.append(f"thermal {t.id}: unknown bus {t.bus_id}")
        if not (0 <= t.min_generation_when_on <= t.capacity):
            v.append(f"thermal {t.id}: min generation must lie in [0, capacity]")
        if t.min_up_time < 1:
            v.append(f"thermal {t.id}: min_up_time must be >= 1 (got {t.min_up_time})")
        if t.min_down_time < 1:
            v.append(f"thermal {t.id}: min_down_time must be >= 1 (got {t.min_down_time})")
        if t.ramp_up <= 0 or t.ramp_down <= 0:
            v.append(f"thermal {t.id}: ramps must be positive")
        if t.commitment_class is not None:
            cls = t.commitment_class
            if cls not in COMMITMENT_CLASSES:
                v.append(f"thermal {t.id}: unknown commitment class {cls}")
            elif cls == "slow" and t.min_up_time < 24:
                v.append(f"thermal {t.id}: slow units need min_up_time >= 24 h")
            elif cls == "intermediate" and not 3 <= t.min_up_time <= 10:
                v.append(f"thermal {t.id}: intermediate units need min_up_time in 3..10 h")
            elif cls == "fast" and t.min_up_time > 3:
                v.append(f"thermal {t.id}: fast units need min_up_time <= 3 h")
        if t.fuel_contract_id is not None and t.fuel_contract_id not in contract_ids:
            v.append(f"thermal {t.id}: unknown fuel contract {t.fuel_contract_id}")
        if not 0 <= t.forced_outage_rate < 1:
            v.append(f"thermal {t.id}: forced_outage_rate must be in [0, 1)")
        if t.mean_time_to_repair <= 0:
            v.append(f"thermal {t.id}: mean_time_to_repair must be positive")
        if t.initial_status == 0:
            v.append(f"thermal {t.id}: initial_status must be nonzero")
    for c in model.contracts:
        if c.take_or_pay_min < 0 or c.take_or_pay_min > c.daily_nomination_max:
            v.append(f"contract {c.id}: take_or_pay_min must lie in [0, daily_nomination_max]")
        for pid, hr in c.heat_rates:
            if pid not in thermal_ids:
                v.append(f"contract {c.id}: heat rate for unknown plant {pid}")
            if hr <= 0:
                v.append(f"contract {c.id}: heat rate for {pid} must be positive")
    for t in model.thermal:
        if t.fuel_contract_id in contract_ids:
            if t.id not in dict(model.contract(t.fuel_contract_id).heat_rates):
                v.append(f"thermal {t.id}: contract {t.fuel_contract_id} lacks its heat rate")

    for c in model.network.circuits:
        for end in (c.from_bus, c.to_bus):
            if end not in bus_set:
                v.append(f"circuit {c.id}: unknown endpoint {end}")
        if c.capacity < 0:
            v.append(f"circuit {c.id}: negative capacity")
        if c.from_bus == c.to_bus:
            v.append(f"circuit {c.id}: connects a bus to itself")
        if c.susceptance is not None and c.susceptance <= 0:
            v.append(f"circuit {c.id}: susceptance must be positive")
    for b in model.network.buses:
        prices = [p for p, _ in b.elastic_segments]
        if any(q < 0 for _, q in b.elastic_segments):
            v.append(f"bus {b.id}: negative demand-response quantity")
        if prices != sorted(prices):
            v.append(f"bus {b.id}: demand-response segments must be ordered by price")
    for mk in model.network.markets:
        if mk.bus_id not in bus_set:
            v.append(f"market at unknown bus {mk.bus_id}")
        buy = [p for p, _ in mk.buy_segments]
        sell = [p for p, _ in mk.sell_segments]
        if buy != sorted(buy):
            v.append(f"market {mk.bus_id}: buy segments not monotone in price")
        if sell != sorted(sell, reverse=True):
            v.append(f"market {mk.bus_id}: sell segments not monotone in price")
        if any(q < 0 for _, q in mk.buy_segments + mk.sell_segments):
            v.append(f"market {mk.bus_id}: negative segment quantity")
        if buy and sell and max(sell) > min(buy):
            v.append(f"market {mk.bus_id}: sell price above buy price allows arbitrage")
    if len({mk.bus_id for mk in model.network.markets}) != len(model.network.markets):
        v.append("more than one market curve on the same bus")

    membership: dict[str, list[str]] = defaultdict(list)
    for a in model.areas:
        for b in a.member_bus_ids:
            membership[b].append(a.id)
            if b not in bus_set:
                v.append(f"area {a.id}: unknown bus {b}")
        for _, req in a.reserve_requirement:
            if req < 0:
                v.append(f"area {a.id}: negative reserve requirement")
        for rid in a.shared_resource_ids:
            if rid not in set(resources):
                v.append(f"area {a.id}: unknown shared resource {rid}")
    for b in buses:
        owners = membership.get(b, [])
        if len(owners) != 1:
            v.append(f"bus {b} belongs to {len(owners)} balancing areas (expected exactly 1)")

    for u in model.vre_units:
        if u.kind not in VRE_KINDS:
            v.append(f"vre {u.id}: unknown kind {u.kind}")
        if u.bus_id not in bus_set:
            v.append(f"vre {u.id}: unknown bus {u.bus_id}")
        if u.capacity < 0:
            v.append(f"vre {u.id}: negative capacity")

    steps = model.deficit_cost
    if not steps:
        v.append("deficit_cost needs at least one step")
    else:
        if any(f <= 0 for f, _ in steps):
            v.append("deficit_cost fractions must be positive")
        costs = [c for _, c in steps]
        if costs != sorted(costs):
            v.append("deficit_cost steps must have nondecreasing cost")
    if buses and not model.network.allow_islands and len(islands(model)) > 1:
        v.append(f"network is not connected ({len(islands(model))} islands) and allow_islands is false")
    return v


def islands(model: SystemModel) -> list[set[str]]:
    adj: dict[str, set[str]] = {b: set() for b in model.bus_ids}
    for c in model.network.circuits:
        if c.from_bus in adj and c.to_bus in adj:
            adj[c.from_bus].add(c.to_bus)
            adj[c.to_bus].add(c.from_bus)
    seen: set[str] = set()
    out = []
    for b in model.bus_ids:
        if b in seen:
            continue
        comp, stack = set(), [b]
        while stack:
            x = stack.pop()
            if x in comp:
                continue
            comp.add(x)
            stack.extend(adj[x] - comp)
        seen |= comp
        out.append(comp)
    return out


def topological_hydro(model: SystemModel) -> list[HydroPlant]:
    """Hydro plants ordered upstream first."""
    plants = {h.id: h for h in model.hydro}
    indeg = {h.id: 0 for h in model.hydro}
    for h in model.hydro:
        if h.downstream_id in indeg:
            indeg[h.downstream_id] += 1
    ready = [h.id for h in model.hydro if indeg[h.id] == 0]
    out = []
    while ready:
        pid = ready.pop(0)
        out.append(plants[pid])
        d = plants[pid].downstream_id
        if d in indeg:
            indeg[d] -= 1
            if indeg[d] == 0:
                ready.append(d)
    return out


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------
def _jnum(x: float):
    return None if x == float("inf") else x


def to_json(model: SystemModel) -> dict:
    return {
        "schema_version": model.schema_version,
        "name": model.name,
        "hydro": [{
            "id": h.id, "kind": h.kind, "bus_id": h.bus_id, "max_storage": h.max_storage,
            "min_storage": h.min_storage, "initial_storage": h.initial_storage,
            "max_turbining": h.max_turbining,
            "production_segments": [list(p) for p in h.production_segments],
            "inflow_site": h.inflow_site, "downstream_id": h.downstream_id,
            "spill_bounds": [h.spill_bounds[0], _jnum(h.spill_bounds[1])],
            "flood_control_levels": list(h.flood_control_levels),
        } for h in model.hydro],
        "thermal": [{
            "id": t.id, "bus_id": t.bus_id, "capacity": t.capacity,
            "min_generation_when_on": t.min_generation_when_on, "variable_cost": t.variable_cost,
            "min_up_time": t.min_up_time, "min_down_time": t.min_down_time,
            "ramp_up": _jnum(t.ramp_up), "ramp_down": _jnum(t.ramp_down),
            "commitment_class": t.commitment_class, "fuel_contract_id": t.fuel_contract_id,
            "startup_cost": t.startup_cost, "forced_outage_rate": t.forced_outage_rate,
            "mean_time_to_repair": t.mean_time_to_repair, "initial_status": t.initial_status,
            "initial_generation": t.initial_generation,
        } for t in model.thermal],
        "contracts": [{
            "id": c.id, "daily_nomination_max": c.daily_nomination_max,
            "take_or_pay_min": c.take_or_pay_min, "price": c.price,
            "heat_rates": dict(c.heat_rates),
        } for c in model.contracts],
        "network": {
            "buses": [{"id": b.id, "load_site": b.load_site,
                       "elastic_segments": [list(s) for s in b.elastic_segments]}
                      for b in model.network.buses],
            "circuits": [{"id": c.id, "from": c.from_bus, "to": c.to_bus, "capacity": c.capacity,
                          "susceptance": c.susceptance} for c in model.network.circuits],
            "markets": [{"bus_id": mk.bus_id, "buy_segments": [list(s) for s in mk.buy_segments],
                         "sell_segments": [list(s) for s in mk.sell_segments]}
                        for mk in model.network.markets],
            "allow_islands": model.network.allow_islands,
        },
        "areas": [{
            "id": a.id, "member_bus_ids": list(a.member_bus_ids),
            "reserve_requirement": dict(a.reserve_requirement),
            "shared_resource_ids": list(a.shared_resource_ids),
        } for a in model.areas],
        "vre": [dataclasses.asdict(u) for u in model.vre_units],
        "deficit_cost": [list(s) for s in model.deficit_cost],
    }


def write_system(model: SystemModel, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(to_json(model), indent=2) + "\n")
    return path


def replace(model: SystemModel, **changes) -> SystemModel:
    return dataclasses.replace(model, **changes)
