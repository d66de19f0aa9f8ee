"""Week-ahead, day-ahead and hour-ahead scheduling problems.

Each layer builds a :class:`~cascadesim.formulation.PeriodModel` from the
current :class:`SystemState`, the layer's forecasts and whatever the upper
layers fixed. :func:`extract_and_fix` folds a solved layer back into the
state that the layers below read.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .formulation import (
    COMMITTED, CONTINUOUS, FIXED, InfeasibleStage, PeriodInputs, PeriodModel, PeriodOptions,
    UnitState, build_period_model, extract, shift_basis,
)
from .scenario import week_of_hour
from .sddp import DAY_BLOCKS, FutureCostFunction, block_average, block_durations
from .solver import MipOptions, NodeLimitExceeded, Status, solve, write_mps
from .system_model import RESERVE_PRODUCTS, SystemModel

log = logging.getLogger(__name__)

WEEK_AHEAD, DAY_AHEAD, HOUR_AHEAD, TRUE_UP = "week_ahead", "day_ahead", "hour_ahead", "true_up"
SCHEDULING_LAYERS = (WEEK_AHEAD, DAY_AHEAD, HOUR_AHEAD)


class StateInvariantViolation(RuntimeError):
    pass


@dataclass
class Forecast:
    """Hourly system-level inputs starting at absolute hour ``start``."""

    start: int
    load: np.ndarray     # (buses, H) MW
    vre: np.ndarray      # (vre units, H) MW
    inflow: np.ndarray   # (hydro, H) m³/s

    @property
    def hours(self) -> int:
        return self.load.shape[1]

    def window(self, start: int, length: int) -> "Forecast":
        a = start - self.start
        if a < 0 or a + length > self.hours:
            raise IndexError(f"forecast covers [{self.start}, {self.start + self.hours}), "
                             f"requested [{start}, {start + length})")
        return Forecast(start, self.load[:, a:a + length], self.vre[:, a:a + length],
                        self.inflow[:, a:a + length])


@dataclass
class SystemState:
    """Everything the next problem needs to know about the past and the upper layers."""

    hour: int
    storage: np.ndarray           # (reservoirs,) hm³
    on: np.ndarray                # (thermal,) bool
    hours_in_state: np.ndarray    # (thermal,) h
    generation: np.ndarray        # (thermal,) MW
    gas_remaining: np.ndarray     # (contracts,) MMBtu left of today's nomination
    outage: np.ndarray            # (thermal,) bool
    plans: dict = field(default_factory=dict)          # layer -> (start hour, (thermal, L) on/off)
    reserves: Optional[tuple] = None                   # (start, (providers, products, L) MW)
    week_values: Optional[tuple] = None                # (start, (reservoirs, L) $/hm³)
    day_values: Optional[tuple] = None                 # (start, (reservoirs, L) $/hm³)
    targets: Optional[tuple] = None                    # (first day start, (reservoirs, days) hm³ end-of-day)
    nominations: Optional[tuple] = None                # (day start, (contracts,) MMBtu)
    setpoints: Optional[dict] = None                   # hour-ahead decisions for the true-up

    @classmethod
    def initial(cls, model: SystemModel, hour: int = 0) -> "SystemState":
        st = np.array([t.initial_status for t in model.thermal], float)
        return cls(
            hour=hour,
            storage=np.array([h.initial_storage for h in model.reservoirs()], float),
            on=st > 0,
            hours_in_state=np.abs(st),
            generation=np.array([t.initial_generation if t.initial_status > 0 else 0.0
                                 for t in model.thermal], float),
            gas_remaining=np.array([c.daily_nomination_max for c in model.contracts], float),
            outage=np.zeros(len(model.thermal), bool),
        )

    def copy(self) -> "SystemState":
        return copy.deepcopy(self)

    def unit_state(self) -> UnitState:
        return UnitState(self.on.copy(), self.hours_in_state.copy(), self.generation.copy())

    def check(self, model: SystemModel, tol: float = 1e-6) -> list[str]:
        out = []
        for r, h in enumerate(model.reservoirs()):
            if not h.min_storage - tol <= self.storage[r] <= h.max_storage + tol:
                out.append(f"storage of {h.id} = {self.storage[r]} outside "
                           f"[{h.min_storage}, {h.max_storage}]")
        if np.any(self.hours_in_state < 0):
            out.append("negative time-in-state counter")
        return out

    def plan(self, layer: str, hours: np.ndarray) -> np.ndarray:
        """(thermal, len(hours)) on/off plan of ``layer``; NaN where not covered."""
        out = np.full((self.on.size, len(hours)), np.nan)
        if layer in self.plans:
            start, arr = self.plans[layer]
            k = np.asarray(hours) - start
            ok = (k >= 0) & (k < arr.shape[1])
            out[:, ok] = arr[:, k[ok]]
        return out

    # serialization for checkpoints
    def to_dict(self) -> dict:
        def enc(v):
            if isinstance(v, np.ndarray):
                return {"__array__": v.tolist(), "dtype": str(v.dtype)}
            if isinstance(v, tuple):
                return {"__tuple__": [enc(x) for x in v]}
            if isinstance(v, dict):
                return {k: enc(x) for k, x in v.items()}
            return v
        return {k: enc(getattr(self, k)) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "SystemState":
        def dec(v):
            if isinstance(v, dict) and "__array__" in v:
                return np.array(v["__array__"], dtype=v["dtype"])
            if isinstance(v, dict) and "__tuple__" in v:
                return tuple(dec(x) for x in v["__tuple__"])
            if isinstance(v, dict):
                return {k: dec(x) for k, x in v.items()}
            return v
        return cls(**{k: dec(v) for k, v in d.items()})


@dataclass
class SchedulingConfig:
    hour_ahead_integer_hours: int = 6
    hour_groups: tuple = DAY_BLOCKS            # day-ahead target hand-off groups
    target_penalty_factor: float = 10.0        # × max thermal cost, per hm³
    ramps: bool = True
    mip: MipOptions = field(default_factory=lambda: MipOptions(relative_gap=1e-4, node_limit=5000))
    dump_dir: Optional[Path] = None
    scenario: int = 0                          # tag for MPS dumps


@dataclass
class ScheduleResult:
    layer: str
    start: int                 # absolute hour of the first period
    durations: np.ndarray
    decisions: dict
    objective: float
    pm: Optional[PeriodModel] = None
    basis: object = None
    nodes: int = 0
    gap: float = 0.0

    @property
    def period_starts(self) -> np.ndarray:
        return self.start + np.concatenate([[0.0], np.cumsum(self.durations)[:-1]]).astype(int)

    def hourly(self, key: str) -> np.ndarray:
        """Decision expanded from periods to hours along the last axis."""
        arr = np.asarray(self.decisions[key])
        return np.repeat(arr, self.durations.astype(int), axis=-1)


def _classes(model: SystemModel) -> np.ndarray:
    return np.array([t.commitment_class or "" for t in model.thermal], dtype=object)


def availability(model: SystemModel, state: SystemState, starts: np.ndarray) -> np.ndarray:
    """Units on outage are expected back after their mean time to repair."""
    rel = np.asarray(starts) - state.hour
    mttr = np.array([t.mean_time_to_repair for t in model.thermal])
    out = np.ones((len(model.thermal), len(rel)))
    out[state.outage[:, None] & (rel[None, :] < mttr[:, None])] = 0.0
    return out


def _storage_caps(model: SystemModel, abs_hours: np.ndarray, year_offset: int) -> np.ndarray:
    weeks = week_of_hour(np.asarray(abs_hours) + year_offset)
    return np.array([[h.storage_cap(int(w)) for w in weeks] for h in model.reservoirs()]).reshape(
        len(model.reservoirs()), len(abs_hours))


def _held(plan: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    """Fill NaN gaps by holding the last known value (``fallback`` before the first)."""
    out = plan.copy()
    prev = np.asarray(fallback, float).copy()
    for t in range(out.shape[1]):
        miss = np.isnan(out[:, t])
        out[miss, t] = prev[miss]
        prev = out[:, t]
    return out


def repair_plan(model: SystemModel, state: SystemState, plan: np.ndarray, units) -> np.ndarray:
    """Make an inherited hourly on/off plan honour min up/down times and the shutdown ramp
    from the current state, holding the present status wherever the plan would break them."""
    from .formulation import _ramp_down_hours
    out = np.asarray(plan, float).copy()
    for i in units:
        t_u = model.thermal[i]
        on = bool(state.on[i])
        run = float(state.hours_in_state[i])
        hold_on = _ramp_down_hours(t_u, state.generation[i]) if on else 0.0
        for t in range(out.shape[1]):
            want = out[i, t] > 0.5
            if want != on:
                limit = t_u.min_up_time if on else t_u.min_down_time
                if run < limit or (on and t < hold_on):
                    want = on
            if want != on:
                on, run = want, 0.0
            out[i, t] = float(on)
            run += 1.0
    return out


def _window_values(item: Optional[tuple], hours: np.ndarray) -> Optional[np.ndarray]:
    if item is None:
        return None
    start, arr = item
    k = np.clip(np.asarray(hours) - start, 0, arr.shape[-1] - 1)
    return arr[..., k]


def _dump(pm: PeriodModel, cfg: SchedulingConfig, layer: str, hour: int) -> None:
    if cfg.dump_dir is None:
        return
    d = Path(cfg.dump_dir)
    d.mkdir(parents=True, exist_ok=True)
    name = f"s{cfg.scenario}_{layer}_h{hour}.mps"
    write_mps(pm.builder.build(with_names=True), d / name)
    with open(d / "manifest.txt", "a") as fh:
        fh.write(f"{cfg.scenario} {layer} {hour} {name}\n")


# ---------------------------------------------------------------------------- builders
def build_week_ahead(model: SystemModel, state: SystemState, forecast: Forecast,
                     fcf: Optional[FutureCostFunction], week: int, cfg: Optional[SchedulingConfig] = None,
                     year_offset: int = 0) -> PeriodModel:
    """21-block week; only slow units carry binaries; FCF on the end-of-week storage."""
    cfg = cfg or SchedulingConfig()
    fc = forecast.window(state.hour, 168)
    dur = block_durations()
    starts = state.hour + np.concatenate([[0.0], np.cumsum(dur)[:-1]]).astype(int)
    classes = _classes(model)
    modes = [COMMITTED if c == "slow" else CONTINUOUS for c in classes]
    P = dur.size
    inputs = PeriodInputs(
        durations=dur, load=block_average(fc.load), vre=block_average(fc.vre),
        inflow=block_average(fc.inflow), storage0=state.storage.copy(),
        storage_cap=_storage_caps(model, starts, year_offset),
        thermal_available=availability(model, state, starts),
        day=np.repeat(np.arange(7), len(DAY_BLOCKS)),
    )
    cuts = fcf.arrays(week + 1) if fcf is not None else None
    daily_max = np.array([c.daily_nomination_max for c in model.contracts])[:, None] * np.ones(7)
    opts = PeriodOptions(
        commitment=modes, integer_periods=np.ones((len(modes), P), bool),
        unit_state=state.unit_state(), ramps=False, gas="bounded", gas_volume=daily_max,
        end_cuts=cuts if cuts is not None and len(cuts[0]) else None,
    )
    pm = build_period_model(model, inputs, opts, name=f"week_ahead_h{state.hour}")
    _dump(pm, cfg, WEEK_AHEAD, state.hour)
    return pm


def build_day_ahead(model: SystemModel, state: SystemState, forecast: Forecast,
                    cfg: Optional[SchedulingConfig] = None, year_offset: int = 0) -> PeriodModel:
    """24 h; intermediate units binary, slow units fixed by the week plan, fast units relaxed."""
    cfg = cfg or SchedulingConfig()
    fc = forecast.window(state.hour, 24)
    hours = state.hour + np.arange(24)
    classes = _classes(model)
    modes = []
    for c in classes:
        modes.append(FIXED if c == "slow" else COMMITTED if c in ("intermediate", "fast") else CONTINUOUS)
    integ = np.zeros((len(modes), 24), bool)
    integ[classes == "intermediate"] = True
    fixed_on = _held(state.plan(WEEK_AHEAD, hours), state.on)
    fixed_on = repair_plan(model, state, fixed_on, np.flatnonzero(classes == "slow"))
    inputs = PeriodInputs(
        durations=np.ones(24), load=fc.load, vre=fc.vre, inflow=fc.inflow,
        storage0=state.storage.copy(), storage_cap=_storage_caps(model, hours, year_offset),
        thermal_available=availability(model, state, hours), day=np.zeros(24, int),
    )
    end_value = _window_values(state.week_values, np.array([state.hour + 23]))
    target = day_targets_for(state, state.hour)
    opts = PeriodOptions(
        commitment=modes, integer_periods=integ, fixed_on=fixed_on, unit_state=state.unit_state(),
        ramps=cfg.ramps, reserves="optimize", gas="nominate",
        end_value=None if end_value is None else end_value[:, 0],
        end_target=target,
        end_target_penalty=cfg.target_penalty_factor * model.max_thermal_cost(),
    )
    pm = build_period_model(model, inputs, opts, name=f"day_ahead_h{state.hour}")
    _dump(pm, cfg, DAY_AHEAD, state.hour)
    return pm


def build_hour_ahead(model: SystemModel, state: SystemState, forecast: Forecast,
                     current_hour: Optional[int] = None, cfg: Optional[SchedulingConfig] = None,
                     year_offset: int = 0, day_start: Optional[int] = None) -> PeriodModel:
    """Rolling 24 h lookahead from ``current_hour``; binaries only for fast units in the first hours."""
    cfg = cfg or SchedulingConfig()
    h0 = state.hour if current_hour is None else current_hour
    fc = forecast.window(h0, 24)
    hours = h0 + np.arange(24)
    classes = _classes(model)
    modes = [FIXED if c in ("slow", "intermediate") else COMMITTED if c == "fast" else CONTINUOUS
             for c in classes]
    integ = np.zeros((len(modes), 24), bool)
    integ[np.ix_(classes == "fast", np.arange(24) < cfg.hour_ahead_integer_hours)] = True
    week_plan = state.plan(WEEK_AHEAD, hours)
    day_plan = state.plan(DAY_AHEAD, hours)
    plan = np.where(np.isnan(day_plan), week_plan, day_plan)
    plan[classes == "slow"] = week_plan[classes == "slow"]
    fixed_on = _held(plan, state.on)
    fixed_on = repair_plan(model, state, fixed_on, [i for i, mo in enumerate(modes) if mo == FIXED])
    # gas: remaining nomination until the end of the current day, contract maximum after
    ds = state.hour - state.hour % 24 if day_start is None else day_start
    day = (hours >= ds + 24).astype(int)
    day = np.minimum(day, 1)
    vol = np.zeros((len(model.contracts), 2))
    vol[:, 0] = np.maximum(state.gas_remaining, 0.0)
    vol[:, 1] = [c.daily_nomination_max for c in model.contracts]
    reserves = "none"
    fixed_res = None
    if state.reserves is not None:
        reserves = "fixed"
        fixed_res = _window_values(state.reserves, hours)
    end_value = _window_values(state.day_values, np.array([h0 + 23]))
    if end_value is None:
        end_value = _window_values(state.week_values, np.array([h0 + 23]))
    inputs = PeriodInputs(
        durations=np.ones(24), load=fc.load, vre=fc.vre, inflow=fc.inflow,
        storage0=state.storage.copy(), storage_cap=_storage_caps(model, hours, year_offset),
        thermal_available=availability(model, state, hours), day=day,
    )
    opts = PeriodOptions(
        commitment=modes, integer_periods=integ, fixed_on=fixed_on, unit_state=state.unit_state(),
        ramps=cfg.ramps, reserves=reserves, fixed_reserves=fixed_res, gas="bounded", gas_volume=vol,
        end_value=None if end_value is None else end_value[:, 0],
    )
    pm = build_period_model(model, inputs, opts, name=f"hour_ahead_h{h0}")
    _dump(pm, cfg, HOUR_AHEAD, h0)
    return pm


# ---------------------------------------------------------------------------- solve / hand-off
def _binding_row(pm: PeriodModel, x: np.ndarray) -> str:
    lp = pm.problem
    if x is None or not np.all(np.isfinite(x)):
        return "unknown"
    act = lp.matrix @ x
    viol = np.maximum(lp.row_lower - act, act - lp.row_upper)
    i = int(np.argmax(viol))
    names = pm.builder.build(with_names=True).row_names
    return names[i] if names else str(i)


def solve_stage(pm: PeriodModel, layer: str, cfg: Optional[SchedulingConfig] = None,
                warm_start=None) -> ScheduleResult:
    cfg = cfg or SchedulingConfig()
    try:
        sol = solve(pm.problem, cfg.mip, warm_start)
    except NodeLimitExceeded as exc:
        if exc.incumbent is None:
            raise InfeasibleStage(f"{pm.problem.name}: no integer solution within the node limit") from exc
        log.warning("%s: node limit reached, using the incumbent", pm.problem.name)
        sol = exc.incumbent
    if sol.status is not Status.OPTIMAL:
        raise InfeasibleStage(f"{pm.problem.name} is {sol.status.value}; "
                              f"most violated row {_binding_row(pm, sol.primal_values)}")
    dec = extract(pm, sol.primal_values, sol.dual_values)
    start = int(pm.problem.name.rsplit("_h", 1)[1])
    return ScheduleResult(layer, start, pm.inputs.durations.copy(), dec, float(sol.objective_value), pm,
                          sol.basis, getattr(sol, "nodes", 0), float(getattr(sol, "gap", 0.0)))


def shifted_start(previous: Optional[ScheduleResult], pm: PeriodModel, shift: int = 1):
    """Warm-start basis for ``pm`` from the previous rolling solve."""
    if previous is None or previous.basis is None or previous.pm is None:
        return None
    return shift_basis(previous.pm, previous.basis, pm, shift)


def extract_and_fix(state: SystemState, result: ScheduleResult, model: SystemModel) -> SystemState:
    """Hand the layer's binding decisions down by writing them into a new state."""
    new = state.copy()
    dec = result.decisions
    if result.layer == WEEK_AHEAD:
        new.plans[WEEK_AHEAD] = (result.start, result.hourly("commit"))
        new.week_values = (result.start, result.hourly("water_value"))
        storage = dec["storage"]
        per_day = len(DAY_BLOCKS)
        new.targets = (result.start, storage[:, per_day - 1::per_day])
    elif result.layer == DAY_AHEAD:
        new.plans[DAY_AHEAD] = (result.start, dec["commit"].copy())
        if "reserve" in dec:
            new.reserves = (result.start, dec["reserve"].copy())
        if "gas_nomination" in dec:
            nom = dec["gas_nomination"][:, 0].copy()
            new.nominations = (result.start, nom)
            new.gas_remaining = nom.copy()
        new.day_values = (result.start, dec["water_value"].copy())
    elif result.layer == HOUR_AHEAD:
        new.plans[HOUR_AHEAD] = (result.start, dec["commit"][:, :3].copy())
        keys = ("thermal_gen", "commit", "hydro_gen", "turbined", "spill", "storage", "flow", "deficit",
                "surplus", "demand_response", "market_buy", "market_sell")
        new.setpoints = {k: np.asarray(dec[k])[..., :3].copy() for k in keys}
        new.setpoints["hour"] = result.start
        new.setpoints["gas_use"] = dec["gas_use"].copy()
    else:
        raise ValueError(f"unknown layer {result.layer!r}")
    return new


def day_targets_for(state: SystemState, hour: int) -> Optional[np.ndarray]:
    """Week-ahead end-of-day storage target for the day starting at ``hour``."""
    if state.targets is None:
        return None
    start, arr = state.targets
    k = int(np.clip((hour - start) // 24, 0, arr.shape[1] - 1))
    return arr[:, k].copy()


def providers_reserve_by_area(model: SystemModel, reserve: np.ndarray) -> np.ndarray:
    """Sum provider allocations (providers, products, P) into (areas, products, P)."""
    from .formulation import _providers
    provs = _providers(model)
    out = np.zeros((len(model.areas), len(RESERVE_PRODUCTS)) + reserve.shape[2:])
    for p_i, (_, _, a_i) in enumerate(provs):
        out[a_i] += reserve[p_i]
    return out
