"""Mid-term weekly policy by stochastic dual dynamic programming.

Each week is an LP over 21 load blocks (three per day). Reservoir storage is
the state. Openings per stage are the scenario set's weeks, sampled
independently from stage to stage. Cuts approximate the expected cost-to-go
as a function of the storage at the start of a week.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .formulation import (
    CONTINUOUS, HM3_PER_FLOW_HOUR, PeriodInputs, PeriodModel, PeriodOptions, adapt_basis,
    build_period_model, extract, fuel_cost, system_series,
)
from .scenario import HOURS_PER_WEEK, ScenarioSet
from .solver import Basis, SimplexOptions, Status, solve_lp
from .system_model import SystemModel, validate

log = logging.getLogger(__name__)

# hours of the day in each of the three daily load blocks
DAY_BLOCKS = ((0, 7), (7, 19), (19, 24))
BLOCKS_PER_WEEK = 7 * len(DAY_BLOCKS)


class SolverFailure(RuntimeError):
    pass


def block_durations() -> np.ndarray:
    return np.array([b - a for _ in range(7) for a, b in DAY_BLOCKS], float)


def block_of_hour(hour_of_week: np.ndarray) -> np.ndarray:
    h = np.asarray(hour_of_week) % HOURS_PER_WEEK
    day, hod = h // 24, h % 24
    grp = np.where(hod < DAY_BLOCKS[0][1], 0, np.where(hod < DAY_BLOCKS[1][1], 1, 2))
    return day * len(DAY_BLOCKS) + grp


def block_average(hourly: np.ndarray) -> np.ndarray:
    """Average a (..., 168) array into (..., 21) blocks."""
    blk = block_of_hour(np.arange(HOURS_PER_WEEK))
    out = np.zeros(hourly.shape[:-1] + (BLOCKS_PER_WEEK,))
    np.add.at(out, (..., blk), hourly)
    return out / block_durations()


@dataclass
class Cut:
    intercept: float
    gradient: np.ndarray
    iteration: int = 0


@dataclass
class FutureCostFunction:
    """``cuts[t]`` bounds the expected cost from the start of week ``t`` onward."""

    reservoir_ids: list[str]
    cuts: list[list[Cut]]
    start_week: int = 0

    @property
    def weeks(self) -> int:
        return len(self.cuts)

    def arrays(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        if t < 0 or t >= len(self.cuts) or not self.cuts[t]:
            return np.zeros(0), np.zeros((0, len(self.reservoir_ids)))
        return (np.array([c.intercept for c in self.cuts[t]]),
                np.array([c.gradient for c in self.cuts[t]]))

    def add(self, t: int, cut: Cut) -> None:
        if len(cut.gradient) != len(self.reservoir_ids):
            raise ValueError("cut gradient does not match the reservoir count")
        self.cuts[t].append(cut)

    def save(self, path: str | Path) -> Path:
        """Text format: header lines, then ``week intercept gradients... iteration`` rows."""
        path = Path(path)
        lines = ["# cascadesim future cost function v1",
                 f"start_week {self.start_week}",
                 f"weeks {self.weeks}",
                 "reservoirs " + " ".join(self.reservoir_ids)]
        for t, cuts in enumerate(self.cuts):
            for c in cuts:
                lines.append(" ".join([str(t), repr(float(c.intercept))]
                                      + [repr(float(g)) for g in c.gradient] + [str(c.iteration)]))
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "FutureCostFunction":
        start, weeks, res = 0, 0, []
        rows = []
        for line in Path(path).read_text().splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            head, *rest = line.split()
            if head == "start_week":
                start = int(rest[0])
            elif head == "weeks":
                weeks = int(rest[0])
            elif head == "reservoirs":
                res = rest
            else:
                rows.append((int(head), [float(v) for v in rest[:-1]], int(rest[-1])))
        fcf = cls(res, [[] for _ in range(weeks)], start)
        for t, vals, it in rows:
            fcf.add(t, Cut(vals[0], np.array(vals[1:]), it))
        return fcf


def evaluate_fcf(fcf: FutureCostFunction, t: int, storages: Sequence[float]) -> float:
    """Max over the week's cuts of ``intercept + gradient·storage``; 0 without cuts."""
    alpha, beta = fcf.arrays(t)
    if alpha.size == 0:
        return 0.0
    return float(np.max(alpha + beta @ np.asarray(storages, float)))


@dataclass
class SddpConfig:
    max_iterations: int = 50
    forward_paths: Optional[int] = None      # default min(S, 20)
    stall_tolerance: float = 1e-4
    stall_iterations: int = 5
    stop_on_confidence: bool = True
    confidence_z: float = 1.96
    terminal_target: Optional[np.ndarray] = None   # hm³ per reservoir
    terminal_price: Optional[float] = None         # $/MWh used to value a storage shortfall
    max_cuts: int = 10_000
    simplex: SimplexOptions = field(default_factory=SimplexOptions)


@dataclass
class SddpLog:
    lower_bound: list[float] = field(default_factory=list)
    forward_mean: list[float] = field(default_factory=list)
    forward_std: list[float] = field(default_factory=list)
    cut_counts: list[int] = field(default_factory=list)
    stop_reason: str = ""
    wall_seconds: float = 0.0
    lp_solves: int = 0


@dataclass
class StageData:
    """Block inputs for every (week, opening): load (T, S, buses, 21) etc."""

    load: np.ndarray
    vre: np.ndarray
    inflow: np.ndarray     # (T, S, hydro) weekly mean m³/s
    start_week: int

    @property
    def T(self) -> int:
        return self.load.shape[0]

    @property
    def S(self) -> int:
        return self.load.shape[1]


def stage_data(model: SystemModel, sset: ScenarioSet, T: int, start_week: int = 0) -> StageData:
    nB, nU, nH = len(model.network.buses), len(model.vre_units), len(model.hydro)
    S = sset.S
    load = np.zeros((T, S, nB, BLOCKS_PER_WEEK))
    vre = np.zeros((T, S, nU, BLOCKS_PER_WEEK))
    inflow = np.zeros((T, S, nH))
    for t in range(T):
        hours = t * HOURS_PER_WEEK + np.arange(HOURS_PER_WEEK)
        for s in range(S):
            ld, vr, inf = system_series(model, sset, s, hours)
            load[t, s] = block_average(ld)
            vre[t, s] = block_average(vr)
            inflow[t, s] = inf.mean(axis=1)
    return StageData(load, vre, inflow, start_week)


def _terminal_cuts(model: SystemModel, cfg: SddpConfig) -> tuple[np.ndarray, np.ndarray]:
    """Shortfall penalty below the target storage, written as two cuts."""
    res = model.reservoirs()
    if cfg.terminal_target is None or not res:
        return np.zeros(0), np.zeros((0, len(res)))
    price = cfg.terminal_price
    if price is None:
        costs = np.array([t.variable_cost for t in model.thermal]) + fuel_cost(model)
        price = float(np.median(costs)) if costs.size else 0.0
    # MWh obtainable from one hm³ released through the plant and everything downstream
    by_id = {h.id: h for h in model.hydro}
    pen = np.zeros(len(res))
    for r, h in enumerate(res):
        mwh, cur = 0.0, h
        while cur is not None:
            segs = cur.segments()
            avg = sum(w * s for w, s in segs) / max(sum(w for w, _ in segs), 1e-12)
            mwh += avg / HM3_PER_FLOW_HOUR
            cur = by_id.get(cur.downstream_id) if cur.downstream_id else None
        pen[r] = price * mwh
    target = np.asarray(cfg.terminal_target, float)
    return np.array([0.0, float(pen @ target)]), np.vstack([np.zeros(len(res)), -pen])


def build_stage(model: SystemModel, data: StageData, t: int, fcf: FutureCostFunction,
                opening: int, storage: np.ndarray, terminal=None) -> PeriodModel:
    """Weekly LP for week ``t`` and ``opening`` starting from ``storage``."""
    if t >= data.T:
        raise ValueError(f"week {t} beyond horizon {data.T}")
    week_of_year = (data.start_week + t) % 52
    res = model.reservoirs()
    caps = np.array([h.storage_cap(week_of_year) for h in res])
    inputs = PeriodInputs(
        durations=block_durations(),
        load=data.load[t, opening],
        vre=data.vre[t, opening],
        inflow=np.repeat(data.inflow[t, opening][:, None], BLOCKS_PER_WEEK, axis=1),
        storage0=np.asarray(storage, float),
        storage_cap=np.repeat(caps[:, None], BLOCKS_PER_WEEK, axis=1),
        day=np.repeat(np.arange(7), len(DAY_BLOCKS)),
    )
    if t + 1 < data.T:
        cuts = fcf.arrays(t + 1)
    else:
        cuts = terminal if terminal is not None else None
    opts = PeriodOptions(commitment=[CONTINUOUS] * len(model.thermal), gas="priced",
                         end_cuts=cuts if cuts is not None and len(cuts[0]) else None,
                         startup_costs=False)
    return build_period_model(model, inputs, opts, name=f"sddp_w{t}_s{opening}")


def _stage_cost(pm: PeriodModel, sol, last: bool = False) -> float:
    """Objective without the cost-to-go term; the terminal penalty counts at the last week."""
    theta = pm.idx.get("future_cost")
    if theta is None or last:
        return sol.objective_value
    return sol.objective_value - float(sol.primal_values[theta])


def run_sddp(model: SystemModel, sset: ScenarioSet | StageData, T: int, max_iterations: int = 50,
             config: Optional[SddpConfig] = None, seed: int = 0, start_week: int = 0,
             storage0: Optional[np.ndarray] = None) -> tuple[FutureCostFunction, SddpLog]:
    cfg = config or SddpConfig(max_iterations=max_iterations)
    cfg.max_iterations = max_iterations if config is None else cfg.max_iterations
    problems = validate(model)
    if problems:
        from .system_model import ValidationError
        raise ValidationError(problems)
    if T < 1:
        raise ValueError("T must be >= 1")
    data = sset if isinstance(sset, StageData) else stage_data(model, sset, T, start_week)
    if data.T < T:
        raise ValueError("stage data shorter than T")
    S = data.S
    res = model.reservoirs()
    fcf = FutureCostFunction([h.id for h in res], [[] for _ in range(T)], start_week)
    terminal = _terminal_cuts(model, cfg)
    v0 = np.array([h.initial_storage for h in res]) if storage0 is None else np.asarray(storage0, float)
    K = min(S, 20) if cfg.forward_paths is None else min(cfg.forward_paths, S) if cfg.forward_paths else S
    rng = np.random.default_rng([seed, 0x5DD9])
    bases: dict[int, Basis] = {}
    logbook = SddpLog()
    t_start = time.perf_counter()

    def solve_stage(t, s, v, it):
        pm = build_stage(model, data, t, fcf, s, v, terminal)
        sol = solve_lp(pm.problem, cfg.simplex, adapt_basis(bases.get(t), pm.problem))
        logbook.lp_solves += 1
        if sol.status is not Status.OPTIMAL:
            raise SolverFailure(f"week {t} opening {s} iteration {it}: {sol.status.value}")
        bases[t] = sol.basis
        return pm, sol

    for it in range(1, cfg.max_iterations + 1):
        # forward pass
        if K == S:
            paths = np.array([rng.permutation(S) for _ in range(T)]).T
        else:
            paths = rng.integers(0, S, size=(K, T))
        states = np.zeros((T, K, len(res)))
        costs = np.zeros(K)
        for k in range(K):
            v = v0.copy()
            for t in range(T):
                states[t, k] = v
                pm, sol = solve_stage(t, paths[k, t], v, it)
                costs[k] += _stage_cost(pm, sol, t == T - 1)
                v = sol.primal_values[pm.idx["storage"][:, -1]]
        # backward pass: one averaged cut per visited state
        for t in range(T - 1, 0, -1):
            for k in range(K):
                v = states[t, k]
                objs, grads = [], []
                for s in range(S):
                    pm, sol = solve_stage(t, s, v, it)
                    wb = pm.idx["water_balance"][:, 0]
                    objs.append(sol.objective_value)
                    grads.append(sol.dual_values[wb])
                g = np.mean(grads, axis=0)
                q = float(np.mean(objs))
                if len(fcf.cuts[t]) < cfg.max_cuts:
                    fcf.add(t, Cut(q - float(g @ v), g, it))
        # lower bound at the first stage, with a cut for week 0 itself
        objs, grads = [], []
        for s in range(S):
            pm, sol = solve_stage(0, s, v0, it)
            objs.append(sol.objective_value)
            grads.append(sol.dual_values[pm.idx["water_balance"][:, 0]])
        lb = float(np.mean(objs))
        g0 = np.mean(grads, axis=0)
        fcf.add(0, Cut(lb - float(g0 @ v0), g0, it))
        mean, std = float(costs.mean()), float(costs.std(ddof=1)) if K > 1 else 0.0
        logbook.lower_bound.append(lb)
        logbook.forward_mean.append(mean)
        logbook.forward_std.append(std)
        logbook.cut_counts.append(sum(len(c) for c in fcf.cuts))
        log.info("sddp iteration %d: lower bound %.6g, forward mean %.6g", it, lb, mean)
        lbs = logbook.lower_bound
        if len(lbs) > cfg.stall_iterations:
            old = lbs[-1 - cfg.stall_iterations]
            if abs(lbs[-1] - old) <= cfg.stall_tolerance * max(1.0, abs(lbs[-1])):
                logbook.stop_reason = "lower bound stalled"
                break
        if cfg.stop_on_confidence and it > 1:
            half = cfg.confidence_z * std / np.sqrt(K)
            if abs(mean - lb) <= half + 1e-7 * max(1.0, abs(lb)):
                logbook.stop_reason = "forward mean within confidence band"
                break
    else:
        logbook.stop_reason = "iteration limit"
    logbook.wall_seconds = time.perf_counter() - t_start
    return fcf, logbook


def stage_solution(model: SystemModel, data: StageData, t: int, fcf: FutureCostFunction,
                   opening: int, storage: np.ndarray, config: Optional[SddpConfig] = None) -> dict:
    """Solve one stage and return its decisions (used by tests and the CLI)."""
    cfg = config or SddpConfig()
    pm = build_stage(model, data, t, fcf, opening, storage, _terminal_cuts(model, cfg))
    sol = solve_lp(pm.problem, cfg.simplex)
    if sol.status is not Status.OPTIMAL:
        raise SolverFailure(f"week {t} opening {opening}: {sol.status.value}")
    out = extract(pm, sol.primal_values, sol.dual_values)
    out["objective"] = sol.objective_value
    out["state_dual"] = sol.dual_values[pm.idx["water_balance"][:, 0]]
    out["stage_cost"] = _stage_cost(pm, sol, t == data.T - 1)
    return out
