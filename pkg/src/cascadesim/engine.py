"""Chronological simulation of scenario chains across a process pool.

Per scenario: week-ahead at each week start, day-ahead at each day start,
then hour-ahead and true-up every hour. Boundary layers run before the
hour-ahead of the boundary hour. Layers hand decisions down through
:func:`~cascadesim.scheduling.extract_and_fix`; the true-up hands the
realized state back through :func:`~cascadesim.trueup.apply_outcome`.
"""
from __future__ import annotations

import json
import logging
import math
import multiprocessing as mp
import os
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .forecast import LAYERS, ForecastProfile, compute_weights, forecast_series
from .formulation import _providers, system_series
from .scenario import HOURS_PER_WEEK, ScenarioSet, generate, load_scenarios
from .scheduling import (
    DAY_AHEAD, HOUR_AHEAD, TRUE_UP, WEEK_AHEAD, Forecast, ScheduleResult, SchedulingConfig,
    StateInvariantViolation, SystemState, build_day_ahead, build_hour_ahead, build_week_ahead,
    extract_and_fix, shifted_start, solve_stage,
)
from .sddp import FutureCostFunction, SddpConfig, run_sddp
from .solver import MipOptions
from .store import Batch, PartitionWriter, ResultStore, batch_from_array, concat
from .system_model import RESERVE_PRODUCTS, SystemModel, load_system, to_json, validate
from .trueup import (
    TrueUpConfig, TrueUpData, TrueUpOutcome, area_net_load, build_trueup, outage_step,
    select_scenarios, solve_trueup, thermal_home,
)

log = logging.getLogger(__name__)

CONFIG_KEYS = {"system", "scenarios", "hours", "start_hour", "seed", "workers", "forecast", "perfect_forecast",
               "outages", "sddp", "scheduling", "trueup", "output_dir", "dry_run", "checkpoint", "resume"}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------- configuration
@dataclass
class RunConfig:
    seed: int
    scenarios: int = 1
    hours: int = 24
    start_hour: int = 0
    workers: int = 1
    profile: ForecastProfile = field(default_factory=ForecastProfile.perfect)
    perfect_forecast: bool = False
    outages: bool = True
    system_path: Optional[Path] = None
    par_model_path: Optional[Path] = None
    scenario_path: Optional[Path] = None       # pre-generated scenario file instead of a PAR model
    fcf_path: Optional[Path] = None            # skip SDDP and load this FCF
    sddp_iterations: int = 8
    sddp_forward_paths: Optional[int] = 10
    scheduling: SchedulingConfig = field(default_factory=SchedulingConfig)
    trueup: TrueUpConfig = field(default_factory=TrueUpConfig)
    output_dir: Path = Path("runs/out")
    dry_run: bool = False
    checkpoint: bool = True
    resume: bool = False
    raw: dict = field(default_factory=dict)    # the config as given, for the stamp

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        if self.scenarios < 1:
            raise ConfigError("scenario count must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.hours < 1:
            raise ConfigError("hours must be >= 1")
        if self.start_hour < 0:
            raise ConfigError("start_hour must be >= 0")
        self.output_dir = Path(self.output_dir)

    @property
    def weeks(self) -> int:
        """Week-ahead solves: complete weeks in the horizon, at least one."""
        return max(1, self.hours // HOURS_PER_WEEK)

    @property
    def days(self) -> int:
        return math.ceil(self.hours / 24)

    @property
    def expected_problems(self) -> int:
        return 2 * self.hours + self.days + self.weeks

    @property
    def forecast_profile(self) -> ForecastProfile:
        return ForecastProfile.perfect() if self.perfect_forecast else self.profile

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path = ".") -> "RunConfig":
        unknown = set(d) - CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if d.get("seed") is None:
            raise ConfigError("seed is mandatory")
        base = Path(base_dir)

        def path(v):
            return None if v is None else (Path(v) if Path(v).is_absolute() else base / v)

        sc = d.get("scenarios", {})
        if isinstance(sc, int):
            sc = {"count": sc}
        sd = d.get("sddp", {})
        sch = d.get("scheduling", {})
        tu = d.get("trueup", {})
        try:
            mip = MipOptions(relative_gap=float(sch.get("mip_gap", 1e-4)), node_limit=int(sch.get("node_limit", 5000)))
            scfg = SchedulingConfig(hour_ahead_integer_hours=int(sch.get("hour_ahead_integer_hours", 6)),
                                    ramps=bool(sch.get("ramps", True)), mip=mip)
            tcfg = TrueUpConfig(max_scenarios=int(tu.get("max_scenarios", 10)), ramps=bool(tu.get("ramps", True)))
            profile = ForecastProfile.from_dict(d["forecast"]) if "forecast" in d else ForecastProfile.perfect()
            return cls(
                seed=int(d["seed"]), scenarios=int(sc.get("count", 1)), hours=int(d.get("hours", 24)),
                start_hour=int(d.get("start_hour", 0)), workers=int(d.get("workers", 1)), profile=profile,
                perfect_forecast=bool(d.get("perfect_forecast", False)), outages=bool(d.get("outages", True)),
                system_path=path(d.get("system")), par_model_path=path(sc.get("par_model")),
                scenario_path=path(sc.get("file")), fcf_path=path(sd.get("fcf")),
                sddp_iterations=int(sd.get("max_iterations", 8)),
                sddp_forward_paths=sd.get("forward_paths", 10),
                scheduling=scfg, trueup=tcfg, output_dir=Path(d.get("output_dir", "runs/out")),
                dry_run=bool(d.get("dry_run", False)), checkpoint=bool(d.get("checkpoint", True)),
                resume=bool(d.get("resume", False)), raw=dict(d),
            )
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad config value: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d, path.parent)

    def stamp(self) -> dict:
        """Resolved settings that determine the results (worker count excluded)."""
        return {
            "seed": self.seed, "scenarios": self.scenarios, "hours": self.hours, "start_hour": self.start_hour,
            "forecast": self.forecast_profile.to_dict(), "perfect_forecast": self.perfect_forecast,
            "outages": self.outages,
            "sddp": {"max_iterations": self.sddp_iterations, "forward_paths": self.sddp_forward_paths,
                     "fcf": None if self.fcf_path is None else str(self.fcf_path)},
            "scheduling": {"hour_ahead_integer_hours": self.scheduling.hour_ahead_integer_hours,
                           "ramps": self.scheduling.ramps, "mip_gap": self.scheduling.mip.relative_gap,
                           "node_limit": self.scheduling.mip.node_limit},
            "trueup": {"max_scenarios": self.trueup.max_scenarios, "ramps": self.trueup.ramps},
        }


# ---------------------------------------------------------------------------- chronology
def chronology(start_hour: int, hours: int, weeks: Optional[int] = None) -> Iterator[tuple[int, str]]:
    """(absolute hour, layer) in execution order."""
    weeks = max(1, hours // HOURS_PER_WEEK) if weeks is None else weeks
    for r in range(hours):
        h = start_hour + r
        if r % HOURS_PER_WEEK == 0 and r // HOURS_PER_WEEK < weeks:
            yield h, WEEK_AHEAD
        if r % 24 == 0:
            yield h, DAY_AHEAD
        yield h, HOUR_AHEAD
        yield h, TRUE_UP


@dataclass
class ScenarioChain:
    scenario: int
    state: SystemState
    hour: int
    last: dict = field(default_factory=dict)          # layer -> latest result
    counts: dict = field(default_factory=lambda: {layer: 0 for layer in LAYERS})
    wall: dict = field(default_factory=lambda: {layer: 0.0 for layer in LAYERS})

    @property
    def week(self) -> int:
        return self.hour // HOURS_PER_WEEK

    @property
    def day(self) -> int:
        return self.hour // 24


def advance_hour(chain: ScenarioChain, outcome: TrueUpOutcome, model: SystemModel) -> ScenarioChain:
    """Install the realized state and move the cursor one hour."""
    new = outcome.state
    if new is None or new.hour != chain.hour + 1:
        raise StateInvariantViolation(f"scenario {chain.scenario}: true-up state does not follow hour {chain.hour}")
    bad = new.check(model)
    if bad:
        raise StateInvariantViolation(f"scenario {chain.scenario} after hour {chain.hour}: " + "; ".join(bad))
    chain.state = new
    chain.hour += 1
    return chain


# ---------------------------------------------------------------------------- shared inputs
@dataclass
class RunInputs:
    """Immutable data shared by every chain."""

    config: RunConfig
    model: SystemModel
    sset: Optional[ScenarioSet]
    fcf: Optional[FutureCostFunction]
    area_net: Optional[np.ndarray] = None     # (S, areas, span) realized net load

    @property
    def store_dir(self) -> Path:
        return self.config.output_dir / "store"


def span_hours(cfg: RunConfig) -> int:
    """Scenario hours needed: the run plus lookahead, and one extra week for SDDP."""
    return max((cfg.weeks + 1) * HOURS_PER_WEEK, cfg.hours + 24)


def prepare(cfg: RunConfig, model: Optional[SystemModel] = None, sset: Optional[ScenarioSet] = None,
            fcf: Optional[FutureCostFunction] = None) -> tuple[RunInputs, dict]:
    """Load the system, generate scenarios and build the FCF. Returns inputs and SDDP info."""
    if model is None:
        if cfg.system_path is None:
            raise ConfigError("no system model given")
        model = load_system(cfg.system_path)
    info: dict = {}
    if cfg.dry_run:
        return RunInputs(cfg, model, None, None), info
    problems = validate(model)
    if problems:
        from .system_model import ValidationError
        raise ValidationError(problems)
    span = span_hours(cfg)
    if sset is None:
        if cfg.scenario_path is not None:
            sset = load_scenarios(cfg.scenario_path)
        elif cfg.par_model_path is not None:
            from .scenario import ParModel
            sset = generate(ParModel.load(cfg.par_model_path), cfg.scenarios, span, cfg.seed, cfg.start_hour)
        else:
            raise ConfigError("config names neither a PAR model nor a scenario file")
    if sset.S < cfg.scenarios:
        raise ConfigError(f"scenario set has {sset.S} scenarios, {cfg.scenarios} requested")
    if fcf is None and cfg.fcf_path is not None:
        fcf = FutureCostFunction.load(cfg.fcf_path)
    if fcf is None:
        t0 = time.perf_counter()
        fcf, sdlog = run_sddp(model, sset.subset(range(cfg.scenarios)), cfg.weeks + 1,
                              config=SddpConfig(max_iterations=cfg.sddp_iterations,
                                                forward_paths=cfg.sddp_forward_paths),
                              seed=cfg.seed, start_week=cfg.start_hour // HOURS_PER_WEEK)
        info = {"iterations": len(sdlog.lower_bound), "lower_bound": sdlog.lower_bound[-1] if sdlog.lower_bound else None,
                "stop_reason": sdlog.stop_reason, "wall_seconds": time.perf_counter() - t0}
    hrs = np.arange(sset.horizon_hours)
    area_net = np.stack([area_net_load(model, *system_series(model, sset, s, hrs)[:2]) for s in range(sset.S)])
    return RunInputs(cfg, model, sset, fcf, area_net), info


def layer_forecast(inputs: RunInputs, s: int, layer: str) -> Forecast:
    """Hourly system inputs seen by ``layer`` in scenario ``s``, from the run start."""
    sset, model = inputs.sset, inputs.model
    hrs = np.arange(sset.horizon_hours)
    if layer == TRUE_UP:
        ld, vr, inf = system_series(model, sset, s, hrs)
    else:
        fs = forecast_series(sset, s, inputs.config.forecast_profile, layer)
        one = ScenarioSet({v: a[:, None, :] for v, a in fs.items()}, dict(sset.sites), sset.start_hour)
        ld, vr, inf = system_series(model, one, 0, hrs)
    return Forecast(inputs.config.start_hour, ld, vr, inf)


# ---------------------------------------------------------------------------- records
class Recorder:
    """Buffers batches and appends them to the partition in one go."""

    def __init__(self, writer: Optional[PartitionWriter]):
        self.writer = writer
        self.buf: list[Batch] = []
        self.rows = 0

    def add(self, layer: str, kind: str, ids: Sequence[str], metric: str, arr, hours) -> None:
        arr = np.asarray(arr, float)
        hours = np.atleast_1d(np.asarray(hours, np.int64))
        if not len(ids) or not hours.size:
            return
        self.buf.append(batch_from_array(layer, kind, list(ids), metric, arr.reshape(len(ids), hours.size), hours))

    def flush(self) -> None:
        if self.writer is not None and self.buf:
            b = concat(self.buf)
            self.writer.append(b)
            self.rows += len(b)
        self.buf = []


def _ids(model: SystemModel) -> dict:
    res = [h.id for h in model.reservoirs()]
    return {
        "thermal": [t.id for t in model.thermal], "hydro": [h.id for h in model.hydro], "reservoir": res,
        "bus": list(model.bus_ids), "vre": [u.id for u in model.vre_units],
        "circuit": [c.id for c in model.network.circuits], "market": [m.bus_id for m in model.network.markets],
        "area": [a.id for a in model.areas] or ["system"], "contract": [c.id for c in model.contracts],
        "provider": [f"{(model.thermal if k == 'thermal' else model.hydro)[i].id}@{model.areas[a].id}"
                     for k, i, a in _providers(model)] if model.areas else [],
    }


def record_schedule(rec: Recorder, model: SystemModel, res: ScheduleResult, hours_kept: int) -> None:
    """Hourly records of a scheduling layer; the first ``hours_kept`` hours."""
    ids = _ids(model)
    dur = res.durations.astype(int)
    n = hours_kept
    hours = res.start + np.arange(n)
    dec, layer = res.decisions, res.layer

    def hourly(a):
        return np.repeat(np.asarray(a, float), dur, axis=-1)[..., :n]

    inp = res.pm.inputs
    rec.add(layer, "thermal", ids["thermal"], "thermal_generation", hourly(dec["thermal_gen"]), hours)
    rec.add(layer, "thermal", ids["thermal"], "commitment", hourly(dec["commit"]), hours)
    rec.add(layer, "hydro", ids["hydro"], "hydro_generation", hourly(dec["hydro_gen"]), hours)
    rec.add(layer, "hydro", ids["hydro"], "turbined", hourly(dec["turbined"]), hours)
    rec.add(layer, "hydro", ids["hydro"], "spill", hourly(dec["spill"]), hours)
    rec.add(layer, "hydro", ids["hydro"], "inflow", hourly(inp.inflow), hours)
    rec.add(layer, "hydro", ids["reservoir"], "storage", hourly(dec["storage"]), hours)
    if "water_value" in dec:
        rec.add(layer, "hydro", ids["reservoir"], "water_value", hourly(dec["water_value"]), hours)
    rec.add(layer, "bus", ids["bus"], "load", hourly(inp.load), hours)
    rec.add(layer, "bus", ids["bus"], "deficit", hourly(dec["deficit"]), hours)
    rec.add(layer, "bus", ids["bus"], "surplus", hourly(dec["surplus"]), hours)
    rec.add(layer, "bus", ids["bus"], "demand_response", hourly(dec["demand_response"]), hours)
    rec.add(layer, "vre", ids["vre"], "vre_generation", hourly(inp.vre), hours)
    rec.add(layer, "circuit", ids["circuit"], "flow", hourly(dec["flow"]), hours)
    if ids["market"]:
        rec.add(layer, "market", ids["market"], "market_buy", hourly(dec["market_buy"]), hours)
        rec.add(layer, "market", ids["market"], "market_sell", hourly(dec["market_sell"]), hours)
    if "reserve" in dec and ids["provider"]:
        for k, prod in enumerate(RESERVE_PRODUCTS):
            rec.add(layer, "provider", ids["provider"], f"reserve_{prod}", hourly(dec["reserve"][:, k]), hours)
    if "gas_nomination" in dec and ids["contract"]:
        nom = np.asarray(dec["gas_nomination"], float)
        days = res.start + 24 * np.arange(nom.shape[1])
        rec.add(layer, "contract", ids["contract"], "gas_nomination", nom, days)
    rec.add(layer, "system", ["system"], "objective", [res.objective], [res.start])


def record_trueup(rec: Recorder, model: SystemModel, out: TrueUpOutcome, beta: np.ndarray, beta_slack: np.ndarray,
                  realized: Forecast, setpoints: dict) -> None:
    ids = _ids(model)
    h = [out.hour]
    r = out.hour - realized.start
    layer = TRUE_UP
    home = thermal_home(model)
    rec.add(layer, "thermal", ids["thermal"], "thermal_generation", out.dispatch, h)
    rec.add(layer, "thermal", ids["thermal"], "commitment", out.commit, h)
    rec.add(layer, "thermal", ids["thermal"], "outage", out.outage.astype(float), h)
    rec.add(layer, "thermal", ids["thermal"], "beta", beta[np.arange(len(home)), home], h)
    rec.add(layer, "hydro", ids["hydro"], "hydro_generation", out.hydro_gen, h)
    rec.add(layer, "hydro", ids["hydro"], "turbined", out.turbined, h)
    rec.add(layer, "hydro", ids["hydro"], "spill", out.spill, h)
    rec.add(layer, "hydro", ids["hydro"], "inflow", out.inflow, h)
    rec.add(layer, "hydro", ids["reservoir"], "storage", out.storage, h)
    rec.add(layer, "bus", ids["bus"], "load", realized.load[:, r], h)
    for key in ("deficit", "surplus", "demand_response"):
        rec.add(layer, "bus", ids["bus"], key, np.asarray(setpoints[key])[:, 0], h)
    rec.add(layer, "vre", ids["vre"], "vre_generation", realized.vre[:, r], h)
    rec.add(layer, "circuit", ids["circuit"], "flow", np.asarray(setpoints["flow"])[:, 0], h)
    if ids["market"]:
        rec.add(layer, "market", ids["market"], "market_buy", np.asarray(setpoints["market_buy"])[:, 0], h)
        rec.add(layer, "market", ids["market"], "market_sell", np.asarray(setpoints["market_sell"])[:, 0], h)
    rec.add(layer, "area", ids["area"], "xi", out.xi, h)
    rec.add(layer, "area", ids["area"], "deployment", out.deployment, h)
    rec.add(layer, "area", ids["area"], "unserved", out.unserved, h)
    rec.add(layer, "area", ids["area"], "curtailment", out.curtailment, h)
    rec.add(layer, "area", ids["area"], "beta_slack", beta_slack, h)
    rec.add(layer, "contract", ids["contract"], "gas_burn", out.gas_burn, h)
    rec.add(layer, "system", ["system"], "cost", [out.cost], h)
    rec.add(layer, "system", ["system"], "objective", [out.objective], h)


# ---------------------------------------------------------------------------- one chain
@dataclass
class ChainReport:
    scenario: int
    ok: bool
    counts: dict
    wall: dict
    rows: int = 0
    cost: float = 0.0
    error: Optional[dict] = None
    resumed_from: Optional[int] = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _checkpoint_path(cfg: RunConfig, s: int) -> Path:
    return cfg.output_dir / "checkpoints" / f"scenario-{s:05d}.json"


def _save_checkpoint(cfg: RunConfig, chain: ScenarioChain, offset: int) -> None:
    p = _checkpoint_path(cfg, chain.scenario)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(".tmp")
    tmp.write_text(json.dumps({"hour": chain.hour, "offset": offset, "counts": chain.counts,
                               "state": chain.state.to_dict()}))
    os.replace(tmp, p)


def run_chain(inputs: RunInputs, s: int, hook: Optional[Callable] = None) -> ChainReport:
    """Run scenario ``s`` end to end; failures are reported, not raised.

    ``hook(event, chain, payload)`` is called after every layer (for tests).
    """
    cfg, model = inputs.config, inputs.model
    chain = ScenarioChain(s, SystemState.initial(model, cfg.start_hour), cfg.start_hour)
    if cfg.dry_run:
        for hour, layer in chronology(cfg.start_hour, cfg.hours, cfg.weeks):
            chain.counts[layer] += 1
        return ChainReport(s, True, chain.counts, chain.wall)

    store = ResultStore(inputs.store_dir)
    resume_hour, offset = None, None
    ck = _checkpoint_path(cfg, s)
    if cfg.resume and ck.exists():
        d = json.loads(ck.read_text())
        if d.get("done"):
            return ChainReport(**d["report"])
        chain.state = SystemState.from_dict(d["state"])
        chain.hour = resume_hour = int(d["hour"])
        chain.counts = d["counts"]
        offset = int(d["offset"])
    layer, hour = "setup", chain.hour
    writer = None
    try:
        writer = PartitionWriter(store.partition_path(s), s, resume_offset=offset)
        rec = Recorder(writer)
        fc = {lay: layer_forecast(inputs, s, lay) for lay in LAYERS}
        realized = fc[TRUE_UP]
        ha_target = cfg.forecast_profile.target(HOUR_AHEAD)
        sys_net = inputs.area_net.sum(axis=1)          # (S, span)
        total_cost = 0.0
        saved = None
        t_day = time.perf_counter()
        for hour, layer in chronology(cfg.start_hour, cfg.hours, cfg.weeks):
            if resume_hour is not None and hour < resume_hour:
                continue
            if hour != chain.hour:
                raise StateInvariantViolation(f"cursor at {chain.hour}, schedule at {hour}")
            st = chain.state
            if cfg.checkpoint and layer in (WEEK_AHEAD, DAY_AHEAD) and saved != hour:
                rec.flush()
                _save_checkpoint(cfg, chain, writer.tell())
                saved = hour
            t0 = time.perf_counter()
            if layer == WEEK_AHEAD:
                k = (hour - cfg.start_hour) // HOURS_PER_WEEK
                pm = build_week_ahead(model, st, fc[WEEK_AHEAD], inputs.fcf, k, cfg.scheduling)
                res = solve_stage(pm, WEEK_AHEAD, cfg.scheduling)
                chain.state = extract_and_fix(st, res, model)
                record_schedule(rec, model, res, HOURS_PER_WEEK)
            elif layer == DAY_AHEAD:
                pm = build_day_ahead(model, st, fc[DAY_AHEAD], cfg.scheduling)
                res = solve_stage(pm, DAY_AHEAD, cfg.scheduling)
                chain.state = extract_and_fix(st, res, model)
                record_schedule(rec, model, res, 24)
            elif layer == HOUR_AHEAD:
                pm = build_hour_ahead(model, st, fc[HOUR_AHEAD], hour, cfg.scheduling)
                res = solve_stage(pm, HOUR_AHEAD, cfg.scheduling, shifted_start(chain.last.get(HOUR_AHEAD), pm))
                chain.state = extract_and_fix(st, res, model)
                record_schedule(rec, model, res, 1)
            else:
                data = trueup_data(inputs, s, st, fc[HOUR_AHEAD], realized, sys_net, ha_target)
                tp = build_trueup(model, st, data, cfg.trueup)
                policy, out = solve_trueup(tp, cfg.trueup)
                record_trueup(rec, model, out, policy.beta, policy.beta_slack, realized, st.setpoints)
                total_cost += out.cost
                res = out
                advance_hour(chain, out, model)
            chain.last[layer] = res
            chain.counts[layer] += 1
            chain.wall[layer] += time.perf_counter() - t0
            if hook is not None:
                hook(layer, chain, res)
            if layer == TRUE_UP and (chain.hour - cfg.start_hour) % 24 == 0:
                rec.flush()
                log.info("scenario %d day %d done: cost %.0f, %.1f s", s, (chain.hour - cfg.start_hour) // 24 - 1,
                         total_cost, time.perf_counter() - t_day)
                t_day = time.perf_counter()
        rec.flush()
        writer.finalize()
        report = ChainReport(s, True, chain.counts, chain.wall, writer.rows, total_cost, resumed_from=resume_hour)
        if cfg.checkpoint:
            ck.parent.mkdir(parents=True, exist_ok=True)
            ck.write_text(json.dumps({"done": True, "report": report.to_dict()}))
        return report
    except Exception as exc:   # isolate the chain; the run continues
        log.error("scenario %d failed at hour %d in %s: %s", s, hour, layer, exc)
        if writer is not None:
            try:
                rec.flush()          # completed layers are kept
                writer.finalize()
            except Exception:
                writer.close()
        err = {"scenario": s, "hour": hour, "layer": layer, "type": type(exc).__name__, "message": str(exc),
               "traceback": traceback.format_exc()}
        return ChainReport(s, False, chain.counts, chain.wall, writer.rows if writer else 0, error=err)


def trueup_data(inputs: RunInputs, s: int, state: SystemState, ha: Forecast, realized: Forecast,
                sys_net: np.ndarray, target) -> TrueUpData:
    """Realization for the state's hour plus the highest-weight scenarios for the next two hours."""
    cfg, model = inputs.config, inputs.model
    h = state.hour
    r = h - cfg.start_hour
    outage = state.outage.copy()
    if cfg.outages:
        outage = outage_step(model, outage, np.random.default_rng([cfg.seed, s, h]))
    S = cfg.scenarios
    w = compute_weights(sys_net[:S, r + 1], s, target).weights
    keep = np.flatnonzero(w > 0)
    sel, p = select_scenarios(w[keep], cfg.trueup.max_scenarios)
    sel = keep[sel]
    return TrueUpData(
        hour=h,
        realized_net=inputs.area_net[s, :, r],
        forecast_net=area_net_load(model, ha.load[:, r:r + 3], ha.vre[:, r:r + 3]),
        scenario_net=inputs.area_net[sel][:, :, r + 1:r + 3],
        probabilities=p,
        outage=outage,
        inflow=realized.inflow[:, r],
    )


# ---------------------------------------------------------------------------- worker pool
_SHARED: dict = {}


def _child(fn, item, conn, slot):
    try:
        conn.send(("ok", slot, fn(item)))
    except BaseException as exc:    # noqa: BLE001 - reported to the parent
        conn.send(("error", slot, f"{type(exc).__name__}: {exc}"))
    finally:
        conn.close()


def dispatch_workers(items: Sequence, workers: int, fn: Callable, on_panic: Optional[Callable] = None) -> list:
    """Run ``fn(item)`` for every item, each in its own process, at most ``workers`` at once.

    Work-conserving: a slot is refilled as soon as its process ends. A process
    that dies without a result yields ``on_panic(item, message)`` in its place.
    Results come back in item order. ``workers == 1`` runs inline.
    """
    on_panic = on_panic or (lambda item, msg: RuntimeError(msg))
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    ctx = mp.get_context("fork")
    results: dict[int, object] = {}
    pending = list(range(len(items)))
    running: dict[int, tuple] = {}
    free = list(range(min(workers, len(items))))[::-1]
    while pending or running:
        while pending and free:
            i = pending.pop(0)
            slot = free.pop()
            recv, send = ctx.Pipe(duplex=False)
            p = ctx.Process(target=_child, args=(fn, items[i], send, slot), daemon=True)
            p.start()
            send.close()
            running[i] = (p, recv, slot)
        ready = mp.connection.wait([r for _, r, _ in running.values()])
        for i in [i for i, (_, r, _) in running.items() if r in ready]:
            p, recv, slot = running.pop(i)
            try:
                kind, _, val = recv.recv()
                results[i] = val if kind == "ok" else on_panic(items[i], val)
            except EOFError:
                p.join()
                results[i] = on_panic(items[i], f"worker process exited with code {p.exitcode}")
            recv.close()
            p.join()
            free.append(slot)
    return [results[i] for i in range(len(items))]


def _chain_job(s: int) -> ChainReport:
    return run_chain(_SHARED["inputs"], s)


# ---------------------------------------------------------------------------- run
def write_meta(inputs: RunInputs) -> None:
    cfg = inputs.config
    ResultStore(inputs.store_dir).write_meta({"system": to_json(inputs.model), "run": cfg.stamp(),
                                             "layers": list(LAYERS)})


def run(config: RunConfig, model: Optional[SystemModel] = None, sset: Optional[ScenarioSet] = None,
        fcf: Optional[FutureCostFunction] = None) -> dict:
    """Simulate every scenario chain and return the JSON-ready run summary."""
    t_run = time.perf_counter()
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    inputs, sddp_info = prepare(config, model, sset, fcf)
    cfg = inputs.config
    if not cfg.dry_run:
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        write_meta(inputs)
        if inputs.fcf is not None:
            inputs.fcf.save(cfg.output_dir / "fcf.txt")
    _SHARED["inputs"] = inputs
    scen = list(range(cfg.scenarios))

    def panic(s, msg):
        return ChainReport(s, False, {layer: 0 for layer in LAYERS}, {layer: 0.0 for layer in LAYERS},
                           error={"scenario": s, "type": "WorkerPanic", "message": msg})

    try:
        reports = dispatch_workers(scen, min(cfg.workers, len(scen)), _chain_job, panic)
    finally:
        _SHARED.clear()
    counts = {layer: sum(r.counts.get(layer, 0) for r in reports) for layer in LAYERS}
    summary = {
        "scenarios": cfg.scenarios, "hours": cfg.hours, "start_hour": cfg.start_hour, "weeks": cfg.weeks,
        "days": cfg.days, "seed": cfg.seed, "workers": cfg.workers, "dry_run": cfg.dry_run,
        "expected_problems_per_scenario": cfg.expected_problems,
        "problems_per_scenario": {str(r.scenario): sum(r.counts.values()) for r in reports},
        "counts": counts, "total_problems": sum(counts.values()),
        "wall_seconds": {**{layer: sum(r.wall.get(layer, 0.0) for r in reports) for layer in LAYERS},
                         "sddp": sddp_info.get("wall_seconds", 0.0), "total": time.perf_counter() - t_run},
        "sddp": sddp_info,
        "rows": sum(r.rows for r in reports),
        "cost": {str(r.scenario): r.cost for r in reports if r.ok},
        "completed": [r.scenario for r in reports if r.ok],
        "failures": [r.error for r in reports if not r.ok],
    }
    if not cfg.dry_run:
        (cfg.output_dir / "summary.json").write_text(json.dumps(summary, indent=2, default=float) + "\n")
    return summary


__all__ = [
    "ChainReport", "ConfigError", "RunConfig", "RunInputs", "ScenarioChain", "advance_hour", "chronology",
    "dispatch_workers", "layer_forecast", "prepare", "record_schedule", "record_trueup", "run", "run_chain",
    "span_hours", "trueup_data",
]
