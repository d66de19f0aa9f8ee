"""Hourly scenario sets: periodic autoregressive generation, history import,
weekly aggregation and file IO.

Series are keyed by ``(variable, site)``. Inflows are flows (m³/s) and are
averaged per week; every other variable is a power (MW) and its weekly view
is the energy sum (MWh).
"""
from __future__ import annotations

import csv
import json
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

HOURS_PER_WEEK = 168
HOURS_PER_YEAR = 8760
WEEKS_PER_YEAR = 52
FLOW_VARIABLES = frozenset({"inflow"})

_MAGIC = b"CSSCEN01"


class InsufficientHistory(ValueError):
    pass


class SingularFit(ValueError):
    pass


class IncompleteYear(ValueError):
    pass


def week_of_hour(hours: np.ndarray, n_weeks: int = WEEKS_PER_YEAR, year_hours: int = HOURS_PER_YEAR,
                 period_hours: int = HOURS_PER_WEEK) -> np.ndarray:
    """Period index of absolute hours; the year's tail hours fold into the last period."""
    h = np.asarray(hours) % year_hours
    return np.minimum(h // period_hours, n_weeks - 1)


@dataclass
class ScenarioSet:
    """``data[var]`` has shape (sites, S, hours)."""

    data: dict[str, np.ndarray]
    sites: dict[str, list[str]]
    start_hour: int = 0
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {a.shape[1:] for a in self.data.values()}
        if len(shapes) > 1:
            raise ValueError(f"inconsistent scenario array shapes {shapes}")
        for var, arr in self.data.items():
            if arr.shape[0] != len(self.sites[var]):
                raise ValueError(f"{var}: {arr.shape[0]} rows for {len(self.sites[var])} sites")

    @property
    def S(self) -> int:
        return next(iter(self.data.values())).shape[1]

    @property
    def horizon_hours(self) -> int:
        return next(iter(self.data.values())).shape[2]

    @property
    def variables(self) -> list[str]:
        return list(self.data)

    def keys(self) -> list[tuple[str, str]]:
        return [(v, s) for v in self.data for s in self.sites[v]]

    def series(self, variable: str, site: str) -> np.ndarray:
        """(S, hours) array for one site."""
        return self.data[variable][self.sites[variable].index(site)]

    def has(self, variable: str, site: str) -> bool:
        return variable in self.data and site in self.sites[variable]

    def scenario(self, s: int) -> "ScenarioSet":
        return self.subset([s])

    def subset(self, scenarios: Sequence[int]) -> "ScenarioSet":
        idx = list(scenarios)
        return ScenarioSet({v: a[:, idx] for v, a in self.data.items()}, dict(self.sites), self.start_hour)

    def window(self, start: int, hours: int) -> "ScenarioSet":
        """Hours ``start .. start+hours`` (relative), wrapping past the end."""
        idx = (start + np.arange(hours)) % self.horizon_hours
        return ScenarioSet({v: a[:, :, idx] for v, a in self.data.items()}, dict(self.sites),
                           self.start_hour + start)

    def weekly_view(self) -> dict[str, np.ndarray]:
        return weekly_aggregate(self)

    def check(self) -> list[str]:
        problems = []
        for v, a in self.data.items():
            if not np.all(np.isfinite(a)):
                problems.append(f"{v}: non-finite values")
            if v in FLOW_VARIABLES and np.any(a < 0):
                problems.append(f"{v}: negative flows")
        return problems


def weekly_aggregate(sset: ScenarioSet) -> dict[str, np.ndarray]:
    """Per-week aggregates with shape (sites, S, weeks).

    A full 8760-hour year keeps its 24 tail hours in the last week. Otherwise
    a trailing partial week is dropped.
    """
    H = sset.horizon_hours
    if H % HOURS_PER_YEAR == 0 and sset.start_hour % HOURS_PER_YEAR == 0:
        weeks = week_of_hour(np.arange(H)) + WEEKS_PER_YEAR * (np.arange(H) // HOURS_PER_YEAR)
        n_weeks = WEEKS_PER_YEAR * (H // HOURS_PER_YEAR)
    else:
        n_weeks = H // HOURS_PER_WEEK
        if H % HOURS_PER_WEEK:
            warnings.warn(f"dropping {H % HOURS_PER_WEEK} hours of a trailing partial week",
                          stacklevel=2)
        weeks = np.arange(n_weeks * HOURS_PER_WEEK) // HOURS_PER_WEEK
    counts = np.bincount(weeks, minlength=n_weeks).astype(float)
    out = {}
    for var, arr in sset.data.items():
        a = arr[:, :, : weeks.size]
        sums = np.zeros(a.shape[:2] + (n_weeks,))
        np.add.at(sums, (slice(None), slice(None), weeks), a)
        out[var] = sums / counts if var in FLOW_VARIABLES else sums
    return out


# ---------------------------------------------------------------------------
# PAR model
# ---------------------------------------------------------------------------
@dataclass
class ParModel:
    """Periodic AR(p) on standardized (optionally log) values.

    ``x = mean[p] + std[p] * z`` (or ``exp`` of it in log space), multiplied by
    ``diurnal[hour % 24]``. ``z_t = Σ_k phi[p, :, k] z_{t-k} + sigma[p] * e_t``
    with ``e_t`` correlated across series through ``correlation``.
    """

    names: list[tuple[str, str]]
    mean: np.ndarray          # (P, n)
    std: np.ndarray           # (P, n)
    phi: np.ndarray           # (P, n, order)
    sigma: np.ndarray         # (P, n)
    correlation: np.ndarray   # (n, n)
    log_space: np.ndarray     # (n,) bool
    cap: np.ndarray           # (n,) upper clip, inf when unbounded
    diurnal: Optional[np.ndarray] = None   # (n, 24)
    period_hours: int = HOURS_PER_WEEK
    year_hours: int = HOURS_PER_YEAR
    initial: Optional[np.ndarray] = None   # (n, order) latest-first z history

    @property
    def order(self) -> int:
        return self.phi.shape[2]

    @property
    def n_periods(self) -> int:
        return self.mean.shape[0]

    def period(self, hours) -> np.ndarray:
        return week_of_hour(hours, self.n_periods, self.year_hours, self.period_hours)

    def cholesky(self) -> np.ndarray:
        c = np.asarray(self.correlation, float)
        n = c.shape[0]
        for jitter in (0.0, 1e-12, 1e-10, 1e-8):
            try:
                return np.linalg.cholesky(c + jitter * np.eye(n))
            except np.linalg.LinAlgError:
                continue
        raise ValueError("correlation matrix is not positive semidefinite")

    def validate(self) -> None:
        n = len(self.names)
        if self.mean.shape != self.std.shape or self.mean.shape[1] != n:
            raise ValueError("mean/std shape mismatch")
        if self.phi.shape[:2] != self.mean.shape or self.sigma.shape != self.mean.shape:
            raise ValueError("phi/sigma shape mismatch")
        if np.any(self.sigma < 0) or np.any(self.std < 0):
            raise ValueError("negative dispersion")
        if self.correlation.shape != (n, n):
            raise ValueError("correlation shape mismatch")
        self.cholesky()

    def implied_mean(self, hours: np.ndarray, burn_in_years: int = 2) -> np.ndarray:
        """Exact expected value per series at each hour (ignores clipping), shape (n, H)."""
        hours = np.asarray(hours)
        n, p = len(self.names), self.order
        # propagate the AR state covariance from the initial (deterministic) state
        total = int(hours.max()) + 1
        z_mean = np.zeros((n, p)) if self.initial is None else np.array(self.initial, float)
        cov = np.zeros((n, p, p))
        out_mu = np.zeros((n, total))
        out_var = np.zeros((n, total))
        per = self.period(np.arange(total))
        for t in range(total):
            ph = self.phi[per[t]]                     # (n, p)
            m = np.einsum("nk,nk->n", ph, z_mean)
            v = np.einsum("ni,nij,nj->n", ph, cov, ph) + self.sigma[per[t]] ** 2
            c_new = np.einsum("ni,nij->nj", ph, cov)  # cov(z_t, old state)
            new_cov = np.empty_like(cov)
            new_cov[:, 0, 0] = v
            if p > 1:
                new_cov[:, 0, 1:] = c_new[:, :-1]
                new_cov[:, 1:, 0] = c_new[:, :-1]
                new_cov[:, 1:, 1:] = cov[:, :-1, :-1]
            cov = new_cov
            z_mean = np.concatenate([m[:, None], z_mean[:, :-1]], axis=1)
            out_mu[:, t], out_var[:, t] = m, v
        mu_p, sd_p = self.mean[per].T, self.std[per].T
        lin = mu_p + sd_p * out_mu
        val = np.where(self.log_space[:, None], np.exp(lin + 0.5 * (sd_p ** 2) * out_var), lin)
        if self.diurnal is not None:
            val = val * self.diurnal[:, np.arange(total) % 24]
        return val[:, hours]

    # -- persistence --------------------------------------------------------
    def save(self, path: str | Path) -> Path:
        path = Path(path)
        extra = {} if self.diurnal is None else {"diurnal": self.diurnal}
        if self.initial is not None:
            extra["initial"] = self.initial
        with open(path, "wb") as fh:
            np.savez(fh, names=np.array(["\t".join(k) for k in self.names]), mean=self.mean,
                     std=self.std, phi=self.phi, sigma=self.sigma, correlation=self.correlation,
                     log_space=self.log_space, cap=self.cap,
                     hours=np.array([self.period_hours, self.year_hours]), **extra)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ParModel":
        with np.load(path) as z:
            names = [tuple(s.split("\t")) for s in z["names"].tolist()]
            m = cls(names, z["mean"], z["std"], z["phi"], z["sigma"], z["correlation"],
                    z["log_space"].astype(bool), z["cap"],
                    z["diurnal"] if "diurnal" in z else None,
                    int(z["hours"][0]), int(z["hours"][1]),
                    z["initial"] if "initial" in z else None)
        m.validate()
        return m


def fit_par(history: Mapping[tuple[str, str], np.ndarray], order: int = 1, *,
            n_periods: int = WEEKS_PER_YEAR, period_hours: int = HOURS_PER_WEEK,
            year_hours: Optional[int] = None, log_space: Iterable[str] = ("inflow",),
            caps: Optional[Mapping[tuple[str, str], float]] = None,
            diurnal: bool = False) -> ParModel:
    """Least-squares PAR(p) fit per period with a residual correlation matrix.

    ``history[(variable, site)]`` is a 1-D hourly series covering whole cycles
    of ``year_hours`` (default ``n_periods * period_hours``, or 8760 for the
    weekly/yearly layout).
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    names = list(history)
    if not names:
        raise InsufficientHistory("empty history")
    if year_hours is None:
        year_hours = HOURS_PER_YEAR if (n_periods, period_hours) == (WEEKS_PER_YEAR, HOURS_PER_WEEK) \
            else n_periods * period_hours
    X = np.array([np.asarray(history[k], float) for k in names])
    T = X.shape[1]
    if T < 2 * year_hours:
        raise InsufficientHistory(f"{T} hours < two full cycles of {year_hours}")
    T = (T // year_hours) * year_hours
    X = X[:, :T]
    n = len(names)
    logs = np.array([k[0] in set(log_space) for k in names])
    if np.any(X[logs] <= 0):
        bad = [names[i] for i in np.flatnonzero(logs) if np.any(X[i] <= 0)]
        raise SingularFit(f"non-positive values in log-space series {bad}")

    hours = np.arange(T)
    prof = None
    if diurnal:
        hod = hours % 24
        prof = np.ones((n, 24))
        overall = X.mean(axis=1)
        for h in range(24):
            prof[:, h] = np.where(overall != 0, X[:, hod == h].mean(axis=1) / np.where(overall != 0, overall, 1), 1.0)
        prof = np.where(prof > 1e-9, prof, 0.0)
        safe = np.where(prof > 0, prof, 1.0)[:, hod]
        X = np.where(prof[:, hod] > 0, X / safe, np.nan)

    Y = np.where(logs[:, None], np.log(X), X)
    per = week_of_hour(hours, n_periods, year_hours, period_hours)
    mean = np.zeros((n_periods, n))
    std = np.zeros((n_periods, n))
    for p in range(n_periods):
        sel = Y[:, per == p]
        mean[p] = np.nanmean(sel, axis=1)
        std[p] = np.nanstd(sel, axis=1)
        flat = std[p] <= 1e-12 * np.maximum(1.0, np.abs(mean[p]))
        if np.any(flat):
            raise SingularFit(f"period {p}: constant history for {[names[i] for i in np.flatnonzero(flat)]}")
    Z = (Y - mean[per].T) / std[per].T
    Z = np.nan_to_num(Z)

    phi = np.zeros((n_periods, n, order))
    sigma = np.zeros((n_periods, n))
    resid = np.full((n, T), np.nan)
    t_idx = np.arange(order, T)
    for p in range(n_periods):
        tt = t_idx[per[t_idx] == p]
        for i in range(n):
            A = np.stack([Z[i, tt - k - 1] for k in range(order)], axis=1)
            b = Z[i, tt]
            coef, *_ = np.linalg.lstsq(A, b, rcond=None)
            phi[p, i] = coef
            r = b - A @ coef
            sigma[p, i] = np.sqrt(np.mean(r ** 2))
            resid[i, tt] = r / np.where(sigma[p, i] > 0, sigma[p, i], 1.0)
    ok = ~np.isnan(resid).any(axis=0)
    R = resid[:, ok]
    if n == 1:
        corr = np.ones((1, 1))
    else:
        corr = np.corrcoef(R)
        corr = np.nan_to_num(corr)
        np.fill_diagonal(corr, 1.0)
    cap = np.array([np.inf if caps is None else caps.get(k, np.inf) for k in names])
    model = ParModel(names, mean, std, phi, sigma, corr, logs, cap, prof, period_hours, year_hours)
    model.validate()
    return model


def generate(model: ParModel, S: int, horizon: int, seed: int, start_hour: int = 0) -> ScenarioSet:
    """Simulate ``S`` paths of ``horizon`` hours.

    Scenario ``s`` draws from ``default_rng([seed, s])`` only, so any subset of
    scenarios can be regenerated independently of the others.
    """
    model.validate()
    n, p = len(model.names), model.order
    L = model.cholesky()
    hours = start_hour + np.arange(horizon)
    per = model.period(hours)
    eps = np.empty((S, horizon, n))
    for s in range(S):
        rng = np.random.default_rng([seed, s])
        eps[s] = rng.standard_normal((horizon, n)) @ L.T
    state = np.zeros((S, n, p))
    if model.initial is not None:
        state[:] = model.initial
    Z = np.empty((S, n, horizon))
    for t in range(horizon):
        ph = model.phi[per[t]]                                   # (n, p)
        z = np.einsum("snk,nk->sn", state, ph) + model.sigma[per[t]] * eps[:, t]
        Z[:, :, t] = z
        if p > 1:
            state[:, :, 1:] = state[:, :, :-1]
        state[:, :, 0] = z
    mu = model.mean[per].T        # (n, H)
    sd = model.std[per].T
    lin = mu + sd * Z             # (S, n, H)
    vals = np.where(model.log_space[None, :, None], np.exp(np.minimum(lin, 700.0)), lin)
    if model.diurnal is not None:
        vals = vals * model.diurnal[:, hours % 24][None]
    neg = (~model.log_space)[None, :, None] & (vals < 0)
    truncated = int(neg.sum())
    vals = np.clip(vals, 0.0, model.cap[None, :, None])
    data: dict[str, list] = {}
    sites: dict[str, list[str]] = {}
    for i, (var, site) in enumerate(model.names):
        data.setdefault(var, []).append(vals[:, i, :])
        sites.setdefault(var, []).append(site)
    out = ScenarioSet({v: np.array(a) for v, a in data.items()}, sites, start_hour)
    out.diagnostics["truncated_values"] = truncated
    out.diagnostics["truncation_frequency"] = truncated / max(1, vals.size)
    if truncated:
        log.info("truncated %d negative generated values at zero", truncated)
    return out


def from_history(history: Mapping[tuple[str, str], Sequence[np.ndarray]], horizon: int = HOURS_PER_YEAR
                 ) -> ScenarioSet:
    """One scenario per historical year. ``history[key]`` is a list of yearly arrays."""
    data: dict[str, list] = {}
    sites: dict[str, list[str]] = {}
    n_years = None
    for key, years in history.items():
        var, site = key
        rows = []
        for y, arr in enumerate(years):
            a = np.asarray(arr, float)
            if a.shape != (horizon,):
                raise IncompleteYear(f"{var}/{site} year {y}: {a.size} hours, expected {horizon}")
            gaps = np.flatnonzero(~np.isfinite(a))
            if gaps.size:
                raise IncompleteYear(f"{var}/{site} year {y}: missing hour {int(gaps[0])}")
            rows.append(a)
        if n_years is None:
            n_years = len(rows)
        elif len(rows) != n_years:
            raise IncompleteYear(f"{var}/{site}: {len(rows)} years, expected {n_years}")
        data.setdefault(var, []).append(np.array(rows))
        sites.setdefault(var, []).append(site)
    return ScenarioSet({v: np.array(a) for v, a in data.items()}, sites)


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------
def write_binary(sset: ScenarioSet, path: str | Path) -> Path:
    """Header: magic, u32 JSON length, JSON dims; body: <f8 in (var, site, scenario, hour) order."""
    path = Path(path)
    header = json.dumps({"variables": sset.variables, "sites": sset.sites, "S": sset.S,
                         "hours": sset.horizon_hours, "start_hour": sset.start_hour},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for var in sset.variables:
            fh.write(np.ascontiguousarray(sset.data[var], dtype="<f8").tobytes())
    return path


def read_binary(path: str | Path) -> ScenarioSet:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a scenario file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    head = json.loads(raw[12:12 + hlen])
    S, H = head["S"], head["hours"]
    pos = 12 + hlen
    data = {}
    for var in head["variables"]:
        n = len(head["sites"][var]) * S * H
        data[var] = np.frombuffer(raw, "<f8", n, pos).reshape(len(head["sites"][var]), S, H).copy()
        pos += 8 * n
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return ScenarioSet(data, head["sites"], head.get("start_hour", 0))


def write_csv(sset: ScenarioSet, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variable", "site", "scenario", "hour", "value"])
        for var in sset.variables:
            for i, site in enumerate(sset.sites[var]):
                for s in range(sset.S):
                    for h, v in enumerate(sset.data[var][i, s]):
                        w.writerow([var, site, s, h, repr(float(v))])
    return path


def read_csv(path: str | Path) -> ScenarioSet:
    rows: dict[tuple[str, str], dict[tuple[int, int], float]] = {}
    S = H = 0
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            s, h = int(r["scenario"]), int(r["hour"])
            rows.setdefault((r["variable"], r["site"]), {})[(s, h)] = float(r["value"])
            S, H = max(S, s + 1), max(H, h + 1)
    data: dict[str, list] = {}
    sites: dict[str, list[str]] = {}
    for (var, site), vals in rows.items():
        a = np.full((S, H), np.nan)
        for (s, h), v in vals.items():
            a[s, h] = v
        if np.isnan(a).any():
            raise IncompleteYear(f"{path}: {var}/{site} has missing cells")
        data.setdefault(var, []).append(a)
        sites.setdefault(var, []).append(site)
    return ScenarioSet({v: np.array(a) for v, a in data.items()}, sites)


def load_scenarios(path: str | Path) -> ScenarioSet:
    path = Path(path)
    return read_csv(path) if path.suffix.lower() == ".csv" else read_binary(path)
