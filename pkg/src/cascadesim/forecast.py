"""Layer forecasts emulated by Gaussian kernel weights over the scenario set.

For each hour the realized scenario ``s`` is the kernel centre and the kernel
width is solved so the weighted ensemble meets a per-layer dispersion target.
The forecast is the weighted mean.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .scenario import ScenarioSet

LAYERS = ("week_ahead", "day_ahead", "hour_ahead", "true_up")
KINDS = ("variance", "std", "cv", "rmse")
_MEAN_FLOOR = 1e-9


@dataclass(frozen=True)
class DispersionTarget:
    """``variance`` is in squared units; ``std`` and ``rmse`` in native units; ``cv`` is relative."""

    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dispersion kind {self.kind!r}")
        if not self.value >= 0:
            raise ValueError("dispersion target must be >= 0")

    @property
    def level(self) -> float:
        # comparable magnitude (std units) for monotonicity checks
        return float(np.sqrt(self.value)) if self.kind == "variance" else self.value


@dataclass(frozen=True)
class ForecastProfile:
    targets: Mapping[str, DispersionTarget]
    overrides: Mapping[str, Mapping[str, DispersionTarget]] = field(default_factory=dict)

    def __post_init__(self):
        for layer in self.targets:
            if layer not in LAYERS:
                raise ValueError(f"unknown layer {layer!r}")
        for var, tg in [(None, self.targets)] + list(self.overrides.items()):
            prev = None
            for layer in LAYERS:
                if layer not in tg:
                    continue
                t = tg[layer]
                if prev is not None and t.kind == prev.kind and t.level > prev.level + 1e-15:
                    raise ValueError(f"dispersion increases at {layer}" + (f" for {var}" if var else ""))
                prev = t

    def target(self, layer: str, variable: Optional[str] = None) -> DispersionTarget:
        if variable is not None and layer in self.overrides.get(variable, {}):
            return self.overrides[variable][layer]
        return self.targets[layer]

    @classmethod
    def perfect(cls) -> "ForecastProfile":
        return cls({layer: DispersionTarget("std", 0.0) for layer in LAYERS})

    @classmethod
    def from_dict(cls, d: Mapping) -> "ForecastProfile":
        def conv(x):
            return {k: DispersionTarget(v["kind"], float(v["value"])) for k, v in x.items()}
        d = dict(d)
        over = d.pop("overrides", {})
        return cls(conv(d), {v: conv(x) for v, x in over.items()})

    def to_dict(self) -> dict:
        out = {k: {"kind": t.kind, "value": t.value} for k, t in self.targets.items()}
        if self.overrides:
            out["overrides"] = {v: {k: {"kind": t.kind, "value": t.value} for k, t in x.items()}
                                for v, x in self.overrides.items()}
        return out


@dataclass
class ScenarioWeights:
    weights: np.ndarray
    realized_index: int
    kernel_width: float = 0.0
    achieved: float = 0.0
    capped: bool = False       # target above the maximum attainable dispersion
    degenerate: bool = False   # all values identical with a positive target


def _kernel(values: np.ndarray, s: int, width: np.ndarray) -> np.ndarray:
    """Normalized weights, shape (S, H) for values (S, H) and widths (H,)."""
    d2 = (values - values[s]) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        expo = np.where(width > 0, -d2 / (2.0 * np.square(width)), np.where(d2 == 0, 0.0, -np.inf))
    w = np.exp(expo)
    return w / w.sum(axis=0)


def _dispersion(values: np.ndarray, s: int, w: np.ndarray, kind: str) -> np.ndarray:
    mu = np.sum(w * values, axis=0)
    if kind == "rmse":
        return np.sqrt(np.sum(w * (values - values[s]) ** 2, axis=0))
    std = np.sqrt(np.maximum(np.sum(w * (values - mu) ** 2, axis=0), 0.0))
    if kind == "cv":
        scale = np.abs(mu)
        return np.where(scale >= _MEAN_FLOOR, std / np.where(scale >= _MEAN_FLOOR, scale, 1.0), std)
    return std


def solve_widths(values: np.ndarray, s: int, target: DispersionTarget, grid: int = 64,
                 iterations: int = 100) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Kernel width per hour for ``values`` of shape (S, H).

    Scans a log grid of widths for the first crossing of the target and bisects
    inside that bracket. Returns (widths, achieved, capped).
    """
    values = np.asarray(values, float)
    if values.ndim == 1:
        values = values[:, None]
    S, H = values.shape
    goal = target.value ** 0.5 if target.kind == "variance" else target.value
    goal = np.full(H, goal)
    span = values.max(axis=0) - values.min(axis=0)
    widths = np.zeros(H)
    achieved = np.zeros(H)
    capped = np.zeros(H, bool)
    live = (goal > 0) & (span > 0)
    if not live.any():
        return widths, achieved, capped
    kind = "std" if target.kind == "variance" else target.kind
    v = values[:, live]
    g = goal[live]
    sp = span[live]
    scales = np.concatenate([[0.0], np.logspace(-6, 1, grid - 1)])
    curve = np.empty((grid, v.shape[1]))
    for k, a in enumerate(scales):
        curve[k] = _dispersion(v, s, _kernel(v, s, a * sp), kind)
    hit = curve >= g
    reached = hit.any(axis=0)
    first = np.where(reached, hit.argmax(axis=0), grid - 1)
    lo = scales[np.maximum(first - 1, 0)] * sp
    hi = scales[first] * sp
    best = scales[curve.argmax(axis=0)] * sp
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        f = _dispersion(v, s, _kernel(v, s, mid), kind)
        up = f < g
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)
        if np.all(hi - lo <= 1e-15 * np.maximum(hi, 1e-300)):
            break
    w_sol = np.where(reached, 0.5 * (lo + hi), best)
    widths[live] = w_sol
    achieved[live] = _dispersion(v, s, _kernel(v, s, w_sol), kind)
    capped[live] = ~reached
    return widths, achieved, capped


def compute_weights(values: Sequence[float], s: int, target: DispersionTarget) -> ScenarioWeights:
    values = np.asarray(values, float)
    if values.ndim != 1 or values.size < 1:
        raise ValueError("values must be a non-empty vector")
    if not 0 <= s < values.size:
        raise IndexError("realized index out of range")
    S = values.size
    if target.value == 0:
        w = np.zeros(S)
        w[s] = 1.0
        return ScenarioWeights(w, s)
    if np.all(values == values[0]):
        return ScenarioWeights(np.full(S, 1.0 / S), s, degenerate=True)
    width, achieved, capped = solve_widths(values[:, None], s, target)
    w = _kernel(values[:, None], s, width)[:, 0]
    return ScenarioWeights(w, s, float(width[0]), float(achieved[0]), bool(capped[0]))


def weight_matrix(values: np.ndarray, s: int, target: DispersionTarget) -> np.ndarray:
    """Per-hour weights (S, H) for a (S, H) block of values."""
    values = np.asarray(values, float)
    S, H = values.shape
    if target.value == 0:
        w = np.zeros((S, H))
        w[s] = 1.0
        return w
    widths, _, _ = solve_widths(values, s, target)
    w = _kernel(values, s, widths)
    flat = np.all(values == values[:1], axis=0)
    w[:, flat] = 1.0 / S
    return w


def forecast_series(sset: ScenarioSet, s: int, profile: ForecastProfile, layer: str,
                    variables: Optional[Sequence[str]] = None) -> dict[str, np.ndarray]:
    """Hourly weighted-mean forecast per variable, arrays of shape (sites, hours)."""
    if layer not in profile.targets:
        raise KeyError(f"layer {layer!r} not in profile")
    out = {}
    for var in variables or sset.variables:
        tg = profile.target(layer, var)
        arr = sset.data[var]
        fc = np.empty((arr.shape[0], arr.shape[2]))
        for i in range(arr.shape[0]):
            if tg.value == 0:
                fc[i] = arr[i, s]
            else:
                fc[i] = np.sum(weight_matrix(arr[i], s, tg) * arr[i], axis=0)
        out[var] = fc
    return out


def ensemble_rmse(values: np.ndarray, s: int, target: DispersionTarget) -> float:
    """RMS over hours of the weighted ensemble spread about the realization."""
    w = weight_matrix(values, s, target)
    return float(np.sqrt(np.mean(np.sum(w * (values - values[s]) ** 2, axis=0))))


def diagnostics(sset: ScenarioSet, s: int, profile: ForecastProfile,
                forecasts: Mapping[str, Mapping[str, np.ndarray]]) -> list[dict]:
    """Achieved point-forecast RMSE per layer/variable/site against the realization."""
    rows = []
    for layer in LAYERS:
        if layer not in forecasts:
            continue
        for var, fc in forecasts[layer].items():
            for i, site in enumerate(sset.sites[var]):
                real = sset.data[var][i, s, : fc.shape[1]]
                rows.append({"layer": layer, "variable": var, "site": site,
                             "rmse": float(np.sqrt(np.mean((fc[i] - real) ** 2)))})
    return rows


def write_diagnostics(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["layer", "variable", "site", "rmse"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "rmse": repr(r["rmse"])})
    return path
