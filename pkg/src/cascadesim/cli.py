"""Command-line entry point.

Exit codes: 0 success, 1 invalid input, 2 some scenario chains failed,
3 fatal error. ``CASCADESIM_LOG`` sets the log level (default WARNING).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path
from typing import Optional

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL, EXIT_FATAL = 0, 1, 2, 3
LAYER_NAMES = ("week_ahead", "day_ahead", "hour_ahead", "true_up")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="cascadesim", description="Multiscale hydrothermal simulation.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_flags(p, outdir=True):
        p.add_argument("--config", type=Path, required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--scenarios", type=int)
        p.add_argument("--hours", type=int)
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry; dotted keys reach nested entries")
        p.add_argument("--json", action="store_true", help="print a machine-readable summary")
        if outdir:
            p.add_argument("--output-dir", type=Path)

    p = sub.add_parser("validate", help="check a system model or run config")
    p.add_argument("path", nargs="?", type=Path, help="system model JSON (or use --config)")
    p.add_argument("--config", type=Path)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("gen-scenarios", help="generate the scenario set of a config")
    run_flags(p)

    p = sub.add_parser("sddp", help="build the future cost function only")
    run_flags(p)

    p = sub.add_parser("simulate", help="run the full multiscale simulation")
    run_flags(p)
    p.add_argument("--workers", type=int)
    p.add_argument("--perfect-forecast", action="store_true")
    p.add_argument("--dry-run", action="store_true", help="walk the schedule without solving")
    p.add_argument("--resume", action="store_true", help="continue from the daily checkpoints")

    for name in ("query", "export"):
        p = sub.add_parser(name, help="filter, aggregate and export stored results")
        p.add_argument("--output-dir", type=Path, required=True, help="run directory (or its store)")
        p.add_argument("--metric", action="append")
        p.add_argument("--layers", default="all", help="comma list or 'all'")
        p.add_argument("--scenarios", help="comma list of scenario indices")
        p.add_argument("--hours", help="half-open range START:END")
        p.add_argument("--entity-kind")
        p.add_argument("--entities", help="comma list of entity ids")
        p.add_argument("--aggregate", default="none", choices=("none", "sum", "mean", "quantile"))
        p.add_argument("--q", type=float, default=0.5, help="quantile level")
        p.add_argument("--group-by", default="layer,entity_kind,entity_id,metric")
        p.add_argument("--export", choices=("csv", "svg"), required=(name == "export"))
        p.add_argument("--out", type=Path)
        p.add_argument("--json", action="store_true")
    return ap


def _set_path(d: dict, key: str, value) -> None:
    parts = key.split(".")
    for k in parts[:-1]:
        d = d.setdefault(k, {})
        if not isinstance(d, dict):
            raise UsageError(f"override {key}: {k} is not a section")
    d[parts[-1]] = value


def _load_config(args) -> tuple[dict, Path, list[str]]:
    try:
        d = json.loads(args.config.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    base = args.config.resolve().parent
    stamped = []
    for item in args.overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not KEY=VALUE")
        k, v = item.split("=", 1)
        try:
            val = json.loads(v)
        except json.JSONDecodeError:
            val = v
        _set_path(d, k, val)
        stamped.append(item)
    flags = {"seed": "seed", "hours": "hours", "workers": "workers", "output_dir": "output_dir"}
    for attr, key in flags.items():
        v = getattr(args, attr, None)
        if v is not None:
            d[key] = str(v) if isinstance(v, Path) else v
            stamped.append(f"--{attr.replace('_', '-')}={v}")
    if getattr(args, "scenarios", None) is not None:
        sc = d.get("scenarios", {})
        sc = {"count": sc} if isinstance(sc, int) else dict(sc)
        sc["count"] = args.scenarios
        d["scenarios"] = sc
        stamped.append(f"--scenarios={args.scenarios}")
    if getattr(args, "perfect_forecast", False):
        d["perfect_forecast"] = True
        stamped.append("--perfect-forecast")
    if getattr(args, "dry_run", False):
        d["dry_run"] = True
    if getattr(args, "resume", False):
        d["resume"] = True
    # resolve input paths so the stamped config works from anywhere
    for key in ("system",):
        if isinstance(d.get(key), str):
            d[key] = str((base / d[key]).resolve())
    sc = d.get("scenarios")
    if isinstance(sc, dict):
        for key in ("par_model", "file"):
            if isinstance(sc.get(key), str):
                sc[key] = str((base / sc[key]).resolve())
    sd = d.get("sddp")
    if isinstance(sd, dict) and isinstance(sd.get("fcf"), str):
        sd["fcf"] = str((base / sd["fcf"]).resolve())
    return d, base, stamped


def _stamp(outdir: Path, cfg: dict, stamped: list[str]) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    body = {k: v for k, v in cfg.items() if k not in ("resume", "dry_run")}
    (outdir / "config.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    (outdir / "overrides.json").write_text(json.dumps(stamped, indent=2) + "\n")


def _emit(args, payload: dict, text: str) -> None:
    if getattr(args, "json", False):
        json.dump(payload, sys.stdout, indent=2, default=float)
        sys.stdout.write("\n")
    else:
        print(text)


# ---------------------------------------------------------------------------- commands
def cmd_validate(args) -> int:
    from .engine import RunConfig
    from .system_model import ParseError, load_system, validate
    if args.config is not None:
        cfg = RunConfig.load(args.config)
        path = cfg.system_path
        problems = []
        for p in (cfg.par_model_path, cfg.scenario_path, cfg.fcf_path):
            if p is not None and not Path(p).exists():
                problems.append(f"missing input file {p}")
    elif args.path is not None:
        path, problems = args.path, []
    else:
        raise UsageError("validate needs a system model path or --config")
    try:
        problems += validate(load_system(path))
    except ParseError as exc:
        problems += list(exc.errors)
    for v in problems:
        print(v, file=sys.stderr)
    _emit(args, {"ok": not problems, "violations": problems},
          "valid" if not problems else f"{len(problems)} violation(s)")
    return EXIT_INVALID if problems else EXIT_OK


def _run_config(args):
    from .engine import RunConfig
    d, base, stamped = _load_config(args)
    cfg = RunConfig.from_dict(d, base)
    return cfg, d, stamped


def cmd_gen_scenarios(args) -> int:
    from .engine import span_hours
    from .forecast import LAYERS, diagnostics, forecast_series, write_diagnostics
    from .scenario import ParModel, generate, write_binary
    cfg, d, stamped = _run_config(args)
    if cfg.par_model_path is None:
        raise UsageError("config names no PAR model")
    sset = generate(ParModel.load(cfg.par_model_path), cfg.scenarios, span_hours(cfg), cfg.seed, cfg.start_hour)
    _stamp(cfg.output_dir, d, stamped)
    path = write_binary(sset, cfg.output_dir / "scenarios.bin")
    rows = []
    prof = cfg.forecast_profile
    for s in range(sset.S):
        fc = {lay: forecast_series(sset, s, prof, lay) for lay in LAYERS}
        for r in diagnostics(sset, s, prof, fc):
            rows.append({**r, "site": f"{r['site']}#s{s}"})
    write_diagnostics(rows, cfg.output_dir / "forecast_diagnostics.csv")
    _emit(args, {"path": str(path), "scenarios": sset.S, "hours": sset.horizon_hours},
          f"wrote {sset.S} scenarios x {sset.horizon_hours} h to {path}")
    return EXIT_OK


def cmd_sddp(args) -> int:
    from .engine import prepare
    cfg, d, stamped = _run_config(args)
    cfg.fcf_path = None
    _stamp(cfg.output_dir, d, stamped)
    inputs, info = prepare(cfg)
    path = inputs.fcf.save(cfg.output_dir / "fcf.txt")
    (cfg.output_dir / "sddp.json").write_text(json.dumps(info, indent=2, default=float) + "\n")
    _emit(args, {"fcf": str(path), **info},
          f"{info['iterations']} iterations, lower bound {info['lower_bound']:.6g}, {info['stop_reason']}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .engine import run
    cfg, d, stamped = _run_config(args)
    if not cfg.dry_run:
        _stamp(cfg.output_dir, d, stamped)
    summary = run(cfg)
    text = (f"{len(summary['completed'])}/{summary['scenarios']} scenarios completed, "
            f"{summary['total_problems']} problems ({summary['expected_problems_per_scenario']} per scenario), "
            f"{summary['wall_seconds']['total']:.1f} s")
    for f in summary["failures"]:
        print(f"scenario {f.get('scenario')} failed at hour {f.get('hour')} in {f.get('layer')}: "
              f"{f.get('type')}: {f.get('message')}", file=sys.stderr)
    _emit(args, summary, text)
    return EXIT_PARTIAL if summary["failures"] else EXIT_OK


def _store_dir(p: Path) -> Path:
    return p / "store" if (p / "store").is_dir() else p


def cmd_query(args) -> int:
    from .store import ResultStore, export_csv, export_svg
    store = ResultStore(_store_dir(args.output_dir))
    if not store.scenarios():
        raise UsageError(f"no partitions under {args.output_dir}")
    layers = None if args.layers == "all" else [x for x in args.layers.split(",") if x]
    if layers:
        bad = [x for x in layers if x not in LAYER_NAMES]
        if bad:
            raise UsageError(f"unknown layers {bad}")
    hours = None
    if args.hours:
        try:
            a, b = args.hours.split(":")
            hours = (int(a), int(b))
        except ValueError as exc:
            raise UsageError("--hours must be START:END") from exc
    scen = [int(x) for x in args.scenarios.split(",")] if args.scenarios else None
    ents = args.entities.split(",") if args.entities else None
    df = store.query(args.metric, scenarios=scen, layers=layers, hours=hours, entity_kind=args.entity_kind,
                     entities=ents, aggregate=args.aggregate, q=args.q,
                     group_by=[g for g in args.group_by.split(",") if g])
    out = None
    if args.export == "csv":
        out = export_csv(df, args.out or Path("query.csv"))
    elif args.export == "svg":
        metric = ", ".join(args.metric or ["all metrics"])
        out = export_svg(df, args.out or Path("query.svg"), title=metric, ylabel=metric)
    payload = {"rows": int(len(df)), "file": None if out is None else str(out)}
    if out is None and not args.json:
        print(df.to_string(index=False) if len(df) else "(no rows)")
        return EXIT_OK
    if args.json and out is None:
        payload["records"] = json.loads(df.to_json(orient="records"))
    _emit(args, payload, f"{len(df)} rows written to {out}")
    return EXIT_OK


COMMANDS = {"validate": cmd_validate, "gen-scenarios": cmd_gen_scenarios, "sddp": cmd_sddp,
            "simulate": cmd_simulate, "query": cmd_query, "export": cmd_query}


def main(argv: Optional[list[str]] = None) -> int:
    level = os.environ.get("CASCADESIM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    from .engine import ConfigError
    from .store import StoreError, UnknownMetric
    from .system_model import ParseError, ValidationError
    try:
        args = _parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except SystemExit as exc:     # --help
        return int(exc.code or 0)
    except (UsageError, ConfigError, ParseError, ValidationError, UnknownMetric) as exc:
        msg = exc.args[0] if isinstance(exc, UnknownMetric) and exc.args else exc
        if isinstance(exc, UnknownMetric):
            msg = f"unknown metric {msg!r}"
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except (StoreError, OSError, Exception) as exc:   # noqa: BLE001 - top-level report
        print(f"fatal: {type(exc).__name__}: {exc}", file=sys.stderr)
        if os.environ.get("CASCADESIM_LOG", "").upper() == "DEBUG":
            traceback.print_exc()
        return EXIT_FATAL


if __name__ == "__main__":
    raise SystemExit(main())
