"""Command-line entry point.

Commands::

    stochmech run       --config FILE | --scenario NAME  --out DIR
    stochmech solve     {schrodinger,kg} --config FILE --out DIR
    stochmech check     (--config FILE | --scenario NAME | --field CSV ...)
                        [--equations a,b] [--levels N] [--strict] [--out FILE]
    stochmech ensemble  --config FILE --out DIR
    stochmech plotdata  RUN_DIR --quantity P,u,ks [--out DIR]
    stochmech scenarios [NAME]

Any config key can be overridden with ``--set key=value``.  Each flag falls
back to an environment variable ``STOCHMECH_<FLAG>`` (``STOCHMECH_SEED``,
``STOCHMECH_OUT``, ``STOCHMECH_LEVELS`` ...); explicit flags win.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical
failure, 4 strict-mode residual failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .fields import GridError, NONRELATIVISTIC, RELATIVISTIC, polar_decompose
from .identities import ORDER_BOUND, full_report, study_from_reports
from .manifest import RunManifest, read_manifest
from .scenarios import (KG_SCENARIOS, PLOT_QUANTITIES, SCENARIOS,
                        SCHRODINGER_SCENARIOS, ConfigError, ScenarioConfig,
                        ScenarioError, compute_scenario, convergence_to_json,
                        default_config, emit_plotdata, ensemble_stage,
                        load_config, run_scenario, scenario_convergence,
                        solve_stage, strict_failures)
from .schrodinger import SolverError
from .storage import dump_json, read_field, read_sidecar, write_field, write_ks_series, \
    write_trajectories
from .velocities import velocity_fields

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_STRICT = 4
ENV_PREFIX = "STOCHMECH_"


def _env(name, default=None):
    return os.environ.get(ENV_PREFIX + name.upper(), default)


def _env_flag(name) -> bool:
    return str(_env(name, "")).strip().lower() in ("1", "true", "yes", "on")


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _config(args) -> ScenarioConfig:
    over = _overrides(args.set)
    if args.seed is not None:
        over["seed"] = str(args.seed)
    if getattr(args, "workers", None) is not None:
        over["workers"] = str(args.workers)
    if args.config:
        return load_config(args.config, over)
    if args.scenario:
        return default_config(args.scenario, over)
    raise ConfigError("give --config FILE or --scenario NAME")


def _out_dir(args) -> Path:
    if not args.out:
        raise ConfigError("--out DIR is required")
    return Path(args.out)


# ----------------------------------------------------------------------
# commands


def cmd_run(args) -> int:
    cfg = _config(args)
    out = run_scenario(cfg, _out_dir(args))
    print(out)
    return EXIT_OK


def cmd_solve(args) -> int:
    cfg = _config(args)
    family = SCHRODINGER_SCENARIOS if args.kind == "schrodinger" else KG_SCENARIOS
    if cfg.name not in family:
        raise ConfigError(f"scenario {cfg.name!r} is not a {args.kind} scenario "
                          f"(choose from {', '.join(family)})")
    out = _out_dir(args)
    try:
        f = solve_stage(cfg)
    except (SolverError, FloatingPointError) as exc:
        raise ScenarioError(f"scenario {cfg.name}, stage solve: {exc}") from exc
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    conv = NONRELATIVISTIC if args.kind == "schrodinger" else RELATIVISTIC
    write_field(out / "field.csv", f, cfg.params, {"convention": conv, "scenario": cfg.name})
    RunManifest("solve", cfg.config_hash(), cfg.seed, cfg.name).write(out)
    print(out / "field.csv")
    return EXIT_OK


def cmd_ensemble(args) -> int:
    cfg = _config(args)
    if cfg.name not in SCHRODINGER_SCENARIOS:
        raise ConfigError(f"ensembles need a Schroedinger scenario, got {cfg.name!r}")
    if cfg["n_walkers"] < 1:
        raise ConfigError("n_walkers must be >= 1 for an ensemble run")
    out = _out_dir(args)
    try:
        nr = ensemble_stage(cfg)
    except (SolverError, FloatingPointError, ValueError) as exc:
        raise ScenarioError(f"scenario {cfg.name}, stage ensemble: {exc}") from exc
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    write_ks_series(out / "ks.csv", nr.times, nr.ks, nr.n_walkers)
    if nr.trajectories is not None:
        write_trajectories(out / "trajectories.csv", nr.times, nr.trajectories)
    RunManifest("ensemble", cfg.config_hash(), cfg.seed, cfg.name).write(out)
    print(out / "ks.csv")
    return EXIT_OK


def _parse_equations(text):
    if text is None:
        return None
    eqs = [e.strip() for e in text.split(",") if e.strip()]
    if not eqs:
        raise ConfigError("empty equation selection")
    return eqs


def _field_reports(paths, mode, node_epsilon, equations):
    per_file = []
    for p in paths:
        try:
            f, params = read_field(p)
            side = read_sidecar(p)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read field {p}: {exc}") from None
        conv = mode or side.get("convention", NONRELATIVISTIC)
        polar = polar_decompose(f, conv, params.hbar, node_epsilon)
        fs = velocity_fields(polar, params, conv)
        per_file.append(full_report(fs, equations))
    return per_file


def cmd_check(args) -> int:
    equations = _parse_equations(args.equations)
    levels = int(args.levels) if args.levels is not None else None
    body: dict = {}
    if args.field:
        aliases = {"nonrel": NONRELATIVISTIC, "rel": RELATIVISTIC}
        mode = aliases.get(args.mode, args.mode)
        eps = float(_overrides(args.set).get("node_epsilon", 1e-6))
        try:
            per_file = _field_reports(args.field, mode, eps, equations)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ScenarioError(f"check: {exc}") from exc
        per_file.sort(key=lambda reps: -reps[0].grid_summary["dx"] if reps else 0)
        reports = per_file[-1]
        body["source"] = {"fields": [str(p) for p in args.field]}
        convergence = {}
        if len(per_file) >= 3:
            for rep in reports:
                eq = rep.equation_id
                chain = [next(r for r in reps if r.equation_id == eq) for reps in per_file]
                convergence[eq] = {"study": study_from_reports(chain), "final": chain[-1]}
        elif args.strict:
            raise ConfigError("--strict on field files needs at least 3 refinement levels")
    else:
        cfg = _config(args)
        if equations is not None:
            cfg = cfg.with_overrides({"equations": ",".join(equations)})
        if levels is None:
            levels = cfg["levels"]
        if args.strict and levels < 3:
            levels = 3
        base = ScenarioConfig(cfg.name, dict(cfg.values, levels=0))
        res = compute_scenario(base, with_ensemble=False)
        reports = res.reports
        body["source"] = {"scenario": cfg.name, "config_hash": cfg.config_hash()}
        body["summary"] = json.loads(json.dumps(res.summary, default=float))
        convergence = {}
        if levels:
            try:
                convergence = scenario_convergence(cfg, levels, equations)
            except (ArithmeticError, RuntimeError) as exc:
                raise ScenarioError(f"check: {exc}") from exc
    if equations is not None:
        missing = [e for e in equations if e not in {r.equation_id for r in reports}]
        if missing:
            raise ConfigError(f"equations not applicable here: {', '.join(missing)}")
    body["reports"] = {r.equation_id: r.to_dict() for r in reports}
    for eq, entry in convergence.items():
        if eq in body["reports"]:
            body["reports"][eq]["convergence_order"] = entry["study"].order
    if convergence:
        body["convergence"] = convergence_to_json(convergence)
    code = EXIT_OK
    if args.strict:
        failed = strict_failures(convergence)
        body["strict"] = {
            "order_bound": ORDER_BOUND,
            "passed": not failed,
            "failed": {eq: {"order": convergence[eq]["study"].order,
                            "notes": list(convergence[eq]["final"].notes)}
                       for eq in failed},
        }
        if failed:
            code = EXIT_STRICT
            for eq in failed:
                notes = "; ".join(convergence[eq]["final"].notes)
                order = convergence[eq]["study"].order
                print(f"strict: {eq} order {order} < {ORDER_BOUND}"
                      + (f" ({notes})" if notes else ""), file=sys.stderr)
    text = json.dumps(body, indent=2, sort_keys=True, allow_nan=True)
    if args.out:
        dump_json(body, args.out)
    else:
        print(text)
    return code


def cmd_plotdata(args) -> int:
    run_dir = Path(args.run_dir)
    try:
        man = read_manifest(run_dir)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None
    quantities = [q.strip() for q in (args.quantity or "").split(",") if q.strip()]
    if not quantities:
        raise ConfigError(f"--quantity is required ({', '.join(PLOT_QUANTITIES)})")
    out = Path(args.out) if args.out else run_dir / "plot"
    paths = emit_plotdata(run_dir, quantities, out)
    RunManifest("plotdata", man.get("config_hash", ""), man.get("seed", 0),
                man.get("scenario", "")).write(out)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_scenarios(args) -> int:
    if args.name:
        print(default_config(args.name).to_ini(), end="")
    else:
        print("\n".join(SCENARIOS))
    return EXIT_OK


# ----------------------------------------------------------------------
# parser


def _common(p, config=True):
    if config:
        p.add_argument("--config", default=_env("config"), help="scenario INI file")
        p.add_argument("--scenario", default=_env("scenario"), choices=SCENARIOS,
                       help="use the defaults of a named scenario")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        seed = _env("seed")
        p.add_argument("--seed", type=int, default=int(seed) if seed else None)
        workers = _env("workers")
        p.add_argument("--workers", type=int, default=int(workers) if workers else None,
                       help="threads for the walker ensemble")
    p.add_argument("--out", default=_env("out"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stochmech", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"stochmech {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario into a directory")
    _common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("solve", help="solve the wave equation of a scenario")
    p.add_argument("kind", choices=("schrodinger", "kg"))
    _common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("check", help="residual report with optional convergence study")
    _common(p)
    p.add_argument("--field", nargs="+", help="field CSV files (3+ refined grids "
                                               "give a convergence study)")
    p.add_argument("--mode", choices=("nonrel", "rel", NONRELATIVISTIC, RELATIVISTIC),
                   help="sign convention for --field input (default: from sidecar)")
    p.add_argument("--equations", default=_env("equations"),
                   help="comma-separated equation ids")
    levels = _env("levels")
    p.add_argument("--levels", type=int, default=int(levels) if levels else None,
                   help="refinement levels of the convergence study")
    p.add_argument("--strict", action="store_true", default=_env_flag("strict"),
                   help=f"exit 4 if a convergent residual misses order {ORDER_BOUND}")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("ensemble", help="walker ensemble of a Schroedinger scenario")
    _common(p)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("plotdata", help="plot-ready data from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--quantity", default=_env("quantity"),
                   help=f"comma-separated: {', '.join(PLOT_QUANTITIES)}")
    _common(p, config=False)
    p.set_defaults(func=cmd_plotdata)

    p = sub.add_parser("scenarios", help="list scenarios or print one's defaults")
    p.add_argument("name", nargs="?", choices=SCENARIOS)
    p.set_defaults(func=cmd_scenarios)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, GridError, FileNotFoundError) as exc:
        print(f"stochmech: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ScenarioError, SolverError, ArithmeticError) as exc:
        print(f"stochmech: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
