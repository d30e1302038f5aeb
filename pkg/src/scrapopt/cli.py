"""Command-line interface: ``scrapopt {simulate,optimize,sweep,compare,reproduce,presets}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from scrapopt import __version__
from scrapopt.config import (
    PRESETS,
    ConfigError,
    RunConfig,
    build_pulses,
    load_config,
    load_preset,
    load_pulses,
    preset_text,
)
from scrapopt.dynamics import NumericalError, population_trace, propagate, write_trace_csv
from scrapopt.model import validate_regime
from scrapopt.optimizer import (
    OptimizationProblem,
    default_bounds,
    greedy_point_selection,
    optimize,
)
from scrapopt.pulses import CONTROLS, PulseSet, sample_schedule
from scrapopt.sweep import (
    fidelity_map,
    log_increase_map,
    map_metrics,
    read_map_csv,
    relative_gain,
    write_map,
    write_matrix_csv,
)

log = logging.getLogger("scrapopt")

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
PARAM_NAMES = ("h", "tau", "sigma")


def _dump_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _resolve(args) -> tuple:
    """Return (config, base directory for relative paths)."""
    if args.config and args.preset:
        raise ConfigError("use either --config or --preset, not both")
    if args.config:
        return load_config(args.config), Path(args.config).resolve().parent
    return load_preset(args.preset or "fig2"), Path.cwd()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pulses(cfg: RunConfig, base_dir: Path, override=None):
    return load_pulses(override) if override else build_pulses(cfg.pulses, base_dir)


def cmd_simulate(args) -> int:
    cfg, base_dir = _resolve(args)
    params = cfg.system_params()
    pulses = _pulses(cfg, base_dir, getattr(args, "pulses", None))
    record = propagate(cfg.rho0(), sample_schedule(pulses, params), params)
    out = _out_dir(args)
    write_trace_csv(out / "trace.csv", population_trace(record))
    final = record.final
    pops = final.populations
    summary = {
        "p1_final": float(pops[0]),
        "p2_final": float(pops[1]),
        "p3_final": float(pops[2]),
        "trace_final": final.trace,
        "phi0": float(np.real(np.trace(cfg.target().conj().T @ final.elements))),
        "regime": validate_regime(params, cfg.pulses.s0).value,
        "config_fingerprint": cfg.fingerprint(),
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def _problem(cfg: RunConfig, initial: PulseSet, points) -> OptimizationProblem:
    opt = cfg.optimize
    base = cfg.system_params()
    bounds = default_bounds(initial, base, opt.kappa, width_floor=opt.width_floor,
                            width_ceiling=opt.width_ceiling)
    return OptimizationProblem(
        base, points, initial, bounds,
        rho0=cfg.rho0(), target=cfg.target(),
        envelope_slack=opt.envelope_slack, penalty_weight=opt.penalty_weight,
        gradient=opt.gradient,
    )


def _parameter_table(problem: OptimizationProblem, final: PulseSet) -> list:
    p0 = problem.initial.to_array()
    p1 = final.to_array()
    rows = []
    for idx in np.ndindex(p0.shape):
        k, n, p = idx
        rows.append({
            "control": CONTROLS[k], "term": n + 1, "name": PARAM_NAMES[p],
            "initial": float(p0[idx]), "final": float(p1[idx]),
            "lower": float(problem.bounds.lower[idx]), "upper": float(problem.bounds.upper[idx]),
        })
    return rows


def run_optimization(cfg: RunConfig, base_dir: Path, out: Path, seed: int, threads: int) -> dict:
    opt = cfg.optimize
    if opt is None:
        raise ConfigError("configuration has no 'optimize' block")
    initial = build_pulses(cfg.pulses, base_dir)
    if not isinstance(initial, PulseSet):
        raise ConfigError("optimisation needs Gaussian-sum pulses, not 'reference'")
    kwargs = {"max_iter": opt.max_iter, "gtol": opt.gtol, "ftol": opt.ftol, "project": opt.project}
    greedy_meta = None
    points = opt.detuning_points
    if opt.greedy is not None:
        template = _problem(cfg, initial, [opt.greedy.candidates[0]])
        greedy = greedy_point_selection(
            opt.greedy.candidates, opt.greedy.grid.build(), opt.greedy.budget, template,
            optimize_kwargs=kwargs, seed=seed, workers=threads,
        )
        points = greedy.points
        greedy_meta = {"chosen_points": [list(p) for p in greedy.points], "scores": greedy.scores,
                       "seed": seed}
    problem = _problem(cfg, initial, points)
    rows = []
    result = optimize(problem, on_iteration=rows.append, **kwargs)
    with open(out / "trace.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    payload = {
        "config_fingerprint": cfg.fingerprint(),
        "detuning_points": [list(p) for p in problem.detuning_points],
        "greedy": greedy_meta,
        "iterations": result.iterations,
        "message": result.message,
        "parameters": _parameter_table(problem, result.pulses),
        "phi_initial": result.phi_initial,
        "phi_final": result.phi_final,
        "pulse_fingerprint": result.pulses.fingerprint(),
        "pulses": result.pulses.to_dict(),
    }
    _dump_json(out / "pulses_opt.json", payload)
    return payload


def cmd_optimize(args) -> int:
    cfg, base_dir = _resolve(args)
    payload = run_optimization(cfg, base_dir, _out_dir(args), args.seed, args.threads)
    print(json.dumps({k: payload[k] for k in ("phi_initial", "phi_final", "iterations", "detuning_points")},
                     sort_keys=True))
    return 0


def run_sweep(cfg: RunConfig, pulses, out: Path, threads: int, name: str = "map") -> dict:
    base = cfg.system_params()
    fmap = fidelity_map(pulses, cfg.grid.build(), base, rho0=cfg.rho0(), target=cfg.target(),
                        threads=threads)
    fingerprint = pulses.fingerprint() if isinstance(pulses, PulseSet) else repr(pulses)
    return write_map(out / f"{name}.csv", out / f"{name}.meta.json", fmap, base, fingerprint,
                     extra={"config_fingerprint": cfg.fingerprint()})


def cmd_sweep(args) -> int:
    cfg, base_dir = _resolve(args)
    meta = run_sweep(cfg, _pulses(cfg, base_dir, args.pulses), _out_dir(args), args.threads)
    print(json.dumps(meta["metrics"], sort_keys=True))
    return 0


def run_compare(before_path, after_path, out: Path) -> dict:
    before = read_map_csv(before_path)
    after = read_map_csv(after_path)
    inc = log_increase_map(before, after)
    write_matrix_csv(out / "log_increase.csv", before.grid, inc.values)
    mb, ma = map_metrics(before), map_metrics(after)
    summary = {
        "before": mb,
        "after": ma,
        "relative_mean_gain": relative_gain(mb["f_mean"], ma["f_mean"]),
        "relative_area_gain": relative_gain(mb["a_above_0p8"], ma["a_above_0p8"]),
        "cells_increased": int((inc.sign > 0).sum()),
        "cells_unchanged": int((inc.sign == 0).sum()),
        "cells_decreased": int((inc.sign < 0).sum()),
        "sign": inc.sign.tolist(),
    }
    _dump_json(out / "compare.json", summary)
    return summary


def cmd_compare(args) -> int:
    try:
        summary = run_compare(args.before, args.after, _out_dir(args))
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    print(json.dumps({k: summary[k] for k in ("relative_mean_gain", "relative_area_gain")}, sort_keys=True))
    return 0


def cmd_reproduce(args) -> int:
    """Sweep the initial pulses, optimise, sweep the result and compare."""
    cfg, base_dir = _resolve(args)
    out = _out_dir(args)
    (out / "original").mkdir(exist_ok=True)
    (out / "optimized").mkdir(exist_ok=True)
    initial = build_pulses(cfg.pulses, base_dir)
    run_sweep(cfg, initial, out / "original", args.threads)
    payload = run_optimization(cfg, base_dir, out / "optimized", args.seed, args.threads)
    run_sweep(cfg, PulseSet.from_dict(payload["pulses"]), out / "optimized", args.threads)
    summary = run_compare(out / "original" / "map.csv", out / "optimized" / "map.csv", out)
    print(json.dumps({
        "phi_initial": payload["phi_initial"],
        "phi_final": payload["phi_final"],
        "before": summary["before"],
        "after": summary["after"],
        "relative_mean_gain": summary["relative_mean_gain"],
        "relative_area_gain": summary["relative_area_gain"],
    }, sort_keys=True))
    return 0


def cmd_presets(args) -> int:
    if args.name:
        sys.stdout.write(preset_text(args.name))
    else:
        print("\n".join(PRESETS))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_argument_group("configuration")
    src.add_argument("--config", help="YAML/JSON run configuration")
    src.add_argument("--preset", choices=PRESETS, help="bundled configuration")
    common.add_argument("--out", default=".", help="output directory (default: .)")
    common.add_argument("--threads", type=int, default=1, help="worker cap (default: 1)")
    common.add_argument("--seed", type=int, default=0, help="greedy tie-breaking seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="scrapopt", description="Simulate and optimise Stark-chirped rapid adiabatic passage.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="population dynamics at one detuning")
    p.add_argument("--pulses", help="pulse JSON overriding the configured pulses")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("optimize", parents=[common], help="optimise the Gaussian pulses")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("sweep", parents=[common], help="fidelity map over the detuning grid")
    p.add_argument("--pulses", help="pulse JSON (e.g. pulses_opt.json) overriding the configured pulses")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", parents=[common], help="log10 percentage increase between two maps")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("reproduce", parents=[common], help="sweep, optimise, sweep and compare")
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("presets", help="list bundled presets or print one")
    p.add_argument("name", nargs="?", choices=PRESETS)
    p.set_defaults(func=cmd_presets)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
