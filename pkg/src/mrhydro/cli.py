"""Command-line entry point: synth, run, frf, report.

Every output directory gets the resolved configuration (with its hash and
seed) written next to the results so any run can be reproduced exactly
from its own artifacts.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, controllers, sim, synthesis
from .config import ConfigError, RunConfig, load_run_config
from .plant import Plant, PlantError, build_state_space
from .sim import FRF_GRID_DEFAULT


def _write_config_echo(cfg: RunConfig, outdir: Path, name: str = "config") -> None:
    payload = cfg.to_dict()
    payload["_hash"] = cfg.content_hash()
    path = outdir / f"{name}.json"
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _resolve(args) -> RunConfig:
    overrides: dict = {}
    if getattr(args, "controller", None):
        overrides["controller"] = args.controller
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out_dir", None):
        overrides["output_dir"] = args.out_dir
    scenario_over: dict = {}
    if getattr(args, "freq", None) is not None:
        scenario_over["backdrive_freq"] = args.freq
    if getattr(args, "cmd_torque", None) is not None:
        scenario_over["torque_command"] = args.cmd_torque
    if getattr(args, "amplitude", None) is not None:
        scenario_over["torque_amplitude"] = args.amplitude
    if getattr(args, "kind", None):
        scenario_over["kind"] = args.kind
    if scenario_over:
        overrides["scenario"] = scenario_over
    return load_run_config(getattr(args, "config", None), overrides)


def _make_gains(cfg: RunConfig):
    return synthesis.synthesize(cfg.plant_params(), cfg.cost_weights(),
                                cfg.noise_covariances())


def _controller_kwargs(cfg: RunConfig) -> dict:
    pid_m, pid_s = cfg.pid_configs()
    return {"dither": cfg.dither_config(), "pid_master": pid_m, "pid_slave": pid_s}


def cmd_synth(args) -> int:
    cfg = _resolve(args)
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    params = cfg.plant_params()
    ss = build_state_space(params)
    gains = _make_gains(cfg)
    gains.save(outdir / "gains.json")
    _write_config_echo(cfg, outdir)

    cl = synthesis.closed_loop_matrix(ss, gains)
    ev = np.linalg.eigvals(cl)
    dc = synthesis.closed_loop_dc_gain(ss, gains)
    plant = Plant(params)
    pid_m, pid_s = cfg.pid_configs()
    freqs = np.logspace(np.log10(0.05), np.log10(400.0), 3000)
    gm_m = controllers.gain_margin_db(
        controllers.pid_loop_gain(plant, ss, pid_m, freqs, with_delay=False), freqs)
    gm_s = controllers.gain_margin_db(
        controllers.pid_loop_gain(plant, ss, pid_s, freqs, with_delay=False), freqs)
    print(f"gains written to {outdir / 'gains.json'}")
    print(f"|K| = {np.linalg.norm(gains.K):.6g}, K_ff = {gains.K_ff:.6g}, "
          f"|L| = {np.linalg.norm(gains.L):.6g}")
    print(f"closed-loop eigenvalue max real part: {ev.real.max():.6g} rad/s "
          f"({'Hurwitz' if ev.real.max() < 0 else 'UNSTABLE'})")
    print(f"linear DC tracking gain: {dc:.9f}")
    print(f"PID gain margins (linear model): master {gm_m:.2f} dB, slave {gm_s:.2f} dB")
    return 0


def cmd_run(args) -> int:
    cfg = _resolve(args)
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    scenario = sim.Scenario.from_dict({**cfg.scenario, "controller": cfg.controller,
                                       "seed": cfg.seed})
    plant = Plant(cfg.plant_params())
    gains = _make_gains(cfg) if cfg.controller == "lqgi" else None
    runner = sim.run_backdrive if scenario.kind == "backdrive" else sim.run_scenario
    if scenario.kind == "chirp":
        trace = sim.run_scenario(scenario, plant=plant)
    else:
        trace = runner(scenario, plant=plant, gains=gains,
                       controller_kwargs=_controller_kwargs(cfg))
    name = f"trace_{scenario.kind}_{cfg.controller}_seed{cfg.seed}.csv"
    trace.to_csv(outdir / name)
    _write_config_echo(cfg, outdir)
    print(f"trace written to {outdir / name}"
          + (f" (aborted: {trace.aborted})" if trace.aborted else ""))
    return 1 if trace.aborted else 0


def cmd_frf(args) -> int:
    cfg = _resolve(args)
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    plant = Plant(cfg.plant_params())
    gains = _make_gains(cfg) if cfg.controller == "lqgi" else None
    freqs = args.freqs if args.freqs else FRF_GRID_DEFAULT
    runner = sim.make_dwell_runner(cfg.controller, plant=plant, gains=gains,
                                   seed=cfg.seed,
                                   controller_kwargs=_controller_kwargs(cfg))
    points = analysis.frf_from_sine_dwell(runner, freqs)
    bw = analysis.bandwidth(points)
    path = outdir / f"frf_{cfg.controller}.csv"
    _write_frf_csv(path, points)
    _write_config_echo(cfg, outdir)
    print(f"frf written to {path}")
    print(f"bandwidth ({cfg.controller}): "
          + (f"{bw:.2f} Hz" if bw is not None else "beyond measured range"))
    return 0


def _write_frf_csv(path, points) -> None:
    with open(path, "w") as fh:
        fh.write("frequency [Hz],magnitude [dB],phase [deg],flagged\n")
        for p in points:
            fh.write(f"{p.frequency:.17g},{p.magnitude_db:.17g},"
                     f"{p.phase_deg:.17g},{int(p.flagged)}\n")


def _measure_row(name: str, cfg: RunConfig, plant: Plant, gains,
                 outdir: Path) -> analysis.RowResult:
    def hook(label, obj):
        if isinstance(obj, sim.SimTrace):
            obj.to_csv(outdir / f"{label}.csv")
        else:
            _write_frf_csv(outdir / f"{label}.csv", obj)

    return sim.measure_controller_row(name, plant=plant, gains=gains,
                                      controller_kwargs=_controller_kwargs(cfg),
                                      seed=cfg.seed, trace_hook=hook)


def cmd_report(args) -> int:
    cfg = _resolve(args)
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    only = args.only.split(",") if args.only else list(analysis.REFERENCE_RESULTS)
    bad = set(only) - set(analysis.REFERENCE_RESULTS)
    if bad:
        raise ConfigError(f"unknown controller(s) in --only: {sorted(bad)}")
    plant = Plant(cfg.plant_params())
    gains = _make_gains(cfg)
    t0 = time.time()
    rows = {}
    for name in only:
        rows[name] = _measure_row(name, cfg, plant, gains, outdir)
        print(f"  measured {name} ({time.time() - t0:.0f} s elapsed)")
    report = analysis.comparison_report(rows)
    text = report.render_text()
    (outdir / "comparison.txt").write_text(text)
    (outdir / "comparison.csv").write_text(report.to_csv())
    _write_config_echo(cfg, outdir)
    print(text)
    print(f"report completed in {time.time() - t0:.0f} s; files in {outdir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mrhydro",
        description="MR-clutch hydrostatic actuator: gain synthesis, simulation, analysis")
    parser.add_argument("--config", help="JSON config file (layered under CLI flags)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="synthesize and write controller gains")
    p_synth.add_argument("--out-dir", default=None)
    p_synth.set_defaults(func=cmd_synth)

    p_run = sub.add_parser("run", help="run one scenario and write its trace")
    p_run.add_argument("--kind", choices=sim.SCENARIO_KINDS, default=None)
    p_run.add_argument("--controller", choices=controllers.CONTROLLER_NAMES, default=None)
    p_run.add_argument("--freq", type=float, default=None, help="backdrive frequency [Hz]")
    p_run.add_argument("--cmd-torque", type=float, default=None,
                       help="held torque command [N.m]")
    p_run.add_argument("--amplitude", type=float, default=None,
                       help="step/dwell torque amplitude [N.m]")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out-dir", default=None)
    p_run.set_defaults(func=cmd_run)

    p_frf = sub.add_parser("frf", help="sine-dwell frequency response sweep")
    p_frf.add_argument("--controller", choices=controllers.CONTROLLER_NAMES, default=None)
    p_frf.add_argument("--freqs", type=float, nargs="+", default=None)
    p_frf.add_argument("--seed", type=int, default=None)
    p_frf.add_argument("--out-dir", default=None)
    p_frf.set_defaults(func=cmd_frf)

    p_rep = sub.add_parser("report", help="full benchmark matrix and comparison table")
    p_rep.add_argument("--only", default=None,
                       help="comma-separated subset of controllers")
    p_rep.add_argument("--seed", type=int, default=None)
    p_rep.add_argument("--out-dir", default=None)
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (synthesis.SynthesisError, PlantError, sim.ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
