"""Scenario-driven command line front end.

Commands operate on a scenario file and write plot-ready CSV artifacts
plus a run manifest into an output directory::

    adnlab equilibrium --scenario case.json --out results/
    adnlab continue    --scenario case.json --out results/ [--param NAME]
    adnlab boundary2d  --scenario case.json --out results/ [--grid a:b:n]
    adnlab simulate    --scenario case.json --out results/
    adnlab secondary   --scenario case.json --out results/
    adnlab cf          --scenario case.json --out results/

Numbers are written with 17 significant digits and newline line ends, so
repeated runs of the same scenario produce byte-identical files.
"""

import argparse
import hashlib
import json
import sys as _sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .cfreq import cf_of_bus, decompose_converter_cf, pll_internal_frequency
from .contin import ContinuationSettings, continue_branch, locate_all, trace_boundary_2d
from .engine import integrate, newton_equilibrium, spectrum_at
from .errors import AdnlabError, ScenarioError
from .scenario import Scenario, load_scenario
from .secondary import WeightVector, run_recursive

__all__ = ["main", "run_command"]

COMMANDS = ("equilibrium", "continue", "boundary2d", "simulate",
            "secondary", "cf")
EXIT_OK = 0
EXIT_NUMERICAL = 2
EXIT_USAGE = 64


def _fmt(value) -> str:
    return format(float(value), ".17g")


def _write_csv(path: Path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(cell if isinstance(cell, str) else _fmt(cell)
                              for cell in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


class _Run:
    def __init__(self, scenario: Scenario, out_dir: Path, command: str,
                 quiet: bool):
        self.scenario = scenario
        self.out = out_dir
        self.command = command
        self.quiet = quiet
        self.outputs = []
        self.t0 = time.perf_counter()

    def say(self, message: str):
        if not self.quiet:
            print(message)

    def csv(self, name: str, header, rows):
        path = self.out / name
        _write_csv(path, header, rows)
        self.outputs.append(path)
        self.say(f"wrote {path}")

    def manifest(self):
        entries = []
        for path in self.outputs:
            data = path.read_bytes()
            if not data:
                raise AdnlabError(f"output file {path} is empty")
            entries.append({"path": path.name,
                            "sha256": hashlib.sha256(data).hexdigest(),
                            "bytes": len(data)})
        payload = {
            "scenario": self.scenario.name,
            "scenario_hash": hashlib.sha256(
                self.scenario.canonical_json().encode()).hexdigest(),
            "tool_version": __version__,
            "command": self.command,
            "outputs": entries,
            "wall_time_s": time.perf_counter() - self.t0,
        }
        path = self.out / "manifest.json"
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
        self.say(f"wrote {path}")


def _solve_base(scenario: Scenario):
    sys = scenario.build()
    p = scenario.base_params(sys)
    sol = newton_equilibrium(sys, sys.initial_guess(), p)
    return sys, p, sol


def _cmd_equilibrium(run: _Run, args):
    sys, p, sol = _solve_base(run.scenario)
    run.csv("bus_voltages.csv", ("bus", "vmag", "vd", "vq"),
            [(b, sys.bus_voltage_mag(sol.x, b), *sys.bus_voltage(sol.x, b))
             for b in sys.bus_ids])
    run.csv("states.csv", ("state", "value"),
            list(zip(sys.state_names, sol.x)))
    spec = spectrum_at(sys, sol.x, p)
    run.csv("spectrum.csv", ("re", "im"),
            [(z.real, z.imag) for z in spec.eigenvalues])
    run.say(f"equilibrium in {sol.iterations} iterations, rightmost "
            f"eigenvalue {spec.rightmost_real:.6g}")


def _continuation_settings(run: _Run, args):
    cfg = dict(run.scenario.analysis.get("continuation") or
               {k: v for k, v in
                [("param", "lambda"), ("direction", 1.0), ("h0", 0.02),
                 ("h_min", 1e-5), ("h_max", 0.05), ("max_steps", 2000),
                 ("param_min", 0.0), ("param_max", 1e6)]})
    if args.param:
        cfg["param"] = args.param
    if args.steps:
        cfg["max_steps"] = args.steps
    settings = ContinuationSettings(
        h0=float(cfg["h0"]), h_min=float(cfg["h_min"]),
        h_max=float(cfg["h_max"]), max_steps=int(cfg["max_steps"]),
        param_min=float(cfg["param_min"]), param_max=float(cfg["param_max"]),
        direction=float(cfg["direction"]))
    return str(cfg["param"]), settings


def _cmd_continue(run: _Run, args):
    sys, p, sol = _solve_base(run.scenario)
    param, settings = _continuation_settings(run, args)
    branch = continue_branch(sys, sol, param, settings)
    if branch.truncated:
        run.say(f"branch truncated: {branch.message}")
    run.csv("branch.csv",
            ("s", param, "rightmost_re") + sys.state_names,
            [(pt.s, pt.lam, pt.spectrum.rightmost_real, *pt.x)
             for pt in branch.points])
    records = locate_all(sys, branch, p)
    run.csv("bifurcations.csv",
            ("kind", param, "eig_re", "eig_im", "tolerance"),
            [(r.kind, r.lam,
              r.eig.real if r.eig is not None else float("nan"),
              r.eig.imag if r.eig is not None else float("nan"),
              r.tol_achieved) for r in records])
    run.say(f"{len(branch.points)} branch points, "
            f"{len(records)} bifurcation record(s)")


def _cmd_boundary2d(run: _Run, args):
    sys = run.scenario.build()
    p = run.scenario.base_params(sys)
    cfg = run.scenario.analysis.get("boundary2d")
    if cfg is None and not (args.param and args.grid):
        raise ScenarioError("scenario has no analysis.boundary2d block and "
                            "no --param/--grid override was given")
    param1, settings = _continuation_settings(run, args)
    if args.grid:
        lo, hi, num = args.grid
        grid = list(np.linspace(lo, hi, num))
        param2 = cfg["param2"] if cfg else args.param
    else:
        grid = [float(g) for g in cfg["grid"]]
        param2 = str(cfg["param2"])
    boundary = trace_boundary_2d(sys, param1, param2, grid, settings,
                                 params=p)
    run.csv("boundary.csv", (param2, param1 + "_star", "kind"),
            [(row.param2, row.lam, row.kind) for row in boundary.rows])


def _cmd_simulate(run: _Run, args):
    sys, p, sol = _solve_base(run.scenario)
    cfg = run.scenario.analysis.get("simulation") or {
        "t_end": 1.0, "h": 1e-3, "startup_be_steps": 2, "damped_every": 25,
        "param_steps": {}}
    try:
        p_run = p.with_values(cfg["param_steps"]) if cfg["param_steps"] else p
    except KeyError as exc:
        raise ScenarioError(f"simulation.param_steps: {exc.args[0]}") from None
    traj = integrate(sys, sol.x, p_run, t_end=float(cfg["t_end"]),
                     h=float(cfg["h"]),
                     startup_be_steps=int(cfg["startup_be_steps"]),
                     damped_every=int(cfg["damped_every"]))
    run.csv("trajectory.csv", ("t",) + sys.state_names,
            [(t, *row) for t, row in zip(traj.times, traj.states)])


def _cmd_secondary(run: _Run, args):
    sys = run.scenario.build()
    p = run.scenario.base_params(sys)
    cfg = run.scenario.analysis.get("secondary") or {
        "weights": {}, "default_weight": 1.0, "rho": 1e-8, "alpha": 1.0,
        "max_iter": 30, "tol_v": 0.01}
    weights = {b: float(cfg["weights"].get(b, cfg["default_weight"]))
               for b in sys.bus_ids}
    history = run_recursive(
        sys, params=p,
        weights=WeightVector(weights, rho=float(cfg["rho"])),
        max_iter=int(cfg["max_iter"]), tol_v=float(cfg["tol_v"]),
        alpha=float(cfg["alpha"]))
    v_rows = []
    g_rows = []
    for entry in history.iterations:
        snap = entry["snapshot"]
        for bus in sys.bus_ids:
            v_rows.append((entry["iteration"], bus, snap.voltages[bus]))
        for conv_id, (g_v, b_v) in sorted(entry["gains"].items()):
            g_rows.append((entry["iteration"], conv_id, g_v, b_v,
                           entry["objective"]))
    run.csv("secondary_voltages.csv", ("iter", "bus", "vmag"), v_rows)
    run.csv("secondary_gains.csv",
            ("iter", "converter", "g_v", "b_v", "objective"), g_rows)
    status = "converged" if history.converged else \
        (history.aborted or "iteration budget exhausted")
    run.say(f"secondary loop: {status} after "
            f"{len(history.iterations)} iteration(s)")


def _cmd_cf(run: _Run, args):
    scenario = run.scenario
    cfg = scenario.analysis.get("cf")
    if cfg is None:
        raise ScenarioError("scenario has no analysis.cf block")
    sys, p, sol = _solve_base(scenario)
    omega_step = float(cfg["omega_step"])
    if omega_step != 0.0:
        sys_run = scenario.build(rotating_sources=True)
        x0 = np.zeros(sys_run.n)
        for i, name in enumerate(sys_run.state_names):
            if not name.endswith(".theta_g"):
                x0[i] = sol.x[sys.state_index(name)]
        p_run = scenario.base_params(sys_run)
        for src in scenario.model.sources:
            if src.rotating:
                p_run = p_run.with_value(f"{src.id}.omega_offset", omega_step)
        sys = sys_run
    else:
        x0 = sol.x
        p_run = p
        if float(cfg["theta_step"]) != 0.0:
            for src in scenario.model.sources:
                p_run = p_run.with_value(
                    f"{src.id}.theta",
                    p_run[f"{src.id}.theta"] + float(cfg["theta_step"]))
    traj = integrate(sys, x0, p_run, t_end=float(cfg["t_end"]),
                     h=float(cfg["h"]),
                     startup_be_steps=int(cfg["startup_be_steps"]),
                     damped_every=int(cfg["damped_every"]))
    window = int(cfg["window"])
    omega0 = scenario.omega0
    rows = []

    def emit(series, block):
        for t, rho, omega in zip(series.times, series.rho, series.omega):
            rows.append((t, rho, omega, block))

    emit(cf_of_bus(sys, traj, str(cfg["bus"]), omega0, window=window), "bus")
    conv_id = cfg["converter"]
    if conv_id:
        conv_id = str(conv_id)
        if conv_id in sys.gfl_ids():
            emit(pll_internal_frequency(sys, traj, conv_id, p_run,
                                        window=window), "pll_internal")
        dec = decompose_converter_cf(sys, traj, conv_id, omega0, p_run)
        emit(dec.synchronization, "synchronization")
        emit(dec.regulation, "regulation")
        emit(dec.total, "total")
    run.csv("cf.csv", ("t", "rho", "omega", "block"), rows)


_HANDLERS = {
    "equilibrium": _cmd_equilibrium,
    "continue": _cmd_continue,
    "boundary2d": _cmd_boundary2d,
    "simulate": _cmd_simulate,
    "secondary": _cmd_secondary,
    "cf": _cmd_cf,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(_sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _grid_spec(text: str):
    try:
        lo, hi, num = text.split(":")
        return float(lo), float(hi), int(num)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"grid spec must look like a:b:n, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adnlab",
                     description="voltage-stability laboratory for "
                                 "converter-dominated distribution networks")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--scenario", required=True, help="scenario JSON file")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--param", default=None,
                        help="override the continuation parameter name")
    parser.add_argument("--grid", type=_grid_spec, default=None,
                        metavar="a:b:n",
                        help="override the boundary2d grid (linspace)")
    parser.add_argument("--steps", type=int, default=None,
                        help="override the continuation step budget")
    parser.add_argument("--quiet", action="store_true")
    return parser


def run_command(argv) -> int:
    if argv and argv[0] in ("-h", "--help"):
        build_parser().print_help()
        return EXIT_OK
    if not argv or argv[0] not in COMMANDS:
        print(f"usage: adnlab {{{','.join(COMMANDS)}}} --scenario FILE "
              f"--out DIR", file=_sys.stderr)
        return EXIT_USAGE
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        scenario = load_scenario(args.scenario)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        run = _Run(scenario, out_dir, args.command, args.quiet)
        _HANDLERS[args.command](run, args)
        run.manifest()
    except AdnlabError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def main():
    raise SystemExit(run_command(_sys.argv[1:]))


if __name__ == "__main__":
    main()
