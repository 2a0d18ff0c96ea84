#!/usr/bin/env python3
"""
Command-line entry point.

    cli.py monitor "G[0,2](v >= 0)" trace.csv
    cli.py solve exp1 --mode stage1
    cli.py pareto exp2 --cycle 0
    cli.py simulate exp2 --mode full --out runs/exp2
    cli.py plot runs/exp2 deltas
    cli.py compare exp2 --out runs/exp2-compare

Scenarios are either a built-in name (exp1, exp2) or a JSON file.
Exit codes: 0 success, 1 usage error, 2 infeasible outcome, 3 I/O, schema
or parse error.
"""
import argparse
import csv
import logging
import os
import sys

from config import ConfigError, load_config, solver_config
from log_buffer import configure_logging, log_buffer
from milp import BigMError, ModelError
from render_svg import PLOT_KINDS, RenderError, render_svg, write_svg
from risk import RiskError
from scenario_sim import (BUILTINS, HardInfeasibleError, ScenarioError, build_problem, resolve_scenario,
                          run_receding_horizon, save_scenario, scenario_hash, with_overrides)
from sim_log import LogFormatError, read_log, write_log, write_manifest
from stage1 import SpecError, restore_feasibility, solve_nominal
from stage2 import Budget, EmptyFrontError, ParetoError, approximate_pareto, select_action
from stl_core import StlError, parse_formula, read_trace_csv, robustness

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INFEASIBLE = 2
EXIT_INPUT = 3

MODE_NAMES = {'stage1': 'stage1_only', 'full': 'full'}
DIAGNOSTICS_FILE = 'diagnostics.log'
SCENARIO_COPY = 'scenario.json'


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser(config):
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(description='Two-stage STL conflict resolution for MPC: feasibility restoration '
                                 'and Pareto refinement', formatter_class=fmt)
    parser.add_argument('--config', default=None, help='JSON config file merged over the defaults')
    parser.add_argument('--log-level', default=config['log_level'], help='logging level')
    subparsers = parser.add_subparsers(dest='command', help='Command to execute', parser_class=_Parser)

    def scenario_flags(p, with_out=True):
        p.add_argument('scenario', help=f"built-in name ({', '.join(BUILTINS)}) or scenario JSON file")
        p.add_argument('--seed', type=int, default=None, help='Monte-Carlo seed (default: scenario seed)')
        p.add_argument('--grid-size', type=int, default=None,
                       help=f"epsilon grid points per objective (default: scenario, else {config['grid_size']})")
        p.add_argument('--alpha', type=float, default=None,
                       help=f"relaxation budget above the minimum (default: scenario, else {config['alpha']})")
        p.add_argument('--samples', type=int, default=None,
                       help=f"Monte-Carlo samples per agent (default: scenario, else {config['samples']})")
        p.add_argument('--cycles', type=_positive_int, default=None, help='control cycles (default: scenario)')
        p.add_argument('--lp-backend', choices=['simplex', 'highs'], default=None,
                       help='LP solver for relaxations (default: scenario)')
        p.add_argument('--workers', type=int, default=config['max_workers'],
                       help='threads for the epsilon sweep, one objective chain each')
        if with_out:
            p.add_argument('--out', default=None,
                           help=f"output directory (default: $STLMPC_OUT_DIR or {config['out_dir']}/<scenario>)")

    # Monitor command
    p = subparsers.add_parser('monitor', help='Robustness of a formula over a trace CSV', formatter_class=fmt)
    p.add_argument('formula', help='formula text, e.g. "G[0,2](v >= 0)"')
    p.add_argument('trace', help='trace CSV with header t,dim1,dim2,...')
    p.add_argument('--t-index', type=int, default=0, help='sample index to evaluate at')
    p.add_argument('--dt', type=float, default=None, help='sample period for single-row traces')

    # Solve command
    p = subparsers.add_parser('solve', help='Stage 1 (and Stage 2) for the first control cycle',
                              formatter_class=fmt)
    scenario_flags(p, with_out=False)
    p.add_argument('--mode', choices=sorted(MODE_NAMES), default='stage1', help='pipeline to run')

    # Pareto command
    p = subparsers.add_parser('pareto', help='Explored candidates and Pareto front at one cycle (CSV)',
                              formatter_class=fmt)
    scenario_flags(p)
    p.add_argument('--cycle', type=int, default=0, help='control cycle to export')

    # Simulate command
    p = subparsers.add_parser('simulate', help='Receding-horizon run writing CSV logs and a manifest',
                              formatter_class=fmt)
    scenario_flags(p)
    p.add_argument('--mode', choices=sorted(MODE_NAMES), default='full', help='pipeline to run')

    # Plot command
    p = subparsers.add_parser('plot', help='Render a run directory as SVG', formatter_class=fmt)
    p.add_argument('log_dir', help='run directory written by simulate')
    p.add_argument('kind', choices=PLOT_KINDS, help='plot kind')
    p.add_argument('--cycle', type=int, default=None, help='cycle for front/candidates (default: first)')
    p.add_argument('--out', default=None, help='SVG path (default: <log_dir>/<kind>.svg)')

    # Compare command
    p = subparsers.add_parser('compare', help='Run stage1 and full modes side by side', formatter_class=fmt)
    scenario_flags(p)
    return parser


SCENARIO_CONFIG_KEYS = ('samples', 'sigma', 'grid_size', 'alpha', 'lp_backend')


def _scenario(args, config):
    sc = resolve_scenario(args.scenario, {k: config[k] for k in SCENARIO_CONFIG_KEYS})
    return with_overrides(sc, seed=args.seed, alpha=args.alpha, samples=args.samples,
                          grid_size=args.grid_size, lp_backend=args.lp_backend, cycles=args.cycles)


def _solver(config, sc):
    return solver_config(dict(config, lp_backend=sc.lp_backend))


def _out_dir(args, config, sc, suffix=None):
    out = args.out or os.path.join(config['out_dir'], sc.name)
    if suffix:
        out = os.path.join(out, suffix)
    os.makedirs(out, exist_ok=True)
    return out


def cmd_monitor(args, config):
    formula = parse_formula(args.formula)
    trace = read_trace_csv(args.trace, args.dt)
    rho = robustness(formula, trace, args.t_index)
    print(f"robustness {rho!r}")
    print('SAT' if rho >= 0 else 'UNSAT')
    return EXIT_OK


def cmd_solve(args, config):
    sc = _scenario(args, config)
    cfg = _solver(config, sc)
    prob, agents = build_problem(sc, sc.ego_init.as_array())
    nominal = solve_nominal(prob, sc.specs, cfg)
    print(f"nominal: {'feasible' if nominal.feasible else nominal.status}")
    relax = restore_feasibility(prob, sc.specs, cfg)
    print(f"stage1: {relax.status}")
    if relax.status == 'hard_infeasible':
        return EXIT_INFEASIBLE
    print(f"delta_min {relax.delta_min!r}")
    for name, value in relax.delta_star.items():
        print(f"  delta[{name}] {value!r}")
    u = relax.u_star
    if MODE_NAMES[args.mode] == 'full':
        result = approximate_pareto(prob, sc.specs, Budget(relax.delta_min, sc.budget_alpha), sc.objectives,
                                    sc.grid_size, agents, sc.risk_params, cfg, max_workers=args.workers,
                                    warm_start=bool(config['warm_start']), fallback=relax)
        chosen = select_action(result, [sc.nominal_input] * len(u))
        print(f"stage2: {len(result.candidates)} candidates, {len(result.pareto_set)} nondominated, "
              f"selected {chosen.id}")
        for name, value in zip(sc.objectives.names, chosen.g_true):
            print(f"  {name} {value!r}")
        u = chosen.u
    print(f"first control a={u[0][0]!r} beta={u[0][1]!r}")
    return EXIT_OK


def _run(sc, mode, cfg, args, config, out):
    """Closed-loop run into ``out`` with the manifest and diagnostics written even on abort."""
    status, log = 'ok', None
    log_buffer.clear()
    try:
        log = run_receding_horizon(sc, mode, cfg, max_workers=args.workers, warm_start=bool(config['warm_start']))
    except HardInfeasibleError as e:
        status, log = f"hard_infeasible at cycle {e.cycle}", e.log
        raise
    finally:
        if log is not None:
            write_log(log, out)
            save_scenario(sc, os.path.join(out, SCENARIO_COPY))
            write_manifest(out, sc.name, scenario_hash(sc), sc.seed, mode, len(log.cycles),
                           {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}, status)
        log_buffer.dump(os.path.join(out, DIAGNOSTICS_FILE))
    return log


def cmd_pareto(args, config):
    if args.cycle < 0:
        raise ScenarioError('cycle', "must be non-negative")
    sc = with_overrides(_scenario(args, config), cycles=args.cycle + 1)
    out = _out_dir(args, config, sc)
    log = _run(sc, 'full', _solver(config, sc), args, config, out)
    record = log.cycles[args.cycle]
    writer = csv.writer(sys.stdout, lineterminator='\n')
    writer.writerow(['candidate', 'pareto', 'selected', 'delta_total', *log.objective_names])
    for cand in record.candidates:
        writer.writerow([cand.id, int(cand.pareto), int(cand.selected), repr(cand.delta_total)]
                        + [repr(v) for v in cand.g_true])
    return EXIT_OK


def cmd_simulate(args, config):
    sc = _scenario(args, config)
    mode = MODE_NAMES[args.mode]
    out = _out_dir(args, config, sc)
    log = _run(sc, mode, _solver(config, sc), args, config, out)
    print(f"{sc.name} ({mode}): {len(log.cycles)} cycles written to {out}")
    return EXIT_OK


def cmd_plot(args, config):
    streams = read_log(args.log_dir)
    regions = ()
    scenario_path = os.path.join(args.log_dir, SCENARIO_COPY)
    if os.path.exists(scenario_path):
        regions = resolve_scenario(scenario_path).regions
    svg = render_svg(streams, args.kind, args.cycle, regions)
    path = write_svg(svg, args.out or os.path.join(args.log_dir, f"{args.kind}.svg"))
    print(path)
    return EXIT_OK


def cmd_compare(args, config):
    sc = _scenario(args, config)
    cfg = _solver(config, sc)
    logs = {}
    for label, mode in (('stage1', 'stage1_only'), ('full', 'full')):
        logs[label] = _run(sc, mode, cfg, args, config, _out_dir(args, config, sc, label))
    agents = logs['full'].agent_names
    writer = csv.writer(sys.stdout, lineterminator='\n')
    writer.writerow(['cycle', 'delta_min', 'stage1_total', 'full_total',
                     *(f"{m}_R_{a}" for a in agents for m in ('stage1', 'full'))])
    for s1, full in zip(logs['stage1'].cycles, logs['full'].cycles):
        row = [s1.cycle, repr(s1.delta_min), repr(sum(s1.deltas.values())), repr(sum(full.deltas.values()))]
        for a in agents:
            row += [repr(s1.risk[a].R), repr(full.risk[a].R)]
        writer.writerow(row)
    return EXIT_OK


COMMANDS = {
    'monitor': cmd_monitor,
    'solve': cmd_solve,
    'pareto': cmd_pareto,
    'simulate': cmd_simulate,
    'plot': cmd_plot,
    'compare': cmd_compare,
}

INPUT_ERRORS = (ScenarioError, ConfigError, StlError, LogFormatError, RenderError, RiskError, SpecError,
                BigMError, OSError, ValueError)
INFEASIBLE_ERRORS = (HardInfeasibleError, EmptyFrontError, ParetoError, ModelError)


def main(argv=None):
    try:
        config = load_config()
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    parser = build_parser(config)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_USAGE

    try:
        if args.config:
            if not os.path.exists(args.config):
                raise ConfigError(f"config file {args.config} not found")
            config = load_config(args.config)
        configure_logging(args.log_level)
        return COMMANDS[args.command](args, config)
    except INPUT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except INFEASIBLE_ERRORS as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == '__main__':
    sys.exit(main())
