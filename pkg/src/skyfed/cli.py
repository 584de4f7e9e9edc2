"""Batch experiment runner: placement, trajectories, training, sweeps.

Every command reads one scenario file, writes a ``manifest.json`` into the
output directory before any results, and then emits CSV (canonical) plus an
SVG convenience chart where a curve helps. All outputs are byte-identical
across reruns with the same seed and across worker counts; sweeps fan out
over ``SKYFED_THREADS`` workers but a single collector writes rows in input
order.

Exit codes: 0 success, 1 usage, 2 infeasible scenario, 3 I/O or scenario
file problems.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import __version__, fedsim, trajectory as traj_mod
from .core import (InfeasibleError, Scenario, ScenarioError, Trajectory,
                   parse_scenario, psnr_to_variance)
from .placement import optimize_placement, weighted_centroid


@dataclass(frozen=True)
class RunManifest:
    scenario: str
    command: str
    out_dir: str
    seed: int
    version: str


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _fmt(x) -> str:
    """Deterministic scalar formatting for CSV cells."""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _threads() -> int:
    raw = os.environ.get("SKYFED_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return min(4, os.cpu_count() or 1)


def _prepare_out(args, command) -> str:
    out = args.out
    os.makedirs(out, exist_ok=True)
    manifest = RunManifest(scenario=args.scenario, command=command, out_dir=out,
                           seed=args.seed if args.seed is not None else -1,
                           version=f"skyfed-{__version__}")
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest.__dict__, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def _load_scenario(args) -> Scenario:
    with open(args.scenario, "r", encoding="utf-8") as fh:
        scenario = parse_scenario(fh.read())
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    return scenario


# ---------------------------------------------------------------------------
# CSV / SVG writers
# ---------------------------------------------------------------------------

def write_trajectory_csv(path, traj: Trajectory, atl_value=None):
    lines = [f"# dwell = {traj.dwell}", f"# closed = {str(traj.closed).lower()}"]
    if atl_value is not None:
        lines.append(f"# atl = {_fmt(float(atl_value))}")
    lines.append("waypoint_index,x,y")
    for i, (x, y) in enumerate(traj.waypoints):
        lines.append(f"{i},{_fmt(float(x))},{_fmt(float(y))}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_trajectory_csv(path) -> Trajectory:
    dwell, closed = 1, False
    points = []
    with open(path, "r") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("dwell"):
                    dwell = int(body.split("=", 1)[1])
                elif body.startswith("closed"):
                    closed = body.split("=", 1)[1].strip() == "true"
                continue
            if line.startswith("waypoint_index"):
                continue
            _, x, y = line.split(",")
            points.append((float(x), float(y)))
    return Trajectory(np.array(points), dwell=dwell, closed=closed)


def write_round_log(path, records, n_devices):
    header = ["round", "loss", "accuracy", "gap", "drone_x", "drone_y"]
    header += [f"e_{i}" for i in range(1, n_devices + 1)]
    header += [f"c_{i}" for i in range(1, n_devices + 1)]
    lines = [",".join(header)]
    for rec in records:
        row = [str(rec.round), _fmt(rec.loss), _fmt(rec.accuracy), _fmt(rec.gap),
               _fmt(float(rec.drone_pos[0])), _fmt(float(rec.drone_pos[1]))]
        row += [_fmt(float(e)) for e in rec.per]
        row += [str(int(c)) for c in rec.delivered]
        lines.append(",".join(row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def svg_line_chart(series, title) -> str:
    """Minimal hand-rolled line chart; each series is (label, ys)."""
    width, height = 640, 400
    left, right, top, bot = 60, 20, 30, 40
    plot_w, plot_h = width - left - right, height - top - bot
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<text x="{width / 2}" y="18" text-anchor="middle" '
             f'font-size="14">{title}</text>',
             f'<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" '
             f'fill="none" stroke="black"/>']
    for idx, (label, ys) in enumerate(series):
        ys = np.asarray(ys, dtype=float)
        mask = np.isfinite(ys)
        if not mask.any():
            continue
        lo, hi = float(ys[mask].min()), float(ys[mask].max())
        span = hi - lo if hi > lo else 1.0
        xs = np.linspace(0, 1, len(ys))
        pts = []
        for x, y, ok in zip(xs, ys, mask):
            if not ok:
                continue
            px = left + x * plot_w
            py = top + (1.0 - (y - lo) / span) * plot_h
            pts.append(f"{px:.2f},{py:.2f}")
        color = _PALETTE[idx % len(_PALETTE)]
        parts.append(f'<polyline points="{" ".join(pts)}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{left + 8}" y="{top + 16 + 16 * idx}" '
                     f'font-size="12" fill="{color}">{label} '
                     f'[{lo:.4g}, {hi:.4g}]</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# Solvers shared by trajectory/train/sweep
# ---------------------------------------------------------------------------

def stationary_trajectory(scenario: Scenario, position) -> Trajectory:
    n = scenario.horizon // scenario.dwell
    return Trajectory(np.tile(np.asarray(position, dtype=float), (n + 1, 1)),
                      dwell=scenario.dwell, closed=True)


def solve_trajectory(scenario: Scenario, solver: str, closed_loop=False,
                     warm: Trajectory = None) -> Trajectory:
    if solver == "greedy":
        return traj_mod.greedy_trajectory(scenario)[0]
    if solver == "horizon":
        init = warm
        if init is None and not closed_loop:
            init, _ = traj_mod.greedy_trajectory(scenario)
        return traj_mod.horizon_optimize(scenario, init=init, closed_loop=closed_loop)
    if solver == "centroid":
        return traj_mod.baseline_weighted_centroid(scenario)
    if solver == "maxrate":
        return traj_mod.baseline_max_rate(scenario)
    if solver == "place":
        return stationary_trajectory(scenario, optimize_placement(scenario).position)
    raise _UsageError(f"unknown solver '{solver}'")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_place(args) -> int:
    scenario = _load_scenario(args)
    out = _prepare_out(args, "place")
    result = optimize_placement(scenario)
    lines = ["iteration,x,y,objective"]
    for i, p in enumerate(result.trace):
        from .placement import objective_ratio

        lines.append(f"{i},{_fmt(float(p[0]))},{_fmt(float(p[1]))},"
                     f"{_fmt(float(objective_ratio(p, scenario)))}")
    with open(os.path.join(out, "placement.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"position {result.position[0]:.6f} {result.position[1]:.6f} "
          f"objective {result.objective:.8g} iterations {result.iterations} "
          f"converged {result.converged}")
    return 0


def cmd_trajectory(args) -> int:
    scenario = _load_scenario(args)
    out = _prepare_out(args, "trajectory")
    if args.closed and args.solver != "horizon":
        raise _UsageError("--closed requires --solver horizon")
    traj = solve_trajectory(scenario, args.solver, closed_loop=args.closed)
    res = traj_mod.atl_of(scenario, traj)
    write_trajectory_csv(os.path.join(out, "trajectory.csv"), traj, res.value)
    with open(os.path.join(out, "atl.txt"), "w") as fh:
        fh.write(_fmt(res.value) + "\n")
    print(f"atl {res.value!r} solver {args.solver}")
    return 0


def cmd_train(args) -> int:
    scenario = _load_scenario(args)
    out = _prepare_out(args, "train")
    if args.trajectory:
        traj = read_trajectory_csv(args.trajectory)
    else:
        traj = solve_trajectory(scenario, args.solver)
    records = fedsim.simulate(scenario, traj)
    write_round_log(os.path.join(out, "rounds.csv"), records, len(scenario.devices))
    chart = svg_line_chart(
        [("loss", [r.loss for r in records]),
         ("accuracy", [r.accuracy for r in records])],
        "training curves")
    with open(os.path.join(out, "curves.svg"), "w") as fh:
        fh.write(chart)
    print(f"final loss {records[-1].loss!r} accuracy {records[-1].accuracy!r}")
    return 0


SWEEP_AXES = ("psnr", "per", "altitude", "vmax", "kappa")


def sweep_variant(scenario: Scenario, axis: str, value, device_index=None) -> Scenario:
    """Scenario copy with one swept parameter changed.

    ``psnr`` and ``per`` act on one device (default: the last one).
    """
    if axis == "psnr":
        idx = len(scenario.devices) - 1 if device_index is None else device_index
        devs = list(scenario.devices)
        devs[idx] = replace(devs[idx], noise_var=psnr_to_variance(float(value)))
        return scenario.with_devices(devs)
    if axis == "per":
        idx = len(scenario.devices) - 1 if device_index is None else device_index
        devs = list(scenario.devices)
        devs[idx] = replace(devs[idx], per_override=float(value))
        return scenario.with_devices(devs)
    if axis == "altitude":
        return replace(scenario, radio=replace(scenario.radio, altitude_m=float(value)))
    if axis == "vmax":
        return replace(scenario, v_max=float(value))
    if axis == "kappa":
        return replace(scenario, dwell=int(value))
    raise _UsageError(f"unknown sweep axis '{axis}' (choose from {SWEEP_AXES})")


def _evaluate_variant(variant: Scenario, axis: str, solver: str, target_loss,
                      warm: Trajectory = None):
    if axis in ("psnr", "per"):
        traj = solve_trajectory(variant, "place")
    else:
        traj = solve_trajectory(variant, solver, warm=warm)
    atl_value = traj_mod.atl_of(variant, traj).value
    records = fedsim.simulate(variant, traj)
    final_loss = records[-1].loss
    rounds_to_target = ""
    if target_loss is not None:
        rounds_to_target = -1
        for rec in records:
            if rec.loss <= target_loss:
                rounds_to_target = rec.round
                break
    return traj, atl_value, final_loss, rounds_to_target


def run_sweep(scenario: Scenario, axis: str, values, solver="greedy",
              target_loss=None, device_index=None, workers=None):
    """Evaluate one scenario parameter sweep; returns per-value result rows.

    The ``vmax`` axis with the horizon solver chains warm starts from small
    to large limits (a trajectory feasible at a small limit stays feasible
    at a larger one), which keeps the reported ATL nonincreasing. Warm
    chaining is sequential; the remaining axes fan out across threads.
    """
    variants = [sweep_variant(scenario, axis, v, device_index) for v in values]
    rows = []
    if axis == "vmax" and solver == "horizon":
        order = np.argsort(np.asarray(values, dtype=float))
        results = [None] * len(values)
        warm = None
        for i in order:
            traj, atl_value, final_loss, rtt = _evaluate_variant(
                variants[i], axis, solver, target_loss, warm=warm)
            results[i] = (atl_value, final_loss, rtt)
            warm = traj
        for v, (atl_value, final_loss, rtt) in zip(values, results):
            rows.append((v, atl_value, final_loss, rtt))
        return rows
    workers = workers if workers is not None else _threads()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(
            lambda sc: _evaluate_variant(sc, axis, solver, target_loss), variants))
    for v, (_, atl_value, final_loss, rtt) in zip(values, results):
        rows.append((v, atl_value, final_loss, rtt))
    return rows


def cmd_sweep(args) -> int:
    scenario = _load_scenario(args)
    out = _prepare_out(args, "sweep")
    values = [float(v) for v in args.values.split(",")]
    rows = run_sweep(scenario, args.axis, values, solver=args.solver,
                     target_loss=args.target_loss, device_index=args.device)
    lines = ["value,atl,final_loss,rounds_to_target"]
    for v, atl_value, final_loss, rtt in rows:
        lines.append(f"{_fmt(v)},{_fmt(atl_value)},{_fmt(final_loss)},{rtt}")
    with open(os.path.join(out, "sweep.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    chart = svg_line_chart([("atl", [r[1] for r in rows])], f"sweep {args.axis}")
    with open(os.path.join(out, "sweep.svg"), "w") as fh:
        fh.write(chart)
    print(f"swept {args.axis} over {len(rows)} values")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="skyfed", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scenario", required=True, help="scenario file path")
        p.add_argument("--seed", type=int, default=None, help="override scenario seed")
        p.add_argument("--out", default="skyfed-out", help="output directory")

    p = sub.add_parser("place", help="optimal stationary placement")
    common(p)
    p.set_defaults(func=cmd_place)

    p = sub.add_parser("trajectory", help="optimize a drone trajectory")
    common(p)
    p.add_argument("--solver", default="greedy",
                   choices=("greedy", "horizon", "centroid", "maxrate", "place"))
    p.add_argument("--closed", action="store_true",
                   help="require the trajectory to return to its start")
    p.set_defaults(func=cmd_trajectory)

    p = sub.add_parser("train", help="run the federated training simulator")
    common(p)
    p.add_argument("--solver", default="greedy",
                   choices=("greedy", "horizon", "centroid", "maxrate", "place"))
    p.add_argument("--trajectory", default=None,
                   help="read the trajectory from a CSV instead of solving")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="parameter sweep")
    common(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated sweep values")
    p.add_argument("--solver", default="greedy",
                   choices=("greedy", "horizon", "centroid", "maxrate", "place"))
    p.add_argument("--target-loss", type=float, default=None)
    p.add_argument("--device", type=int, default=None,
                   help="0-based device index for psnr/per sweeps")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # -h/--help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return 2
    except (OSError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def console_entry():
    sys.exit(main())
