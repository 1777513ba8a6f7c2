"""``nestpart`` command line.

Exit codes: 0 success, 1 usage error, 2 invalid input (bad files, infeasible
partition, missing calibration). Inputs are validated before any output
file is written.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from .errors import InfeasiblePartitionError, MissingCalibrationError, NestpartError, NumericalError, ReportError

log = logging.getLogger("nestpart")

EXIT_OK, EXIT_USAGE, EXIT_INVALID = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str):
    """'2..8' or '128,256,512' -> list of ints."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a range like 2..8 or a list like 1,2,3, got {text!r}")


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ValueError(f"{path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None


def _inline_or_file(value, base: Path):
    if isinstance(value, str):
        return _load_json(base / value)
    return value


def _check_out(path):
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise ValueError(f"output directory {parent} does not exist")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_mesh(args):
    from .mesh import MeshConfig, TreeSpec, build_mesh, extract_face_mesh

    trees = [TreeSpec((float(x), float(y), float(z)), int(m)) for x, y, z, m in (args.tree or [(0, 0, 0, 0)])]
    config = MeshConfig(tuple(trees), args.level, args.element_size)
    _check_out(args.out)
    mesh = build_mesh(config)
    faces = extract_face_mesh(mesh)
    mesh.save(args.out)
    print(f"elements={mesh.num_elements} interior_faces={faces.num_interior} boundary_faces={faces.num_boundary}")


def cmd_partition(args):
    from .mesh import load_mesh
    from .partition import fraction_balancer, model_balancer, nested_partition, ratio_balancer
    from .perfmodel import KernelTimeTable

    mesh = load_mesh(args.mesh)
    if args.ratio is not None:
        balancer = ratio_balancer(args.ratio)
    elif args.fraction is not None:
        balancer = fraction_balancer(args.fraction)
    else:
        table = KernelTimeTable.load(args.table)
        table.check(args.N)
        balancer = model_balancer(table, args.N)
    if args.nodes > mesh.num_elements:
        raise ValueError(f"--nodes {args.nodes} exceeds the element count {mesh.num_elements}")
    _check_out(args.out)
    if args.stats:
        _check_out(args.stats)
    part = nested_partition(mesh, args.nodes, balancer, args.N)
    for s in part.stats:
        if s.clamped:
            if args.strict:
                raise InfeasiblePartitionError(s.requested, s.interior, s.node)
            print(
                f"warning: node {s.node} asked for {s.requested} device elements, "
                f"clamped to its {s.interior} interior elements",
                file=sys.stderr,
            )
    part.save(args.out)
    if args.stats:
        part.write_stats_csv(args.stats)
    for s in part.stats:
        ratio = s.K_dev / s.K_host if s.K_host else float("inf")
        print(f"node={s.node} K={s.K} K_dev={s.K_dev} K_host={s.K_host} ratio={ratio:.4f} surface_faces={s.surface_faces}")


def cmd_calibrate(args):
    from .perfmodel import DeviceProfile, calibrate

    if len(set(args.counts)) < 3:
        raise ValueError("--counts needs at least three distinct values")
    if any(c <= 0 for c in args.counts):
        raise ValueError("--counts must be positive")
    if any(not 1 <= n <= 15 for n in args.orders):
        raise ValueError("--orders must lie in 1..15")
    profile = DeviceProfile.load(args.profile) if args.profile else None
    _check_out(args.out)
    table = calibrate(args.orders, args.counts, profile, repeats=args.repeats, seed=args.seed)
    table.save(args.out)
    flagged = [(k, N, d) for (k, N, d), f in table.entries.items() if f.flagged]
    for k, N, d in flagged:
        print(f"warning: {k} N={N} {d}: outliers rejected or slope clamped", file=sys.stderr)
    print(f"wrote {len(table.entries)} fits for orders {args.orders}")


def cmd_balance(args):
    from .perfmodel import KernelTimeTable, apply_profile, balance, derive_device_profile

    table = KernelTimeTable.load(args.table)
    if args.derive_ratio is not None:
        if not args.profile_out:
            raise ValueError("--derive-ratio needs --profile-out")
        _check_out(args.profile_out)
        profile = derive_device_profile(
            args.N, args.K, table, args.derive_ratio, table.transfer.alpha, table.transfer.beta
        )
        with open(args.profile_out, "w") as fh:
            json.dump(profile.to_json(), fh, indent=2)
            fh.write("\n")
        table = apply_profile(table, profile)
        print(f"profile multiplier={profile.default:.9g}")
    sol = balance(args.N, args.K, table)
    print(f"K_dev={sol.k_dev} K_host={sol.k_host} ratio={sol.ratio:.6f} "
          f"T_dev={sol.t_dev:.9e} T_host={sol.t_host:.9e} residual={sol.residual:.3e}")


def cmd_solve(args):
    from .solver import CflWarning, SolveConfig, run, write_outputs

    data = _load_json(args.config)
    try:
        config = SolveConfig.from_json(data)
    except KeyError as exc:
        raise ValueError(f"{args.config}: missing key {exc}") from None
    if args.seed is not None:
        config.seed = args.seed
    if args.steps is not None:
        if args.steps < 1:
            raise ValueError("--steps must be at least 1")
        config.steps = args.steps
    from .mesh import build_mesh

    build_mesh(config.mesh)  # validate before touching the output directory
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", CflWarning)
        state, diag, solver = run(config, threads=args.threads)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    write_outputs(args.out, config, state, diag, solver)
    print(f"steps={state.step} time={state.time:.6g} energy={diag.energy[-1][2]:.9e}")


def _scenario_from_json(path):
    from .hetsim import NetworkModel, SimScenario
    from .mesh import MeshConfig, build_mesh
    from .partition import model_balancer, nested_partition, partition_from_json, ratio_balancer
    from .perfmodel import DeviceProfile, KernelTimeTable, apply_profile

    base = Path(path).resolve().parent
    data = _load_json(path)
    for key in ("mesh", "table"):
        if key not in data:
            raise ValueError(f"{path}: scenario needs a {key!r} entry")
    order = int(data.get("order", 7))
    mesh = build_mesh(MeshConfig.from_json(_inline_or_file(data["mesh"], base)))
    table = KernelTimeTable.from_json(_inline_or_file(data["table"], base))
    profile = data.get("profile")
    profile = DeviceProfile.from_json(_inline_or_file(profile, base)) if profile else None
    table.check(order, ("host",) if profile else ("host", "device"))

    spec = _inline_or_file(data.get("partition", {"nodes": 1}), base)
    if "nodes" in spec and isinstance(spec["nodes"], list):
        part = partition_from_json(mesh, spec, order)
    else:
        nodes = int(spec.get("nodes", 1))
        if "ratio" in spec:
            balancer = ratio_balancer(float(spec["ratio"]))
        else:
            model = apply_profile(table, profile) if profile else table
            balancer = model_balancer(model, order)
        part = nested_partition(mesh, nodes, balancer, order)
    net = data.get("network", {})
    return SimScenario(
        mesh,
        part,
        order,
        int(data.get("steps", 118)),
        table,
        profile,
        NetworkModel(float(net.get("alpha", 0.0)), float(net.get("beta", 0.0))),
    )


def cmd_simulate(args):
    from .hetsim import STRATEGIES, compare_strategies, simulate

    scenario = _scenario_from_json(args.scenario)
    _check_out(args.out)
    if args.strategies:
        _check_out(args.strategies)
    trace = simulate(scenario)
    trace.write_csv(args.out)
    if args.strategies:
        names = STRATEGIES + (("native_mic",) if args.native_penalty is not None else ())
        comp = compare_strategies(scenario, names, args.native_penalty or 4.0)
        comp.write_csv(args.strategies)
    print(f"steps={trace.steps} wall_time={trace.total_time:.9e} idle_fraction={trace.idle_fraction():.6f}")


def cmd_report(args):
    from .report import report_files

    rep = report_files(args.trace, args.stats, args.strategies)
    rep.write(args.out)
    print(f"wrote {Path(args.out) / 'report.md'}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nestpart", description="Nested host/device partitioning for dG wave propagation.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    m = sub.add_parser("mesh", help="build a Morton-ordered brick forest")
    m.add_argument("--level", type=int, required=True)
    m.add_argument("--tree", nargs=4, action="append", metavar=("X", "Y", "Z", "MAT"),
                   help="tree origin and material id; repeat for a forest (default: one tree at the origin)")
    m.add_argument("--element-size", type=float, default=None)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mesh)

    pa = sub.add_parser("partition", help="nested node/device partition")
    pa.add_argument("--mesh", required=True)
    pa.add_argument("--nodes", type=int, required=True)
    g = pa.add_mutually_exclusive_group(required=True)
    g.add_argument("--ratio", type=float, help="device/host element ratio")
    g.add_argument("--fraction", type=float, help="device share of each node's elements")
    g.add_argument("--table", help="kernel time table; use the balance solver")
    pa.add_argument("--N", type=int, default=7)
    pa.add_argument("--strict", action="store_true", help="fail instead of clamping to the interior supply")
    pa.add_argument("--out", required=True)
    pa.add_argument("--stats", help="per-node statistics CSV")
    pa.set_defaults(func=cmd_partition)

    c = sub.add_parser("calibrate", help="time the kernels and fit per-kernel affine models")
    c.add_argument("--orders", type=_int_list, required=True)
    c.add_argument("--counts", type=_int_list, required=True)
    c.add_argument("--profile", help="synthetic device profile JSON")
    c.add_argument("--repeats", type=int, default=3)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    b = sub.add_parser("balance", help="solve for the device element count")
    b.add_argument("--table", required=True)
    b.add_argument("--N", type=int, required=True)
    b.add_argument("--K", type=int, required=True)
    b.add_argument("--derive-ratio", type=float, help="first derive a uniform device profile hitting this ratio")
    b.add_argument("--profile-out", help="where to write the derived profile")
    b.set_defaults(func=cmd_balance)

    s = sub.add_parser("solve", help="run the dG solver")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int, default=None, help="worker threads (0 = auto; default NESTPART_THREADS or 1)")
    s.set_defaults(func=cmd_solve)

    si = sub.add_parser("simulate", help="discrete-event run of a scenario")
    si.add_argument("--scenario", required=True)
    si.add_argument("--out", required=True)
    si.add_argument("--strategies", help="also write a strategy comparison CSV")
    si.add_argument("--native-penalty", type=float, default=None,
                    help="include the native_mic strategy with this network penalty")
    si.set_defaults(func=cmd_simulate)

    r = sub.add_parser("report", help="summarise traces, stats and strategy runs")
    r.add_argument("--trace", required=True)
    r.add_argument("--stats")
    r.add_argument("--strategies")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (InfeasiblePartitionError, MissingCalibrationError, ReportError, NestpartError, NumericalError, ValueError, KeyError) as exc:
        print(f"nestpart {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
