"""Batch command-line front end.

Subcommands: ``simulate``, ``optimize``, ``check``, ``converge``,
``oracle``.  Artifacts (CSV, JSON, and companion PNG figures unless
``--no-plot``) are written atomically into ``--out-dir``.  Exit codes:
0 success, 2 verification failure, 1 input or computation error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

import numpy as np

from .conditions import (
    CheckOptions,
    assemble_limit,
    check_continuous,
    check_discrete,
    recover_discrete_duals,
)
from .discretize import Reference, build_mesh, convergence_report, discretize_problem
from .dynamics import integrate
from .errors import MissingSection, ParseError, PolysweepError
from .problemfile import (
    certificate_to_bundle,
    certificate_to_continuous,
    load_problem_file,
)
from .solver import SolveOptions, brute_force, solve


def _atomic_write(path, writer):
    """Write through a temp file and rename, so artifacts are never partial."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def _write_json(path, payload):
    def writer(tmp):
        with open(tmp, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    return _atomic_write(path, writer)


def _parse_levels(spec):
    if ".." in spec:
        a, b = spec.split("..", 1)
        return list(range(int(a), int(b) + 1))
    return [int(x) for x in spec.split(",")]


def _solver_options(args, file_options):
    opts = SolveOptions()
    merged = dict(file_options)
    if args.multistart is not None:
        merged["multistart"] = args.multistart
    if args.seed is not None:
        merged["seed"] = args.seed
    if "multistart" in merged:
        opts.multistart_count = int(merged["multistart"])
    if "seed" in merged:
        opts.seed = int(merged["seed"])
    for key in ("max_iters", "stop_tol", "step_size_init", "fd_epsilon"):
        if key in merged:
            setattr(opts, key, type(getattr(opts, key))(merged[key]))
    return opts


def _require_control(pf):
    if pf.control is None:
        raise MissingSection("missing required section [control]", path=pf.path)
    return pf.control


def cmd_simulate(args):
    pf = load_problem_file(args.file)
    control = _require_control(pf)
    mesh = build_mesh(args.level, pf.problem.T)
    traj = integrate(pf.problem, control, mesh, scheme=args.scheme)
    controls = control.values_at(mesh.nodes[1:])
    csv_path = os.path.join(args.out_dir, "trajectory.csv")
    _atomic_write(csv_path, lambda tmp: traj.to_csv(tmp, controls=controls))
    print(f"wrote {csv_path}")
    if not args.no_plot:
        from .figures import save_trajectory_figure

        png = os.path.join(args.out_dir, "trajectory.png")
        _atomic_write(png, lambda tmp: save_trajectory_figure(tmp, traj, controls))
        print(f"wrote {png}")
    return 0


def cmd_optimize(args):
    pf = load_problem_file(args.file)
    mesh = build_mesh(args.level, pf.problem.T)
    dp = discretize_problem(pf.problem, mesh, tracking_weight=args.tracking_weight or 0.0)
    if args.tracking_weight and pf.control is not None:
        ref_traj = integrate(pf.problem, pf.control, mesh, with_eta=False)
        dp = discretize_problem(
            pf.problem,
            mesh,
            reference=Reference.from_trajectory(ref_traj, pf.control),
            epsilon=args.epsilon,
            tracking_weight=args.tracking_weight,
        )
    result = solve(dp, _solver_options(args, pf.solver_options))
    json_path = os.path.join(args.out_dir, "solve.json")
    _write_json(json_path, result.to_json_dict())
    print(f"wrote {json_path}  objective={result.objective:.6e}")

    from .dynamics import BVControl

    control = BVControl(mesh.nodes[:-1], result.pair.controls, control_set=pf.problem.U)
    traj = integrate(pf.problem, control, mesh, sampling="left")
    csv_path = os.path.join(args.out_dir, "trajectory.csv")
    _atomic_write(csv_path, lambda tmp: traj.to_csv(tmp, controls=result.pair.controls))
    print(f"wrote {csv_path}")
    if not args.no_plot:
        from .figures import save_trajectory_figure

        png = os.path.join(args.out_dir, "trajectory.png")
        _atomic_write(
            png, lambda tmp: save_trajectory_figure(tmp, traj, result.pair.controls)
        )
        print(f"wrote {png}")
    return 0


def cmd_check(args):
    pf = load_problem_file(args.file)
    control = _require_control(pf)
    mesh = build_mesh(args.level, pf.problem.T)
    traj = integrate(pf.problem, control, mesh)
    from .discretize import DiscretePair

    pair = DiscretePair(
        states=traj.states, controls=control.values_at(mesh.nodes[1:])
    )
    dp = discretize_problem(pf.problem, mesh)
    opts = CheckOptions(default_tol=args.tol) if args.tol else CheckOptions()

    reports = {}
    if pf.certificate is not None:
        bundle = certificate_to_bundle(pf.certificate, mesh, pf.problem)
        reports["discrete"] = check_discrete(pair, dp, bundle, opts)
        duals = certificate_to_continuous(pf.certificate, mesh, pf.problem)
        reports["continuous"] = check_continuous(traj, control, duals, pf.problem, opts)
    else:
        bundle, fit = recover_discrete_duals(pair, dp)
        reports["discrete"] = check_discrete(pair, dp, bundle, opts)
        print(f"recovered multipliers with fit residual {fit:.3e}")
        if args.levels:
            levels = _parse_levels(args.levels)
            bundles, meshes = [], []
            for m in levels:
                mm = build_mesh(m, pf.problem.T)
                tt = integrate(pf.problem, control, mm)
                pp = DiscretePair(
                    states=tt.states, controls=control.values_at(mm.nodes[1:])
                )
                bb, _ = recover_discrete_duals(pp, discretize_problem(pf.problem, mm))
                bundles.append(bb)
                meshes.append(mm)
            duals, diag = assemble_limit(bundles, meshes, pf.problem.C)
            fine_traj = integrate(pf.problem, control, meshes[-1])
            reports["continuous"] = check_continuous(
                fine_traj, control, duals, pf.problem, opts
            )
            print(f"assembled limit with Cauchy differences {diag['cauchy_q']}")

    payload = {"schema": 1}
    for name, rep in reports.items():
        payload[name] = rep.to_json_dict()
    json_path = os.path.join(args.out_dir, "check.json")
    _write_json(json_path, payload)
    print(f"wrote {json_path}")
    if not args.no_plot:
        from .figures import save_report_figure

        for name, rep in reports.items():
            png = os.path.join(args.out_dir, f"check_{name}.png")
            _atomic_write(png, lambda tmp, rep=rep, name=name: save_report_figure(tmp, rep, name))
            print(f"wrote {png}")
    for name, rep in reports.items():
        print(f"{name}: {'pass' if rep.verdict else 'fail'} "
              f"(nontriviality {rep.nontriviality:.3e})")
    if not all(rep.verdict for rep in reports.values()):
        return 2
    return 0


def cmd_converge(args):
    pf = load_problem_file(args.file)
    control = _require_control(pf)
    levels = _parse_levels(args.levels)
    ref_level = min(max(levels) + 3, 24)
    ref_mesh = build_mesh(ref_level, pf.problem.T)
    ref_traj = integrate(pf.problem, control, ref_mesh, with_eta=False)
    reference = Reference.from_trajectory(ref_traj, control)
    table = convergence_report(pf.problem, control, levels, reference)
    csv_path = os.path.join(args.out_dir, "convergence.csv")
    _atomic_write(csv_path, table.to_csv)
    print(f"wrote {csv_path} (self-reference at level {ref_level})")
    if not args.no_plot:
        from .figures import save_convergence_figure

        png = os.path.join(args.out_dir, "convergence.png")
        _atomic_write(png, lambda tmp: save_convergence_figure(tmp, table))
        print(f"wrote {png}")
    return 0


def cmd_oracle(args):
    pf = load_problem_file(args.file)
    mesh = build_mesh(args.level, pf.problem.T)
    dp = discretize_problem(pf.problem, mesh)
    values = [float(v) for v in args.grid.split(",")]
    grid = [values for _ in range(pf.problem.U.d)]
    result = brute_force(dp, grid)
    json_path = os.path.join(args.out_dir, "oracle.json")
    payload = result.to_json_dict()
    payload["controls"] = result.pair.controls.tolist()
    _write_json(json_path, payload)
    print(f"wrote {json_path}  objective={result.objective:.6e}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="polysweep",
        description="Polyhedral sweeping-process control: simulate, optimize, verify.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_level=True):
        p.add_argument("file", help="problem file (TOML)")
        if needs_level:
            p.add_argument("--level", type=int, default=6, help="mesh refinement level")
        p.add_argument("--out-dir", default=".", help="artifact directory")
        p.add_argument("--no-plot", action="store_true", help="skip figure rendering")

    p = sub.add_parser("simulate", help="integrate the dynamics for the file's control")
    common(p)
    p.add_argument("--scheme", default="catching_up",
                   choices=["catching_up", "tangent_projection"])
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("optimize", help="solve the discrete control problem")
    common(p)
    p.add_argument("--multistart", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tracking-weight", type=float, default=0.0)
    p.add_argument("--epsilon", type=float, default=None)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("check", help="verify optimality conditions")
    common(p)
    p.add_argument("--levels", default=None, help="a..b for limit assembly")
    p.add_argument("--tol", type=float, default=None)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("converge", help="refinement error table")
    common(p, needs_level=False)
    p.add_argument("--levels", required=True, help="a..b or comma list")
    p.set_defaults(func=cmd_converge)

    p = sub.add_parser("oracle", help="exhaustive lattice search (tiny meshes)")
    common(p)
    p.add_argument("--grid", default="-1,0,1", help="comma list per control coordinate")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, MissingSection) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 1
    except PolysweepError as exc:
        print(f"error: {exc.__class__.__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
