"""Command line entry point: ``nonlocal-design {mesh,solve,optimize,study,check}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import NonlocalDesignError
from .experiments import (
    StudyConfig,
    load_study_config,
    records_csv,
    run_rung,
    run_study,
    write_outputs,
)
from .forms import DesignField, FormKind, Source, seminorm
from .mesh import (
    build_disk_mesh,
    build_interval_mesh,
    disk_mesh_for_dofs,
    extend_with_horizon,
    load_mesh,
    save_mesh,
)
from .optimizer import compliance
from .solver import design_to_state


def _add_mesh_args(p):
    p.add_argument("--dim", type=int, choices=(1, 2), default=2)
    p.add_argument("--radius", type=float, default=1.0, help="disk radius (2D)")
    p.add_argument("--domain", default="0:1", help="interval a:b (1D)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--dofs", type=int, help="target interior DOF count (2D)")
    g.add_argument("--target-h", type=float, help="maximal element diameter (2D)")
    g.add_argument("--elements", type=int, help="element count (1D)")


def _build_mesh(args, R: float):
    if getattr(args, "mesh", None):
        mesh = load_mesh(args.mesh)
        if R > 0 and mesh.horizon == 0.0:
            mesh = extend_with_horizon(mesh, R)
        return mesh
    if args.dim == 1:
        a, b = (float(t) for t in args.domain.split(":"))
        mesh = build_interval_mesh(a, b, args.elements or 32)
    elif args.target_h is not None:
        mesh = build_disk_mesh(args.radius, args.target_h)
    else:
        mesh = disk_mesh_for_dofs(args.radius, args.dofs or 961)
    return extend_with_horizon(mesh, R) if R > 0 else mesh


def _kind(args) -> FormKind:
    return FormKind.from_parameters(args.s, args.R, getattr(args, "vector", False))


def cmd_mesh(args) -> int:
    mesh = _build_mesh(args, args.horizon)
    save_mesh(mesh, args.out)
    print(f"{mesh.n_vertices} vertices, {mesh.n_elements} elements, {mesh.n_dofs} dofs, h = {mesh.h:.6g}")
    return 0


def cmd_solve(args) -> int:
    kind = _kind(args)
    mesh = _build_mesh(args, kind.R if kind.is_fractional else 0.0)
    design = DesignField.constant(mesh, args.design)
    f = Source.parse(args.f)
    u = design_to_state(mesh, design, kind, f)
    print(f"dofs={mesh.n_dofs} compliance={compliance(mesh, u, f)!r} "
          f"u_l2={u.l2_norm()!r} u_semi={seminorm(mesh, u, kind)!r}")
    if args.out:
        lines = mesh.to_text().splitlines()
        vals = u.vertex_values()
        body = [lines[0]] + [lines[1 + i] + " " + " ".join(repr(float(x)) for x in vals[i])
                             for i in range(mesh.n_vertices)] + lines[1 + mesh.n_vertices:]
        Path(args.out).write_text("\n".join(body) + "\n")
    return 0


def cmd_optimize(args) -> int:
    lo, hi = (float(t) for t in args.bounds.split(":"))
    config = StudyConfig(
        study="table_row",
        dim=args.dim,
        s_ladder=[args.s],
        r_ladder=[args.R if args.s < 1.0 else 0.0],
        resolution_ladder=[args.elements or 32] if args.dim == 1 else [args.dofs or 961],
        iterations=[args.iterations],
        tau=args.tau,
        source=Source.parse(args.f),
        bounds=(lo, hi),
        radius=args.radius,
        domain=tuple(float(t) for t in args.domain.split(":")),
        out=args.out,
    )
    rung = run_rung(config, 0)
    write_outputs(config.out, [rung])
    sys.stdout.write(records_csv([rung.record]))
    if rung.result.descent_violations:
        print(f"warning: {len(rung.result.descent_violations)} cost increases", file=sys.stderr)
    return 0


def cmd_study(args) -> int:
    config = load_study_config(args.config)
    if args.out:
        config.out = args.out
    res = run_study(config)
    if hasattr(res, "summary_text"):
        sys.stdout.write(records_csv(res.records))
        sys.stdout.write(res.summary_text())
    else:
        sys.stdout.write(records_csv([res]))
    return 0


def cmd_check(args) -> int:
    from .oracle import run_checks

    results = run_checks(quick=args.quick, seed=args.seed)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nonlocal-design", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="build a mesh and save it in text format")
    _add_mesh_args(p)
    p.add_argument("--horizon", type=float, default=0.0, help="width of the horizon layer")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("solve", help="one state solve for a constant design")
    _add_mesh_args(p)
    p.add_argument("--mesh", help="load a saved mesh instead of building one")
    p.add_argument("--s", type=float, default=1.0, help="fractional order, 1 = local")
    p.add_argument("--R", type=float, default=0.1, help="horizon")
    p.add_argument("--vector", action="store_true", help="peridynamic / elasticity")
    p.add_argument("--design", type=float, default=None, help="constant coefficient")
    p.add_argument("--f", default="const:1")
    p.add_argument("--out", help="write the state as a field file")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("optimize", help="one projected gradient descent run")
    _add_mesh_args(p)
    p.add_argument("--s", type=float, default=1.0)
    p.add_argument("--R", type=float, default=0.1)
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--tau", type=float, default=0.25)
    p.add_argument("--f", default="const:1")
    p.add_argument("--bounds", default="0.1:2.0")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("study", help="run a study described by a key=value file")
    p.add_argument("config")
    p.add_argument("--out", help="override the output directory")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("check", help="invariant suite against the slow references")
    p.add_argument("--quick", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NonlocalDesignError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
