"""Command-line front end.

Commands: state-solve, solve {pd|pt}, convergence, mesh-info. Flags may also
come from a key = value config file (``--config``); flags win on conflict.
Exit codes: 0 ok, 2 usage or configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("esfem_ocp")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

DEFAULTS = {
    "level": 3,
    "N": None,
    "T": 1.0,
    "alpha": 1.0,
    "lo": None,
    "hi": None,
    "tol": None,
    "out": None,
    "example": None,
    "levels": None,
    "q": 2,
    "init": "zero",
    "init_file": None,
    "f": "zero",
    "flow": "stretch",
    "solver": "newton",
    "damping": 0.3,
    "sample": "left",
    "verbose": False,
}

CASTS = {
    "level": int,
    "N": int,
    "T": float,
    "alpha": float,
    "lo": float,
    "hi": float,
    "tol": float,
    "q": int,
    "damping": float,
    "example": int,
    "verbose": lambda s: str(s).lower() in ("1", "true", "yes", "on"),
}


class ConfigError(ValueError):
    pass


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for num, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{num}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise ConfigError(f"{path}:{num}: unknown key {key!r}")
        out[key] = val
    return out


def parse_levels(text: str) -> list[int]:
    try:
        a, b = (int(s) for s in text.split(".."))
    except ValueError as exc:
        raise ConfigError(f"--levels expects A..B, got {text!r}") from exc
    if b < a or a < 0:
        raise ConfigError(f"empty or negative level range {text!r}")
    return list(range(a, b + 1))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; flags override it")
    common.add_argument("--level", type=int)
    common.add_argument("--N", type=int, help="number of time slabs (default: ceil(20 T / H^2))")
    common.add_argument("--T", type=float)
    common.add_argument("--alpha", type=float)
    common.add_argument("--lo", type=float, help="lower control bound")
    common.add_argument("--hi", type=float, help="upper control bound")
    common.add_argument("--tol", type=float)
    common.add_argument("--out", help="output directory")
    common.add_argument("--example", type=int, choices=(1, 2))
    common.add_argument("--levels", help="level range A..B")
    common.add_argument("--q", type=int, help="EOC level gap")
    common.add_argument("--init", choices=("zero", "harmonic-z", "file"))
    common.add_argument("--init-file", dest="init_file", help="initial coefficients, one per line")
    common.add_argument("--f", choices=("zero", "one"), help="state source")
    common.add_argument("--flow", choices=("static", "stretch"))
    common.add_argument("--solver", choices=("newton", "fixed-point"))
    common.add_argument("--damping", type=float)
    common.add_argument("--sample", help="time sampling of the exact control: left, gauss or s in [0,1]")
    common.add_argument("-v", "--verbose", action="store_true", default=None)

    parser = argparse.ArgumentParser(prog="esfem-ocp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("state-solve", parents=[common], help="march the state equation")
    solve = sub.add_parser("solve", parents=[common], help="solve a control problem")
    solve.add_argument("problem", choices=("pd", "pt"))
    sub.add_parser("convergence", parents=[common], help="run a convergence study")
    sub.add_parser("mesh-info", parents=[common], help="describe a refinement level")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        for key, val in read_config_file(args.config).items():
            try:
                cfg[key] = CASTS.get(key, str)(val)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {val!r}") from exc
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    cfg["command"] = args.command
    if args.command == "solve":
        cfg["problem"] = args.problem
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if not cfg["alpha"] > 0:
        raise ConfigError("alpha must be positive")
    if cfg["T"] <= 0:
        raise ConfigError("T must be positive")
    if cfg["N"] is not None and cfg["N"] < 1:
        raise ConfigError("N must be at least 1")
    if cfg["level"] < 0:
        raise ConfigError("level must be nonnegative")
    if cfg["lo"] is not None and cfg["hi"] is not None and cfg["lo"] > cfg["hi"]:
        raise ConfigError("bounds must satisfy lo <= hi")
    if not 0 < cfg["damping"] <= 1:
        raise ConfigError("damping must lie in (0, 1]")
    if cfg["init"] == "file" and not cfg["init_file"]:
        raise ConfigError("--init file needs --init-file")
    if cfg["sample"] not in ("left", "gauss"):
        try:
            s = float(cfg["sample"])
        except ValueError as exc:
            raise ConfigError(f"bad --sample {cfg['sample']!r}") from exc
        if not 0 <= s <= 1:
            raise ConfigError("--sample must lie in [0, 1]")
        cfg["sample"] = s
    if cfg["command"] == "convergence":
        if cfg["example"] is None:
            raise ConfigError("convergence needs --example")
        if cfg["levels"] is None:
            raise ConfigError("convergence needs --levels A..B")
        levels = parse_levels(cfg["levels"]) if isinstance(cfg["levels"], str) else cfg["levels"]
        if cfg["q"] < 1:
            raise ConfigError("q must be positive")
        cfg["levels"] = levels
    if cfg["command"] == "solve":
        ex = cfg["example"] or (1 if cfg["problem"] == "pd" else 2)
        if (cfg["problem"], ex) not in (("pd", 1), ("pt", 2)):
            raise ConfigError(f"problem {cfg['problem']} has no example {ex}")
        cfg["example"] = ex


def write_run_config(out: Path, cfg: dict) -> None:
    lines = []
    for key in sorted(cfg):
        val = cfg[key]
        if isinstance(val, list):
            val = f"{val[0]}..{val[-1]}"
        lines.append(f"{key} = {val}")
    (out / "run_config.txt").write_text("\n".join(lines) + "\n")


def _output_dir(cfg) -> Path | None:
    if cfg["out"] is None:
        return None
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_run_config(out, cfg)
    return out


# ----------------------------------------------------------------------------
# commands


def cmd_mesh_info(cfg) -> int:
    from .geometry import max_edge_length, sphere_mesh, triangle_angles, triangle_geometry, write_off

    mesh = sphere_mesh(cfg["level"])
    areas = triangle_geometry(mesh.vertices, mesh.triangles)[0]
    out = _output_dir(cfg)
    print("level,vertices,edges,triangles,euler,H,min_angle_deg,area")
    print(
        f"{mesh.level},{mesh.n_vertices},{len(mesh.edges())},{mesh.n_triangles},{mesh.euler_characteristic()},"
        f"{max_edge_length(mesh):.17g},{triangle_angles(mesh.vertices, mesh.triangles).min():.17g},{areas.sum():.17g}"
    )
    if out is not None:
        write_off(out / f"mesh_R{mesh.level}.off", mesh.vertices, mesh.triangles)
    return EXIT_OK


def _flow(cfg):
    from .geometry import AnalyticSphereStretch, StaticIdentity

    return StaticIdentity(cfg["T"]) if cfg["flow"] == "static" else AnalyticSphereStretch(cfg["T"])


def _grid(cfg, mesh):
    from .evolution import TimeGrid
    from .geometry import max_edge_length

    if cfg["N"] is not None:
        return TimeGrid(cfg["N"], cfg["T"])
    return TimeGrid.from_mesh_size(max_edge_length(mesh), cfg["T"])


def cmd_state_solve(cfg) -> int:
    from .evolution import SnapshotCache, solve_state, write_dg_csv
    from .geometry import sphere_mesh, write_off

    mesh = sphere_mesh(cfg["level"])
    flow = _flow(cfg)
    grid = _grid(cfg, mesh)
    if cfg["init"] == "zero":
        y0 = np.zeros(mesh.n_vertices)
    elif cfg["init"] == "harmonic-z":
        y0 = mesh.vertices[:, 2].copy()
    else:
        try:
            y0 = np.loadtxt(cfg["init_file"], dtype=float, ndmin=1)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read initial data: {exc}") from exc
        if y0.shape != (mesh.n_vertices,):
            raise ConfigError(f"initial data has {y0.size} values, mesh has {mesh.n_vertices} vertices")
    cache = SnapshotCache(mesh, flow, grid)
    if cfg["f"] == "one":
        loads = grid.k * cache.mass_apply(np.ones((grid.N, mesh.n_vertices)))
    else:
        loads = np.zeros((grid.N, mesh.n_vertices))
    y = solve_state(cache, y0, loads)
    norms = np.sqrt(np.einsum("nm,nm->n", y.slabs, cache.mass_apply(y.slabs)))
    init_norm = math.sqrt(float(y0 @ cache.mass_apply(y0[None], times=slice(0, 1))[0]))
    out = _output_dir(cfg)
    if out is not None:
        write_dg_csv(out / "state.csv", y, cfg["level"])
        with open(out / "profile.csv", "w") as fh:
            fh.write("slab,t,l2_norm\n")
            fh.write(f"0,0,{init_norm:.17g}\n")
            for n, v in enumerate(norms, 1):
                fh.write(f"{n},{grid.nodes[n]:.17g},{v:.17g}\n")
        snap_dir = out / "snapshots"
        snap_dir.mkdir(exist_ok=True)
        for n in range(grid.N + 1):
            write_off(snap_dir / f"slab_{n:05d}.off", cache.vertices[n], mesh.triangles)
    print("t,l2_norm")
    print(f"0,{init_norm:.6e}")
    for n in sorted({grid.N // 4, grid.N // 2, 3 * grid.N // 4, grid.N} - {0}):
        print(f"{grid.nodes[n]:.6g},{norms[n - 1]:.6e}")
    return EXIT_OK


def cmd_solve(cfg) -> int:
    from .control import UNBOUNDED, solve_fixed_point, solve_semismooth_newton, solve_terminal
    from .evolution import DgFunction, write_dg_csv
    from .experiments import ExampleOneData, ExampleTwoData, control_errors, example_one_setup

    tol = cfg["tol"] if cfg["tol"] is not None else (1e-9 if cfg["problem"] == "pd" else 1e-10)
    if cfg["problem"] == "pd":
        lo = -0.5 if cfg["lo"] is None else cfg["lo"]
        hi = 0.5 if cfg["hi"] is None else cfg["hi"]
        data = ExampleOneData(alpha=cfg["alpha"], lo=lo, hi=hi, T=cfg["T"])
        problem, _ = example_one_setup(cfg["level"], data)
        if cfg["solver"] == "newton":
            u, report = solve_semismooth_newton(problem, tol=tol)
        else:
            u, report = solve_fixed_point(problem, damping=cfg["damping"], tol=tol, max_iter=2000)
        errs = control_errors(u, problem, data.control, sample=cfg["sample"])
    else:
        from .control import ControlProblemSpec, ReducedProblem, Terminal
        from .experiments import PLANE_NORMAL
        from .geometry import AnalyticSphereStretch, sphere_mesh
        from .surface_fem import plane_singular_rule

        data = ExampleTwoData(alpha=cfg["alpha"], T=cfg["T"])
        bounds = (
            UNBOUNDED[0] if cfg["lo"] is None else cfg["lo"],
            UNBOUNDED[1] if cfg["hi"] is None else cfg["hi"],
        )
        mesh = sphere_mesh(cfg["level"])
        spec = ControlProblemSpec(
            data.alpha,
            bounds,
            Terminal(data.target, rule=lambda snap: plane_singular_rule(snap, PLANE_NORMAL, data.exponent)),
            mesh,
            AnalyticSphereStretch(cfg["T"]),
            _grid(cfg, mesh),
        )
        problem = ReducedProblem(spec)
        u, report = solve_terminal(problem, tol=tol)
        errs = None
    out = _output_dir(cfg)
    if out is not None:
        (out / "report.jsonl").write_text(report.to_jsonl())
        (out / "report.csv").write_text(report.to_csv())
        c = problem.cache
        write_dg_csv(out / "control.csv", DgFunction(c.grid, c.mesh, u.nodal()), cfg["level"])
    print("iterations,residual,objective,converged" + (",ERR_L2,ERR_inf" if errs else ""))
    line = f"{report.iterations},{report.residual:.6e},{report.objective:.12g},{report.converged}"
    if errs:
        line += f",{errs[0]:.6e},{errs[1]:.6e}"
    print(line)
    return EXIT_OK


def cmd_convergence(cfg) -> int:
    from .experiments import ExampleOneData, ExampleTwoData, run_example_one, run_example_two

    if cfg["example"] == 1:
        lo = -0.5 if cfg["lo"] is None else cfg["lo"]
        hi = 0.5 if cfg["hi"] is None else cfg["hi"]
        data = ExampleOneData(alpha=cfg["alpha"], lo=lo, hi=hi, T=cfg["T"])
        record = run_example_one(cfg["levels"], q=cfg["q"], tol=cfg["tol"] or 1e-9, data=data, sample=cfg["sample"])
    else:
        record = run_example_two(cfg["levels"], q=cfg["q"], data=ExampleTwoData(alpha=cfg["alpha"], T=cfg["T"]), tol=cfg["tol"] or 1e-10)
    out = _output_dir(cfg)
    if out is not None:
        (out / "convergence.csv").write_text(record.to_csv())
        (out / "convergence.dat").write_text(record.to_gnuplot())
    print(record.summary())
    return EXIT_OK


COMMANDS = {
    "state-solve": cmd_state_solve,
    "solve": cmd_solve,
    "convergence": cmd_convergence,
    "mesh-info": cmd_mesh_info,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(
        level=logging.INFO if cfg["verbose"] else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[cfg["command"]](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, RuntimeError, np.linalg.LinAlgError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
