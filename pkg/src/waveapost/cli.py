"""Configuration-driven front end: single runs, convergence studies, self-checks.

Config files are flat INI (sections problem / discretization / schedule /
estimator / output); problem data comes either from a built-in manufactured
case or from inline expressions over x, y, t with +, -, *, /, ^, sin, cos,
exp and pi.  See the README for the full schema.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import math
import sys
from dataclasses import dataclass, field

import numpy as np

from .estimate import (EstimatorConfig, element_map_to_text, eta1, eta4,
                       total_bound)
from .fem import (Coefficient, Field, SolverError, assemble_mass,
                  assemble_stiffness, l2_norm, matrix_to_text)
from .mesh import Domain, mesh_to_text
from .quadrature import gauss_interval
from .reconstruct import build_g_data, eval_G, mu
from .stepper import (MeshSchedule, ProblemSpec, TimeGrid, discrete_energy,
                      run, scheme_residual, trajectory_to_text)
from .verify import (ConvergenceRow, case_names, convergence_study,
                     effectivity, exact_error_linf_l2, get_case, rows_to_csv,
                     study_level)


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# inline expressions
# ---------------------------------------------------------------------------

_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}


def compile_expr(text: str, dim: int, allow_t: bool = True):
    """Compile an arithmetic expression over x[, y][, t] to a numpy lambda.

    Only +, -, *, /, ^ (power), sin, cos, exp and the constant pi are
    accepted; anything else is a configuration error.
    """
    source = text.replace("^", "**").strip()
    try:
        tree = ast.parse(source, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse expression {text!r}: {exc}") from exc
    names = {"x", "pi"} | ({"y"} if dim == 2 else set()) \
        | ({"t"} if allow_t else set())
    for node in ast.walk(tree):
        if isinstance(node, ast.Expression):
            continue
        if isinstance(node, ast.BinOp) and isinstance(
                node.op, (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)):
            continue
        if isinstance(node, ast.UnaryOp) and isinstance(
                node.op, (ast.UAdd, ast.USub)):
            continue
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            continue
        if isinstance(node, ast.Name) and node.id in names:
            continue
        if (isinstance(node, ast.Call) and isinstance(node.func, ast.Name)
                and node.func.id in _FUNCS and len(node.args) == 1
                and not node.keywords):
            continue
        if isinstance(node, (ast.Load, ast.operator, ast.unaryop)):
            continue
        raise ConfigError(
            f"expression {text!r}: unsupported construct {ast.dump(node)[:40]}")
    code = compile(tree, "<config-expr>", "eval")
    uses_t = any(isinstance(n, ast.Name) and n.id == "t" for n in ast.walk(tree))

    def evaluate(pts, t=0.0):
        env = {"x": pts[:, 0], "pi": math.pi, "t": t, **_FUNCS}
        if dim == 2:
            env["y"] = pts[:, 1]
        v = eval(code, {"__builtins__": {}}, env)  # noqa: S307 (whitelisted AST)
        v = np.asarray(v, dtype=float)
        return np.full(len(pts), float(v)) if v.ndim == 0 else v

    evaluate.uses_t = uses_t
    return evaluate


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    problem: ProblemSpec
    n: int
    N: int
    degree: int = 1
    load_mode: str = "pointwise"
    schedule: MeshSchedule = field(default_factory=MeshSchedule)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    csv_path: str = "wave_apost_out.csv"


def _parse_domain(text: str) -> Domain:
    parts = text.split()
    try:
        if parts[0] == "interval" and len(parts) == 2:
            return Domain.interval(float(parts[1]))
        if parts[0] == "rectangle" and len(parts) == 3:
            return Domain.rectangle(float(parts[1]), float(parts[2]))
    except (ValueError, IndexError):
        pass
    raise ConfigError(f"bad domain {text!r}; use 'interval L' or "
                      "'rectangle Lx Ly'")


def _build_problem(cp: configparser.ConfigParser) -> ProblemSpec:
    sec = cp["problem"]
    T = sec.getfloat("T", fallback=None)
    if "case" in sec:
        case = get_case(sec["case"])
        problem = case.problem
        if T is not None and T != problem.T:
            problem = ProblemSpec(
                domain=problem.domain, a=problem.a, f=problem.f,
                u0=problem.u0, u1=problem.u1, T=T, exact_u=problem.exact_u,
                exact_ut=problem.exact_ut, name=problem.name)
        return problem
    if "domain" not in sec:
        raise ConfigError("[problem] needs either 'case' or 'domain'")
    domain = _parse_domain(sec["domain"])
    dim = domain.dim
    if T is None:
        raise ConfigError("[problem] T is required for inline problems")

    a_fn = compile_expr(sec.get("a", "1"), dim, allow_t=False)
    axes = [np.linspace(0.0, L, 101) for L in domain.lengths]
    pts = np.stack([c.ravel() for c in np.meshgrid(*axes)], axis=1)
    avals = a_fn(pts)
    amin, amax = float(np.min(avals)), float(np.max(avals))
    if amin <= 0:
        raise ConfigError("coefficient 'a' must be positive on the domain")
    coeff = Coefficient(a_fn, amin, amax)

    def spatial(key):
        if key not in sec:
            return None
        fn = compile_expr(sec[key], dim, allow_t=False)
        return lambda p: fn(p)

    f = None
    if "f" in sec:
        f_fn = compile_expr(sec["f"], dim, allow_t=True)
        f = lambda p, t: f_fn(p, t)  # noqa: E731
    exact = None
    if "exact_u" in sec:
        e_fn = compile_expr(sec["exact_u"], dim, allow_t=True)
        exact = lambda p, t: e_fn(p, t)  # noqa: E731
    return ProblemSpec(domain=domain, a=coeff, f=f, u0=spatial("u0"),
                       u1=spatial("u1"), T=T, exact_u=exact,
                       name=sec.get("name", "inline"))


def _parse_schedule(cp: configparser.ConfigParser, dim: int) -> MeshSchedule:
    sched = MeshSchedule()
    if not cp.has_section("schedule"):
        return sched
    for key, value in cp["schedule"].items():
        if not key.startswith("at_"):
            raise ConfigError(f"[schedule] keys look like 'at_<step>', got {key!r}")
        try:
            step = int(key[3:])
        except ValueError as exc:
            raise ConfigError(f"bad schedule step in {key!r}") from exc
        for action in value.split(";"):
            parts = action.split()
            if not parts:
                continue
            kind = parts[0]
            if kind not in ("refine", "coarsen"):
                raise ConfigError(f"unknown schedule action {kind!r}")
            if len(parts) == 1 or parts[1] == "all":
                sched.add(step, kind, None)
            else:
                try:
                    box = tuple(float(v) for v in parts[1:])
                except ValueError as exc:
                    raise ConfigError(f"bad schedule box in {action!r}") from exc
                if len(box) != 2 * dim:
                    raise ConfigError(
                        f"schedule box needs {2 * dim} numbers, got {len(box)}")
                sched.add(step, kind, box)
    return sched


def load_config(path: str) -> RunConfig:
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    if not cp.has_section("problem"):
        raise ConfigError("config needs a [problem] section")
    problem = _build_problem(cp)
    if not cp.has_section("discretization"):
        raise ConfigError("config needs a [discretization] section")
    dz = cp["discretization"]
    try:
        n = dz.getint("n")
        N = dz.getint("N")
    except (TypeError, ValueError) as exc:
        raise ConfigError("bad [discretization] n/N") from exc
    if n is None or N is None or n < 1 or N < 1:
        raise ConfigError("[discretization] needs n >= 1 and N >= 1")
    degree = dz.getint("degree", fallback=1)
    load_mode = dz.get("load", fallback="pointwise")
    if load_mode not in ("pointwise", "average"):
        raise ConfigError("load must be 'pointwise' or 'average'")

    est = EstimatorConfig()
    if cp.has_section("estimator"):
        es = cp["estimator"]
        est = EstimatorConfig(
            C_el=es.getfloat("C_el", fallback=1.0),
            C_omega=("auto" if es.get("C_omega", fallback="auto") == "auto"
                     else es.getfloat("C_omega")),
            time_quad_order=es.getint("time_quad_order", fallback=5),
            space_quad_order=(None if es.get("space_quad_order",
                                             fallback="auto") == "auto"
                              else es.getint("space_quad_order")))
    csv_path = "wave_apost_out.csv"
    if cp.has_section("output"):
        csv_path = cp["output"].get("csv", fallback=csv_path)
    schedule = _parse_schedule(cp, problem.domain.dim)
    return RunConfig(problem=problem, n=n, N=N, degree=degree,
                     load_mode=load_mode, schedule=schedule, estimator=est,
                     csv_path=csv_path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    grid = TimeGrid.uniform(cfg.problem.T, cfg.N)
    traj = run(cfg.problem, grid, schedule=cfg.schedule, n0=cfg.n,
               degree=cfg.degree, load_mode=cfg.load_mode,
               time_quad_order=cfg.estimator.time_quad_order,
               space_quad_order=cfg.estimator.space_quad_order)
    bd = total_bound(traj, cfg.estimator)
    err = (exact_error_linf_l2(traj) if cfg.problem.exact_u is not None
           else math.nan)
    row = ConvergenceRow(
        level=0, h=max(traj.mesh(j).h_max for j in range(cfg.N + 1)),
        k=grid.T / cfg.N, error=err, eta1=bd.eta1, eta2=bd.eta2,
        eta3=bd.eta3, eta4=bd.eta4, delta1=bd.delta1, delta2=bd.delta2,
        E0=bd.E0, init_u0=bd.init_u0, init_u1=bd.init_u1, total=bd.total,
        effectivity=effectivity(bd.total, err))
    out = args.out or cfg.csv_path
    with open(out, "w") as fh:
        fh.write(rows_to_csv([row]))
    for key, val in bd.as_dict().items():
        print(f"{key} = {val:.12g}")
    print(f"error = {err:.12g}")
    print(f"csv written to {out}")
    if args.dump_mesh:
        with open(args.dump_mesh, "w") as fh:
            fh.write(mesh_to_text(traj.mesh(traj.N)))
    if args.dump_trajectory:
        with open(args.dump_trajectory, "w") as fh:
            fh.write(trajectory_to_text(traj))
    if args.dump_matrix:
        space = traj.space(traj.N)
        with open(args.dump_matrix, "w") as fh:
            fh.write("# mass\n")
            fh.write(matrix_to_text(assemble_mass(space)))
            fh.write("# stiffness\n")
            fh.write(matrix_to_text(assemble_stiffness(space, cfg.problem.a)))
    if args.dump_elements:
        with open(args.dump_elements, "w") as fh:
            fh.write(element_map_to_text(bd.element_indicators))
    return 0


def cmd_convergence(args) -> int:
    if args.levels < 2:
        raise ConfigError("a convergence study needs --levels >= 2")
    cfg = load_config(args.config)
    rows = convergence_study(cfg.problem, args.levels, n0=cfg.n, N0=cfg.N,
                             degree=cfg.degree, cfg=cfg.estimator,
                             load_mode=cfg.load_mode)
    out = args.out or cfg.csv_path
    with open(out, "w") as fh:
        fh.write(rows_to_csv(rows))
    print(rows_to_csv(rows), end="")
    print(f"csv written to {out}")
    return 0


# -- self checks -------------------------------------------------------------


def _check_vanishing_moment(inject_mu_sign_flip=False, **_):
    knots = [0.0]
    for i in range(10):
        knots.append(knots[-1] + 0.05 + 0.02 * ((i * 7) % 5))
    grid = TimeGrid(tuple(knots))
    tq, wq = gauss_interval(3)
    worst = 0.0
    for n in range(1, grid.N + 1):
        k = grid.k(n)
        t0 = grid.knots[n - 1]
        vals = np.array([mu(grid, n, t0 + s * k) for s in tq])
        if inject_mu_sign_flip:
            # simulated fault: the linear factor loses its sign
            vals = np.abs(vals)
        integral = k * float(wq @ vals)
        worst = max(worst, abs(integral) / k)
    return worst <= 1e-13, f"max |int mu|/k = {worst:.2e}"


def _sine_trajectory(N=8, n=8, schedule=None):
    case = get_case("sine_1d")
    grid = TimeGrid.uniform(case.problem.T, N)
    return run(case.problem, grid, schedule=schedule, n0=n)


def _check_g_continuity(**_):
    traj = _sine_trajectory()
    gd = build_g_data(traj)
    grid = traj.grid
    qmesh = gd.gamma_mesh[traj.N]
    scale = max(l2_norm(eval_G(gd, grid.knots[j] - 1e-3, interval=j),
                        quad_mesh=qmesh) for j in range(1, traj.N + 1))
    worst = max(l2_norm(eval_G(gd, grid.knots[j], interval=j)
                        - eval_G(gd, grid.knots[j], interval=j + 1),
                        quad_mesh=qmesh) for j in range(1, traj.N))
    zero = l2_norm(eval_G(gd, 0.0, interval=1), quad_mesh=qmesh)
    ok = worst <= 1e-10 * scale and zero <= 1e-10 * scale
    return ok, f"knot jump {worst:.2e}, G(0+) {zero:.2e}, scale {scale:.2e}"


def _check_galerkin_orthogonality(**_):
    from .fem import load_vector
    traj = _sine_trajectory()
    gd = build_g_data(traj)
    worst = 0.0
    for nstep in range(traj.N + 1):
        rec = traj.records[nstep]
        M = assemble_mass(rec.space)
        K = assemble_stiffness(rec.space, traj.problem.a)
        b_f = load_vector(rec.space, Field.from_fn(traj.f_used_fn(nstep).fn))
        resid = M @ gd.g_fe[nstep].coeffs - K @ rec.U.coeffs + b_f
        scale = max(float(np.max(np.abs(K @ rec.U.coeffs))), 1e-300)
        worst = max(worst, float(np.max(np.abs(resid))) / scale)
    return worst <= 1e-10, f"max residual {worst:.2e} (relative)"


def _check_scheme_residual(**_):
    sched = MeshSchedule().add(3, "refine", (0.0, 0.5)).add(6, "coarsen", (0.0, 0.5))
    traj = _sine_trajectory(schedule=sched)
    worst = 0.0
    for nstep in range(1, traj.N + 1):
        resid, scale = scheme_residual(traj, nstep)
        worst = max(worst, float(np.max(np.abs(resid))) / scale)
    return worst <= 1e-10, f"max residual {worst:.2e} (relative)"


def _check_eta1_fixed_zero(**_):
    traj = _sine_trajectory()
    e11, e12 = eta1(traj)
    return e11 == 0.0 and e12 == 0.0, f"eta1 = ({e11!r}, {e12!r})"


def _check_eta4_closed_form(**_):
    traj = _sine_trajectory()
    _, quad_terms, closed = eta4(traj, return_terms=True)
    worst = max(abs(q - c) / c for q, c in zip(quad_terms, closed) if c > 0)
    return worst <= 1e-12, f"max relative mismatch {worst:.2e}"


def _check_energy_decay(**_):
    traj = _sine_trajectory()
    E = discrete_energy(traj)
    slack = 1e-12 * E[0]
    ok = bool(np.all(np.diff(E) <= slack))
    return ok, f"max increment {np.max(np.diff(E)):.2e}"


CHECKS = [
    ("vanishing_moment", _check_vanishing_moment),
    ("g_continuity", _check_g_continuity),
    ("galerkin_orthogonality", _check_galerkin_orthogonality),
    ("scheme_residual", _check_scheme_residual),
    ("eta1_fixed_mesh_zero", _check_eta1_fixed_zero),
    ("eta4_closed_form", _check_eta4_closed_form),
    ("energy_decay", _check_energy_decay),
]


def cmd_check(args) -> int:
    failed = 0
    ran = 0
    for name, fn in CHECKS:
        if args.filter and args.filter not in name:
            continue
        ran += 1
        ok, detail = fn(inject_mu_sign_flip=args.inject_mu_sign_flip)
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += 0 if ok else 1
    if ran == 0:
        print(f"no checks match filter {args.filter!r}")
        return 2
    print(f"{ran - failed}/{ran} checks passed")
    return 1 if failed else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="wave-apost",
        description="wave equation solver with a posteriori error bounds")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="single experiment from a config file")
    p_run.add_argument("config")
    p_run.add_argument("--out", help="CSV output path (overrides config)")
    p_run.add_argument("--dump-mesh")
    p_run.add_argument("--dump-trajectory")
    p_run.add_argument("--dump-matrix")
    p_run.add_argument("--dump-elements")
    p_run.set_defaults(fn=cmd_run)

    p_conv = sub.add_parser("convergence", help="h,k-halving study")
    p_conv.add_argument("config")
    p_conv.add_argument("--levels", type=int, required=True)
    p_conv.add_argument("--out")
    p_conv.set_defaults(fn=cmd_convergence)

    p_check = sub.add_parser("check", help="invariant self-check suite")
    p_check.add_argument("--filter", default="")
    p_check.add_argument("--inject-mu-sign-flip", action="store_true")
    p_check.set_defaults(fn=cmd_check)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
