"""Manufactured-solution verification: exact errors, effectivity and EOC.

Cases are registered from symbolic expressions; the forcing term is derived
symbolically from the exact solution (or checked against a supplied one),
and every case is self-checked at registration by sampling the PDE residual,
the boundary values and the initial data at random points.  Nothing is ever
hand-trusted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import sympy

from .estimate import EstimatorConfig, total_bound
from .fem import Coefficient, Field, l2_norm
from .mesh import Domain, overlay
from .reconstruct import eval_U_hat
from .stepper import MeshSchedule, ProblemSpec, TimeGrid, Trajectory, run

CSV_COLUMNS = [
    "level", "h", "k", "error", "eta1", "eta2", "eta3", "eta4",
    "delta1", "delta2", "E0", "init_u0", "init_u1", "total",
    "effectivity", "eoc_error", "eoc_total",
]


@dataclass
class ConvergenceRow:
    level: int
    h: float
    k: float
    error: float
    eta1: float
    eta2: float
    eta3: float
    eta4: float
    delta1: float
    delta2: float
    E0: float
    init_u0: float
    init_u1: float
    total: float
    effectivity: float
    eoc_error: float = math.nan
    eoc_total: float = math.nan

    def csv_values(self) -> list[str]:
        out = []
        for c in CSV_COLUMNS:
            v = getattr(self, c)
            out.append(str(v) if c == "level" else f"{float(v):.12g}")
        return out


def rows_to_csv(rows: list[ConvergenceRow]) -> str:
    lines = [",".join(CSV_COLUMNS)]
    lines += [",".join(r.csv_values()) for r in rows]
    return "\n".join(lines) + "\n"


def effectivity(total: float, error: float) -> float:
    """Bound-to-error ratio; NaN marks the undefined zero-error case."""
    if error == 0:
        return math.nan
    return total / error


def eoc(quantities, sizes) -> list[float]:
    """Per-refinement order estimates log(q_i-1/q_i)/log(s_i-1/s_i).

    The first entry is NaN; so are entries where a quantity vanishes.
    """
    out = [math.nan]
    for i in range(1, len(quantities)):
        q0, q1 = quantities[i - 1], quantities[i]
        s0, s1 = sizes[i - 1], sizes[i]
        if q0 <= 0 or q1 <= 0 or s0 == s1:
            out.append(math.nan)
        else:
            out.append(math.log(q0 / q1) / math.log(s0 / s1))
    return out


def exact_error_linf_l2(traj: Trajectory, u_exact=None,
                        space_order: int | None = None) -> float:
    """max_t ||Uhat(t) - u(t)|| over knots plus 4 Gauss times per interval.

    The time supremum is approximated by dense sampling (the integrand is
    smooth in t, so the sampling error is far below the discretization
    signal); space quadrature order is at least 2p + 4.
    """
    u = u_exact or traj.problem.exact_u
    if u is None:
        raise ValueError("no exact solution available")
    p = traj.degree
    order = max(space_order or 0, 2 * p + 4)
    gp, _ = np.polynomial.legendre.leggauss(4)
    gp = (gp + 1.0) / 2.0
    grid = traj.grid
    worst = 0.0
    for n in range(grid.N + 1):
        times = [grid.knots[n]]
        if n >= 1:
            t0, k = grid.knots[n - 1], grid.k(n)
            times += [t0 + s * k for s in gp]
        for t in times:
            interval = max(n, 1)
            F = eval_U_hat(traj, t, deriv=0, interval=interval) \
                - Field.from_fn(lambda pts, _t=t: u(pts, _t))
            qmesh = overlay(F.meshes) if F.meshes else traj.mesh(n)
            worst = max(worst, l2_norm(F, quad_mesh=qmesh, order=order))
    return worst


# ---------------------------------------------------------------------------
# manufactured cases
# ---------------------------------------------------------------------------


class CaseError(Exception):
    pass


@dataclass
class ManufacturedCase:
    name: str
    description: str
    problem: ProblemSpec


def _broadcast(val, n: int) -> np.ndarray:
    v = np.asarray(val, dtype=float)
    return np.full(n, float(v)) if v.ndim == 0 else v


def _spatial_fn(expr, syms, dim):
    fn = sympy.lambdify(syms[:dim], expr, modules="numpy")
    if dim == 1:
        return lambda pts: _broadcast(fn(pts[:, 0]), len(pts))
    return lambda pts: _broadcast(fn(pts[:, 0], pts[:, 1]), len(pts))


def _spacetime_fn(expr, syms, dim):
    args = list(syms[:dim]) + [syms[2]]
    fn = sympy.lambdify(args, expr, modules="numpy")
    if dim == 1:
        return lambda pts, t: _broadcast(fn(pts[:, 0], t), len(pts))
    return lambda pts, t: _broadcast(fn(pts[:, 0], pts[:, 1], t), len(pts))


def make_case(name: str, u: str, a: str = "1", f: str | None = None,
              domain: Domain | None = None, T: float = 1.0,
              description: str = "") -> ManufacturedCase:
    """Build and self-check a manufactured case from symbolic expressions.

    When `f` is omitted it is derived as u_tt - div(a grad u); when given,
    the registration residual check verifies the pair (u, f).
    """
    domain = domain or Domain.interval(1.0)
    dim = domain.dim
    x, y, t = sympy.symbols("x y t")
    syms = (x, y, t)
    u_e = sympy.sympify(u)
    a_e = sympy.sympify(a)
    space_vars = (x,) if dim == 1 else (x, y)
    div_flux = sum(sympy.diff(a_e * sympy.diff(u_e, v), v) for v in space_vars)
    u_tt = sympy.diff(u_e, t, 2)
    f_e = sympy.sympify(f) if f is not None else sympy.simplify(u_tt - div_flux)

    u_fn = _spacetime_fn(u_e, syms, dim)
    ut_fn = _spacetime_fn(sympy.diff(u_e, t), syms, dim)
    utt_fn = _spacetime_fn(u_tt, syms, dim)
    div_fn = _spacetime_fn(div_flux, syms, dim)
    f_fn = _spacetime_fn(f_e, syms, dim)
    u0_fn = _spatial_fn(u_e.subs(t, 0), syms, dim)
    u1_fn = _spatial_fn(sympy.diff(u_e, t).subs(t, 0), syms, dim)
    a_fn = _spatial_fn(a_e, syms, dim)
    grads = [sympy.diff(a_e, v) for v in space_vars]
    ga_fns = [_spatial_fn(g, syms, dim) for g in grads]

    def a_grad(pts):
        return np.stack([g(pts) for g in ga_fns], axis=1)

    # coefficient bounds by dense sampling
    axes = [np.linspace(0.0, L, 101) for L in domain.lengths]
    grid_pts = np.stack([c.ravel() for c in np.meshgrid(*axes)], axis=1)
    avals = a_fn(grid_pts)
    amin, amax = float(np.min(avals)), float(np.max(avals))
    if amin <= 0:
        raise CaseError(f"case {name!r}: coefficient not positive")
    coeff = Coefficient(a_fn, amin, amax, grad=a_grad)

    # --- registration self-checks -----------------------------------------
    rng = np.random.default_rng(987654321)
    pts = np.stack(
        [rng.uniform(0.02 * L, 0.98 * L, size=64) for L in domain.lengths],
        axis=1)
    ts = rng.uniform(0.0, T, size=64)
    resid = np.array([utt_fn(pts[i:i + 1], ts[i])[0]
                      - div_fn(pts[i:i + 1], ts[i])[0]
                      - f_fn(pts[i:i + 1], ts[i])[0] for i in range(64)])
    scale = max(1.0, float(np.max(np.abs([utt_fn(pts, tt) for tt in ts[:4]]))))
    if np.max(np.abs(resid)) > 1e-10 * scale:
        raise CaseError(f"case {name!r}: PDE residual {np.max(np.abs(resid)):.3e} "
                        "at sample points")
    bpts = []
    for d in range(dim):
        for val in (0.0, domain.lengths[d]):
            q = pts.copy()
            q[:, d] = val
            bpts.append(q)
    for q in bpts:
        for tt in (0.0, T / 3, T):
            if np.max(np.abs(u_fn(q, tt))) > 1e-10 * scale:
                raise CaseError(f"case {name!r}: exact solution does not vanish "
                                "on the boundary")
    if (np.max(np.abs(u_fn(pts, 0.0) - u0_fn(pts))) > 1e-12 * scale
            or np.max(np.abs(ut_fn(pts, 0.0) - u1_fn(pts))) > 1e-12 * scale):
        raise CaseError(f"case {name!r}: initial data inconsistent")

    problem = ProblemSpec(domain=domain, a=coeff,
                          f=None if f_e == 0 else f_fn,
                          u0=None if u_e.subs(t, 0) == 0 else u0_fn,
                          u1=u1_fn, T=T, exact_u=u_fn, exact_ut=ut_fn,
                          name=name)
    return ManufacturedCase(name, description, problem)


_CASES: dict[str, ManufacturedCase] = {}


def register_case(case: ManufacturedCase) -> ManufacturedCase:
    _CASES[case.name] = case
    return case


def get_case(name: str) -> ManufacturedCase:
    _ensure_builtin_cases()
    if name not in _CASES:
        raise CaseError(f"unknown case {name!r}; known: {sorted(_CASES)}")
    return _CASES[name]


def case_names() -> list[str]:
    _ensure_builtin_cases()
    return sorted(_CASES)


_BUILTIN_DONE = False


def _ensure_builtin_cases():
    global _BUILTIN_DONE
    if _BUILTIN_DONE:
        return
    register_case(make_case(
        "sine_1d", u="sin(pi*x)*sin(pi*t)", a="1", f="0",
        domain=Domain.interval(1.0), T=1.0,
        description="standing wave, homogeneous forcing"))
    register_case(make_case(
        "variable_a_1d", u="sin(pi*x)*sin(pi*t)", a="1+x",
        domain=Domain.interval(1.0), T=1.0,
        description="variable coefficient, time-dependent forcing"))
    register_case(make_case(
        "sine_2d", u="sin(pi*x)*sin(pi*y)*sin(pi*t)", a="1",
        domain=Domain.rectangle(1.0, 1.0), T=0.5,
        description="2D standing wave with forcing pi^2 u"))
    _BUILTIN_DONE = True


# ---------------------------------------------------------------------------
# convergence studies
# ---------------------------------------------------------------------------


def study_level(problem: ProblemSpec, n: int, N: int, degree: int = 1,
                cfg: EstimatorConfig | None = None,
                load_mode: str = "pointwise",
                schedule: MeshSchedule | None = None,
                level: int = 0) -> ConvergenceRow:
    """Run one discretization level and collect its row."""
    grid = TimeGrid.uniform(problem.T, N)
    traj = run(problem, grid, schedule=schedule, n0=n, degree=degree,
               load_mode=load_mode)
    bd = total_bound(traj, cfg)
    err = (exact_error_linf_l2(traj) if problem.exact_u is not None
           else math.nan)
    h = max(traj.mesh(j).h_max for j in range(traj.N + 1))
    k = max(grid.k(j) for j in range(1, N + 1))
    return ConvergenceRow(
        level=level, h=h, k=k, error=err,
        eta1=bd.eta1, eta2=bd.eta2, eta3=bd.eta3, eta4=bd.eta4,
        delta1=bd.delta1, delta2=bd.delta2, E0=bd.E0,
        init_u0=bd.init_u0, init_u1=bd.init_u1, total=bd.total,
        effectivity=effectivity(bd.total, err) if not math.isnan(err) else math.nan)


def convergence_study(problem: ProblemSpec, levels: int, n0: int = 8,
                      N0: int = 8, degree: int = 1,
                      cfg: EstimatorConfig | None = None,
                      load_mode: str = "pointwise") -> list[ConvergenceRow]:
    """Halve h and k per level and tabulate errors, bounds and EOCs."""
    if levels < 2:
        raise ValueError("a convergence study needs at least 2 levels")
    rows = [study_level(problem, n0 * 2**lev, N0 * 2**lev, degree, cfg,
                        load_mode, level=lev) for lev in range(levels)]
    hs = [r.h for r in rows]
    for r, v in zip(rows, eoc([r.error for r in rows], hs)):
        r.eoc_error = v
    for r, v in zip(rows, eoc([r.total for r in rows], hs)):
        r.eoc_total = v
    return rows
