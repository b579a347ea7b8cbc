"""Implicit fully-discrete time stepping for the linear wave equation.

Each step solves, for all test functions V in the current space,

    <d2U^n, V> + a(U^n, V) = <f^n, V>,

where d2U^n is the backward second difference built from the exact (not
projected) difference quotients of the previous levels.  Under mesh change
all inner products against older levels are assembled exactly on common
refinements; the recorded per-step difference quotient dU^n is the L2
projection of the exact quotient onto the step's own space, while the exact
quotient itself remains available from the trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .mesh import Domain, Mesh, overlay, pair_maps, refine, coarsen, uniform_mesh
from .fem import (CachedSpatialFn, Coefficient, FeFunction, FeSpace, Field,
                  assemble_mass, assemble_stiffness, cross_mass, fe_space,
                  l2_project, load_vector, mesh_geometry, solve_spd, transfer)
from .quadrature import gauss_interval


def _zero_spatial(pts):
    return np.zeros(len(pts))


@dataclass
class ProblemSpec:
    """Wave problem data on a product domain with homogeneous Dirichlet BCs.

    Spatial callbacks take an (n, dim) point array; `f` and `exact_u` take
    (points, t).  Omitted callbacks mean zero.  `exact_u`/`exact_ut` are
    only used for verification.
    """

    domain: Domain
    a: Coefficient
    f: Callable | None = None
    u0: Callable | None = None
    u1: Callable | None = None
    T: float = 1.0
    exact_u: Callable | None = None
    exact_ut: Callable | None = None
    name: str = ""

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("final time must be positive")

    def f_at(self, t: float) -> Callable:
        if self.f is None:
            return _zero_spatial
        f = self.f
        return lambda pts, _t=float(t): f(pts, _t)


@dataclass(frozen=True)
class TimeGrid:
    knots: tuple[float, ...]

    def __post_init__(self):
        k = np.asarray(self.knots)
        if len(k) < 2 or k[0] != 0.0 or np.any(np.diff(k) <= 0):
            raise ValueError("knots must start at 0 and strictly increase")

    @staticmethod
    def uniform(T: float, N: int) -> "TimeGrid":
        return TimeGrid(tuple(np.linspace(0.0, T, N + 1)))

    @property
    def N(self) -> int:
        return len(self.knots) - 1

    @property
    def T(self) -> float:
        return self.knots[-1]

    def k(self, n: int) -> float:
        return self.knots[n] - self.knots[n - 1]

    def interval_of(self, t: float) -> int:
        """Index n with t in (t^{n-1}, t^n]; t = 0 maps to interval 1."""
        if not (0.0 <= t <= self.T + 1e-14):
            raise ValueError(f"time {t} outside [0, {self.T}]")
        n = int(np.searchsorted(self.knots, t, side="left"))
        return min(max(n, 1), self.N)


@dataclass
class StepRecord:
    n: int
    t: float
    mesh: Mesh
    space: FeSpace
    U: FeFunction
    dU: FeFunction  # projected difference quotient (V^0 at n = 0)
    k: float


class MeshSchedule:
    """Per-step refine/coarsen actions addressed by coordinate boxes.

    Actions are applied to the previous step's mesh; a box selects the
    elements whose barycenter it contains, `None` selects everything.
    """

    def __init__(self, actions: dict[int, list[tuple]] | None = None):
        self.actions = actions or {}

    @staticmethod
    def fixed() -> "MeshSchedule":
        return MeshSchedule()

    def add(self, step: int, kind: str, box=None) -> "MeshSchedule":
        if kind not in ("refine", "coarsen"):
            raise ValueError(f"unknown schedule action {kind!r}")
        self.actions.setdefault(step, []).append((kind, box))
        return self

    def mesh_for_step(self, n: int, prev_mesh: Mesh) -> Mesh:
        mesh = prev_mesh
        for kind, box in self.actions.get(n, ()):
            marked = _elements_in_box(mesh, box)
            mesh = refine(mesh, marked) if kind == "refine" else coarsen(mesh, marked)
        return mesh


def _elements_in_box(mesh: Mesh, box) -> list[int]:
    if box is None:
        return list(mesh.elements)
    geom = mesh_geometry(mesh)
    dim = mesh.dim
    ref_bary = np.full((1, dim), 1.0 / (dim + 1))
    out = []
    for i, e in enumerate(mesh.elements):
        c = geom["origin"][i] + (ref_bary @ geom["B"][i].T)[0]
        ok = all(box[2 * d] <= c[d] <= box[2 * d + 1] for d in range(dim))
        if ok:
            out.append(e)
    return out


class Trajectory:
    """Complete fully-discrete history plus cached data accessors."""

    def __init__(self, problem: ProblemSpec, grid: TimeGrid,
                 records: list[StepRecord], load_mode: str = "pointwise",
                 time_quad_order: int = 5, space_quad_order: int | None = None):
        if len(records) != grid.N + 1:
            raise ValueError("record count does not match the time grid")
        self.problem = problem
        self.grid = grid
        self.records = records
        self.load_mode = load_mode
        self.time_quad_order = time_quad_order
        self.space_quad_order = space_quad_order
        self._fbar: dict[int, CachedSpatialFn] = {}
        self._fpoint: dict[int, CachedSpatialFn] = {}
        self._exact_dU: dict[int, FeFunction] = {}
        self._exact_d2U: dict[int, FeFunction] = {}
        self._gdata = None

    @property
    def N(self) -> int:
        return self.grid.N

    @property
    def degree(self) -> int:
        return self.records[0].space.degree

    def mesh(self, n: int) -> Mesh:
        return self.records[n].mesh

    def space(self, n: int) -> FeSpace:
        return self.records[n].space

    def U(self, n: int) -> FeFunction:
        return self.records[n].U

    # -- data callbacks -----------------------------------------------------

    def f_point_fn(self, n: int) -> CachedSpatialFn:
        """f(t^n, .) as a cached spatial callback."""
        fn = self._fpoint.get(n)
        if fn is None:
            fn = CachedSpatialFn(self.problem.f_at(self.grid.knots[n]),
                                 name=f"f^{n}")
            self._fpoint[n] = fn
        return fn

    def fbar_fn(self, n: int) -> CachedSpatialFn:
        """Interval average of f (pointwise value at n = 0)."""
        fn = self._fbar.get(n)
        if fn is not None:
            return fn
        if n == 0 or self.problem.f is None:
            fn = self.f_point_fn(n)
        else:
            fn = CachedSpatialFn(
                _fbar_callable(self.problem, self.grid, n, self.time_quad_order),
                name=f"fbar^{n}")
        self._fbar[n] = fn
        return fn

    def f_used_fn(self, n: int) -> CachedSpatialFn:
        """The load the scheme actually used at step n."""
        return self.fbar_fn(n) if self.load_mode == "average" else self.f_point_fn(n)

    # -- exact difference quotients ------------------------------------------

    def exact_dU(self, n: int) -> FeFunction:
        """(U^n - U^{n-1})/k_n represented exactly (V^0 for n = 0)."""
        if n == 0:
            return self.records[0].dU
        hit = self._exact_dU.get(n)
        if hit is not None:
            return hit
        ra, rb = self.records[n - 1], self.records[n]
        cr = overlay([ra.mesh, rb.mesh])
        space = fe_space(cr, self.degree)
        coeffs = (transfer(rb.U, space).coeffs - transfer(ra.U, space).coeffs) / rb.k
        out = space.function(coeffs)
        self._exact_dU[n] = out
        return out

    def exact_d2U(self, n: int) -> FeFunction:
        """(dU^n - dU^{n-1})/k_n with exact quotients, on a common refinement."""
        if n < 1:
            raise ValueError("second difference starts at n = 1")
        hit = self._exact_d2U.get(n)
        if hit is not None:
            return hit
        dn, dp = self.exact_dU(n), self.exact_dU(n - 1)
        cr = overlay([dn.mesh, dp.mesh])
        space = fe_space(cr, self.degree)
        k = self.records[n].k
        coeffs = (transfer(dn, space).coeffs - transfer(dp, space).coeffs) / k
        out = space.function(coeffs)
        self._exact_d2U[n] = out
        return out


def initialize(problem: ProblemSpec, mesh0: Mesh, degree: int = 1,
               space_quad_order: int | None = None) -> StepRecord:
    """Step 0: L2 projections of the initial data."""
    space = fe_space(mesh0, degree)
    u0 = problem.u0 or _zero_spatial
    u1 = problem.u1 or _zero_spatial
    U0 = l2_project(Field.from_fn(u0), space, order=space_quad_order)
    V0 = l2_project(Field.from_fn(u1), space, order=space_quad_order)
    return StepRecord(0, 0.0, mesh0, space, U0, V0, 0.0)


def step(prev: StepRecord, prev_dU_exact: FeFunction, mesh_n: Mesh, k_n: float,
         f_n, t_n: float, a: Coefficient,
         space_quad_order: int | None = None) -> StepRecord:
    """Advance one step; `prev_dU_exact` is the exact quotient at level n-1."""
    if mesh_n.forest is not prev.mesh.forest:
        raise ValueError("step mesh is not compatible with the previous mesh")
    space = fe_space(mesh_n, prev.space.degree)
    M = assemble_mass(space)
    K = assemble_stiffness(space, a)
    A = M / k_n**2 + K
    b = load_vector(space, Field.from_fn(f_n), order=space_quad_order)
    b = b + (cross_mass(prev.space, space) @ prev.U.coeffs) / k_n**2
    b = b + (cross_mass(prev_dU_exact.space, space) @ prev_dU_exact.coeffs) / k_n
    u = solve_spd(A, b)
    # projected difference quotient onto the current space, exact transfers
    rhs = (M @ u - cross_mass(prev.space, space) @ prev.U.coeffs) / k_n
    dU = space.function(solve_spd(M, rhs))
    return StepRecord(prev.n + 1, t_n, mesh_n, space, space.function(u), dU, k_n)


def run(problem: ProblemSpec, grid: TimeGrid,
        schedule: MeshSchedule | None = None, mesh0: Mesh | None = None,
        n0: int | None = None, degree: int = 1, load_mode: str = "pointwise",
        time_quad_order: int = 5,
        space_quad_order: int | None = None) -> Trajectory:
    """Run the scheme over the grid and mesh schedule."""
    if load_mode not in ("pointwise", "average"):
        raise ValueError("load mode must be 'pointwise' or 'average'")
    if mesh0 is None:
        if n0 is None:
            raise ValueError("provide either mesh0 or n0")
        mesh0 = uniform_mesh(problem.domain, n0)
    schedule = schedule or MeshSchedule.fixed()
    records = [initialize(problem, mesh0, degree, space_quad_order)]
    prev_dU_exact = records[0].dU
    for n in range(1, grid.N + 1):
        mesh_n = schedule.mesh_for_step(n, records[-1].mesh)
        t_n = grid.knots[n]
        f_fn = (_fbar_callable(problem, grid, n, time_quad_order)
                if load_mode == "average" else problem.f_at(t_n))
        rec = step(records[-1], prev_dU_exact, mesh_n, grid.k(n), f_fn, t_n,
                   problem.a, space_quad_order)
        records.append(rec)
        # exact quotient for the next step's right-hand side
        cr = overlay([records[-2].mesh, rec.mesh])
        space = fe_space(cr, degree)
        prev_dU_exact = space.function(
            (transfer(rec.U, space).coeffs
             - transfer(records[-2].U, space).coeffs) / rec.k)
    return Trajectory(problem, grid, records, load_mode=load_mode,
                      time_quad_order=time_quad_order,
                      space_quad_order=space_quad_order)


def _fbar_callable(problem: ProblemSpec, grid: TimeGrid, n: int,
                   time_quad_order: int):
    if problem.f is None:
        return _zero_spatial
    t0, t1 = grid.knots[n - 1], grid.knots[n]
    tq, wq = gauss_interval(time_quad_order)
    times = t0 + tq * (t1 - t0)
    f = problem.f

    def avg(pts):
        acc = np.zeros(len(pts))
        for w, t in zip(wq, times):
            acc = acc + w * np.broadcast_to(
                np.asarray(f(pts, t), dtype=float), (len(pts),))
        return acc

    return avg


def discrete_energy(traj: Trajectory) -> np.ndarray:
    """E^n = 1/2 ||dU^n||^2 + 1/2 a(U^n, U^n) per step (fixed-mesh notion)."""
    out = np.empty(traj.N + 1)
    for n, rec in enumerate(traj.records):
        M = assemble_mass(rec.space)
        K = assemble_stiffness(rec.space, traj.problem.a)
        dU = traj.exact_dU(n)
        Mx = assemble_mass(dU.space)
        out[n] = 0.5 * float(dU.coeffs @ (Mx @ dU.coeffs)) \
            + 0.5 * float(rec.U.coeffs @ (K @ rec.U.coeffs))
    return out


def scheme_residual(traj: Trajectory, n: int) -> tuple[np.ndarray, float]:
    """Re-assembled residual <d2U^n, V> + a(U^n, V) - <f^n, V> and its scale.

    Everything is recomputed from the records with exact cross-mesh
    transfers; the scale is the largest magnitude among the three terms.
    """
    if n < 1:
        raise ValueError("residual is defined for n >= 1")
    rec = traj.records[n]
    space = rec.space
    k = rec.k
    K = assemble_stiffness(space, traj.problem.a)
    dn = traj.exact_dU(n)
    dp = traj.exact_dU(n - 1)
    term_d2 = (cross_mass(dn.space, space) @ dn.coeffs
               - cross_mass(dp.space, space) @ dp.coeffs) / k
    term_a = K @ rec.U.coeffs
    term_f = load_vector(space, Field.from_fn(traj.f_used_fn(n).fn),
                         order=traj.space_quad_order)
    resid = term_d2 + term_a - term_f
    scale = max(np.max(np.abs(term_d2)), np.max(np.abs(term_a)),
                np.max(np.abs(term_f)), 1e-300)
    return resid, float(scale)


def trajectory_to_text(traj: Trajectory) -> str:
    """Plain-text dump: one block per step with mesh size and coefficients."""
    lines = [f"# trajectory N={traj.N} load={traj.load_mode}"]
    for rec in traj.records:
        lines.append(f"step {rec.n} t {rec.t!r} k {rec.k!r} "
                     f"elements {len(rec.mesh)} ndof {rec.space.ndof}")
        lines.append("U " + " ".join(repr(c) for c in rec.U.coeffs))
        lines.append("dU " + " ".join(repr(c) for c in rec.dU.coeffs))
    return "\n".join(lines) + "\n"
