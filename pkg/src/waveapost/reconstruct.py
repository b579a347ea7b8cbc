"""Computable reconstruction data for the a posteriori bounds.

Provides the piecewise-cubic C1-in-time interpolant of the discrete levels,
its derivatives, the linear remainder function `mu` with zero interval mean,
and the g-data (discrete elliptic images of the solution combined with load
averages) together with the gamma recursion and the piecewise evolution
function G whose running integral drives the evolution indicator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import Field, FeFunction, discrete_elliptic, fe_space, l2_project
from .mesh import Mesh, overlay
from .stepper import Trajectory


def mu(grid, n: int, t) -> float | np.ndarray:
    """Remainder factor -6 (t - midpoint)/k_n on (t^{n-1}, t^n].

    Integrates to zero over the interval; equals -3 at t^n and +3 at the
    left endpoint.
    """
    k = grid.k(n)
    t_mid = 0.5 * (grid.knots[n] + grid.knots[n - 1])
    return -6.0 / k * (np.asarray(t) - t_mid)


def _cubic_weights(grid, n: int, t: float) -> tuple[float, float, float]:
    """Coefficients (c_now, c_prev, c_d2) of the interpolant on interval n."""
    k = grid.k(n)
    t0, t1 = grid.knots[n - 1], grid.knots[n]
    l1 = (t - t0) / k
    l0 = (t1 - t) / k
    q = (t - t0) * (t1 - t) ** 2 / k
    return l1, l0, -q


def _cubic_weights_dt(grid, n: int, t: float) -> float:
    """d/dt of the d2-term weight q(t) = (t-t0)(t1-t)^2/k."""
    k = grid.k(n)
    t0, t1 = grid.knots[n - 1], grid.knots[n]
    return ((t1 - t) ** 2 - 2.0 * (t - t0) * (t1 - t)) / k


def eval_U_hat(traj: Trajectory, t: float, deriv: int = 0,
               interval: int | None = None) -> Field:
    """Time reconstruction of the trajectory (or its first/second derivative).

    At knots the value is U^n and the slope is the backward quotient dU^n;
    the second derivative equals (1 + mu^n(t)) d2U^n on each interval.  The
    result is a Field whose FE parts may live on several meshes.
    """
    grid = traj.grid
    if deriv not in (0, 1, 2):
        raise ValueError("deriv must be 0, 1 or 2")
    n = interval if interval is not None else grid.interval_of(t)
    if deriv == 0:
        c1, c0, cd = _cubic_weights(grid, n, t)
        return (c1 * traj.U(n) + c0 * traj.U(n - 1)
                + cd * traj.exact_d2U(n))
    if deriv == 1:
        return (1.0 * traj.exact_dU(n)
                + (-_cubic_weights_dt(grid, n, t)) * traj.exact_d2U(n))
    return (1.0 + float(mu(grid, n, t))) * traj.exact_d2U(n)


@dataclass
class GData:
    """Per-step g-fields, their divided differences and the gamma recursion.

    `g[n]`, `dg[n]` and `d2g[n]` are Fields (FE part plus load-average
    callbacks); `dg[0]` holds the initial-velocity variant; `gamma[n]` is
    kept compacted on a running common refinement so its FE part stays a
    single function.
    """

    traj: Trajectory
    g: list
    g_fe: list
    dg: list
    d2g: list
    gamma: list
    gamma_mesh: list


def build_g_data(traj: Trajectory) -> GData:
    """Assemble g^n = A^n U^n - Pi^n f^n + fbar^n and derived quantities."""
    if traj._gdata is not None:
        return traj._gdata
    a = traj.problem.a
    N = traj.N
    g_fe: list[FeFunction] = []
    g: list[Field] = []
    for n in range(N + 1):
        rec = traj.records[n]
        AU = discrete_elliptic(rec.U, a)
        Pf = l2_project(Field.from_fn(traj.f_used_fn(n).fn), rec.space,
                        order=traj.space_quad_order)
        fe = rec.space.function(AU.coeffs - Pf.coeffs)
        g_fe.append(fe)
        g.append(Field(fe_terms=((1.0, fe),),
                       fn_terms=((1.0, traj.fbar_fn(n)),)))

    dg: list[Field] = [None] * (N + 1)
    # dg[0]: discrete elliptic image of V^0 with the pointwise load
    rec0 = traj.records[0]
    AV0 = discrete_elliptic(rec0.dU, a)
    Pf0 = l2_project(Field.from_fn(traj.f_used_fn(0).fn), rec0.space,
                     order=traj.space_quad_order)
    dg0_fe = rec0.space.function(AV0.coeffs - Pf0.coeffs)
    dg[0] = Field(fe_terms=((1.0, dg0_fe),),
                  fn_terms=((1.0, traj.f_point_fn(0)),))
    for n in range(1, N + 1):
        dg[n] = (1.0 / traj.grid.k(n)) * (g[n] - g[n - 1])

    d2g: list = [None] * (N + 1)
    for n in range(1, N + 1):
        d2g[n] = ((1.0 / traj.grid.k(n)) * (dg[n] - dg[n - 1])).collect()

    gamma: list[Field] = [Field.zero()] * (N + 1)
    gamma_mesh: list[Mesh] = [traj.mesh(0)] * (N + 1)
    run_mesh = traj.mesh(0)
    acc = Field.zero()
    for j in range(1, N + 1):
        k = traj.grid.k(j)
        run_mesh = overlay([run_mesh, traj.mesh(j)])
        acc = (acc + (k**2 / 2.0) * dg[j] + (k**3 / 12.0) * d2g[j]).collect()
        acc = acc.compact_fe(run_mesh)
        gamma[j] = acc
        gamma_mesh[j] = run_mesh

    gdata = GData(traj, g, g_fe, dg, d2g, gamma, gamma_mesh)
    traj._gdata = gdata
    return gdata


def eval_G(gdata: GData, t: float, interval: int | None = None) -> Field:
    """Evolution function on the interval containing t (overridable).

    G is continuous across knots and vanishes at t = 0 thanks to the gamma
    recursion; both facts are checked by the invariant suite rather than
    assumed here.
    """
    traj = gdata.traj
    grid = traj.grid
    j = interval if interval is not None else grid.interval_of(t)
    tj = grid.knots[j]
    k = grid.k(j)
    s = tj - t
    alpha = s**2 / 2.0
    beta = s**4 / (4.0 * k) - s**3 / 3.0
    return (alpha * gdata.dg[j] - beta * gdata.d2g[j] - gdata.gamma[j]).collect()
