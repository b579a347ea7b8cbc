"""A posteriori quantities: residual estimator, indicators and the total bound.

The elliptic residual estimator combines element interior residuals with
inter-element flux jumps, weighted h^2 and h^(3/2); on top of it sit the
four indicators of the evolution error (mesh change, evolution function,
data oscillation, time reconstruction), the two elliptic terms delta1 and
delta2, and the assembled L-inf(L2) bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fem import (Coefficient, FeFunction, Field, as_field, fe_space,
                  l2_norm, l2_project, mesh_geometry, quad_points)
from .mesh import Domain, Mesh, overlay, pair_maps
from .quadrature import gauss_interval
from .reconstruct import GData, build_g_data, mu
from .stepper import Trajectory


@dataclass
class EstimatorConfig:
    """Constants and quadrature orders for the estimator evaluation.

    `C_el` is the (non-computable) elliptic estimator constant, default 1;
    `C_omega` is the Poincare-Friedrichs constant, "auto" uses the sharp
    value 1/lambda_1 for the product domain.  Orders are polynomial
    exactness degrees.
    """

    C_el: float = 1.0
    C_omega: float | str = "auto"
    alpha_min: float | None = None
    time_quad_order: int = 5
    space_quad_order: int | None = None

    def resolve(self, traj: Trajectory) -> "_Resolved":
        dom = traj.problem.domain
        c_om = (poincare_constant(dom) if self.C_omega == "auto"
                else float(self.C_omega))
        amin = (traj.problem.a.alpha_min if self.alpha_min is None
                else float(self.alpha_min))
        p = traj.degree
        sq = self.space_quad_order or (2 * p + 2)
        if self.C_el <= 0 or c_om <= 0 or amin <= 0:
            raise ValueError("estimator constants must be positive")
        return _Resolved(self.C_el, c_om, amin, self.time_quad_order, sq)


@dataclass(frozen=True)
class _Resolved:
    C_el: float
    C_omega: float
    alpha_min: float
    time_order: int
    space_order: int


def poincare_constant(domain: Domain) -> float:
    """Sharp Dirichlet constant 1/lambda_1 of the product domain."""
    if domain.dim == 1:
        return (domain.lengths[0] / math.pi) ** 2
    lx, ly = domain.lengths
    return 1.0 / (math.pi**2 * (1.0 / lx**2 + 1.0 / ly**2))


@dataclass
class EstimatorBreakdown:
    """Every term of the total bound, raw (factors applied only in `total`).

    `E0`, `init_u0`, `init_u1` store the unscaled elliptic estimator at step
    zero and the initial-data norms; `total` carries the assembled bound
    delta1 + sqrt(2) C_el E0 + sqrt(2) init_u0 + 2 delta2
    + 2 (eta1 + ... + eta4) + C_aN init_u1.
    """

    eta1_1: float
    eta1_2: float
    eta2: float
    eta3: float
    eta4: float
    delta1: float
    delta2: float
    E0: float
    init_u0: float
    init_u1: float
    C_aN: float
    total: float
    element_indicators: list = field(default_factory=list, repr=False)

    @property
    def eta1(self) -> float:
        return self.eta1_1 + self.eta1_2

    def as_dict(self) -> dict:
        return {
            "eta1": self.eta1, "eta1_1": self.eta1_1, "eta1_2": self.eta1_2,
            "eta2": self.eta2, "eta3": self.eta3, "eta4": self.eta4,
            "delta1": self.delta1, "delta2": self.delta2, "E0": self.E0,
            "init_u0": self.init_u0, "init_u1": self.init_u1,
            "C_aN": self.C_aN, "total": self.total,
        }


# ---------------------------------------------------------------------------
# elliptic residual estimator
# ---------------------------------------------------------------------------


def _edge_rule(mesh: Mesh, order: int):
    """Interior edge quadrature data for a 2D mesh, cached on the mesh."""
    key = ("edge_rule", order)
    hit = mesh._quad_cache.get(key)
    if hit is not None:
        return hit
    forest = mesh.forest
    geom = mesh_geometry(mesh)
    s, w = gauss_interval(order)
    rows = []
    for edge, eL, eR in mesh.interior_edges:
        va, vb = sorted(edge)
        A = np.asarray(forest.coords(va))
        B = np.asarray(forest.coords(vb))
        tang = B - A
        length = float(np.linalg.norm(tang))
        normal = np.array([tang[1], -tang[0]]) / length
        pts = A[None, :] + s[:, None] * tang[None, :]
        rows.append((eL, eR, geom["index"][eL], geom["index"][eR],
                     length, normal, pts))
    hit = (rows, w)
    mesh._quad_cache[key] = hit
    return hit


def elliptic_residual_E(Z: FeFunction, r, mesh: Mesh, a: Coefficient,
                        order: int | None = None
                        ) -> tuple[float, dict[int, float]]:
    """Residual estimator for -div(a grad Z) = r over the elements of `mesh`.

    Z may live on a refinement of `mesh` (its gradient kinks interior to a
    mesh element then enter as jump terms weighted by that element's
    diameter).  Interior residuals carry h^2, flux jumps across edges carry
    h^(3/2); in 1D the edge terms are point jumps weighted by the larger
    adjacent element diameter.  Returns the estimator value and the
    per-element map of squared contributions (edge terms split evenly).
    """
    r = as_field(r)
    p = Z.space.degree
    if order is None:
        order = 2 * p + 2 if (r.fn_terms or a.grad is None) else 2 * p
    work = overlay([mesh, Z.mesh] + r.meshes)
    geom_w = mesh_geometry(work)
    forest = mesh.forest
    h_est = {e: forest.element_diameter(e) for e in mesh.elements}

    per_elem: dict[int, float] = {e: 0.0 for e in mesh.elements}

    # interior residual: h^4 * int (r + div(a grad Z))^2 over each element
    pts, wts = quad_points(work, order)
    flat = pts.reshape(-1, pts.shape[-1])
    rvals = r.values_on(work, order)
    gz = Z.grad_on(work, order)
    grad_a = a.gradient(flat).reshape(pts.shape)
    avals = a(flat).reshape(pts.shape[:2])
    div_flux = np.einsum("nqd,nqd->nq", grad_a, gz)
    if p > 1:
        div_flux = div_flux + avals * Z.laplacian_on(work, order)
    integrand = (rvals + div_flux) ** 2
    for i, e in enumerate(work.elements):
        parent = work.element_parent_in(e, mesh)
        per_elem[parent] += h_est[parent] ** 4 * float(wts[i] @ integrand[i])

    # flux jumps
    if mesh.dim == 1:
        cw = Z.padded()
        for edge, eL, eR in work.interior_edges:
            (v,) = edge
            x = np.asarray(forest.coords(v))[None, :]
            pL = work.element_parent_in(eL, mesh)
            pR = work.element_parent_in(eR, mesh)
            srcL = _ancestor_in(forest, eL, Z.mesh)
            srcR = _ancestor_in(forest, eR, Z.mesh)
            gL = Z.grad_at(srcL, x)[0, 0]
            gR = Z.grad_at(srcR, x)[0, 0]
            jump = float(a(x)[0]) * (gL - gR)
            h = max(h_est[pL], h_est[pR]) if pL != pR else h_est[pL]
            val = h**3 * jump**2
            per_elem[pL] += 0.5 * val
            per_elem[pR] += 0.5 * val
    else:
        rows, w_edge = _edge_rule(work, max(order, 2 * (p - 1)))
        for eL, eR, _, _, length, normal, epts in rows:
            pL = work.element_parent_in(eL, mesh)
            pR = work.element_parent_in(eR, mesh)
            srcL = _ancestor_in(forest, eL, Z.mesh)
            srcR = _ancestor_in(forest, eR, Z.mesh)
            if srcL == srcR and pL == pR:
                continue  # smooth inside one source element: no jump
            gL = Z.grad_at(srcL, epts)
            gR = Z.grad_at(srcR, epts)
            av = a(epts)
            jump = av * ((gL - gR) @ normal)
            if pL != pR:
                shared = set(forest.verts[pL]) & set(forest.verts[pR])
                ca, cb = (forest.coords(v) for v in shared)
                h = math.dist(ca, cb)
            else:
                h = h_est[pL]
            val = h**3 * length * float(w_edge @ (jump**2))
            per_elem[pL] += 0.5 * val
            per_elem[pR] += 0.5 * val

    total = math.sqrt(max(sum(per_elem.values()), 0.0))
    return total, per_elem


def _ancestor_in(forest, eid: int, mesh: Mesh) -> int:
    anc = forest.ancestor_or_self_in(eid, mesh.element_set)
    if anc is None:
        raise ValueError("element has no ancestor in the function's mesh")
    return anc


# ---------------------------------------------------------------------------
# indicators
# ---------------------------------------------------------------------------


def _projection_residual(F: FeFunction, space) -> Field | None:
    """(I - Pi)F as a Field; None when F already lies in the target space."""
    if F.space is space:
        return None
    P = l2_project(F, space)
    return Field(fe_terms=((1.0, F), (-1.0, P)))


def eta1(traj: Trajectory, cfg: EstimatorConfig | None = None) -> tuple[float, float]:
    """Mesh change indicator (eta1_1, eta1_2) at the final time.

    Exactly zero on a fixed mesh schedule: projections onto the same space
    are structural identities, so no quadrature noise is introduced.
    """
    cfg = (cfg or EstimatorConfig()).resolve(traj)
    grid = traj.grid
    N = traj.N
    tN = grid.T
    tq, wq = gauss_interval(cfg.time_order)

    total_11 = 0.0
    for j in range(1, N + 1):
        space_j = traj.space(j)
        dU = traj.exact_dU(j)
        d2U = traj.exact_d2U(j)
        R1 = _projection_residual(dU, space_j)
        R2 = _projection_residual(d2U, space_j)
        if R1 is None and R2 is None:
            continue
        k = grid.k(j)
        t0 = grid.knots[j - 1]
        acc = 0.0
        for s, w in zip(tq, wq):
            t = t0 + s * k
            qdt = _qprime(grid, j, t)
            terms = []
            if R1 is not None:
                terms.append(R1)
            if R2 is not None:
                terms.append((-qdt) * R2)
            f = terms[0]
            for extra in terms[1:]:
                f = f + extra
            acc += w * l2_norm(f, order=2 * traj.degree)
        total_11 += k * acc

    total_12 = 0.0
    for j in range(1, N):
        space_next = traj.space(j + 1)
        if space_next is traj.space(j):
            continue
        dU = traj.exact_dU(j)
        P_next = l2_project(dU, space_next)
        P_here = traj.records[j].dU
        diff = Field(fe_terms=((1.0, P_next), (-1.0, P_here)))
        total_12 += (tN - grid.knots[j]) * l2_norm(diff, order=2 * traj.degree)
    V0 = traj.records[0].dU
    R0 = _projection_residual(V0, traj.space(0))
    if R0 is not None:
        total_12 += tN * l2_norm(R0, order=2 * traj.degree)
    return total_11, total_12


def _qprime(grid, n: int, t: float) -> float:
    k = grid.k(n)
    t0, t1 = grid.knots[n - 1], grid.knots[n]
    return ((t1 - t) ** 2 - 2.0 * (t - t0) * (t1 - t)) / k


def eta2(gdata: GData, cfg: EstimatorConfig | None = None) -> float:
    """Evolution error indicator: the integral of ||G|| over (0, t^N]."""
    traj = gdata.traj
    cfg = (cfg or EstimatorConfig()).resolve(traj)
    grid = traj.grid
    tq, wq = gauss_interval(cfg.time_order)
    total = 0.0
    for j in range(1, traj.N + 1):
        k = grid.k(j)
        t0 = grid.knots[j - 1]
        qmesh = gdata.gamma_mesh[j]
        acc = 0.0
        for s, w in zip(tq, wq):
            t = t0 + s * k
            G = _eval_G_on(gdata, j, t)
            acc += w * l2_norm(G, quad_mesh=qmesh, order=cfg.space_order)
        total += k * acc
    return total


def _eval_G_on(gdata: GData, j: int, t: float) -> Field:
    grid = gdata.traj.grid
    s = grid.knots[j] - t
    k = grid.k(j)
    alpha = s**2 / 2.0
    beta = s**4 / (4.0 * k) - s**3 / 3.0
    return (alpha * gdata.dg[j] - beta * gdata.d2g[j] - gdata.gamma[j]).collect()


def eta3(traj: Trajectory, cfg: EstimatorConfig | None = None) -> float:
    """Data error indicator from the oscillation of f around its averages.

    All intervals but the last carry the 1/(2 pi) factor; the final-time
    interval enters verbatim without it.
    """
    if traj.problem.f is None:
        return 0.0
    cfg = (cfg or EstimatorConfig()).resolve(traj)
    grid = traj.grid
    tq, wq = gauss_interval(cfg.time_order)
    f = traj.problem.f
    terms = []
    for j in range(1, traj.N + 1):
        k = grid.k(j)
        t0 = grid.knots[j - 1]
        fbar = traj.fbar_fn(j)
        acc = 0.0
        for s, w in zip(tq, wq):
            t = t0 + s * k
            diff = Field(fn_terms=((1.0, fbar),)) - Field.from_fn(
                lambda pts, _t=t: f(pts, _t))
            acc += w * l2_norm(diff, quad_mesh=traj.mesh(j),
                               order=cfg.space_order) ** 2
        terms.append(math.sqrt(max(k**3 * k * acc, 0.0)))
    return sum(terms[:-1]) / (2 * math.pi) + terms[-1]


def eta4(traj: Trajectory, cfg: EstimatorConfig | None = None,
         return_terms: bool = False):
    """Time reconstruction indicator built from the second difference quotients.

    Per-interval terms are integrated in time by Gauss quadrature; since the
    quotient is constant in time each full-interval term equals
    sqrt(3) k^2 ||d2U||, which `return_terms` exposes for cross-checking.
    """
    cfg = (cfg or EstimatorConfig()).resolve(traj)
    grid = traj.grid
    tq, wq = gauss_interval(max(cfg.time_order, 2))
    quad_terms = []
    closed_terms = []
    for j in range(1, traj.N + 1):
        k = grid.k(j)
        t0 = grid.knots[j - 1]
        S = l2_norm(traj.exact_d2U(j), order=2 * traj.degree)
        mu_sq = 0.0
        for s, w in zip(tq, wq):
            t = t0 + s * k
            mu_sq += w * float(mu(grid, j, t)) ** 2
        quad_terms.append(math.sqrt(k**3 * k * mu_sq) * S)
        closed_terms.append(math.sqrt(3.0) * k**2 * S)
    total = sum(quad_terms[:-1]) / (2 * math.pi) + quad_terms[-1]
    if return_terms:
        return total, quad_terms, closed_terms
    return total


# ---------------------------------------------------------------------------
# elliptic terms
# ---------------------------------------------------------------------------


def _estep_data(traj: Trajectory, gdata: GData, j: int) -> Field:
    """r for the step-j elliptic problem: FE(A U - Pi f) plus pointwise f."""
    return Field(fe_terms=((1.0, gdata.g_fe[j]),),
                 fn_terms=((1.0, traj.f_used_fn(j)),))


def _oscillation(traj: Trajectory, cfg: _Resolved, j: int) -> float:
    """||fbar^j - f^j||, exactly zero at j = 0 and under averaged loads."""
    if j == 0:
        return 0.0
    diff = (Field(fn_terms=((1.0, traj.fbar_fn(j)),))
            - Field(fn_terms=((1.0, traj.f_used_fn(j)),))).collect()
    if not diff.fn_terms:
        return 0.0
    return l2_norm(diff, quad_mesh=traj.mesh(j), order=cfg.space_order)


def step_elliptic_estimators(traj: Trajectory, cfg: EstimatorConfig | None = None
                             ) -> tuple[list[float], list[dict]]:
    """E^j = E(U^j, A^j U^j - Pi^j f^j + f^j, mesh^j) for every step."""
    rcfg = (cfg or EstimatorConfig()).resolve(traj)
    gdata = build_g_data(traj)
    vals, maps = [], []
    for j in range(traj.N + 1):
        v, m = elliptic_residual_E(traj.U(j), _estep_data(traj, gdata, j),
                                   traj.mesh(j), traj.problem.a,
                                   order=rcfg.space_order)
        vals.append(v)
        maps.append(m)
    return vals, maps


def delta1(traj: Trajectory, cfg: EstimatorConfig | None = None,
           _evals: list[float] | None = None) -> float:
    """Elliptic L-inf term: max of the initial-velocity branch and the
    step-ratio-weighted maximum of per-step estimators plus oscillations."""
    cfg_o = cfg or EstimatorConfig()
    rcfg = cfg_o.resolve(traj)
    gdata = build_g_data(traj)
    grid = traj.grid
    evals = _evals if _evals is not None else step_elliptic_estimators(traj, cfg_o)[0]

    E_v0, _ = elliptic_residual_E(traj.records[0].dU, gdata.dg[0],
                                  traj.mesh(0), traj.problem.a,
                                  order=rcfg.space_order)
    branch1 = (8.0 * grid.k(1) / 27.0) * rcfg.C_el * E_v0

    if traj.N >= 2:
        ratio = max(grid.k(j) / grid.k(j - 1) for j in range(2, traj.N + 1))
    else:
        ratio = 1.0
    peak = max(rcfg.C_el * evals[j]
               + rcfg.C_omega / rcfg.alpha_min * _oscillation(traj, rcfg, j)
               for j in range(traj.N + 1))
    branch2 = (35.0 / 27.0 + 31.0 / 27.0 * ratio) * peak
    return max(branch1, branch2)


def delta2(traj: Trajectory, cfg: EstimatorConfig | None = None) -> float:
    """Elliptic term for the time derivative, on finest common coarsenings.

    The j = 0 term reuses the initial-velocity estimator on mesh 0; for
    j >= 1 the divided differences of the load data are formed by Field
    arithmetic and the estimator mesh is the finest common coarsening of
    meshes j-1 and j.  Weights are (2/3)(2 k_j + k_{j+1}) with k_0 = 0 and
    k_{N+1} = 0.
    """
    rcfg = (cfg or EstimatorConfig()).resolve(traj)
    gdata = build_g_data(traj)
    grid = traj.grid
    N = traj.N

    def weight(j):
        kj = grid.k(j) if j >= 1 else 0.0
        kj1 = grid.k(j + 1) if j + 1 <= N else 0.0
        return (2.0 / 3.0) * (2.0 * kj + kj1)

    E_v0, _ = elliptic_residual_E(traj.records[0].dU, gdata.dg[0],
                                  traj.mesh(0), traj.problem.a,
                                  order=rcfg.space_order)
    total = weight(0) * rcfg.C_el * E_v0
    for j in range(1, N + 1):
        k = grid.k(j)
        fcc = pair_maps(traj.mesh(j - 1), traj.mesh(j)).finest_common_coarsening
        r = (1.0 / k) * Field(
            fe_terms=((1.0, gdata.g_fe[j]), (-1.0, gdata.g_fe[j - 1])),
            fn_terms=((1.0, traj.f_used_fn(j)), (-1.0, traj.f_used_fn(j - 1))))
        E_d, _ = elliptic_residual_E(traj.exact_dU(j), r, fcc, traj.problem.a,
                                     order=rcfg.space_order)
        osc = (Field(fn_terms=((1.0, traj.f_used_fn(j)),
                               (-1.0, traj.f_used_fn(j - 1)),
                               (-1.0, traj.fbar_fn(j)),
                               (1.0, traj.fbar_fn(j - 1))))).collect()
        if osc.fn_terms:
            osc_norm = l2_norm(osc, quad_mesh=traj.mesh(j),
                               order=rcfg.space_order) / k
        else:
            osc_norm = 0.0
        total += weight(j) * (rcfg.C_el * E_d
                              + rcfg.C_omega / rcfg.alpha_min * osc_norm)
    return total


# ---------------------------------------------------------------------------
# total bound
# ---------------------------------------------------------------------------


def total_bound(traj: Trajectory, cfg: EstimatorConfig | None = None
                ) -> EstimatorBreakdown:
    """Assemble every term of the final-time L-inf(L2) bound."""
    cfg_o = cfg or EstimatorConfig()
    rcfg = cfg_o.resolve(traj)
    gdata = build_g_data(traj)

    evals, emaps = step_elliptic_estimators(traj, cfg_o)
    e11, e12 = eta1(traj, cfg_o)
    e2 = eta2(gdata, cfg_o)
    e3 = eta3(traj, cfg_o)
    e4 = eta4(traj, cfg_o)
    d1 = delta1(traj, cfg_o, _evals=evals)
    d2 = delta2(traj, cfg_o)

    space0 = traj.space(0)
    u0 = traj.problem.u0
    u1 = traj.problem.u1
    init_order = max(rcfg.space_order, 2 * traj.degree + 4)
    if u0 is None:
        init_u0 = l2_norm(traj.U(0), order=2 * traj.degree)
    else:
        init_u0 = l2_norm(Field.from_fn(u0) - traj.U(0).as_field(),
                          quad_mesh=space0.mesh, order=init_order)
    if u1 is None:
        init_u1 = l2_norm(traj.records[0].dU, order=2 * traj.degree)
    else:
        init_u1 = l2_norm(Field.from_fn(u1) - traj.records[0].dU.as_field(),
                          quad_mesh=space0.mesh, order=init_order)

    C_aN = min(2.0 * traj.grid.T, math.sqrt(2.0 * rcfg.C_omega / rcfg.alpha_min))
    total = (d1 + math.sqrt(2.0) * rcfg.C_el * evals[0]
             + math.sqrt(2.0) * init_u0 + 2.0 * d2
             + 2.0 * (e11 + e12 + e2 + e3 + e4) + C_aN * init_u1)
    return EstimatorBreakdown(
        eta1_1=e11, eta1_2=e12, eta2=e2, eta3=e3, eta4=e4,
        delta1=d1, delta2=d2, E0=evals[0], init_u0=init_u0, init_u1=init_u1,
        C_aN=C_aN, total=total, element_indicators=emaps)


def element_map_to_text(maps: list[dict]) -> str:
    """Per-step element/value dump of the elliptic estimator contributions."""
    lines = ["# per-element squared estimator contributions"]
    for j, m in enumerate(maps):
        for e, v in sorted(m.items()):
            lines.append(f"{j} {e} {v!r}")
    return "\n".join(lines) + "\n"
