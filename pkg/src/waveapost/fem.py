"""Lagrange finite element spaces on forest meshes, assembly and transfers.

Spaces are P_p with homogeneous Dirichlet conditions (interior Lagrange
nodes only).  All cross-mesh operations (inner products, projections,
transfers) are computed exactly on common refinements within the shared
forest; no interpolation between unrelated meshes ever happens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache, cached_property
from typing import Callable, Iterable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh, overlay
from .quadrature import ref_rule

DEFAULT_SOLVER_RTOL = 1e-12


class SolverError(Exception):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class Coefficient:
    """Scalar diffusion coefficient with user-supplied bounds.

    `fn` maps an (n, dim) array of points to (n,) values; `grad`, when
    given, maps points to (n, dim) gradients (used by the residual
    estimator; otherwise central differences are taken).
    """

    fn: Callable[[np.ndarray], np.ndarray]
    alpha_min: float
    alpha_max: float
    grad: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if not (0 < self.alpha_min <= self.alpha_max):
            raise ValueError("need 0 < alpha_min <= alpha_max")

    def __call__(self, points: np.ndarray) -> np.ndarray:
        v = np.asarray(self.fn(points), dtype=float)
        return np.broadcast_to(v, (len(points),)).copy() if v.ndim == 0 else v

    def gradient(self, points: np.ndarray, h: float = 1e-6) -> np.ndarray:
        if self.grad is not None:
            g = np.asarray(self.grad(points), dtype=float)
            if g.ndim == 1:
                g = g[:, None] if points.shape[1] == 1 else g
            return np.broadcast_to(g, points.shape).copy() if g.ndim == 0 else g
        out = np.empty_like(points)
        for d in range(points.shape[1]):
            pp = points.copy()
            pp[:, d] += h
            pm = points.copy()
            pm[:, d] -= h
            out[:, d] = (self(pp) - self(pm)) / (2 * h)
        return out

    @staticmethod
    def constant(c: float) -> "Coefficient":
        c = float(c)
        return Coefficient(lambda pts: np.full(len(pts), c), c, c,
                           grad=lambda pts: np.zeros_like(pts))


# ---------------------------------------------------------------------------
# reference bases
# ---------------------------------------------------------------------------


class _LagrangeBasis:
    """Monomial-represented Lagrange basis on the reference element."""

    def __init__(self, dim: int, p: int):
        self.dim, self.p = dim, p
        if dim == 1:
            self.exps = [(a,) for a in range(p + 1)]
            self.nodes = np.array([[i / p] for i in range(p + 1)], dtype=float)
        else:
            self.exps = [(a, b) for a in range(p + 1) for b in range(p + 1 - a)]
            self.nodes = np.array(
                [[i / p, j / p] for i in range(p + 1) for j in range(p + 1 - i)],
                dtype=float,
            )
        V = self._monomials(self.nodes)
        self.coeff = np.linalg.inv(V)  # phi_i = sum_m coeff[m, i] mono_m
        self.n_local = len(self.nodes)

    def _monomials(self, pts, dx=0, dy=0):
        pts = np.atleast_2d(pts)
        out = np.empty((len(pts), len(self.exps)))
        for m, e in enumerate(self.exps):
            col = np.ones(len(pts))
            a = e[0]
            c = 1.0
            for _ in range(dx):
                c *= a
                a -= 1
            col = col * (c * pts[:, 0] ** max(a, 0) if c else 0.0)
            if self.dim == 2:
                b = e[1]
                c2 = 1.0
                for _ in range(dy):
                    c2 *= b
                    b -= 1
                col = col * (c2 * pts[:, 1] ** max(b, 0) if c2 else 0.0)
            out[:, m] = col
        return out

    def eval(self, pts: np.ndarray) -> np.ndarray:
        return self._monomials(pts) @ self.coeff

    def grad(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        out = np.empty((len(pts), self.n_local, self.dim))
        out[:, :, 0] = self._monomials(pts, dx=1) @ self.coeff
        if self.dim == 2:
            out[:, :, 1] = self._monomials(pts, dy=1) @ self.coeff
        return out

    def hess(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        out = np.empty((len(pts), self.n_local, self.dim, self.dim))
        out[:, :, 0, 0] = self._monomials(pts, dx=2) @ self.coeff
        if self.dim == 2:
            out[:, :, 1, 1] = self._monomials(pts, dy=2) @ self.coeff
            mixed = self._monomials(pts, dx=1, dy=1) @ self.coeff
            out[:, :, 0, 1] = mixed
            out[:, :, 1, 0] = mixed
        return out

    def classify_nodes(self):
        """Local node kinds: ('v', lv) | ('e', (la, lb), step) | ('c', tag)."""
        p = self.p
        kinds = []
        if self.dim == 1:
            for i in range(p + 1):
                if i == 0:
                    kinds.append(("v", 0))
                elif i == p:
                    kinds.append(("v", 1))
                else:
                    kinds.append(("c", i))
            return kinds
        for i in range(p + 1):
            for j in range(p + 1 - i):
                if i == 0 and j == 0:
                    kinds.append(("v", 0))
                elif i == p and j == 0:
                    kinds.append(("v", 1))
                elif i == 0 and j == p:
                    kinds.append(("v", 2))
                elif j == 0:
                    kinds.append(("e", (0, 1), i))
                elif i == 0:
                    kinds.append(("e", (0, 2), j))
                elif i + j == p:
                    kinds.append(("e", (1, 2), p - i))
                else:
                    kinds.append(("c", (i, j)))
        return kinds


@lru_cache(maxsize=None)
def lagrange_basis(dim: int, p: int) -> _LagrangeBasis:
    return _LagrangeBasis(dim, p)


@lru_cache(maxsize=None)
def _basis_at_rule(dim: int, p: int, degree: int):
    basis = lagrange_basis(dim, p)
    pts, _ = ref_rule(dim, degree)
    return basis.eval(pts), basis.grad(pts)


# ---------------------------------------------------------------------------
# geometry and quadrature caches (stored on the mesh instance)
# ---------------------------------------------------------------------------


def mesh_geometry(mesh: Mesh) -> dict:
    geom = mesh._quad_cache.get("geom")
    if geom is not None:
        return geom
    forest = mesh.forest
    dim = mesh.dim
    nel = len(mesh.elements)
    nv = dim + 1
    verts = np.empty((nel, nv), dtype=int)
    origin = np.empty((nel, dim))
    B = np.empty((nel, dim, dim))
    for i, e in enumerate(mesh.elements):
        vs = forest.verts[e]
        verts[i] = vs
        pts = np.array([forest.coords(v) for v in vs])
        origin[i] = pts[0]
        for d in range(dim):
            B[i, :, d] = pts[d + 1] - pts[0]
    absdet = np.abs(np.linalg.det(B))
    Binv = np.linalg.inv(B)
    diam = np.array([forest.element_diameter(e) for e in mesh.elements])
    index = {e: i for i, e in enumerate(mesh.elements)}
    geom = dict(verts=verts, origin=origin, B=B, Binv=Binv, absdet=absdet,
                diam=diam, index=index)
    mesh._quad_cache["geom"] = geom
    return geom


def quad_points(mesh: Mesh, degree: int):
    """Physical quadrature points/weights: ((nel, nq, dim), (nel, nq))."""
    key = ("quad", degree)
    hit = mesh._quad_cache.get(key)
    if hit is not None:
        return hit
    geom = mesh_geometry(mesh)
    ref, w = ref_rule(mesh.dim, degree)
    pts = geom["origin"][:, None, :] + np.einsum("qd,ned->nqe", ref, geom["B"])
    wts = w[None, :] * geom["absdet"][:, None]
    mesh._quad_cache[key] = (pts, wts)
    return pts, wts


# ---------------------------------------------------------------------------
# spaces and functions
# ---------------------------------------------------------------------------


class FeSpace:
    """P_p space with homogeneous Dirichlet conditions on a forest mesh."""

    def __init__(self, mesh: Mesh, degree: int):
        if degree < 1:
            raise ValueError("degree must be >= 1")
        self.mesh = mesh
        self.degree = degree
        self.basis = lagrange_basis(mesh.dim, degree)
        self._build_dofmap()
        self._eval_cache: dict = {}
        self._matrix_cache: dict = {}

    def _build_dofmap(self):
        forest = self.mesh.forest
        p = self.degree
        kinds = self.basis.classify_nodes()
        geom = mesh_geometry(self.mesh)
        nel = len(self.mesh.elements)
        nloc = self.basis.n_local
        eldofs = np.full((nel, nloc), -1, dtype=int)
        table: dict = {}
        points: list = []

        def get(key, pt):
            g = table.get(key)
            if g is None:
                g = table[key] = len(points)
                points.append(pt)
            return g

        for i, e in enumerate(self.mesh.elements):
            vs = forest.verts[e]
            phys = geom["origin"][i][None, :] + self.basis.nodes @ geom["B"][i].T
            for l, kind in enumerate(kinds):
                if kind[0] == "v":
                    gv = vs[kind[1]]
                    if forest.vertex_on_boundary(gv):
                        continue
                    eldofs[i, l] = get(("v", gv), phys[l])
                elif kind[0] == "e":
                    la, lb = kind[1]
                    ga, gb = vs[la], vs[lb]
                    if forest.edge_on_boundary(ga, gb):
                        continue
                    step = kind[2]
                    key = ("e", ga, gb, step) if ga < gb else ("e", gb, ga, p - step)
                    eldofs[i, l] = get(key, phys[l])
                else:
                    eldofs[i, l] = get(("c", e, kind[1]), phys[l])

        self.element_dofs = eldofs
        self.ndof = len(points)
        self.dof_points = (np.array(points) if points
                           else np.empty((0, self.mesh.dim)))

    def function(self, coeffs=None) -> "FeFunction":
        if coeffs is None:
            coeffs = np.zeros(self.ndof)
        return FeFunction(self, np.asarray(coeffs, dtype=float))

    def grad_table(self, quad_mesh: Mesh, degree: int):
        """Physical basis gradients at the quadrature points of `quad_mesh`."""
        key = ("grad", quad_mesh, degree)
        hit = self._eval_cache.get(key)
        if hit is not None:
            return hit
        geomq = mesh_geometry(quad_mesh)
        geoms = mesh_geometry(self.mesh)
        ref, _ = ref_rule(self.mesh.dim, degree)
        nel, nq = len(quad_mesh.elements), len(ref)
        gvals = np.empty((nel, nq, self.basis.n_local, self.mesh.dim))
        idx = np.empty((nel, self.basis.n_local), dtype=int)
        same = quad_mesh is self.mesh
        gref_same = self.basis.grad(ref) if same else None
        for i, e in enumerate(quad_mesh.elements):
            si = i if same else geoms["index"][quad_mesh.element_parent_in(e, self.mesh)]
            if same:
                gref = gref_same
            else:
                phys = geomq["origin"][i][None, :] + ref @ geomq["B"][i].T
                local = (phys - geoms["origin"][si][None, :]) @ geoms["Binv"][si].T
                gref = self.basis.grad(local)
            # grad_x phi = Binv^T grad_ref phi
            gvals[i] = np.einsum("de,qld->qle", geoms["Binv"][si], gref)
            idx[i] = self.element_dofs[si]
        table = (gvals, idx)
        self._eval_cache[key] = table
        return table

    # values of all basis functions on another (refining) mesh's quad points
    def eval_table(self, quad_mesh: Mesh, degree: int):
        key = (quad_mesh, degree)
        hit = self._eval_cache.get(key)
        if hit is not None:
            return hit
        if quad_mesh is self.mesh:
            vals, _ = _basis_at_rule(self.mesh.dim, self.degree, degree)
            nel = len(self.mesh.elements)
            table = (np.broadcast_to(vals, (nel,) + vals.shape),
                     self.element_dofs)
            self._eval_cache[key] = table
            return table
        geomq = mesh_geometry(quad_mesh)
        geoms = mesh_geometry(self.mesh)
        ref, _ = ref_rule(self.mesh.dim, degree)
        nel = len(quad_mesh.elements)
        nq = len(ref)
        vals = np.empty((nel, nq, self.basis.n_local))
        idx = np.empty((nel, self.basis.n_local), dtype=int)
        for i, e in enumerate(quad_mesh.elements):
            src = quad_mesh.element_parent_in(e, self.mesh)
            si = geoms["index"][src]
            phys = geomq["origin"][i][None, :] + ref @ geomq["B"][i].T
            local = (phys - geoms["origin"][si][None, :]) @ geoms["Binv"][si].T
            vals[i] = self.basis.eval(local)
            idx[i] = self.element_dofs[si]
        table = (vals, idx)
        self._eval_cache[key] = table
        return table


def fe_space(mesh: Mesh, degree: int) -> FeSpace:
    space = mesh._space_cache.get(degree)
    if space is None:
        space = mesh._space_cache[degree] = FeSpace(mesh, degree)
    return space


class FeFunction:
    """Coefficient vector bound to a finite element space."""

    def __init__(self, space: FeSpace, coeffs: np.ndarray):
        if len(coeffs) != space.ndof:
            raise ValueError("coefficient length does not match space dimension")
        self.space = space
        self.coeffs = np.asarray(coeffs, dtype=float)

    @property
    def mesh(self) -> Mesh:
        return self.space.mesh

    def padded(self) -> np.ndarray:
        """Coefficients with a trailing zero standing in for constrained dofs."""
        return np.append(self.coeffs, 0.0)

    def values_on(self, quad_mesh: Mesh, degree: int) -> np.ndarray:
        """(nel, nq) values at the quadrature points of `quad_mesh`."""
        vals, idx = self.space.eval_table(quad_mesh, degree)
        c = self.padded()
        return np.einsum("nql,nl->nq", vals, c[idx])

    def eval_local(self, element: int, ref_pts: np.ndarray) -> np.ndarray:
        geom = mesh_geometry(self.mesh)
        i = geom["index"][element]
        c = self.padded()
        return self.space.basis.eval(np.atleast_2d(ref_pts)) @ c[self.space.element_dofs[i]]

    def grad_on(self, quad_mesh: Mesh, degree: int) -> np.ndarray:
        """(nel, nq, dim) gradients at the quadrature points of `quad_mesh`."""
        gvals, idx = self.space.grad_table(quad_mesh, degree)
        c = self.padded()
        return np.einsum("nqld,nl->nqd", gvals, c[idx])

    def grad_at(self, element: int, phys_pts: np.ndarray) -> np.ndarray:
        """Gradients at physical points lying in the given element of F's mesh."""
        geom = mesh_geometry(self.mesh)
        i = geom["index"][element]
        local = (np.atleast_2d(phys_pts) - geom["origin"][i][None, :]) @ geom["Binv"][i].T
        gref = self.space.basis.grad(local)
        gphys = np.einsum("de,qld->qle", geom["Binv"][i], gref)
        c = self.padded()
        return np.einsum("qld,l->qd", gphys, c[self.space.element_dofs[i]])

    def laplacian_on(self, quad_mesh: Mesh, degree: int) -> np.ndarray:
        """(nel, nq) Laplacian values; identically zero for degree 1."""
        pts, _ = quad_points(quad_mesh, degree)
        if self.space.degree == 1:
            return np.zeros(pts.shape[:2])
        geomq = mesh_geometry(quad_mesh)
        geoms = mesh_geometry(self.mesh)
        ref, _ = ref_rule(self.mesh.dim, degree)
        c = self.padded()
        out = np.empty(pts.shape[:2])
        same = quad_mesh is self.mesh
        for i, e in enumerate(quad_mesh.elements):
            si = i if same else geoms["index"][quad_mesh.element_parent_in(e, self.mesh)]
            if same:
                local = ref
            else:
                phys = geomq["origin"][i][None, :] + ref @ geomq["B"][i].T
                local = (phys - geoms["origin"][si][None, :]) @ geoms["Binv"][si].T
            href = self.space.basis.hess(local)
            Binv = geoms["Binv"][si]
            # H_x = Binv^T H_ref Binv; Laplacian = trace(H_x)
            hx = np.einsum("ka,qlkm,mb->qlab", Binv, href, Binv)
            lap = np.trace(hx, axis1=2, axis2=3)
            out[i] = lap @ c[self.space.element_dofs[si]]
        return out

    def __rmul__(self, s: float) -> "Field":
        return Field(fe_terms=((float(s), self),))

    def as_field(self) -> "Field":
        return Field(fe_terms=((1.0, self),))


class CachedSpatialFn:
    """Vectorized spatial callback with per-(mesh, order) value memoization."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], name: str = ""):
        self.fn = fn
        self.name = name
        self._memo: dict = {}

    def values(self, points: np.ndarray, token=None) -> np.ndarray:
        if token is not None and token in self._memo:
            return self._memo[token]
        v = np.asarray(self.fn(points), dtype=float)
        if v.ndim == 0:
            v = np.full(len(points), float(v))
        if token is not None:
            self._memo[token] = v
        return v


def as_spatial_fn(fn) -> CachedSpatialFn:
    return fn if isinstance(fn, CachedSpatialFn) else CachedSpatialFn(fn)


@dataclass(frozen=True)
class Field:
    """Lazy linear combination of FE functions and analytic callbacks.

    FE terms may live on different meshes of one forest; sums are only
    materialized on a common refinement when a norm or inner product is
    requested, so divided differences across meshes stay exact.
    """

    fe_terms: tuple = ()
    fn_terms: tuple = ()
    quad_hint: int | None = None

    @staticmethod
    def from_fn(fn, hint: int | None = None) -> "Field":
        return Field(fn_terms=((1.0, as_spatial_fn(fn)),), quad_hint=hint)

    @staticmethod
    def zero() -> "Field":
        return Field()

    def __add__(self, other) -> "Field":
        other = as_field(other)
        return Field(self.fe_terms + other.fe_terms,
                     self.fn_terms + other.fn_terms,
                     _merge_hint(self.quad_hint, other.quad_hint))

    def __sub__(self, other) -> "Field":
        return self + (-1.0) * as_field(other)

    def __mul__(self, s: float) -> "Field":
        s = float(s)
        return Field(tuple((s * c, f) for c, f in self.fe_terms),
                     tuple((s * c, f) for c, f in self.fn_terms),
                     self.quad_hint)

    __rmul__ = __mul__

    def __neg__(self) -> "Field":
        return (-1.0) * self

    def collect(self) -> "Field":
        """Merge repeated FE functions / callbacks, dropping zero terms."""
        fe: dict = {}
        for c, f in self.fe_terms:
            fe[id(f)] = (fe.get(id(f), (0.0, f))[0] + c, f)
        fn: dict = {}
        for c, f in self.fn_terms:
            fn[id(f)] = (fn.get(id(f), (0.0, f))[0] + c, f)
        return Field(tuple(v for v in fe.values() if v[0] != 0.0),
                     tuple(v for v in fn.values() if v[0] != 0.0),
                     self.quad_hint)

    @property
    def meshes(self) -> list[Mesh]:
        seen = []
        for _, f in self.fe_terms:
            if f.mesh not in seen:
                seen.append(f.mesh)
        return seen

    def max_degree(self) -> int:
        return max((f.space.degree for _, f in self.fe_terms), default=1)

    def values_on(self, quad_mesh: Mesh, degree: int) -> np.ndarray:
        pts, _ = quad_points(quad_mesh, degree)
        flat = pts.reshape(-1, pts.shape[-1])
        out = np.zeros(pts.shape[:2])
        for c, f in self.fe_terms:
            out += c * f.values_on(quad_mesh, degree)
        token = (quad_mesh, degree)
        for c, f in self.fn_terms:
            out += c * f.values(flat, token).reshape(pts.shape[:2])
        return out

    def compact_fe(self, target_mesh: Mesh | None = None) -> "Field":
        """Re-represent all FE terms as a single function on one mesh (exact)."""
        if len(self.fe_terms) <= 1 and target_mesh is None:
            return self
        if not self.fe_terms:
            return self
        mesh = target_mesh or overlay(self.meshes)
        p = self.max_degree()
        space = fe_space(mesh, p)
        coeffs = np.zeros(space.ndof)
        for c, f in self.fe_terms:
            coeffs += c * transfer(f, space).coeffs
        return Field(((1.0, space.function(coeffs)),), self.fn_terms,
                     self.quad_hint)


def as_field(obj) -> Field:
    if isinstance(obj, Field):
        return obj
    if isinstance(obj, FeFunction):
        return obj.as_field()
    if callable(obj):
        return Field.from_fn(obj)
    raise TypeError(f"cannot interpret {type(obj)} as a Field")


def _merge_hint(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return max(a, b)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


def _scatter(space: FeSpace, local: np.ndarray) -> sp.csr_matrix:
    """Accumulate per-element (nel, nloc, nloc) blocks into a CSR matrix."""
    eldofs = space.element_dofs
    nel, nloc = eldofs.shape
    rows = np.repeat(eldofs[:, :, None], nloc, axis=2)
    cols = np.repeat(eldofs[:, None, :], nloc, axis=1)
    mask = (rows >= 0) & (cols >= 0)
    A = sp.coo_matrix(
        (local[mask], (rows[mask], cols[mask])),
        shape=(space.ndof, space.ndof),
    )
    return A.tocsr()


def assemble_mass(space: FeSpace, order: int | None = None) -> sp.csr_matrix:
    """Mass matrix, exact for the polynomial space (order >= 2p)."""
    order = order if order is not None else 2 * space.degree
    key = ("mass", order)
    hit = space._matrix_cache.get(key)
    if hit is not None:
        return hit
    vals, w = _basis_at_rule(space.mesh.dim, space.degree, order)[0], ref_rule(space.mesh.dim, order)[1]
    geom = mesh_geometry(space.mesh)
    ref_mass = np.einsum("q,qi,qj->ij", w, vals, vals)
    local = ref_mass[None, :, :] * geom["absdet"][:, None, None]
    M = _scatter(space, local)
    space._matrix_cache[key] = M
    return M


def assemble_stiffness(space: FeSpace, a: Coefficient,
                       order: int | None = None) -> sp.csr_matrix:
    """Stiffness matrix for the diffusion coefficient `a`.

    Default quadrature is exact when `a` is piecewise-polynomial of degree
    at most 2; raises if `a` is not positive at the sample points.
    """
    order = order if order is not None else 2 * space.degree
    key = ("stiff", order, id(a))
    hit = space._matrix_cache.get(key)
    if hit is not None:
        return hit
    _, grads = _basis_at_rule(space.mesh.dim, space.degree, order)
    _, w = ref_rule(space.mesh.dim, order)
    geom = mesh_geometry(space.mesh)
    pts, _ = quad_points(space.mesh, order)
    avals = a(pts.reshape(-1, pts.shape[-1])).reshape(pts.shape[:2])
    if np.any(avals <= 0):
        raise ValueError("coefficient is not positive at quadrature nodes")
    # physical gradients: Binv^T grad_ref
    g = np.einsum("nde,qld->nqle", geom["Binv"], grads)
    local = np.einsum("q,nq,nqle,nqme,n->nlm", w, avals, g, g, geom["absdet"])
    K = _scatter(space, local)
    space._matrix_cache[key] = K
    return K


def load_vector(space: FeSpace, f, order: int | None = None,
                quad_mesh: Mesh | None = None) -> np.ndarray:
    """Vector of <f, phi_i>, integrated on a mesh refining all participants."""
    field = as_field(f)
    order = order if order is not None else _default_order(space, field)
    qmesh = quad_mesh or overlay([space.mesh] + field.meshes)
    vals = field.values_on(qmesh, order)
    _, w = quad_points(qmesh, order)
    basis_vals, idx = space.eval_table(qmesh, order)
    contrib = np.einsum("nq,nq,nql->nl", w, vals, basis_vals)
    b = np.zeros(space.ndof + 1)
    np.add.at(b, idx, contrib)
    return b[:-1]


def cross_mass(from_space: FeSpace, to_space: FeSpace,
               order: int | None = None) -> sp.csr_matrix:
    """Rectangular matrix B_ij = <phi_i^to, phi_j^from>, exact on the overlay."""
    if from_space.mesh.forest is not to_space.mesh.forest:
        raise ValueError("spaces do not share a macro mesh")
    if from_space is to_space:
        return assemble_mass(to_space)
    key = ("cross", id(from_space), order)
    hit = to_space._matrix_cache.get(key)
    if hit is not None:
        return hit
    order = order if order is not None else from_space.degree + to_space.degree
    qmesh = overlay([from_space.mesh, to_space.mesh])
    _, w = quad_points(qmesh, order)
    to_vals, to_idx = to_space.eval_table(qmesh, order)
    fr_vals, fr_idx = from_space.eval_table(qmesh, order)
    local = np.einsum("nq,nql,nqm->nlm", w, to_vals, fr_vals)
    rows = np.repeat(to_idx[:, :, None], fr_idx.shape[1], axis=2)
    cols = np.repeat(fr_idx[:, None, :], to_idx.shape[1], axis=1)
    mask = (rows >= 0) & (cols >= 0)
    B = sp.coo_matrix((local[mask], (rows[mask], cols[mask])),
                      shape=(to_space.ndof, from_space.ndof)).tocsr()
    to_space._matrix_cache[key] = B
    return B


def _default_order(space: FeSpace, field: Field) -> int:
    p = max(space.degree, field.max_degree())
    if field.fn_terms:
        return max(field.quad_hint or 0, 2 * p + 2)
    return 2 * p


# ---------------------------------------------------------------------------
# solves, projections, norms
# ---------------------------------------------------------------------------


def solve_spd(A: sp.spmatrix, b: np.ndarray,
              rtol: float = DEFAULT_SOLVER_RTOL,
              maxiter: int | None = None) -> np.ndarray:
    """Diagonally preconditioned CG solve; deterministic iteration order."""
    b = np.asarray(b, dtype=float)
    n = len(b)
    if n == 0:
        return np.zeros(0)
    if not np.any(b):
        return np.zeros(n)
    d = A.diagonal()
    if np.any(d <= 0):
        raise SolverError("matrix has non-positive diagonal entries")
    M = sp.diags(1.0 / d)
    maxiter = maxiter if maxiter is not None else 40 * n + 400
    x, info = spla.cg(A, b, rtol=rtol, atol=0.0, maxiter=maxiter, M=M)
    if info != 0:
        res = float(np.linalg.norm(b - A @ x) / np.linalg.norm(b))
        raise SolverError(
            f"CG did not converge in {maxiter} iterations "
            f"(relative residual {res:.3e})", residual=res)
    return x


def l2_project(f, space: FeSpace, order: int | None = None) -> FeFunction:
    """Orthogonal L2 projection of a field/callback onto the space.

    An FE function already in the target space is returned unchanged (up to
    a copy); FE parts on other meshes are transferred through exact
    cross-mesh mass matrices.
    """
    field = as_field(f)
    if not field.fn_terms and all(t.space is space for _, t in field.fe_terms):
        coeffs = np.zeros(space.ndof)
        for c, t in field.fe_terms:
            coeffs += c * t.coeffs
        return space.function(coeffs)
    b = np.zeros(space.ndof)
    analytic = Field(fn_terms=field.fn_terms, quad_hint=field.quad_hint)
    for c, t in field.fe_terms:
        b += c * (cross_mass(t.space, space) @ t.coeffs)
    if field.fn_terms:
        b += load_vector(space, analytic, order=order)
    M = assemble_mass(space)
    return space.function(solve_spd(M, b))


def discrete_elliptic(U: FeFunction, a: Coefficient) -> FeFunction:
    """q in the same space with <q, chi> = a(U, chi) for all chi."""
    space = U.space
    K = assemble_stiffness(space, a)
    M = assemble_mass(space)
    return space.function(solve_spd(M, K @ U.coeffs))


def transfer(F: FeFunction, target: FeSpace) -> FeFunction:
    """Exact re-representation of F on a space whose mesh refines F's mesh."""
    if target is F.space:
        return F
    if target.degree < F.space.degree:
        raise ValueError("target degree too low for exact transfer")
    src_mesh = F.space.mesh
    geom = mesh_geometry(target.mesh)
    geoms = mesh_geometry(src_mesh)
    coeffs = np.zeros(target.ndof)
    done = np.zeros(target.ndof, dtype=bool)
    nodes = target.basis.nodes
    c = F.padded()
    for i, e in enumerate(target.mesh.elements):
        dofs = target.element_dofs[i]
        todo = [(l, g) for l, g in enumerate(dofs) if g >= 0 and not done[g]]
        if not todo:
            continue
        src = target.mesh.element_parent_in(e, src_mesh)
        si = geoms["index"][src]
        phys = geom["origin"][i][None, :] + nodes @ geom["B"][i].T
        local = (phys - geoms["origin"][si][None, :]) @ geoms["Binv"][si].T
        vals = F.space.basis.eval(local) @ c[F.space.element_dofs[si]]
        for l, g in todo:
            coeffs[g] = vals[l]
            done[g] = True
    return target.function(coeffs)


def l2_norm(f, quad_mesh: Mesh | None = None, order: int | None = None) -> float:
    """L2(Omega) norm by quadrature; exact for pure FE fields at order >= 2p."""
    field = as_field(f)
    if not field.fe_terms and not field.fn_terms:
        return 0.0
    if quad_mesh is None:
        if not field.meshes:
            raise ValueError("a quadrature mesh is required for analytic fields")
        qmesh = overlay(field.meshes)
    else:
        qmesh = overlay([quad_mesh] + field.meshes)
    p = field.max_degree()
    if order is None:
        order = max(field.quad_hint or 0, 2 * p + 2) if field.fn_terms else 2 * p
    vals = field.values_on(qmesh, order)
    _, w = quad_points(qmesh, order)
    return float(np.sqrt(max(np.sum(w * vals * vals), 0.0)))


def matrix_to_text(A: sp.spmatrix) -> str:
    """Coordinate text dump (row col value per line)."""
    coo = A.tocoo()
    lines = [f"# matrix {coo.shape[0]} {coo.shape[1]} nnz {coo.nnz}"]
    for i, j, v in zip(coo.row, coo.col, coo.data):
        lines.append(f"{i} {j} {v!r}")
    return "\n".join(lines) + "\n"
