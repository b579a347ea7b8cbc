"""Hierarchical interval and triangle meshes with an explicit refinement forest.

Meshes of one family share a single :class:`Forest` rooted at a macro mesh.
1D elements are intervals bisected at their midpoint; 2D elements are
triangles refined by newest-vertex bisection (the refinement edge of a
triangle ``(v0, v1, v2)`` is ``v0-v1`` and the peak is ``v2``).  The macro
tagging (diagonals of a square grid) satisfies the matching condition, so
refinement only ever bisects boundary elements or compatible pairs and the
mesh stays conforming after every atomic step.

Because all meshes live in one forest, common refinements and finest common
coarsenings are set operations on leaf sets; the results are conforming
whenever the inputs are.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class Domain:
    """An interval [0, L] or an axis-aligned rectangle [0, Lx] x [0, Ly]."""

    lengths: tuple[float, ...]

    def __post_init__(self):
        if len(self.lengths) not in (1, 2):
            raise ValueError("domain must be an interval or a rectangle")
        if any(L <= 0 for L in self.lengths):
            raise ValueError("domain extents must be positive")

    @property
    def dim(self) -> int:
        return len(self.lengths)

    @staticmethod
    def interval(L: float) -> "Domain":
        return Domain((float(L),))

    @staticmethod
    def rectangle(Lx: float, Ly: float) -> "Domain":
        return Domain((float(Lx), float(Ly)))


class MeshError(Exception):
    pass


class Forest:
    """Shared refinement history of a mesh family.

    Vertices and elements are append-only; meshes are interned leaf-set
    views.  Midpoint vertices are deduplicated through an id-pair registry,
    so no floating point comparisons are involved in the mesh algebra.
    """

    def __init__(self, domain: Domain):
        self.domain = domain
        self.dim = domain.dim
        self._coords: list[tuple[float, ...]] = []
        self._vertex_boundary: list[bool] = []
        self._midpoint: dict[frozenset, int] = {}
        # element records (parallel lists)
        self.verts: list[tuple[int, ...]] = []
        self.parent: list[int] = []
        self.children: list[tuple[int, int] | None] = []
        self.gen: list[int] = []
        self._meshes: dict[frozenset, "Mesh"] = {}
        self._pair_cache: dict[tuple, "MeshPairMaps"] = {}

    # -- vertices ---------------------------------------------------------

    def add_vertex(self, xy: tuple[float, ...]) -> int:
        vid = len(self._coords)
        self._coords.append(tuple(float(c) for c in xy))
        self._vertex_boundary.append(self._on_boundary(xy))
        return vid

    def _on_boundary(self, xy) -> bool:
        return any(
            xy[d] == 0.0 or xy[d] == self.domain.lengths[d]
            for d in range(self.dim)
        )

    def coords(self, vid: int) -> tuple[float, ...]:
        return self._coords[vid]

    def vertex_on_boundary(self, vid: int) -> bool:
        return self._vertex_boundary[vid]

    def edge_on_boundary(self, va: int, vb: int) -> bool:
        # Both endpoints on the same face of the (convex, axis-aligned) domain.
        a, b = self._coords[va], self._coords[vb]
        for d in range(self.dim):
            for val in (0.0, self.domain.lengths[d]):
                if a[d] == val and b[d] == val:
                    return True
        return False

    def midpoint(self, va: int, vb: int) -> int:
        key = frozenset((va, vb))
        vid = self._midpoint.get(key)
        if vid is None:
            a, b = self._coords[va], self._coords[vb]
            vid = self.add_vertex(tuple((x + y) / 2.0 for x, y in zip(a, b)))
            self._midpoint[key] = vid
        return vid

    def midpoint_of(self, va: int, vb: int) -> int | None:
        """Midpoint vertex of the segment va-vb, if it was ever created."""
        return self._midpoint.get(frozenset((va, vb)))

    # -- elements ---------------------------------------------------------

    def add_element(self, verts: tuple[int, ...], parent: int, gen: int) -> int:
        eid = len(self.verts)
        self.verts.append(verts)
        self.parent.append(parent)
        self.children.append(None)
        self.gen.append(gen)
        return eid

    def bisect(self, eid: int) -> tuple[int, int]:
        """Split an element; children are recorded, conformity is the caller's job."""
        if self.children[eid] is not None:
            raise MeshError(f"element {eid} already bisected")
        v = self.verts[eid]
        g = self.gen[eid] + 1
        if self.dim == 1:
            m = self.midpoint(v[0], v[1])
            c0 = self.add_element((v[0], m), eid, g)
            c1 = self.add_element((m, v[1]), eid, g)
        else:
            m = self.midpoint(v[0], v[1])
            c0 = self.add_element((v[2], v[0], m), eid, g)
            c1 = self.add_element((v[1], v[2], m), eid, g)
        self.children[eid] = (c0, c1)
        return c0, c1

    def refinement_edge(self, eid: int) -> frozenset:
        v = self.verts[eid]
        return frozenset((v[0], v[1]))

    def bisection_vertex(self, eid: int) -> int:
        """The vertex a child gained over its parent (the parent's midpoint)."""
        p = self.parent[eid]
        if p < 0:
            raise MeshError(f"element {eid} is a macro element")
        extra = set(self.verts[eid]) - set(self.verts[p])
        (v,) = extra
        return v

    def ancestor_or_self_in(self, eid: int, member: frozenset) -> int | None:
        e = eid
        while e >= 0:
            if e in member:
                return e
            e = self.parent[e]
        return None

    def proper_ancestor_in(self, eid: int, member: frozenset) -> int | None:
        p = self.parent[eid]
        return self.ancestor_or_self_in(p, member) if p >= 0 else None

    def element_diameter(self, eid: int) -> float:
        pts = [self._coords[v] for v in self.verts[eid]]
        return max(
            math.dist(pts[i], pts[j])
            for i in range(len(pts))
            for j in range(i + 1, len(pts))
        )

    def element_measure(self, eid: int) -> float:
        pts = [self._coords[v] for v in self.verts[eid]]
        if self.dim == 1:
            return abs(pts[1][0] - pts[0][0])
        (x0, y0), (x1, y1), (x2, y2) = pts
        return abs((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)) / 2.0

    # -- meshes -----------------------------------------------------------

    def make_mesh(self, elements: Iterable[int]) -> "Mesh":
        key = frozenset(elements)
        mesh = self._meshes.get(key)
        if mesh is None:
            mesh = Mesh(self, key)
            self._meshes[key] = mesh
        return mesh


class Mesh:
    """Immutable leaf-set view of a forest; construct via ``Forest.make_mesh``."""

    def __init__(self, forest: Forest, element_set: frozenset):
        self.forest = forest
        self.element_set = element_set
        self.elements: tuple[int, ...] = tuple(sorted(element_set))
        self._space_cache: dict = {}
        self._quad_cache: dict = {}
        self._parent_map_cache: dict = {}

    @property
    def dim(self) -> int:
        return self.forest.dim

    @property
    def domain(self) -> Domain:
        return self.forest.domain

    def __len__(self) -> int:
        return len(self.elements)

    def __repr__(self) -> str:
        return f"Mesh({self.dim}D, {len(self.elements)} elements)"

    @cached_property
    def vertex_ids(self) -> tuple[int, ...]:
        used = set()
        for e in self.elements:
            used.update(self.forest.verts[e])
        return tuple(sorted(used))

    @cached_property
    def vertex_set(self) -> frozenset:
        return frozenset(self.vertex_ids)

    @cached_property
    def h_max(self) -> float:
        return max(self.forest.element_diameter(e) for e in self.elements)

    @cached_property
    def edges(self) -> dict[frozenset, list[int]]:
        """All element edges (2D) or endpoints (1D) -> adjacent leaf elements."""
        out: dict[frozenset, list[int]] = {}
        for e in self.elements:
            v = self.forest.verts[e]
            if self.dim == 1:
                pairs = [frozenset((v[0],)), frozenset((v[1],))]
            else:
                pairs = [
                    frozenset((v[0], v[1])),
                    frozenset((v[1], v[2])),
                    frozenset((v[2], v[0])),
                ]
            for p in pairs:
                out.setdefault(p, []).append(e)
        return out

    @cached_property
    def interior_edges(self) -> list[tuple[frozenset, int, int]]:
        """(edge, left element, right element) for every interior edge/node."""
        out = []
        for edge, els in self.edges.items():
            if len(els) == 2:
                out.append((edge, els[0], els[1]))
            elif len(els) > 2:
                raise MeshError("non-manifold edge")
        return out

    def element_parent_in(self, eid: int, other: "Mesh") -> int:
        """Ancestor-or-self of `eid` in `other` (requires nestedness)."""
        cache = self._parent_map_cache.get(other)
        if cache is None:
            cache = self._parent_map_cache[other] = {}
        p = cache.get(eid)
        if p is None:
            p = self.forest.ancestor_or_self_in(eid, other.element_set)
            if p is None:
                raise MeshError("element has no ancestor in target mesh")
            cache[eid] = p
        return p


@dataclass(frozen=True)
class MeshPairMaps:
    """Common refinement and finest common coarsening of two compatible meshes."""

    common_refinement: Mesh
    finest_common_coarsening: Mesh
    cr_to_a: dict[int, int] = field(repr=False)
    cr_to_b: dict[int, int] = field(repr=False)
    a_to_fcc: dict[int, int] = field(repr=False)
    b_to_fcc: dict[int, int] = field(repr=False)


def uniform_mesh(domain: Domain, n: int) -> Mesh:
    """Uniform macro mesh: n intervals, or an n x n grid of square pairs.

    Triangles are tagged with the square diagonal as refinement edge, which
    makes the macro mesh matching for newest-vertex bisection.
    """
    if n < 1:
        raise ValueError("subdivision count must be >= 1")
    forest = Forest(domain)
    if domain.dim == 1:
        xs = np.linspace(0.0, domain.lengths[0], n + 1)
        vids = [forest.add_vertex((x,)) for x in xs]
        for i in range(n):
            forest.add_element((vids[i], vids[i + 1]), -1, 0)
    else:
        xs = np.linspace(0.0, domain.lengths[0], n + 1)
        ys = np.linspace(0.0, domain.lengths[1], n + 1)
        vids = {}
        for j, yv in enumerate(ys):
            for i, xv in enumerate(xs):
                vids[i, j] = forest.add_vertex((xv, yv))
        for j in range(n):
            for i in range(n):
                p00, p10 = vids[i, j], vids[i + 1, j]
                p01, p11 = vids[i, j + 1], vids[i + 1, j + 1]
                # refinement edge = diagonal p00-p11, matching across the pair
                forest.add_element((p00, p11, p10), -1, 0)
                forest.add_element((p00, p11, p01), -1, 0)
    return forest.make_mesh(range(len(forest.verts)))


def refine(mesh: Mesh, marked: Iterable[int]) -> Mesh:
    """Bisect the marked elements, adding closure bisections in 2D.

    Marks that are not current elements are ignored.  The result is
    conforming; in 2D an element is only ever bisected together with its
    refinement-edge neighbour (or alone when that edge is on the boundary).
    """
    forest = mesh.forest
    leaves = set(mesh.element_set)
    targets = [e for e in marked if e in leaves]
    if not targets:
        return mesh

    if forest.dim == 1:
        for e in targets:
            c0, c1 = forest.bisect(e)
            leaves.remove(e)
            leaves.update((c0, c1))
        return forest.make_mesh(leaves)

    edge2el: dict[frozenset, list[int]] = {}

    def edges_of(eid):
        v = forest.verts[eid]
        return (
            frozenset((v[0], v[1])),
            frozenset((v[1], v[2])),
            frozenset((v[2], v[0])),
        )

    for e in leaves:
        for ed in edges_of(e):
            edge2el.setdefault(ed, []).append(e)

    def do_bisect(eids):
        for e in eids:
            for ed in edges_of(e):
                edge2el[ed].remove(e)
            leaves.remove(e)
        for e in eids:
            for c in forest.bisect(e):
                leaves.add(c)
                for ed in edges_of(c):
                    edge2el.setdefault(ed, []).append(c)

    guard = 0
    limit = 100 * (len(leaves) + len(targets)) + 1000
    for target in targets:
        chain = [target]
        while chain:
            guard += 1
            if guard > limit:
                raise MeshError("refinement closure failed to terminate")
            e = chain[-1]
            if e not in leaves:
                chain.pop()
                continue
            redge = forest.refinement_edge(e)
            nbs = [o for o in edge2el.get(redge, ()) if o != e]
            if not nbs:
                do_bisect([e])
                chain.pop()
            else:
                nb = nbs[0]
                if forest.refinement_edge(nb) == redge:
                    do_bisect([e, nb])
                    chain.pop()
                else:
                    chain.append(nb)
    return forest.make_mesh(leaves)


def coarsen(mesh: Mesh, marked: Iterable[int]) -> Mesh:
    """Merge complete marked sibling groups back into their parents.

    A bisection vertex is removed only when every element touching it is a
    marked leaf child of a parent bisected at that vertex, which keeps the
    result conforming.  Incomplete or blocked groups are ignored; macro
    elements are never merged away.
    """
    forest = mesh.forest
    leaves = set(mesh.element_set)
    marked = {e for e in marked if e in leaves}
    if not marked:
        return mesh

    vert2leaves: dict[int, set[int]] = {}
    for e in leaves:
        for v in forest.verts[e]:
            vert2leaves.setdefault(v, set()).add(e)

    # candidate parents: both children are marked leaves
    by_vertex: dict[int, set[int]] = {}
    seen = set()
    for e in marked:
        p = forest.parent[e]
        if p < 0 or p in seen:
            continue
        seen.add(p)
        c0, c1 = forest.children[p]
        if c0 in marked and c1 in marked:
            by_vertex.setdefault(forest.bisection_vertex(c0), set()).add(p)

    removed: set[int] = set()
    added: set[int] = set()
    for v, parents in by_vertex.items():
        group = set()
        for p in parents:
            group.update(forest.children[p])
        if vert2leaves.get(v, set()) == group:
            removed.update(group)
            added.update(parents)
    if not removed:
        return mesh
    return forest.make_mesh((leaves - removed) | added)


def pair_maps(a: Mesh, b: Mesh) -> MeshPairMaps:
    """Common refinement and finest common coarsening with element maps."""
    if a.forest is not b.forest:
        raise MeshError("meshes do not share a macro mesh")
    forest = a.forest
    key = (a.element_set, b.element_set)
    cached = forest._pair_cache.get(key)
    if cached is not None:
        return cached

    aset, bset = a.element_set, b.element_set
    cr_set = {e for e in aset if forest.ancestor_or_self_in(e, bset) is not None}
    cr_set.update(
        e for e in bset if forest.ancestor_or_self_in(e, aset) is not None
    )
    cr = forest.make_mesh(cr_set)

    fcc_set = {e for e in aset if forest.proper_ancestor_in(e, bset) is None}
    fcc_set.update(e for e in bset if forest.proper_ancestor_in(e, aset) is None)
    fcc = forest.make_mesh(fcc_set)

    cr_to_a = {e: forest.ancestor_or_self_in(e, aset) for e in cr.elements}
    cr_to_b = {e: forest.ancestor_or_self_in(e, bset) for e in cr.elements}
    a_to_fcc = {
        e: forest.ancestor_or_self_in(e, fcc.element_set) for e in a.elements
    }
    b_to_fcc = {
        e: forest.ancestor_or_self_in(e, fcc.element_set) for e in b.elements
    }
    maps = MeshPairMaps(cr, fcc, cr_to_a, cr_to_b, a_to_fcc, b_to_fcc)
    forest._pair_cache[key] = maps
    return maps


def overlay(meshes: Iterable[Mesh]) -> Mesh:
    """Common refinement of any number of compatible meshes."""
    meshes = list(meshes)
    if not meshes:
        raise ValueError("overlay of no meshes")
    out = meshes[0]
    for m in meshes[1:]:
        if m is not out:
            out = pair_maps(out, m).common_refinement
    return out


def check_conforming(mesh: Mesh) -> list[tuple[int, int]]:
    """Return hanging vertices as (vertex, offending element); empty if conforming.

    A vertex hangs when it lies strictly inside an element edge; candidate
    vertices come from the forest's midpoint registry, so the scan is exact.
    """
    forest = mesh.forest
    if mesh.dim == 1:
        return []
    vset = mesh.vertex_set
    bad = []

    def hanging_on(va, vb):
        m = forest.midpoint_of(va, vb)
        if m is None:
            return None
        if m in vset:
            return m
        return hanging_on(va, m) or hanging_on(m, vb)

    for e in mesh.elements:
        v = forest.verts[e]
        for va, vb in ((v[0], v[1]), (v[1], v[2]), (v[2], v[0])):
            h = hanging_on(va, vb)
            if h is not None:
                bad.append((h, e))
    return bad


def min_angle(mesh: Mesh) -> float:
    """Smallest interior angle over all triangles, in radians."""
    if mesh.dim != 2:
        raise MeshError("min_angle is a 2D notion")
    forest = mesh.forest
    worst = math.pi
    for e in mesh.elements:
        pts = [np.asarray(forest.coords(v)) for v in forest.verts[e]]
        for i in range(3):
            u = pts[(i + 1) % 3] - pts[i]
            w = pts[(i + 2) % 3] - pts[i]
            c = float(np.dot(u, w) / (np.linalg.norm(u) * np.linalg.norm(w)))
            worst = min(worst, math.acos(max(-1.0, min(1.0, c))))
    return worst


def mesh_to_text(mesh: Mesh) -> str:
    """Plain-text serialization: vertices, elements and parent links."""
    forest = mesh.forest
    lines = [f"# mesh dim={mesh.dim} elements={len(mesh)}"]
    for vid in mesh.vertex_ids:
        xy = " ".join(repr(c) for c in forest.coords(vid))
        lines.append(f"vertex {vid} {xy} {int(forest.vertex_on_boundary(vid))}")
    for e in mesh.elements:
        vs = " ".join(str(v) for v in forest.verts[e])
        lines.append(f"element {e} {vs} parent {forest.parent[e]} gen {forest.gen[e]}")
    return "\n".join(lines) + "\n"
