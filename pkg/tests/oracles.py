"""Independent oracles: dense linear algebra, brute-force forest traversal,
and straightforward high-order quadrature.  These deliberately avoid the
package's assembly/field machinery so the tests cross two code paths.
"""

import numpy as np


# ---------------------------------------------------------------------------
# dense 1D P1 FEM
# ---------------------------------------------------------------------------


def gauss01(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return (x + 1) / 2, w / 2


def dense_mass_1d_p1(xs):
    """Interior-node mass matrix on the partition xs (dense, closed form)."""
    n = len(xs) - 1
    M = np.zeros((n + 1, n + 1))
    for e in range(n):
        h = xs[e + 1] - xs[e]
        M[e:e + 2, e:e + 2] += h * np.array([[1 / 3, 1 / 6], [1 / 6, 1 / 3]])
    return M[1:-1, 1:-1]


def dense_stiffness_1d_p1(xs, a_fn=None, npts=12):
    n = len(xs) - 1
    K = np.zeros((n + 1, n + 1))
    gp, gw = gauss01(npts)
    for e in range(n):
        h = xs[e + 1] - xs[e]
        if a_fn is None:
            aint = h
        else:
            aint = h * sum(w * a_fn(xs[e] + p * h) for p, w in zip(gp, gw))
        K[e:e + 2, e:e + 2] += (aint / h**2) * np.array([[1, -1], [-1, 1]])
    return K[1:-1, 1:-1]


def dense_load_1d_p1(xs, f, npts=10):
    n = len(xs) - 1
    b = np.zeros(n + 1)
    gp, gw = gauss01(npts)
    for e in range(n):
        h = xs[e + 1] - xs[e]
        for p, w in zip(gp, gw):
            xq = xs[e] + p * h
            b[e] += w * h * f(xq) * (1 - p)
            b[e + 1] += w * h * f(xq) * p
    return b[1:-1]


def p1_eval_1d(xs, interior_coeffs, x):
    """Evaluate the P1 Dirichlet function by straight linear interpolation."""
    full = np.concatenate(([0.0], interior_coeffs, [0.0]))
    return np.interp(x, xs, full)


# ---------------------------------------------------------------------------
# quadrature oracles
# ---------------------------------------------------------------------------


def triangle_integral(fn, v0, v1, v2, npts=14):
    """High-order integral of fn(x, y) over a triangle via a plain product rule."""
    v0, v1, v2 = (np.asarray(v) for v in (v0, v1, v2))
    gu, wu = gauss01(npts)
    gv, wv = gauss01(npts)
    area2 = abs((v1 - v0)[0] * (v2 - v0)[1] - (v2 - v0)[0] * (v1 - v0)[1])
    total = 0.0
    for u, a in zip(gu, wu):
        for v, b in zip(gv, wv):
            r, s = u, v * (1 - u)
            p = v0 + r * (v1 - v0) + s * (v2 - v0)
            total += a * b * (1 - u) * fn(p[0], p[1])
    return total * area2


def interval_integral(fn, x0, x1, npts=14):
    gp, gw = gauss01(npts)
    return (x1 - x0) * sum(w * fn(x0 + p * (x1 - x0)) for p, w in zip(gp, gw))


# ---------------------------------------------------------------------------
# brute-force forest algebra
# ---------------------------------------------------------------------------


def brute_leaves_under(forest, eid, member):
    """All members of `member` in the subtree rooted at eid (incl. eid)."""
    if eid in member:
        return {eid}
    kids = forest.children[eid]
    if kids is None:
        return set()
    return brute_leaves_under(forest, kids[0], member) | \
        brute_leaves_under(forest, kids[1], member)


def brute_at_or_above(forest, eid, member):
    """eid is a union of `member` elements (recursive descent definition)."""
    if eid in member:
        return True
    kids = forest.children[eid]
    if kids is None:
        return False
    return brute_at_or_above(forest, kids[0], member) and \
        brute_at_or_above(forest, kids[1], member)


def brute_common_refinement(forest, aset, bset):
    """Pointwise-deeper of the two partitions, by recursive descent."""
    roots = [e for e in range(len(forest.verts)) if forest.parent[e] < 0]
    out = set()

    def visit(e, in_a, in_b):
        in_a = in_a or e in aset
        in_b = in_b or e in bset
        if in_a and in_b:
            out.add(e)
            return
        kids = forest.children[e]
        assert kids is not None, "partition does not cover the domain"
        visit(kids[0], in_a, in_b)
        visit(kids[1], in_a, in_b)

    for r in roots:
        visit(r, False, False)
    return out


def brute_finest_common_coarsening(forest, aset, bset):
    """Descend while both children stay unions of a- and of b-elements."""
    roots = [e for e in range(len(forest.verts)) if forest.parent[e] < 0]
    out = set()

    def admissible(e):
        return brute_at_or_above(forest, e, aset) and \
            brute_at_or_above(forest, e, bset)

    def visit(e):
        kids = forest.children[e]
        if kids is not None and admissible(kids[0]) and admissible(kids[1]):
            visit(kids[0])
            visit(kids[1])
        else:
            out.add(e)

    for r in roots:
        assert admissible(r)
        visit(r)
    return out


def brute_mergeable_groups(mesh, marked):
    """Sibling groups a conforming coarsening may merge, by direct scan."""
    forest = mesh.forest
    leaves = set(mesh.element_set)
    marked = set(marked) & leaves
    vert2leaves = {}
    for e in leaves:
        for v in forest.verts[e]:
            vert2leaves.setdefault(v, set()).add(e)
    groups = []
    parents_seen = set()
    for e in marked:
        p = forest.parent[e]
        if p < 0 or p in parents_seen:
            continue
        parents_seen.add(p)
    by_vertex = {}
    for p in parents_seen:
        c0, c1 = forest.children[p]
        if c0 in marked and c1 in marked:
            v = forest.bisection_vertex(c0)
            by_vertex.setdefault(v, []).append(p)
    for v, parents in by_vertex.items():
        children = set()
        for p in parents:
            children.update(forest.children[p])
        if vert2leaves.get(v, set()) == children:
            groups.append((v, sorted(parents)))
    return groups


def brute_hanging_nodes(mesh, tol=1e-12):
    """Geometric hanging-node scan: vertices strictly inside element edges."""
    if mesh.dim == 1:
        return []
    forest = mesh.forest
    coords = {v: np.asarray(forest.coords(v)) for v in mesh.vertex_ids}
    bad = []
    for e in mesh.elements:
        vs = forest.verts[e]
        for i in range(3):
            a, b = coords[vs[i]], coords[vs[(i + 1) % 3]]
            ab = b - a
            L2 = float(ab @ ab)
            for v, p in coords.items():
                if v in vs:
                    continue
                s = float((p - a) @ ab) / L2
                if tol < s < 1 - tol:
                    d = p - a - s * ab
                    if float(d @ d) < tol * L2:
                        bad.append((v, e))
    return bad
