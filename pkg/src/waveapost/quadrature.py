"""Gauss quadrature rules on the unit interval and the reference triangle.

All rules are indexed by the polynomial degree they integrate exactly.
Triangle rules are built by collapsing a tensor-product Gauss rule on the
unit square onto the reference triangle (Duffy transform), which is robust
for any requested degree at the price of a few extra points.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


def n_points_1d(degree: int) -> int:
    """Number of Gauss points needed to integrate polynomials of `degree`."""
    return max(1, (degree + 2) // 2)


@lru_cache(maxsize=None)
def gauss_interval(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule on [0, 1] exact for polynomials of `degree`.

    Returns (points, weights) with weights summing to 1.
    """
    n = n_points_1d(degree)
    x, w = np.polynomial.legendre.leggauss(n)
    return (x + 1.0) / 2.0, w / 2.0


@lru_cache(maxsize=None)
def gauss_triangle(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature on the reference triangle {x,y >= 0, x+y <= 1}.

    Exact for bivariate polynomials of total degree `degree`; weights sum
    to 1/2 (the triangle area). The Duffy map x = u, y = v(1-u) introduces
    a factor (1-u), so the u-direction rule is taken one degree higher.
    """
    pu, wu = gauss_interval(degree + 1)
    pv, wv = gauss_interval(degree)
    pts = []
    wts = []
    for u, a in zip(pu, wu):
        for v, b in zip(pv, wv):
            pts.append((u, v * (1.0 - u)))
            wts.append(a * b * (1.0 - u))
    return np.asarray(pts), np.asarray(wts)


@lru_cache(maxsize=None)
def ref_rule(dim: int, degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Reference-element rule: interval [0,1] for dim 1, triangle for dim 2.

    Points have shape (n, dim); weights sum to the reference measure.
    """
    if dim == 1:
        p, w = gauss_interval(degree)
        return p.reshape(-1, 1), w
    if dim == 2:
        return gauss_triangle(degree)
    raise ValueError(f"unsupported dimension {dim}")
