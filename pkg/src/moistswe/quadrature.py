"""Quadrature rules on the reference interval and triangle.

Triangle rules are built as collapsed (Duffy) products of Gauss-Legendre and
Gauss-Jacobi lines, so polynomial exactness up to the requested degree follows
from the 1D rules instead of transcribed point tables.
"""

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

__all__ = ["interval_rule", "triangle_rule"]


def interval_rule(degree):
    """Gauss-Legendre rule on [0, 1] exact for polynomials of `degree`.

    Returns (points, weights), points ascending and symmetric about 1/2.
    """
    if degree < 0:
        raise ValueError(f"degree must be nonnegative, got {degree}")
    n = max(1, (degree + 2) // 2)
    x, w = roots_legendre(n)
    return (x + 1.0) / 2.0, w / 2.0


def triangle_rule(degree):
    """Quadrature on the reference triangle {x, y >= 0, x + y <= 1}.

    Exact for bivariate polynomials of total degree <= `degree`. Uses the
    Duffy map x = s(1-t), y = t with a Gauss-Jacobi line absorbing the (1-t)
    Jacobian. Returns (points (n, 2), weights (n,)); weights sum to 1/2.
    """
    if degree < 0:
        raise ValueError(f"degree must be nonnegative, got {degree}")
    n = max(1, (degree + 2) // 2)
    s, ws = roots_legendre(n)
    s = (s + 1.0) / 2.0
    ws = ws / 2.0
    # weight (1-x)^1 on [-1,1] -> (1-t) on [0,1], factor 1/4 from the map
    tj, wj = roots_jacobi(n, 1.0, 0.0)
    t = (tj + 1.0) / 2.0
    wt = wj / 4.0
    S, T = np.meshgrid(s, t, indexing="ij")
    WS, WT = np.meshgrid(ws, wt, indexing="ij")
    pts = np.column_stack([(S * (1.0 - T)).ravel(), T.ravel()])
    wts = (WS * WT).ravel()
    return pts, wts


def monomial_integral(a, b):
    """Exact integral of x^a y^b over the reference triangle: a! b! / (a+b+2)!."""
    from math import factorial

    return factorial(a) * factorial(b) / factorial(a + b + 2)
