"""Reference elements on the unit triangle.

Two elements:

* ``HdivQuadratic`` -- the quadratic Brezzi-Douglas-Marini H(div) element
  (full [P2]^2, 12 dofs): three normal moments per edge against Legendre
  polynomials of degree 0..2 in the edge parameter, plus two interior moments
  against constant vectors and one against the curl of the cubic bubble.
  Fields map to physical cells with the contravariant Piola transform, so
  edge dofs are exactly the physical normal-flux moments and glue cells
  together normal-continuously.
* ``DgLinear`` -- discontinuous P1 with vertex-value (barycentric) dofs and
  the identity map.

Reference triangle: vertices (0,0), (1,0), (0,1); local edge k runs from
vertex (k+1)%3 to vertex (k+2)%3 (counterclockwise, outward normals on the
right of the direction of travel).
"""

from functools import lru_cache

import numpy as np

from moistswe.quadrature import interval_rule, triangle_rule

__all__ = ["HdivQuadratic", "DgLinear", "hdiv_quadratic", "dg_linear"]

TRI_VERTS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
EDGE_VERTS = ((1, 2), (2, 0), (0, 1))
EDGE_LENGTHS = np.array([np.sqrt(2.0), 1.0, 1.0])
EDGE_NORMALS = np.array([[1.0, 1.0], [-np.sqrt(2.0), 0.0], [0.0, -np.sqrt(2.0)]]) / np.sqrt(2.0)
EDGE_DIRECTIONS = np.array([[-1.0, 1.0], [0.0, -1.0], [1.0, 0.0]])


def legendre01(j, t):
    """Legendre polynomial of degree j shifted to [0, 1]."""
    x = 2.0 * np.asarray(t) - 1.0
    if j == 0:
        return np.ones_like(x)
    if j == 1:
        return x
    if j == 2:
        return 1.5 * x * x - 0.5
    raise ValueError(f"degree {j} not tabulated")


def edge_points(k, t):
    """Map edge parameter t in [0, 1] to reference coordinates on edge k."""
    a = TRI_VERTS[EDGE_VERTS[k][0]]
    b = TRI_VERTS[EDGE_VERTS[k][1]]
    t = np.asarray(t, dtype=float)
    return a[None, :] + t[:, None] * (b - a)[None, :]


def _mono_vals(pts):
    x, y = pts[:, 0], pts[:, 1]
    one = np.ones_like(x)
    return np.stack([one, x, y, x * x, x * y, y * y])


def _mono_dx(pts):
    x, y = pts[:, 0], pts[:, 1]
    z = np.zeros_like(x)
    return np.stack([z, np.ones_like(x), z, 2.0 * x, y, z])


def _mono_dy(pts):
    x, y = pts[:, 0], pts[:, 1]
    z = np.zeros_like(x)
    return np.stack([z, z, np.ones_like(x), z, x, 2.0 * y])


def _bubble_curl(pts):
    # curl of the cubic bubble (1-x-y)xy: (d/dy b, -d/dx b)
    x, y = pts[:, 0], pts[:, 1]
    return np.column_stack([x * (1.0 - x - 2.0 * y), -y * (1.0 - 2.0 * x - y)])


class HdivQuadratic:
    """Quadratic H(div) reference element (12 dofs).

    Dof ordering: 3*k + j is the edge-k moment against legendre01(j, .);
    dofs 9, 10 are interior moments against (1,0), (0,1); dof 11 is the
    interior moment against the bubble curl.
    """

    ndofs = 12
    edge_dofs = 3

    def __init__(self):
        V = np.zeros((12, 12))
        te, we = interval_rule(9)
        for k in range(3):
            pts = edge_points(k, te)
            mono = _mono_vals(pts)  # (6, nq)
            for j in range(3):
                p = legendre01(j, te)
                for a in range(2):
                    # dof of monomial vector e_a * mono_m on edge k
                    V[3 * k + j, 6 * a : 6 * a + 6] = EDGE_LENGTHS[k] * (
                        mono * (EDGE_NORMALS[k, a] * p * we)[None, :]
                    ).sum(axis=1)
        pc, wc = triangle_rule(8)
        mono = _mono_vals(pc)
        V[9, 0:6] = (mono * wc[None, :]).sum(axis=1)
        V[10, 6:12] = V[9, 0:6]
        cb = _bubble_curl(pc)
        for a in range(2):
            V[11, 6 * a : 6 * a + 6] = (mono * (cb[:, a] * wc)[None, :]).sum(axis=1)
        cond = np.linalg.cond(V)
        if not np.isfinite(cond) or cond > 1e8:
            raise RuntimeError(f"dof matrix ill-conditioned: cond={cond:.3e}")
        C = np.linalg.inv(V)  # V @ C = I; column i holds basis i coefficients
        self.coeffs = np.transpose(C.reshape(2, 6, 12), (2, 0, 1))  # (basis, comp, mono)

    def values(self, pts):
        """Basis values at reference points: (12, npts, 2)."""
        mono = _mono_vals(np.asarray(pts, dtype=float))
        return np.einsum("iam,mq->iqa", self.coeffs, mono)

    def divergence(self, pts):
        """Reference divergence at points: (12, npts)."""
        pts = np.asarray(pts, dtype=float)
        dx = _mono_dx(pts)
        dy = _mono_dy(pts)
        return np.einsum("im,mq->iq", self.coeffs[:, 0, :], dx) + np.einsum(
            "im,mq->iq", self.coeffs[:, 1, :], dy
        )

    def gradients(self, pts):
        """Reference gradients: grad[i, q, a, b] = d(component b)/d(x_a)."""
        pts = np.asarray(pts, dtype=float)
        dx = _mono_dx(pts)
        dy = _mono_dy(pts)
        g = np.empty((12, pts.shape[0], 2, 2))
        g[:, :, 0, :] = np.einsum("ibm,mq->iqb", self.coeffs, dx)
        g[:, :, 1, :] = np.einsum("ibm,mq->iqb", self.coeffs, dy)
        return g

    def edge_values(self, k, t):
        """Basis values on edge k at parameters t: (12, nt, 2)."""
        return self.values(edge_points(k, t))

    def edge_normal_trace(self, k, t):
        """Normal component (w.r.t. the outward edge-k normal): (12, nt)."""
        return self.edge_values(k, t) @ EDGE_NORMALS[k]

    def apply_dofs(self, fn):
        """Evaluate all 12 dof functionals on a callable pts -> (n, 2)."""
        out = np.zeros(12)
        te, we = interval_rule(9)
        for k in range(3):
            vals = np.asarray(fn(edge_points(k, te)))
            un = vals @ EDGE_NORMALS[k]
            for j in range(3):
                out[3 * k + j] = EDGE_LENGTHS[k] * np.sum(un * legendre01(j, te) * we)
        pc, wc = triangle_rule(8)
        vals = np.asarray(fn(pc))
        out[9] = np.sum(vals[:, 0] * wc)
        out[10] = np.sum(vals[:, 1] * wc)
        out[11] = np.sum(np.sum(vals * _bubble_curl(pc), axis=1) * wc)
        return out


class DgLinear:
    """Discontinuous P1 element with barycentric (vertex value) dofs."""

    ndofs = 3

    def values(self, pts):
        """Basis values: (3, npts). Coefficients are vertex values."""
        pts = np.asarray(pts, dtype=float)
        x, y = pts[:, 0], pts[:, 1]
        return np.stack([1.0 - x - y, x, y])

    def gradients(self):
        """Constant reference gradients: (3, 2)."""
        return np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])

    def edge_values(self, k, t):
        return self.values(edge_points(k, t))


@lru_cache(maxsize=1)
def hdiv_quadratic():
    return HdivQuadratic()


@lru_cache(maxsize=1)
def dg_linear():
    return DgLinear()
