import numpy as np
import pytest

from moistswe import elements
from moistswe.elements import (
    EDGE_LENGTHS,
    EDGE_NORMALS,
    EDGE_VERTS,
    TRI_VERTS,
    dg_linear,
    edge_points,
    hdiv_quadratic,
    legendre01,
)
from moistswe.quadrature import interval_rule, triangle_rule


def test_edge_geometry_consistency():
    for k in range(3):
        a = TRI_VERTS[EDGE_VERTS[k][0]]
        b = TRI_VERTS[EDGE_VERTS[k][1]]
        d = b - a
        assert abs(np.linalg.norm(d) - EDGE_LENGTHS[k]) < 1e-15
        # outward normal: perpendicular, unit, pointing away from the opposite vertex
        n = EDGE_NORMALS[k]
        assert abs(d @ n) < 1e-15
        assert abs(n @ n - 1.0) < 1e-15
        mid = 0.5 * (a + b)
        opposite = TRI_VERTS[k]
        assert (mid - opposite) @ n > 0.0


def test_dof_duality_identity():
    """Evaluating each dof functional on each basis function gives I to 1e-12."""
    el = hdiv_quadratic()
    G = np.empty((12, 12))
    for i in range(12):
        def basis_i(pts, i=i):
            return el.values(pts)[i]
        G[:, i] = el.apply_dofs(basis_i)
    assert np.max(np.abs(G - np.eye(12))) < 1e-12


def test_hdiv_interior_basis_has_zero_normal_trace():
    t = np.linspace(0.0, 1.0, 9)
    for k in range(3):
        tr = hdiv_quadratic().edge_normal_trace(k, t)
        assert np.max(np.abs(tr[9:])) < 1e-12
        # edge dofs of other edges also vanish on this edge
        for kk in range(3):
            if kk != k:
                assert np.max(np.abs(tr[3 * kk : 3 * kk + 3])) < 1e-12


def test_hdiv_edge_trace_is_dual_legendre():
    """Normal trace of edge dof (k, j) is (2j+1) legendre01(j) / |edge_k|."""
    t, _ = interval_rule(7)
    for k in range(3):
        tr = hdiv_quadratic().edge_normal_trace(k, t)
        for j in range(3):
            expect = (2 * j + 1) * legendre01(j, t) / EDGE_LENGTHS[k]
            assert np.max(np.abs(tr[3 * k + j] - expect)) < 1e-12


def test_divergence_matches_finite_differences():
    """Reference divergence agrees with central differences of values.

    Central differences are exact for quadratics, so only roundoff remains.
    """
    el = hdiv_quadratic()
    rng = np.random.default_rng(7)
    pts = rng.uniform(0.05, 0.4, size=(20, 2))
    h = 1e-4
    div = el.divergence(pts)
    ex = np.array([h, 0.0])
    ey = np.array([0.0, h])
    fd = (
        el.values(pts + ex)[:, :, 0]
        - el.values(pts - ex)[:, :, 0]
        + el.values(pts + ey)[:, :, 1]
        - el.values(pts - ey)[:, :, 1]
    ) / (2 * h)
    assert np.max(np.abs(div - fd)) < 1e-9


def test_gradients_match_finite_differences():
    el = hdiv_quadratic()
    pts = np.array([[0.3, 0.2], [0.1, 0.6]])
    h = 1e-4
    g = el.gradients(pts)
    for a, e in enumerate((np.array([h, 0.0]), np.array([0.0, h]))):
        fd = (el.values(pts + e) - el.values(pts - e)) / (2 * h)
        assert np.max(np.abs(g[:, :, a, :] - fd)) < 1e-9


def test_hdiv_reproduces_linear_fields():
    """Interpolating any [P1]^2 field via dofs reproduces it exactly."""
    el = hdiv_quadratic()
    rng = np.random.default_rng(3)
    A = rng.normal(size=(2, 2))
    c = rng.normal(size=2)

    def f(pts):
        return pts @ A.T + c

    dofs = el.apply_dofs(f)
    pts, _ = triangle_rule(4)
    recon = np.einsum("i,iqa->qa", dofs, el.values(pts))
    assert np.max(np.abs(recon - f(pts))) < 1e-12


def test_dg_linear_partition_of_unity_and_grads():
    el = dg_linear()
    pts, _ = triangle_rule(4)
    vals = el.values(pts)
    assert np.max(np.abs(vals.sum(axis=0) - 1.0)) < 1e-14
    # nodal at vertices
    vv = el.values(TRI_VERTS)
    assert np.max(np.abs(vv - np.eye(3))) < 1e-14
    g = el.gradients()
    assert np.max(np.abs(g.sum(axis=0))) < 1e-14


def test_legendre01_orthogonality():
    t, w = interval_rule(9)
    for i in range(3):
        for j in range(3):
            ip = np.sum(w * legendre01(i, t) * legendre01(j, t))
            expect = 1.0 / (2 * i + 1) if i == j else 0.0
            assert abs(ip - expect) < 1e-14


def test_edge_points_endpoints():
    for k in range(3):
        p = edge_points(k, np.array([0.0, 1.0]))
        assert np.allclose(p[0], TRI_VERTS[EDGE_VERTS[k][0]])
        assert np.allclose(p[1], TRI_VERTS[EDGE_VERTS[k][1]])


def test_legendre_degree_guard():
    with pytest.raises(ValueError):
        legendre01(3, np.array([0.5]))
