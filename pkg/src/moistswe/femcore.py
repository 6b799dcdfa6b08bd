"""Function spaces, mass operators, projection, and norms.

Degrees of freedom follow the facet convention of :mod:`moistswe.meshes`:
velocity edge dofs are moments of the normal flux against Legendre
polynomials in the global (low to high vertex id) edge direction, measured
with the shared facet normal (outward from the "+" side). Cell-local dofs
relate to global ones through a per-cell sign table, so normal continuity
holds by construction. Edge dof 3*f + j is moment j on facet f; interior
dofs come after all edge dofs, three per cell.

Vector fields live in the cell planes through the contravariant Piola map
u = E uhat / detJ; scalars are nodal per-cell linears. Facet integrals use
the reference flux identity, so they carry no physical length factors.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from moistswe.elements import dg_linear, edge_points, hdiv_quadratic, legendre01
from moistswe.errors import SolverError
from moistswe.meshes import compute_geometry
from moistswe.quadrature import interval_rule, triangle_rule

__all__ = [
    "DEFAULT_DEGREE",
    "FunctionSpace",
    "function_space",
    "cell_tables",
    "facet_tables",
    "facet_maps",
    "dof_coefficients",
    "cell_quadrature_points",
    "dg_cell_values",
    "hdiv_cell_values",
    "facet_flux_density",
    "dg_facet_values",
    "assemble_hdiv_mass",
    "dg_mass_blocks",
    "MassSolver",
    "project",
    "l2_norm",
    "l2_error",
]

DEFAULT_DEGREE = 6


@dataclass(frozen=True)
class CellTables:
    """Reference-element tabulations at a triangle quadrature rule."""

    points: np.ndarray     # (nq, 2)
    weights: np.ndarray    # (nq,)
    dg: np.ndarray         # (3, nq)
    dg_grad: np.ndarray    # (3, 2) constant
    hdiv: np.ndarray       # (12, nq, 2)
    hdiv_div: np.ndarray   # (12, nq)
    hdiv_grad: np.ndarray  # (12, nq, 2, 2) [i, q, a, b] = d_a component_b


@dataclass(frozen=True)
class FacetTables:
    """Edge tabulations at a symmetric interval rule (t[::-1] == 1 - t).

    ``flux`` absorbs the reference edge length, so the physical normal flux
    density of edge dof j in the edge's own direction is flux[j] exactly;
    it is the same table for every local edge. ``dg`` and ``hdiv_vals``
    carry a leading local-edge axis and a reversed twin at index 1 of the
    orientation axis for sides whose local direction opposes the global one.
    """

    t: np.ndarray          # (nq,)
    weights: np.ndarray    # (nq,)
    flux: np.ndarray       # (3, nq) row j = (2j+1) p_j(t)
    flux_rev: np.ndarray   # (3, nq) sampled at 1 - t
    dg: np.ndarray         # (3, 2, 3, nq) [k, orient, i, q]
    hdiv_vals: np.ndarray  # (3, 2, 12, nq, 2)


@lru_cache(maxsize=8)
def cell_tables(degree=DEFAULT_DEGREE):
    pts, wts = triangle_rule(degree)
    hq = hdiv_quadratic()
    dg = dg_linear()
    return CellTables(
        points=pts,
        weights=wts,
        dg=dg.values(pts),
        dg_grad=dg.gradients(),
        hdiv=hq.values(pts),
        hdiv_div=hq.divergence(pts),
        hdiv_grad=hq.gradients(pts),
    )


@lru_cache(maxsize=8)
def facet_tables(degree=DEFAULT_DEGREE):
    t, wts = interval_rule(degree)
    assert np.allclose(t + t[::-1], 1.0), "facet rule must be symmetric"
    hq = hdiv_quadratic()
    dg = dg_linear()
    flux = np.array([(2 * j + 1) * legendre01(j, t) for j in range(3)])
    dgtab = np.empty((3, 2, 3, t.size))
    hvtab = np.empty((3, 2, 12, t.size, 2))
    for k in range(3):
        dgtab[k, 0] = dg.edge_values(k, t)
        hvtab[k, 0] = hq.edge_values(k, t)
    dgtab[:, 1] = dgtab[:, 0, :, ::-1]
    hvtab[:, 1] = hvtab[:, 0, :, ::-1]
    return FacetTables(
        t=t, weights=wts, flux=flux, flux_rev=flux[:, ::-1],
        dg=dgtab, hdiv_vals=hvtab,
    )


@dataclass(frozen=True)
class FacetMaps:
    """Per-facet side layout: adjacent cells, their local edges, orientation."""

    cells: np.ndarray     # (nf, 2) cell index per side, "+" first
    edges: np.ndarray     # (nf, 2) local edge per side
    reversed_: np.ndarray  # (nf, 2) True where local direction opposes global


def facet_maps(mesh):
    cached = mesh._cache.get("facet_maps")
    if cached is not None:
        return cached
    geo = compute_geometry(mesh)
    f = mesh.facets
    maps = FacetMaps(
        cells=np.stack([f[:, 0], f[:, 2]], axis=1),
        edges=np.stack([f[:, 1], f[:, 3]], axis=1),
        reversed_=geo.flip == -1,
    )
    mesh._cache["facet_maps"] = maps
    return maps


@dataclass(frozen=True)
class FunctionSpace:
    """Dof layout of a scalar (dg) or velocity (hdiv) space on one mesh."""

    mesh: object
    kind: str                # "hdiv" | "dg"
    ndofs: int
    cell_dofs: np.ndarray    # (nc, nd)
    cell_signs: np.ndarray   # (nc, nd) +-1, all +1 for dg

    @property
    def geometry(self):
        return compute_geometry(self.mesh)


def function_space(mesh, kind):
    key = ("space", kind)
    cached = mesh._cache.get(key)
    if cached is not None:
        return cached
    nc = mesh.num_cells
    nf = mesh.num_facets
    if kind == "dg":
        space = FunctionSpace(
            mesh=mesh, kind="dg", ndofs=3 * nc,
            cell_dofs=np.arange(3 * nc, dtype=np.int64).reshape(nc, 3),
            cell_signs=np.ones((nc, 3)),
        )
    elif kind == "hdiv":
        maps = facet_maps(mesh)
        cell_facet = np.empty((nc, 3), dtype=np.int64)
        sigma = np.empty((nc, 3))
        pi = np.empty((nc, 3))
        fid = np.arange(nf)
        for side, sgn in ((0, 1.0), (1, -1.0)):
            cell_facet[maps.cells[:, side], maps.edges[:, side]] = fid
            sigma[maps.cells[:, side], maps.edges[:, side]] = sgn
            pi[maps.cells[:, side], maps.edges[:, side]] = np.where(
                maps.reversed_[:, side], -1.0, 1.0
            )
        dofs = np.empty((nc, 12), dtype=np.int64)
        signs = np.empty((nc, 12))
        for k in range(3):
            for j in range(3):
                dofs[:, 3 * k + j] = 3 * cell_facet[:, k] + j
                signs[:, 3 * k + j] = sigma[:, k] * pi[:, k] ** j
        interior = 3 * nf + 3 * np.arange(nc, dtype=np.int64)[:, None]
        dofs[:, 9:] = interior + np.arange(3)
        signs[:, 9:] = 1.0
        space = FunctionSpace(
            mesh=mesh, kind="hdiv", ndofs=3 * nf + 3 * nc,
            cell_dofs=dofs, cell_signs=signs,
        )
    else:
        raise ValueError(f"unknown space kind {kind!r}")
    mesh._cache[key] = space
    return space


def dof_coefficients(space, vec):
    """Per-cell local coefficients (nc, nd), orientation signs applied."""
    return space.cell_signs * vec[space.cell_dofs]


def dg_cell_values(space, vec, tab):
    """(nc, nq) samples of a dg field at the cell rule points."""
    return np.einsum("ci,iq->cq", vec[space.cell_dofs], tab.dg)


def hdiv_cell_values(space, vec, tab):
    """(nc, nq, 3) physical velocity samples at the cell rule points."""
    geo = space.geometry
    coef = dof_coefficients(space, vec)
    uhat = np.einsum("ci,iqa->cqa", coef, tab.hdiv)
    return np.einsum("cxa,cqa->cqx", geo.E, uhat) / geo.detJ[:, None, None]


def facet_flux_density(space, vec, ftab):
    """(nf, nq) normal flux density out of the "+" side, global direction.

    Integrals against it need only the interval weights: the reference edge
    length and the physical facet length cancel through the Piola identity.
    Pointwise u . n equals this divided by the facet length.
    """
    nf = space.mesh.num_facets
    edge = vec[: 3 * nf].reshape(nf, 3)
    return edge @ ftab.flux


def dg_facet_values(space, vec, ftab):
    """(nf, 2, nq) dg trace on both sides, sampled in the global direction."""
    maps = facet_maps(space.mesh)
    tables = ftab.dg[maps.edges, maps.reversed_.astype(int)]  # (nf, 2, 3, nq)
    cell_vals = vec[space.cell_dofs]                           # (nc, 3)
    return np.einsum("fsiq,fsi->fsq", tables, cell_vals[maps.cells])


def assemble_hdiv_mass(space, degree=DEFAULT_DEGREE):
    """Sparse velocity mass matrix, int u . v over the cell planes."""
    geo = space.geometry
    tab = cell_tables(degree)
    kk = np.einsum("q,iqa,jqb->ijab", tab.weights, tab.hdiv, tab.hdiv)
    local = np.einsum("ijab,cab->cij", kk, geo.metric) / geo.detJ[:, None, None]
    local *= space.cell_signs[:, :, None] * space.cell_signs[:, None, :]
    rows = np.repeat(space.cell_dofs, 12, axis=1).ravel()
    cols = np.tile(space.cell_dofs, (1, 12)).ravel()
    M = sp.coo_matrix(
        (local.ravel(), (rows, cols)), shape=(space.ndofs, space.ndofs)
    )
    return M.tocsr()


def dg_mass_blocks(space, degree=DEFAULT_DEGREE, coeff=None):
    """(nc, 3, 3) per-cell scalar mass blocks, optionally weighted by
    coeff sampled at the rule points (nc, nq)."""
    geo = space.geometry
    tab = cell_tables(degree)
    if coeff is None:
        ref = np.einsum("q,iq,jq->ij", tab.weights, tab.dg, tab.dg)
        return ref[None, :, :] * geo.detJ[:, None, None]
    wq = tab.weights[None, :] * coeff
    return np.einsum("cq,iq,jq->cij", wq, tab.dg, tab.dg) * geo.detJ[:, None, None]


class MassSolver:
    """Reusable solver for a fixed SPD mass matrix.

    method "cg" runs Jacobi-preconditioned conjugate gradients to a tight
    relative tolerance; "direct" factorizes once and back-substitutes.
    """

    def __init__(self, M, method="cg", rtol=1e-12, maxiter=200):
        self.M = M.tocsr()
        self.method = method
        self.rtol = rtol
        self.maxiter = maxiter
        if method == "direct":
            self._lu = spla.splu(self.M.tocsc())
        elif method == "cg":
            inv_diag = 1.0 / self.M.diagonal()
            n = self.M.shape[0]
            self._prec = spla.LinearOperator((n, n), matvec=lambda x: inv_diag * x)
        else:
            raise ValueError(f"unknown mass solver method {method!r}")

    def solve(self, rhs, x0=None):
        if self.method == "direct":
            return self._lu.solve(rhs)
        x, info = spla.cg(
            self.M, rhs, x0=x0, rtol=self.rtol, atol=0.0,
            maxiter=self.maxiter, M=self._prec,
        )
        if info != 0:
            raise SolverError(f"mass solve did not converge (info={info})")
        return x


def project(space, fn, degree=DEFAULT_DEGREE, solver=None):
    """L2 projection of a callable fn(points (..., 3)) into the space.

    Vector targets may return any 3D field; only its cell-plane part is
    representable, so the projection is against the in-plane basis.
    """
    geo = space.geometry
    tab = cell_tables(degree)
    x = cell_quadrature_points(space.mesh, degree)
    fvals = np.asarray(fn(x.reshape(-1, 3)))
    if space.kind == "dg":
        fvals = fvals.reshape(x.shape[0], x.shape[1])
        local = np.einsum("q,iq,cq->ci", tab.weights, tab.dg, fvals)
        local *= geo.detJ[:, None]
        blocks = dg_mass_blocks(space, degree)
        return np.linalg.solve(blocks, local[:, :, None]).reshape(-1)
    fvals = fvals.reshape(x.shape[0], x.shape[1], 3)
    ft = np.einsum("cxa,cqx->cqa", geo.E, fvals)  # E^T f, in-plane components
    local = np.einsum("q,iqa,cqa->ci", tab.weights, tab.hdiv, ft)
    local *= space.cell_signs
    rhs = np.zeros(space.ndofs)
    np.add.at(rhs, space.cell_dofs.ravel(), local.ravel())
    if solver is None:
        solver = MassSolver(assemble_hdiv_mass(space, degree))
    return solver.solve(rhs)


def cell_quadrature_points(mesh, degree=DEFAULT_DEGREE):
    """Physical images of the triangle rule points, (nc, nq, 3)."""
    geo = compute_geometry(mesh)
    tab = cell_tables(degree)
    origin = mesh.cell_coords[:, 0]
    return origin[:, None, :] + np.einsum("cxa,qa->cqx", geo.E, tab.points)


def _squared_cell_integrals(space, vec, degree):
    geo = space.geometry
    tab = cell_tables(degree)
    if space.kind == "dg":
        vals = dg_cell_values(space, vec, tab)
        sq = vals**2
    else:
        vals = hdiv_cell_values(space, vec, tab)
        sq = np.einsum("cqx,cqx->cq", vals, vals)
    return sq @ tab.weights * geo.detJ


def l2_norm(space, vec, degree=DEFAULT_DEGREE):
    return float(np.sqrt(_squared_cell_integrals(space, vec, degree).sum()))


def l2_error(space, vec, ref, degree=DEFAULT_DEGREE, normalized=False):
    """L2 distance between a dof vector and a reference.

    ref is a callable on points or a dof vector in the same space. Vector
    references are projected onto each cell plane before comparison; the
    out-of-plane part is not representable and would otherwise put an O(h)
    floor under every convergence measurement.
    """
    geo = space.geometry
    tab = cell_tables(degree)
    if callable(ref):
        x = cell_quadrature_points(space.mesh, degree)
        rvals = np.asarray(ref(x.reshape(-1, 3)))
        if space.kind == "dg":
            rvals = rvals.reshape(x.shape[0], x.shape[1])
        else:
            rvals = rvals.reshape(x.shape[0], x.shape[1], 3)
            cinv = np.linalg.inv(geo.metric)
            inplane = np.einsum("cab,cqx,cxb->cqa", cinv, rvals, geo.E)
            rvals = np.einsum("cxa,cqa->cqx", geo.E, inplane)
    else:
        rvals = None

    if space.kind == "dg":
        vals = dg_cell_values(space, vec, tab)
        rv = rvals if rvals is not None else dg_cell_values(space, ref, tab)
        diff_sq = (vals - rv) ** 2
        ref_sq = rv**2
    else:
        vals = hdiv_cell_values(space, vec, tab)
        rv = rvals if rvals is not None else hdiv_cell_values(space, ref, tab)
        diff_sq = np.einsum("cqx,cqx->cq", vals - rv, vals - rv)
        ref_sq = np.einsum("cqx,cqx->cq", rv, rv)

    err = np.sqrt((diff_sq @ tab.weights * geo.detJ).sum())
    if not normalized:
        return float(err)
    ref_norm = np.sqrt((ref_sq @ tab.weights * geo.detJ).sum())
    if ref_norm == 0.0:
        raise ValueError("cannot normalize by a zero reference norm")
    return float(err / ref_norm)
