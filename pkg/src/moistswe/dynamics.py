"""Spatial discretisation of the moist shallow-water dynamics.

Velocity lives in the quadratic H(div) space, scalars in cellwise linears.
All cell integrals run over reference coordinates; the Piola identities
remove most Jacobian factors, and facet integrals carry no length factors
at all because the normal flux density is exact in the edge parameter.

Three operators are built here:

* the velocity forcing (Coriolis and pressure gradients), evaluated as a
  residual vector for explicit and implicit half steps;
* scalar transport matrices for a frozen advecting velocity, in both
  conservative (for depth) and advective (for buoyancy, moisture) form,
  with pointwise upwind facet fluxes;
* the vector-invariant velocity transport, linear in the transported
  velocity for a frozen advecting velocity, applied matrix free.
"""

import enum
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from moistswe.constants import OMEGA
from moistswe.errors import ConfigError
from moistswe.femcore import (
    cell_quadrature_points,
    cell_tables,
    dg_cell_values,
    dg_facet_values,
    dof_coefficients,
    facet_flux_density,
    facet_maps,
    facet_tables,
    function_space,
)
from moistswe.meshes import compute_geometry, lonlat_of

__all__ = [
    "CELL_DEGREE",
    "FACET_DEGREE",
    "Framework",
    "FrameworkConfig",
    "State",
    "Discretisation",
    "coriolis_samples",
    "StaticForcing",
    "forcing_residual",
    "upwind_theta",
    "transport_matrices",
    "VelocityTransport",
]

CELL_DEGREE = 6
FACET_DEGREE = 5


class Framework(enum.Enum):
    """Which prognostic couplings are active."""

    MOIST_CONVECTIVE = "moist-convective"
    MOIST_CONVECTIVE_THERMAL = "moist-convective-thermal"
    MOIST_THERMAL = "moist-thermal"
    MOIST_CONVECTIVE_PSEUDO_THERMAL = "moist-convective-pseudo-thermal"


# framework -> (buoyancy is prognostic, beta1 allowed, beta2 allowed)
_GATING = {
    Framework.MOIST_CONVECTIVE: (False, True, False),
    Framework.MOIST_CONVECTIVE_THERMAL: (True, True, True),
    Framework.MOIST_THERMAL: (True, False, True),
    Framework.MOIST_CONVECTIVE_PSEUDO_THERMAL: (True, True, False),
}


@dataclass(frozen=True)
class FrameworkConfig:
    """Framework choice plus the source-strength parameters it permits."""

    framework: Framework
    beta1: float = 0.0
    beta2: float = 0.0

    def __post_init__(self):
        prognostic_b, allow1, allow2 = _GATING[self.framework]
        name = self.framework.value
        if self.beta1 != 0.0 and not allow1:
            raise ConfigError(f"{name} does not admit a depth source (beta1 != 0)")
        if self.beta2 != 0.0 and not allow2:
            raise ConfigError(f"{name} does not admit a buoyancy source (beta2 != 0)")

    @property
    def prognostic_buoyancy(self):
        return _GATING[self.framework][0]

    @property
    def depth_dependent_saturation_only(self):
        """True when saturation may not see the buoyancy field."""
        return self.framework in (
            Framework.MOIST_CONVECTIVE,
            Framework.MOIST_CONVECTIVE_PSEUDO_THERMAL,
        )


@dataclass
class State:
    """Prognostic dof vectors: velocity, depth, buoyancy, three moisture species."""

    u: np.ndarray
    D: np.ndarray
    b: np.ndarray
    qv: np.ndarray
    qc: np.ndarray
    qr: np.ndarray

    def copy(self):
        return State(*(x.copy() for x in (self.u, self.D, self.b, self.qv, self.qc, self.qr)))

    def scalars(self):
        return {"D": self.D, "b": self.b, "qv": self.qv, "qc": self.qc, "qr": self.qr}


class Discretisation:
    """Mesh plus spaces plus shared tabulations, built once per run."""

    def __init__(self, mesh, cell_degree=CELL_DEGREE, facet_degree=FACET_DEGREE):
        self.mesh = mesh
        self.geo = compute_geometry(mesh)
        self.V = function_space(mesh, "hdiv")
        self.Q = function_space(mesh, "dg")
        self.ctab = cell_tables(cell_degree)
        self.ftab = facet_tables(facet_degree)
        self.maps = facet_maps(mesh)
        self.cell_degree = cell_degree
        self.facet_degree = facet_degree

    @property
    def metric_inv(self):
        cached = self.mesh._cache.get("metric_inv")
        if cached is None:
            cached = np.linalg.inv(self.geo.metric)
            self.mesh._cache["metric_inv"] = cached
        return cached

    def quadrature_latitudes(self):
        x = cell_quadrature_points(self.mesh, self.cell_degree)
        _, lat = lonlat_of(x.reshape(-1, 3))
        return lat.reshape(x.shape[0], x.shape[1])


def coriolis_samples(disc, omega=OMEGA, variant="sin"):
    """Coriolis parameter at the cell quadrature points, (nc, nq)."""
    lat = disc.quadrature_latitudes()
    if variant == "sin":
        return 2.0 * omega * np.sin(lat)
    if variant == "cos":
        return 2.0 * omega * np.cos(lat)
    raise ConfigError(f"unknown coriolis variant {variant!r}")


def _rot(v):
    """In-plane quarter turn on the trailing component axis: (x, y) -> (-y, x)."""
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


@dataclass(frozen=True)
class StaticForcing:
    """Per-run samples that the velocity forcing reuses every evaluation."""

    f_cell: np.ndarray     # (nc, nq) Coriolis parameter
    B_cell: np.ndarray     # (nc, nq) topography
    B_facet: np.ndarray    # (nf, nq) facet-average topography

    @classmethod
    def build(cls, disc, B_vec=None, f_cell=None):
        nc = disc.mesh.num_cells
        nq = disc.ctab.weights.size
        if f_cell is None:
            f_cell = coriolis_samples(disc)
        if B_vec is None:
            B_cell = np.zeros((nc, nq))
            B_facet = np.zeros((disc.mesh.num_facets, disc.ftab.weights.size))
        else:
            B_cell = dg_cell_values(disc.Q, B_vec, disc.ctab)
            B_facet = dg_facet_values(disc.Q, B_vec, disc.ftab).mean(axis=1)
        return cls(f_cell=f_cell, B_cell=B_cell, B_facet=B_facet)


def forcing_residual(disc, u, D, b, static, constant_buoyancy=None):
    """Weak Coriolis plus pressure forcing, as a residual on the velocity space.

    The pressure terms integrate b grad(D+B) + (D/2) grad(b) by parts twice,
    once moving the full product derivative onto the test function and once
    splitting the half-weighted buoyancy gradient; facet corrections use the
    centred average against the jump of the other factor. With spatially
    constant buoyancy both facet terms vanish identically and the whole
    pressure force collapses to g int (B+D) div(psi); passing
    ``constant_buoyancy`` selects that short path.
    """
    V, Q, geo, ctab, ftab = disc.V, disc.Q, disc.geo, disc.ctab, disc.ftab
    w = ctab.weights

    coef_u = dof_coefficients(V, u)
    uhat = np.einsum("ci,iqa->cqa", coef_u, ctab.hdiv)
    local = -np.einsum("q,cq,iqa,cqa->ci", w, static.f_cell, ctab.hdiv, _rot(uhat))

    Dq = dg_cell_values(Q, D, ctab)
    depth_tot = static.B_cell + Dq

    if constant_buoyancy is not None:
        local += constant_buoyancy * np.einsum("q,cq,iq->ci", w, depth_tot, ctab.hdiv_div)
        rhs = np.zeros(V.ndofs)
        np.add.at(rhs, V.cell_dofs.ravel(), (V.cell_signs * local).ravel())
        return rhs

    bq = dg_cell_values(Q, b, ctab)
    grad_b = np.einsum("ci,ia->ca", b[Q.cell_dofs], ctab.dg_grad)
    grad_D = np.einsum("ci,ia->ca", D[Q.cell_dofs], ctab.dg_grad)

    # int (B+D) div(b psi) = int (B+D) [b div psi + psi . grad b]
    local += np.einsum("q,cq,cq,iq->ci", w, depth_tot, bq, ctab.hdiv_div)
    local += np.einsum("q,cq,iqa,ca->ci", w, depth_tot, ctab.hdiv, grad_b)
    # (1/2) int b div(D psi)
    local += 0.5 * np.einsum("q,cq,cq,iq->ci", w, bq, Dq, ctab.hdiv_div)
    local += 0.5 * np.einsum("q,cq,iqa,ca->ci", w, bq, ctab.hdiv, grad_D)

    rhs = np.zeros(V.ndofs)
    np.add.at(rhs, V.cell_dofs.ravel(), (V.cell_signs * local).ravel())

    # facet corrections assemble straight into the edge dofs: the test flux
    # density of dof (f, j) is the Legendre table row, single valued
    bf = dg_facet_values(Q, b, ftab)
    Df = dg_facet_values(Q, D, ftab)
    depth_mean = static.B_facet + 0.5 * (Df[:, 0] + Df[:, 1])
    jump_b = bf[:, 0] - bf[:, 1]
    mean_b = 0.5 * (bf[:, 0] + bf[:, 1])
    jump_D = Df[:, 0] - Df[:, 1]
    integrand = depth_mean * jump_b + 0.5 * mean_b * jump_D
    nf = disc.mesh.num_facets
    rhs[: 3 * nf] -= np.einsum("q,fq,jq->fj", ftab.weights, integrand, ftab.flux).ravel()
    return rhs


def upwind_theta(V):
    """Weight of the '+' side value in the upwind facet flux; ties average."""
    return np.where(V > 0.0, 1.0, 0.0) + 0.5 * (V == 0.0)


def transport_matrices(disc, ubar):
    """Sparse scalar transport operators for a frozen advecting velocity.

    Returns (conservative, advective) CSR matrices A with M dq/dt = A q:
    conservative discretises -div(ubar q) and preserves total mass exactly;
    advective discretises -ubar . grad q and preserves constants exactly.
    """
    V, Q, ctab, ftab, maps = disc.V, disc.Q, disc.ctab, disc.ftab, disc.maps
    nc = disc.mesh.num_cells
    w = ctab.weights

    coef_bar = dof_coefficients(V, ubar)
    pbar = np.einsum("ci,iqa->cqa", coef_bar, ctab.hdiv)
    cell_cons = np.einsum("q,cqa,ia,jq->cij", w, pbar, ctab.dg_grad, ctab.dg)
    divbar = np.einsum("ci,iq->cq", coef_bar, ctab.hdiv_div)
    cell_extra = np.einsum("q,iq,jq,cq->cij", w, ctab.dg, ctab.dg, divbar)

    flux = facet_flux_density(V, ubar, ftab)        # (nf, nq)
    theta = upwind_theta(flux)
    trial_w = np.stack([theta, 1.0 - theta], axis=1) * flux[:, None, :]
    trial_w *= ftab.weights[None, None, :]
    traces = ftab.dg[maps.edges, maps.reversed_.astype(int)]   # (nf, 2, 3, nq)

    rows, cols, vals_c, vals_a = [], [], [], []

    cd = Q.cell_dofs
    rows.append(np.repeat(cd, 3, axis=1).ravel())
    cols.append(np.tile(cd, (1, 3)).ravel())
    vals_c.append(cell_cons.ravel())
    vals_a.append((cell_cons + cell_extra).ravel())

    for s_test, sgn in ((0, -1.0), (1, 1.0)):
        for s_trial in (0, 1):
            block = sgn * np.einsum(
                "fiq,fq,fjq->fij",
                traces[:, s_test], trial_w[:, s_trial], traces[:, s_trial],
            )
            rows.append(np.repeat(cd[maps.cells[:, s_test]], 3, axis=1).ravel())
            cols.append(np.tile(cd[maps.cells[:, s_trial]], (1, 3)).ravel())
            vals_c.append(block.ravel())
            vals_a.append(block.ravel())

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    shape = (3 * nc, 3 * nc)
    A_cons = sp.coo_matrix((np.concatenate(vals_c), (rows, cols)), shape=shape).tocsr()
    A_adv = sp.coo_matrix((np.concatenate(vals_a), (rows, cols)), shape=shape).tocsr()
    return A_cons, A_adv


class VelocityTransport:
    """Vector-invariant advection N(u) = zeta(u) perp(ubar) + grad(u.ubar/2).

    Linear in u once ubar is frozen: the vorticity is integrated by parts
    onto the test field, the facet correction takes the full upwind velocity
    selected by the sign of the ubar flux, and the kinetic term uses the
    centred flux, whose facet jump cancels against the single-valued test
    normal. apply() returns the weak residual <w, N(u)>.
    """

    def __init__(self, disc, ubar):
        self.disc = disc
        V, geo, ctab, ftab, maps = disc.V, disc.geo, disc.ctab, disc.ftab, disc.maps
        self.w = ctab.weights
        coef_bar = dof_coefficients(V, ubar)

        pbar = np.einsum("ci,iqa->cqa", coef_bar, ctab.hdiv)
        gbar = np.einsum("ci,iqab->cqab", coef_bar, ctab.hdiv_grad)
        # G[c,i,q,a] = d_a(what_i . R90 ubarhat)
        self.G = np.einsum("iqab,cqb->ciqa", ctab.hdiv_grad, _rot(pbar)) + np.einsum(
            "iqb,cqab->ciqa", ctab.hdiv, _rot(gbar)
        )
        self.pbar = pbar
        self.cinv = disc.metric_inv

        flux = facet_flux_density(V, ubar, ftab)
        theta = upwind_theta(flux)[:, :, None]
        self.theta = theta
        cells = maps.cells
        self.edge_tables = ftab.hdiv_vals[maps.edges, maps.reversed_.astype(int)]
        self.E_side = geo.E[cells]            # (nf, 2, 3, 2)
        self.detJ_side = geo.detJ[cells]      # (nf, 2)

        ubar_e = np.einsum("fsi,fsiqa->fsqa", coef_bar[cells], self.edge_tables)
        # side test scalar w_i . perp(ubar) at the edge points
        self.P = np.einsum("fsiqa,fsqa->fsiq", self.edge_tables, _rot(ubar_e))
        self.P /= self.detJ_side[:, :, None, None]
        # weights including the physical edge length, (nf, nq)
        self.edge_w = geo.length[:, None] * ftab.weights[None, :]
        self.tangent = geo.tangent_ccw        # (nf, 2, 3)

    def matrix(self):
        """Assemble apply() as a sparse operator on the velocity dofs.

        Row and column dofs both carry the orientation sign, so the result
        acts on the same global coefficient vector apply() consumes. Facet
        blocks are assembled one (test side, trial side) pair at a time to
        keep the peak footprint at one 12x12 block field per facet.
        """
        disc = self.disc
        V, geo, ctab, maps = disc.V, disc.geo, disc.ctab, disc.maps
        w = self.w
        nc = disc.mesh.num_cells
        nq = w.size

        # contractions over (q, a) run as batched GEMMs on a fused axis
        zbasis = np.einsum("cab,jqb->cjqa", self.cinv, _rot(ctab.hdiv))
        Gw = (self.G * w[None, None, :, None]).reshape(nc, 12, 2 * nq)
        K = Gw @ zbasis.reshape(nc, 12, 2 * nq).transpose(0, 2, 1)
        mp = np.einsum("cab,cqb->cqa", geo.metric, self.pbar)
        mp /= geo.detJ[:, None, None] ** 2
        mp *= w[None, :, None]
        K -= 0.5 * np.matmul(
            np.broadcast_to(ctab.hdiv_div[None], (nc, 12, nq)),
            np.einsum("cqa,jqa->cqj", mp, ctab.hdiv))
        K *= V.cell_signs[:, :, None] * V.cell_signs[:, None, :]

        rows = [np.repeat(V.cell_dofs, 12, axis=1).ravel()]
        cols = [np.tile(V.cell_dofs, (1, 12)).ravel()]
        vals = [K.ravel()]

        theta_q = self.theta[:, :, 0]
        wtheta = np.stack([theta_q, 1.0 - theta_q], axis=1)   # (nf, 2, q)
        signs = V.cell_signs[maps.cells]                      # (nf, 2, 12)
        dofs = V.cell_dofs[maps.cells]
        nf = disc.mesh.num_facets
        fq = self.edge_w.shape[1]
        for d in (0, 1):
            # trial dof j on side d, evaluated in physical components
            T = np.matmul(
                self.edge_tables[:, d].reshape(nf, 12 * fq, 2),
                self.E_side[:, d].transpose(0, 2, 1))          # (nf, 12*fq, 3)
            T /= self.detJ_side[:, d, None, None]
            for s in (0, 1):
                along = np.matmul(T, self.tangent[:, s, :, None])
                along = along.reshape(nf, 12, fq)
                wq = self.edge_w * wtheta[:, d]
                F = np.matmul(self.P[:, s] * wq[:, None, :],
                              along.transpose(0, 2, 1))
                F *= signs[:, s, :, None] * signs[:, d, None, :]
                rows.append(np.repeat(dofs[:, s], 12, axis=1).ravel())
                cols.append(np.tile(dofs[:, d], (1, 12)).ravel())
                vals.append(F.ravel())

        n = V.ndofs
        return sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n)).tocsr()

    def apply(self, uvec):
        disc = self.disc
        V, geo, ctab = disc.V, disc.geo, disc.ctab
        maps = disc.maps
        coef = dof_coefficients(V, uvec)

        p = np.einsum("ci,iqa->cqa", coef, ctab.hdiv)
        z = np.einsum("cab,cqb->cqa", self.cinv, _rot(p))
        local = np.einsum("q,cqa,ciqa->ci", self.w, z, self.G)

        ke = np.einsum("cqa,cab,cqb->cq", p, geo.metric, self.pbar)
        ke /= geo.detJ[:, None] ** 2
        local -= 0.5 * np.einsum("q,cq,iq->ci", self.w, ke, ctab.hdiv_div)

        ue_hat = np.einsum("fsi,fsiqa->fsqa", coef[maps.cells], self.edge_tables)
        ue_phys = np.einsum("fsxa,fsqa->fsqx", self.E_side, ue_hat)
        ue_phys /= self.detJ_side[:, :, None, None]
        utilde = self.theta * ue_phys[:, 0] + (1.0 - self.theta) * ue_phys[:, 1]

        for s in (0, 1):
            along = np.einsum("fqx,fx->fq", utilde, self.tangent[:, s])
            contrib = np.einsum("fq,fiq->fi", self.edge_w * along, self.P[:, s])
            np.add.at(local, maps.cells[:, s], contrib)

        out = np.zeros(V.ndofs)
        np.add.at(out, V.cell_dofs.ravel(), (V.cell_signs * local).ravel())
        return out
