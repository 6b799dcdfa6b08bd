"""Semi-implicit time integration with a fixed-count quasi-Newton update.

One step runs, in order: an explicit half step of the velocity forcing; a
fixed number of outer iterations that freeze the advecting velocity at the
midpoint of the old and current states and re-transport every prognostic
field from the forced state; a fixed number of inner iterations that
correct velocity, depth, and buoyancy through a linear implicit solve; and
an explicit application of the moisture physics.

The linear operator is assembled once per run about a resting background
with constant depth and the initial buoyancy. Eliminating the buoyancy
increment (it is slaved to the velocity increment through the reference
gradient) leaves a mixed velocity-depth system that is factorized
directly; the buoyancy increment is reconstructed after each solve. With
constant reference buoyancy every buoyancy coupling block cancels and the
operator degenerates to the plain shallow-water one, which is exactly the
system the non-thermal framework builds.

Scalars advect by three-stage SSP Runge-Kutta with upwind fluxes and an
optional vertex-bound limiter; the velocity advects itself through the
implicit midpoint rule, which has no Courant restriction. Rain stays where
it fell: it records conversion, not a transported species.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from moistswe.constants import GRAVITY
from moistswe.dynamics import (
    State,
    StaticForcing,
    VelocityTransport,
    coriolis_samples,
    forcing_residual,
    transport_matrices,
)
from moistswe.errors import (
    ConfigError,
    InstabilityError,
    SolverError,
    StateValidityError,
)
from moistswe.femcore import (
    MassSolver,
    assemble_hdiv_mass,
    dg_cell_values,
    dg_facet_values,
    dg_mass_blocks,
    facet_flux_density,
    hdiv_cell_values,
)
from moistswe.physics import physics_step

__all__ = [
    "SolverConfig",
    "courant_number",
    "crossing_courant_number",
    "explicit_forcing_half_step",
    "vertex_limiter",
    "ssprk3_transport",
    "implicit_midpoint_u",
    "QuasiNewtonOperator",
    "build_quasi_newton_operator",
    "Stepper",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SolverConfig:
    """Fixed per-run stepping controls.

    ``reference_depth`` and ``b_ref`` define the background state of the
    linear operator; both stay fixed for the whole run. Two outer
    iterations with a single inner solve are the production setting.
    Repeating the inner solve against a frozen transport state relaxes the
    depth toward an update with no implicit velocity feedback, which feeds
    gravity modes near the equator a fraction of a percent of energy per
    step once the wave Courant number passes about one third; the outer
    loop has no such band because it refreshes the advecting velocity.
    Counts below one make the scheme skip its own correction and are
    rejected.

    ``limiter`` governs the advective-form scalars (buoyancy, moisture).
    The conservative depth transport is never limited: over topography the
    depth carries a kink that mirrors the terrain, and clipping it leaves
    free-surface noise at the terrain edge that pumps momentum every step.
    """

    dt: float
    outer_iterations: int = 2
    inner_iterations: int = 1
    limiter: bool = True
    reference_depth: float | None = None
    b_ref: np.ndarray | None = None

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ConfigError("dt must be positive")
        if self.outer_iterations < 1 or self.inner_iterations < 1:
            raise ConfigError("outer and inner iteration counts must be at least 1")
        if self.reference_depth is not None and not self.reference_depth > 0.0:
            raise ConfigError("reference_depth must be positive")


def courant_number(disc, u, dt):
    """Largest cellwise advective Courant number of a velocity field:
    cell-mean speed times dt over the cell's shortest edge."""
    speed = np.linalg.norm(hdiv_cell_values(disc.V, u, disc.ctab), axis=2)
    mean = np.einsum("q,cq->c", disc.ctab.weights, speed)
    mean *= disc.geo.detJ / disc.geo.area
    return float(dt * (mean / disc.geo.min_edge).max())


def crossing_courant_number(disc, u, dt):
    """Flux-crossing Courant number dt * int_{boundary} |u . n| ds / (2 |K|).

    Needs only the facet flux densities. This is the ratio that actually
    governs the upwind DG transport stability; for solid-body flow it runs
    about 2.5 times the advective number, and the unlimited scheme turns
    unstable near crossing 1.
    """
    flux = facet_flux_density(disc.V, u, disc.ftab)
    per_facet = np.abs(flux) @ disc.ftab.weights
    crossing = np.zeros(disc.mesh.num_cells)
    for side in (0, 1):
        np.add.at(crossing, disc.maps.cells[:, side], per_facet)
    return float(dt * (crossing / (2.0 * disc.geo.area)).max())


def explicit_forcing_half_step(disc, state, dt, static, mass_solver=None,
                               constant_buoyancy=None):
    """Half step of the velocity forcing; every other field passes through.

    Returns a new state that shares the untouched arrays with the input.
    """
    if mass_solver is None:
        mass_solver = MassSolver(assemble_hdiv_mass(disc.V, disc.cell_degree))
    F = forcing_residual(disc, state.u, state.D, state.b, static,
                         constant_buoyancy=constant_buoyancy)
    u = state.u + 0.5 * dt * mass_solver.solve(F)
    return State(u=u, D=state.D, b=state.b, qv=state.qv, qc=state.qc, qr=state.qr)


def vertex_limiter(mesh, q):
    """Pull cellwise linears toward their mean until every vertex value
    lies inside the range of the cell means around that vertex.

    Cell means are preserved to roundoff and cells strictly inside the
    local range pass through bitwise. A cell sitting exactly at the range
    edge can be snapped onto its own computed mean, which moves its
    values by at most the one ulp the mean computation rounds.
    """
    cells = mesh.cells
    vals = np.asarray(q, dtype=float).reshape(-1, 3)
    mean = vals.mean(axis=1)
    vmin = np.full(mesh.num_vertices, np.inf)
    vmax = np.full(mesh.num_vertices, -np.inf)
    spread = np.repeat(mean, 3)
    np.minimum.at(vmin, cells.ravel(), spread)
    np.maximum.at(vmax, cells.ravel(), spread)
    dev = vals - mean[:, None]
    room_up = vmax[cells] - mean[:, None]
    room_dn = vmin[cells] - mean[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dev > 0.0, room_up / dev,
                         np.where(dev < 0.0, room_dn / dev, np.inf))
    alpha = np.clip(ratio.min(axis=1), 0.0, 1.0)
    scaled = mean[:, None] + alpha[:, None] * dev
    return np.where(alpha[:, None] < 1.0, scaled, vals).ravel()


def ssprk3_transport(disc, q, ubar, dt, *, conservative=False, limiter=False,
                     matrix=None, mass_inv=None, check_courant=True,
                     label="tracer"):
    """Advance one scalar by a three-stage SSP Runge-Kutta step.

    ``conservative`` selects the flux form (for depth) instead of the
    advective form. ``matrix`` and ``mass_inv`` accept the precomputed
    transport matrix and per-cell inverse mass blocks so a step loop can
    share them between fields; when given, ``conservative`` is ignored.
    """
    if matrix is None:
        cons, adv = transport_matrices(disc, ubar)
        matrix = cons if conservative else adv
    if mass_inv is None:
        mass_inv = np.linalg.inv(dg_mass_blocks(disc.Q, disc.cell_degree))
    if check_courant:
        c = courant_number(disc, ubar, dt)
        if c > 1.0:
            logger.warning("advective Courant number %.3f above 1: "
                           "explicit transport is outside its stable range", c)
        elif c > 0.5:
            logger.warning("advective Courant number %.3f above 0.5 "
                           "(unlimited transport destabilises near 0.4)", c)

    def tendency(x):
        return np.einsum("cij,cj->ci", mass_inv,
                         (matrix @ x).reshape(-1, 3)).ravel()

    def guard(x, stage):
        bad = ~np.isfinite(x)
        if bad.any():
            dof = int(np.flatnonzero(bad)[0])
            raise InstabilityError(
                f"non-finite {label} after transport stage {stage} (dof {dof})")
        return vertex_limiter(disc.mesh, x) if limiter else x

    q0 = np.asarray(q, dtype=float)
    q1 = guard(q0 + dt * tendency(q0), 1)
    q2 = guard(0.75 * q0 + 0.25 * (q1 + dt * tendency(q1)), 2)
    return guard((q0 + 2.0 * (q2 + dt * tendency(q2))) / 3.0, 3)


def implicit_midpoint_u(disc, u, ubar, dt, *, mass=None, transport=None,
                        precond=None, rtol=1e-10):
    """Advance the velocity by the implicit midpoint rule.

    Solves (M + dt/2 N) u' = (M - dt/2 N) u with N the frozen-coefficient
    velocity transport assembled sparse, so each Krylov iteration costs one
    csr matvec plus the mass backsolve; a direct factorisation of the full
    operator is slower here because of fill-in, and the mass preconditioner
    with a warm start keeps the iteration count small.
    """
    if mass is None:
        mass = assemble_hdiv_mass(disc.V, disc.cell_degree)
    if transport is None:
        transport = VelocityTransport(disc, ubar)
    if precond is None:
        solver = MassSolver(mass)
        precond = spla.LinearOperator(mass.shape, matvec=solver.solve)
    N = transport.matrix()
    rhs = mass @ u - 0.5 * dt * (N @ u)
    out, info = spla.gmres(mass + 0.5 * dt * N, rhs, x0=u, rtol=rtol, atol=0.0,
                           restart=30, maxiter=200, M=precond)
    if info != 0:
        raise SolverError(f"implicit midpoint velocity solve failed (info={info})")
    return out


def _rot(v):
    """In-plane quarter turn on the trailing component axis."""
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def _coriolis_matrix(disc, f_cell):
    """int f psi_i . (khat x psi_j); Jacobian free through the Piola map."""
    V, ctab = disc.V, disc.ctab
    local = np.einsum("q,cq,iqa,jqa->cij", ctab.weights, f_cell,
                      ctab.hdiv, _rot(ctab.hdiv))
    local *= V.cell_signs[:, :, None] * V.cell_signs[:, None, :]
    rows = np.repeat(V.cell_dofs, 12, axis=1).ravel()
    cols = np.tile(V.cell_dofs, (1, 12)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)),
                         shape=(V.ndofs, V.ndofs)).tocsr()


def _divergence_matrix(disc):
    """int lambda_i div(psi_j) as a (scalar dofs x velocity dofs) matrix."""
    V, Q, ctab = disc.V, disc.Q, disc.ctab
    base = np.einsum("q,iq,jq->ij", ctab.weights, ctab.dg, ctab.hdiv_div)
    local = base[None, :, :] * V.cell_signs[:, None, :]
    rows = np.repeat(Q.cell_dofs, 12, axis=1).ravel()
    cols = np.tile(V.cell_dofs, (1, 3)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)),
                         shape=(Q.ndofs, V.ndofs)).tocsr()


def _pressure_coupling(disc, b_ref):
    """Linearised pressure blocks (velocity rows, depth columns).

    P1 moves the full product derivative onto the test function, P2 is the
    half-weighted split of the buoyancy-gradient part; both carry centred
    facet corrections against the single-valued test flux. At constant
    b_ref the cell and facet parts of P2 cancel entry by entry and P1
    collapses to the plain divergence coupling.
    """
    V, Q, ctab, ftab, maps = disc.V, disc.Q, disc.ctab, disc.ftab, disc.maps
    w = ctab.weights
    bq = dg_cell_values(Q, b_ref, ctab)
    grad_b = np.einsum("ci,ia->ca", b_ref[Q.cell_dofs], ctab.dg_grad)

    div_b = np.einsum("q,cq,iq,jq->cij", w, bq, ctab.hdiv_div, ctab.dg)
    loc1 = -div_b - np.einsum("q,iqa,ca,jq->cij", w, ctab.hdiv, grad_b, ctab.dg)
    loc2 = -0.5 * div_b - 0.5 * np.einsum("q,cq,iqa,ja->cij", w, bq,
                                          ctab.hdiv, ctab.dg_grad)
    loc1 *= V.cell_signs[:, :, None]
    loc2 *= V.cell_signs[:, :, None]

    rows = [np.repeat(V.cell_dofs, 3, axis=1).ravel()]
    cols = [np.tile(Q.cell_dofs, (1, 12)).ravel()]
    vals1 = [loc1.ravel()]
    vals2 = [loc2.ravel()]

    bf = dg_facet_values(Q, b_ref, ftab)
    jump_b = bf[:, 0] - bf[:, 1]
    mean_b = 0.5 * (bf[:, 0] + bf[:, 1])
    traces = ftab.dg[maps.edges, maps.reversed_.astype(int)]  # (nf, 2, 3, nq)
    nf = disc.mesh.num_facets
    fdof = np.arange(3 * nf, dtype=np.int64).reshape(nf, 3)
    for side, orient in ((0, 1.0), (1, -1.0)):
        tr = traces[:, side]
        block1 = 0.5 * np.einsum("q,jq,fq,fkq->fjk", ftab.weights, ftab.flux,
                                 jump_b, tr)
        block2 = 0.5 * orient * np.einsum("q,jq,fq,fkq->fjk", ftab.weights,
                                          ftab.flux, mean_b, tr)
        rows.append(np.repeat(fdof, 3, axis=1).ravel())
        cols.append(np.tile(Q.cell_dofs[maps.cells[:, side]], (1, 3)).ravel())
        vals1.append(block1.ravel())
        vals2.append(block2.ravel())

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    shape = (V.ndofs, Q.ndofs)
    P1 = sp.coo_matrix((np.concatenate(vals1), (rows, cols)), shape=shape).tocsr()
    P2 = sp.coo_matrix((np.concatenate(vals2), (rows, cols)), shape=shape).tocsr()
    return P1, P2


def _block_diag(Q, blocks):
    rows = np.repeat(Q.cell_dofs, 3, axis=1).ravel()
    cols = np.tile(Q.cell_dofs, (1, 3)).ravel()
    return sp.coo_matrix((blocks.ravel(), (rows, cols)),
                         shape=(Q.ndofs, Q.ndofs)).tocsr()


def _apply_blocks(blocks, x):
    return np.einsum("cij,cj->ci", blocks, x.reshape(-1, 3)).ravel()


@dataclass
class QuasiNewtonOperator:
    """Factorized implicit update about the resting reference state.

    Thermal frameworks carry the buoyancy increment implicitly: it is
    eliminated from the velocity row and reconstructed after each solve.
    ``matrix`` is kept for verification; ``lu`` does the work.

    Every linearised term carries the full dt even though the residual it
    preconditions comes from a half-dt forcing step. The heavier operator
    under-relaxes the inner iteration, which is what keeps it from
    walking toward the frozen-transport fixed point (depth explicit in
    velocity, unstable for fast waves); with dt/2 weights the iteration
    converges there and multi-day runs blow up within tens of steps.
    """

    matrix: sp.spmatrix
    lu: object
    M1: sp.spmatrix
    M2: sp.spmatrix
    mass_inv: np.ndarray
    K: sp.spmatrix | None
    A: sp.spmatrix | None
    dt: float
    prognostic_buoyancy: bool

    def solve(self, u_r, D_r, b_r=None):
        """Increments (du, dD, db) from the current residuals; db is None
        when the buoyancy is not prognostic."""
        nu = self.M1.shape[0]
        rhs_u = self.M1 @ u_r
        if self.prognostic_buoyancy:
            if b_r is None:
                raise ConfigError("thermal operator needs a buoyancy residual")
            rhs_u = rhs_u + 0.5 * self.dt * (self.K @ b_r)
        rhs = np.concatenate([rhs_u, self.M2 @ D_r])
        sol = self.lu.solve(rhs)
        du = sol[:nu]
        dD = sol[nu:]
        if not self.prognostic_buoyancy:
            return du, dD, None
        db = self.dt * _apply_blocks(self.mass_inv, self.A @ du) + b_r
        return du, dD, db


def build_quasi_newton_operator(disc, H, b_ref, dt, cfg, f_cell=None,
                                gravity=GRAVITY):
    """Assemble and factorize the implicit update operator.

    H is the constant reference depth, b_ref the reference buoyancy dofs
    (ignored without a prognostic buoyancy). The velocity row keeps the
    Coriolis coupling implicit; the depth row carries H times the weak
    divergence. The buoyancy row is eliminated: its increment equals the
    residual minus dt times the velocity increment against the reference
    gradient, which both shrinks the solve and feeds a depth-like term
    back into the velocity block.
    """
    if not H > 0.0:
        raise ConfigError("reference depth must be positive")
    if f_cell is None:
        f_cell = coriolis_samples(disc)
    V, Q = disc.V, disc.Q
    M1 = assemble_hdiv_mass(V, disc.cell_degree)
    blocks = dg_mass_blocks(Q, disc.cell_degree)
    M2 = _block_diag(Q, blocks)
    mass_inv = np.linalg.inv(blocks)
    Cf = _coriolis_matrix(disc, f_cell)
    DL = _divergence_matrix(disc)

    if cfg.prognostic_buoyancy:
        if b_ref is None:
            raise ConfigError("thermal operator needs a reference buoyancy")
        P1, P2 = _pressure_coupling(disc, np.asarray(b_ref, dtype=float))
        A = (-2.0 * P2.T).tocsr()
        K = (H * DL.T).tocsr()
        Minv = _block_diag(Q, mass_inv)
        upper_left = M1 + dt * Cf - 0.5 * dt * dt * (K @ (Minv @ A))
        coupling = dt * (P1 + P2)
    else:
        A = None
        K = None
        upper_left = M1 + dt * Cf
        coupling = (-dt * gravity) * DL.T
    S = sp.bmat([[upper_left, coupling], [dt * H * DL, M2]], format="csc")
    try:
        lu = spla.splu(S)
    except RuntimeError as exc:
        raise SolverError(f"implicit operator factorization failed: {exc}") from exc
    return QuasiNewtonOperator(matrix=S, lu=lu, M1=M1, M2=M2, mass_inv=mass_inv,
                               K=K, A=A, dt=dt,
                               prognostic_buoyancy=cfg.prognostic_buoyancy)


class Stepper:
    """Owns the per-run factorizations and advances states step by step.

    ``physics=None`` runs dry dynamics; otherwise the configured moisture
    scheme is applied at the end of every step. Topography and the frozen
    saturation exponent, when present, must be the fields the initial
    state was built with.
    """

    def __init__(self, disc, cfg, solver, *, B=None, theta=None, f_cell=None,
                 physics=None, gravity=GRAVITY):
        if solver.reference_depth is None:
            raise ConfigError("the linear operator needs a reference depth")
        if cfg.prognostic_buoyancy and solver.b_ref is None:
            raise ConfigError("thermal frameworks need b_ref in the solver config")
        self.disc = disc
        self.cfg = cfg
        self.solver = solver
        self.physics = physics
        self.B = None if B is None else np.asarray(B, dtype=float)
        self.theta = None if theta is None else np.asarray(theta, dtype=float)
        if (physics is not None and cfg.depth_dependent_saturation_only
                and self.theta is None):
            raise ConfigError("depth-only saturation needs the frozen theta field")
        if f_cell is None:
            f_cell = coriolis_samples(disc)
        self.static = StaticForcing.build(disc, B_vec=self.B, f_cell=f_cell)
        self.constant_buoyancy = None if cfg.prognostic_buoyancy else gravity
        self._mass = assemble_hdiv_mass(disc.V, disc.cell_degree)
        self._mass_solver = MassSolver(self._mass, method="direct")
        self._precond = spla.LinearOperator(self._mass.shape,
                                            matvec=self._mass_solver.solve)
        self._mass_inv = np.linalg.inv(dg_mass_blocks(disc.Q, disc.cell_degree))
        self.operator = build_quasi_newton_operator(
            disc, solver.reference_depth, solver.b_ref, solver.dt, cfg,
            f_cell=f_cell, gravity=gravity)
        self.steps_taken = 0
        self.last_courant = 0.0
        self.last_residuals = []

    def _half_forcing(self, base_u, u, D, b):
        F = forcing_residual(self.disc, u, D, b, self.static,
                             constant_buoyancy=self.constant_buoyancy)
        return base_u + 0.5 * self.solver.dt * self._mass_solver.solve(F)

    def step(self, state):
        """Advance one step and return the new state; the input is untouched."""
        disc, cfg, sol = self.disc, self.cfg, self.solver
        dt = sol.dt
        time = self.steps_taken * dt
        phase = "explicit forcing"
        residuals = []
        try:
            u1 = state.u.copy()
            D1 = state.D.copy()
            b1 = state.b.copy()
            qv1 = state.qv
            qc1 = state.qc
            u_fe = self._half_forcing(state.u, state.u, state.D, state.b)
            for outer in range(sol.outer_iterations):
                phase = f"outer {outer} transport"
                ubar = 0.5 * (u1 + state.u)
                self.last_courant = c = courant_number(disc, ubar, dt)
                if c > 0.5:
                    logger.warning("step %d: advective Courant number %.3f",
                                   self.steps_taken, c)
                cons, adv = transport_matrices(disc, ubar)
                kw = dict(mass_inv=self._mass_inv, check_courant=False,
                          limiter=sol.limiter)
                D_T = ssprk3_transport(disc, state.D, ubar, dt, matrix=cons,
                                       label="depth", mass_inv=self._mass_inv,
                                       check_courant=False, limiter=False)
                if cfg.prognostic_buoyancy:
                    b_T = ssprk3_transport(disc, state.b, ubar, dt, matrix=adv,
                                           label="buoyancy", **kw)
                else:
                    b_T = state.b
                qv1 = ssprk3_transport(disc, state.qv, ubar, dt, matrix=adv,
                                       label="vapour", **kw)
                qc1 = ssprk3_transport(disc, state.qc, ubar, dt, matrix=adv,
                                       label="cloud", **kw)
                phase = f"outer {outer} velocity transport"
                u_T = implicit_midpoint_u(disc, u_fe, ubar, dt, mass=self._mass,
                                          precond=self._precond,
                                          transport=VelocityTransport(disc, ubar))
                prev = None
                for inner in range(sol.inner_iterations):
                    phase = f"outer {outer} inner {inner} solve"
                    u_fi = self._half_forcing(u_T, u1, D1, b1)
                    u_r = u_fi - u1
                    D_r = D_T - D1
                    b_r = b_T - b1 if cfg.prognostic_buoyancy else None
                    res = np.dot(u_r, u_r) + np.dot(D_r, D_r)
                    if b_r is not None:
                        res += np.dot(b_r, b_r)
                    res = float(np.sqrt(res))
                    if prev is not None and res > prev:
                        logger.warning(
                            "step %d outer %d inner %d: residual grew %.3e -> %.3e",
                            self.steps_taken, outer, inner, prev, res)
                    prev = res
                    residuals.append(res)
                    du, dD, db = self.operator.solve(u_r, D_r, b_r)
                    u1 += du
                    D1 += dD
                    if cfg.prognostic_buoyancy:
                        b1 += db
            phase = "physics"
            new = State(u=u1, D=D1, b=b1, qv=qv1, qc=qc1, qr=state.qr.copy())
            if self.physics is not None:
                new = physics_step(new, dt, self.physics, cfg,
                                   B=0.0 if self.B is None else self.B,
                                   theta=self.theta)
            for name in ("u", "D", "b", "qv", "qc", "qr"):
                if not np.isfinite(getattr(new, name)).all():
                    raise InstabilityError(f"non-finite {name} at end of step")
        except (SolverError, InstabilityError, StateValidityError) as exc:
            raise type(exc)(
                f"step {self.steps_taken} (t = {time:.6g} s), {phase}: {exc}"
            ) from exc
        self.steps_taken += 1
        self.last_residuals = residuals
        return new
