"""Slow, loop-based reference evaluations of the dynamics weak forms.

Everything here works in physical coordinates: velocities are pushed
through the Piola map pointwise, scalar traces on facets come from
barycentric inversion of the physical point in each adjacent cell, and
cross products use the actual cell normal. No orientation tables, no
reference-tensor contractions, no shared-frame shortcuts; agreement with
the optimized assembly validates exactly those parts.
"""

import numpy as np

from moistswe.elements import dg_linear, hdiv_quadratic, legendre01
from moistswe.femcore import dof_coefficients
from moistswe.quadrature import interval_rule, triangle_rule


def _cell_frames(mesh):
    coords = mesh.cell_coords
    e1 = coords[:, 1] - coords[:, 0]
    e2 = coords[:, 2] - coords[:, 0]
    cr = np.cross(e1, e2)
    detJ = np.linalg.norm(cr, axis=1)
    khat = cr / detJ[:, None]
    E = np.stack([e1, e2], axis=2)
    cinv = np.linalg.inv(np.einsum("cia,cib->cab", E, E))
    return coords, E, detJ, khat, cinv


def _invert_point(coords_c, E_c, cinv_c, x):
    """Reference coordinates of physical point x inside cell c."""
    return cinv_c @ (E_c.T @ (x - coords_c[0]))


def _facet_points(mesh, nq_t):
    """Physical Gauss points along each facet in the global direction."""
    t, wt = interval_rule(nq_t)
    f = mesh.facets
    va = mesh.cells[f[:, 0], (f[:, 1] + 1) % 3]
    vb = mesh.cells[f[:, 0], (f[:, 1] + 2) % 3]
    lo = np.minimum(va, vb)
    hi = np.maximum(va, vb)
    a = mesh.vertices[lo]
    b = mesh.vertices[hi]
    pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    return t, wt, pts, np.linalg.norm(b - a, axis=1)


def brute_forcing(disc, u, D, b, B_vec, f_fn, constant_buoyancy=None):
    mesh = disc.mesh
    hq = hdiv_quadratic()
    dg = dg_linear()
    pts, w = triangle_rule(disc.cell_degree)
    psi = hq.values(pts)
    dpsi = hq.divergence(pts)
    lam = dg.values(pts)
    lgrad = dg.gradients()

    coords, E, detJ, khat, cinv = _cell_frames(mesh)
    coef_u = dof_coefficients(disc.V, u)
    Dp = D[disc.Q.cell_dofs]
    bp = b[disc.Q.cell_dofs]
    Bp = None if B_vec is None else B_vec[disc.Q.cell_dofs]

    rhs = np.zeros(disc.V.ndofs)
    for c in range(mesh.num_cells):
        x = coords[c, 0] + pts @ E[c].T
        fvals = f_fn(x)
        local = np.zeros(12)
        for q in range(w.size):
            u_phys = E[c] @ (coef_u[c] @ psi[:, q, :]) / detJ[c]
            psi_phys = (E[c] @ psi[:, q, :].T).T / detJ[c]
            div_phys = dpsi[:, q] / detJ[c]
            local -= w[q] * detJ[c] * fvals[q] * psi_phys @ np.cross(khat[c], u_phys)

            Dq = Dp[c] @ lam[:, q]
            depth = Dq + (0.0 if Bp is None else Bp[c] @ lam[:, q])
            if constant_buoyancy is not None:
                local += w[q] * detJ[c] * constant_buoyancy * depth * div_phys
                continue
            bq = bp[c] @ lam[:, q]
            grad_b = E[c] @ cinv[c] @ (bp[c] @ lgrad)
            grad_D = E[c] @ cinv[c] @ (Dp[c] @ lgrad)
            local += w[q] * detJ[c] * depth * (bq * div_phys + psi_phys @ grad_b)
            local += w[q] * detJ[c] * 0.5 * bq * (Dq * div_phys + psi_phys @ grad_D)
        rhs[disc.V.cell_dofs[c]] += disc.V.cell_signs[c] * local

    if constant_buoyancy is not None:
        return rhs

    t, wt, fpts, _ = _facet_points(mesh, disc.facet_degree)
    leg = np.array([(2 * j + 1) * legendre01(j, t) for j in range(3)])
    for f in range(mesh.num_facets):
        cp, kp, cm, km = mesh.facets[f]
        acc = np.zeros(3)
        for q in range(t.size):
            vals = {}
            for side, c in (("p", cp), ("m", cm)):
                xi = _invert_point(coords[c], E[c], cinv[c], fpts[f, q])
                lam_e = np.array([1.0 - xi[0] - xi[1], xi[0], xi[1]])
                vals[side] = (
                    Dp[c] @ lam_e,
                    bp[c] @ lam_e,
                    0.0 if Bp is None else Bp[c] @ lam_e,
                )
            Dp_, bp_, Bp_ = vals["p"]
            Dm_, bm_, Bm_ = vals["m"]
            depth_mean = 0.5 * (Dp_ + Dm_) + 0.5 * (Bp_ + Bm_)
            integrand = depth_mean * (bp_ - bm_) + 0.25 * (bp_ + bm_) * (Dp_ - Dm_)
            acc -= wt[q] * integrand * leg[:, q]
        rhs[3 * f : 3 * f + 3] += acc
    return rhs


def _side_scalar_trace(mesh, coords, E, cinv, dofs_c, x):
    xi = _invert_point(coords, E, cinv, x)
    lam = np.array([1.0 - xi[0] - xi[1], xi[0], xi[1]])
    return dofs_c @ lam, lam


def brute_transport_tendency(disc, ubar, q_vec, conservative):
    """<phi_i, L q> for a frozen ubar, via physical-space evaluation."""
    mesh = disc.mesh
    hq = hdiv_quadratic()
    dg = dg_linear()
    pts, w = triangle_rule(disc.cell_degree)
    psi = hq.values(pts)
    dpsi = hq.divergence(pts)
    lam = dg.values(pts)
    lgrad = dg.gradients()

    coords, E, detJ, khat, cinv = _cell_frames(mesh)
    coef_bar = dof_coefficients(disc.V, ubar)
    qp = q_vec[disc.Q.cell_dofs]

    out = np.zeros(disc.Q.ndofs)
    for c in range(mesh.num_cells):
        local = np.zeros(3)
        for k in range(w.size):
            ub = E[c] @ (coef_bar[c] @ psi[:, k, :]) / detJ[c]
            qv = qp[c] @ lam[:, k]
            grad_phi = (E[c] @ cinv[c] @ lgrad.T).T   # (3, 3) rows per dof
            local += w[k] * detJ[c] * qv * grad_phi @ ub
            if not conservative:
                div_b = (coef_bar[c] @ dpsi[:, k]) / detJ[c]
                local += w[k] * detJ[c] * (qp[c] @ lam[:, k]) * div_b * lam[:, k]
        out[disc.Q.cell_dofs[c]] += local

    t, wt, fpts, seg_len = _facet_points(mesh, disc.facet_degree)
    for f in range(mesh.num_facets):
        cp, kp, cm, km = mesh.facets[f]
        # the + side's in-plane outward normal on this edge
        a = mesh.cell_coords[cp, (kp + 1) % 3]
        bpt = mesh.cell_coords[cp, (kp + 2) % 3]
        tan = (bpt - a) / np.linalg.norm(bpt - a)
        n_out = np.cross(tan, khat[cp])
        accp = np.zeros(3)
        accm = np.zeros(3)
        for qi in range(t.size):
            x = fpts[f, qi]
            xi_p = _invert_point(coords[cp], E[cp], cinv[cp], x)
            ub_hat = coef_bar[cp] @ hq.values(xi_p[None, :])[:, 0, :]
            ub_phys = E[cp] @ ub_hat / detJ[cp]
            vdens = (ub_phys @ n_out) * seg_len[f]
            qv_p, lam_p = _side_scalar_trace(mesh, coords[cp], E[cp], cinv[cp], qp[cp], x)
            qv_m, lam_m = _side_scalar_trace(mesh, coords[cm], E[cm], cinv[cm], qp[cm], x)
            if vdens > 0:
                qt = qv_p
            elif vdens < 0:
                qt = qv_m
            else:
                qt = 0.5 * (qv_p + qv_m)
            accp -= wt[qi] * qt * vdens * lam_p
            accm += wt[qi] * qt * vdens * lam_m
        out[disc.Q.cell_dofs[cp]] += accp
        out[disc.Q.cell_dofs[cm]] += accm
    return out


def brute_velocity_transport(disc, ubar, u, fd_step=1e-6):
    """<w_i, zeta(u) perp(ubar) + grad(u . ubar / 2)> by slow assembly.

    The gradient of the test scalar w_i . perp(ubar) is taken by central
    differences in reference coordinates, so agreement is FD-limited.
    """
    mesh = disc.mesh
    hq = hdiv_quadratic()
    pts, w = triangle_rule(disc.cell_degree)
    psi = hq.values(pts)
    dpsi = hq.divergence(pts)

    coords, E, detJ, khat, cinv = _cell_frames(mesh)
    coef_bar = dof_coefficients(disc.V, ubar)
    coef_u = dof_coefficients(disc.V, u)

    def scalar_S(c, eval_pts):
        """w_i . perp(ubar) at reference points, (12, n)."""
        vals = hq.values(eval_pts)                      # (12, n, 2)
        ub = np.einsum("i,inb->nb", coef_bar[c], vals)  # ubar-hat
        ub_phys = np.einsum("xa,na->nx", E[c], ub) / detJ[c]
        perp = np.cross(khat[c][None, :], ub_phys)
        w_phys = np.einsum("xa,ina->inx", E[c], vals) / detJ[c]
        return np.einsum("inx,nx->in", w_phys, perp)

    out = np.zeros(disc.V.ndofs)
    h = fd_step
    for c in range(mesh.num_cells):
        local = np.zeros(12)
        Sx = (scalar_S(c, pts + [h, 0]) - scalar_S(c, pts - [h, 0])) / (2 * h)
        Sy = (scalar_S(c, pts + [0, h]) - scalar_S(c, pts - [0, h])) / (2 * h)
        dS_ref = np.stack([Sx, Sy], axis=2)             # (12, nq, 2)
        grad_S = np.einsum("xa,ab,inb->inx", E[c], cinv[c], dS_ref)
        for q in range(w.size):
            u_phys = E[c] @ (coef_u[c] @ psi[:, q, :]) / detJ[c]
            ub_phys = E[c] @ (coef_bar[c] @ psi[:, q, :]) / detJ[c]
            perp_u = np.cross(khat[c], u_phys)
            local += w[q] * detJ[c] * grad_S[:, q, :] @ perp_u
            ke = u_phys @ ub_phys
            local -= 0.5 * w[q] * ke * dpsi[:, q]       # detJ cancels
        out[disc.V.cell_dofs[c]] += disc.V.cell_signs[c] * local

    t, wt, fpts, seg_len = _facet_points(mesh, disc.facet_degree)
    for f in range(mesh.num_facets):
        cp, kp, cm, km = mesh.facets[f]
        sides = ((cp, kp, 1.0), (cm, km, -1.0))
        # + side outward normal fixes the upwind direction
        a = mesh.cell_coords[cp, (kp + 1) % 3]
        bpt = mesh.cell_coords[cp, (kp + 2) % 3]
        tan_p = (bpt - a) / np.linalg.norm(bpt - a)
        n_out = np.cross(tan_p, khat[cp])
        for qi in range(t.size):
            x = fpts[f, qi]
            phys = {}
            for c, k, _ in sides:
                xi = _invert_point(coords[c], E[c], cinv[c], x)
                vals = hq.values(xi[None, :])[:, 0, :]
                phys[c] = (
                    E[c] @ (coef_u[c] @ vals) / detJ[c],
                    E[c] @ (coef_bar[c] @ vals) / detJ[c],
                    (E[c] @ vals.T).T / detJ[c],
                )
            vdens = phys[cp][1] @ n_out
            if vdens > 0:
                ut = phys[cp][0]
            elif vdens < 0:
                ut = phys[cm][0]
            else:
                ut = 0.5 * (phys[cp][0] + phys[cm][0])
            for c, k, _ in sides:
                va = mesh.cell_coords[c, (k + 1) % 3]
                vb = mesh.cell_coords[c, (k + 2) % 3]
                tan_c = (vb - va) / np.linalg.norm(vb - va)
                perp_ub = np.cross(khat[c], phys[c][1])
                wperp = phys[c][2] @ perp_ub
                contrib = wt[qi] * seg_len[f] * (ut @ tan_c) * wperp
                out[disc.V.cell_dofs[c]] += disc.V.cell_signs[c] * contrib
    return out
