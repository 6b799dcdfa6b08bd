"""Initial-condition construction for the three standard experiments."""

import numpy as np
import pytest

from moistswe.constants import GRAVITY, OMEGA, EARTH_RADIUS
from moistswe.dynamics import (
    Discretisation,
    Framework,
    FrameworkConfig,
    StaticForcing,
    VelocityTransport,
    forcing_residual,
)
from moistswe.errors import ConfigError
from moistswe.meshes import build_icosahedral_sphere
from moistswe.physics import PhysicsParams, saturation
from moistswe.testcases import (
    CaseSetup,
    JetProfile,
    Case,
    case_spec,
    dof_lonlat,
    galewsky_balance_depth,
    init_mountain,
    init_steady_state,
    init_unstable_jet,
    initial_state,
    jet_velocity,
    mountain_topography,
    theta_background,
)

MC = FrameworkConfig(Framework.MOIST_CONVECTIVE)
MCT = FrameworkConfig(Framework.MOIST_CONVECTIVE_THERMAL)
MT = FrameworkConfig(Framework.MOIST_THERMAL)
MCPT = FrameworkConfig(Framework.MOIST_CONVECTIVE_PSEUDO_THERMAL)


def _disc(level, radius=EARTH_RADIUS):
    return Discretisation(build_icosahedral_sphere(level, radius))


def test_factory_defaults_and_validation():
    steady = case_spec("steady-state")
    assert steady.name is Case.STEADY_STATE
    assert steady.level == 3 and steady.days == 5.0
    assert steady.q0 == 0.007 and steady.xi == 0.0
    assert steady.H == 3.0e4 / GRAVITY
    assert steady.advective_speed == 20.0

    mountain = case_spec("mountain")
    assert mountain.level == 5 and mountain.days == 50.0
    assert mountain.H == 5960.0 and mountain.xi == 0.02
    assert mountain.mountain_h0 == 2000.0
    assert mountain.mountain_radius == pytest.approx(np.pi / 9)
    assert mountain.mountain_lon == pytest.approx(3 * np.pi / 2)
    assert mountain.mountain_lat == pytest.approx(np.pi / 6)

    jet = case_spec(Case.UNSTABLE_JET)
    assert jet.level == 6 and jet.days == 6.0
    assert jet.q0 == 0.0027 and jet.H == 1.0e4
    assert jet.advective_speed == 80.0
    p = jet.jet
    assert p.u_max == 80.0 and p.h_hat == 120.0 and p.delta_b == 1.0
    assert p.phi0 == pytest.approx(np.pi / 7)
    assert p.phi1 == pytest.approx(np.pi / 2 - np.pi / 7)
    assert (p.alpha, p.beta) == (1.0 / 3.0, 1.0 / 15.0)
    assert p.phi2 == pytest.approx(np.pi / 4)
    assert p.normalization == pytest.approx(np.exp(-4.0 / (p.phi1 - p.phi0) ** 2))

    # derived flow constants
    assert steady.flow_omega == pytest.approx(OMEGA * EARTH_RADIUS * 20.0 + 200.0)
    assert steady.flow_sigma == pytest.approx(steady.flow_omega / 10.0)
    assert steady.theta0 == pytest.approx(3.0e6, rel=1e-12)

    override = case_spec("mountain", level=3, days=15.0, q0=0.01)
    assert (override.level, override.days, override.q0) == (3, 15.0, 0.01)
    assert override.H == 5960.0

    with pytest.raises(ValueError):
        case_spec("no-such-case")
    for bad in (
        dict(level=-1),
        dict(days=0.0),
        dict(H=-5.0),
        dict(xi=1.0),
        dict(xi=-0.1),
        dict(dt=0.0),
        dict(q0=-1.0),
        dict(mountain_radius=0.0),
    ):
        with pytest.raises(ConfigError):
            case_spec("mountain", **bad)
    for bad in (
        dict(phi0=1.0, phi1=0.5),
        dict(phi0=-2.0),
        dict(u_max=-1.0),
        dict(alpha=0.0),
        dict(beta=-1.0),
        dict(delta_b=-0.1),
    ):
        with pytest.raises(ConfigError):
            JetProfile(**bad)


def test_theta_background_examples():
    spec = case_spec("steady-state")
    ws = spec.flow_omega + spec.flow_sigma
    g0 = spec.geopotential0

    polar = theta_background(np.pi / 2, spec)
    assert polar == pytest.approx(spec.theta0 / (g0 - ws) ** 2, rel=1e-13)

    equator = theta_background(0.0, spec)
    expected = (spec.theta0 + spec.flow_sigma * (ws + 2.0 * (g0 - ws))) / g0**2
    assert equator == pytest.approx(expected, rel=1e-13)

    rng = np.random.default_rng(3)
    lats = rng.uniform(0.0, np.pi / 2, 64)
    assert np.array_equal(theta_background(lats, spec), theta_background(-lats, spec))

    dense = np.linspace(-np.pi / 2, np.pi / 2, 2001)
    theta = theta_background(dense, spec)
    assert theta.min() > 0.007 and theta.max() < 0.06

    # completed-square form of the denominator as an independent arrangement
    num = spec.theta0 + spec.flow_sigma * np.cos(dense) ** 2 * (
        ws * np.cos(dense) ** 2 + 2.0 * (g0 - ws)
    )
    alt = num / (g0 - ws * np.sin(dense) ** 2) ** 2
    assert np.allclose(theta, alt, rtol=1e-12, atol=0.0)


def test_mountain_topography_examples():
    spec = case_spec("mountain")
    lc, pc = spec.mountain_lon, spec.mountain_lat
    assert mountain_topography(lc, pc, spec) == 2000.0
    # the center longitude is equivalently -pi/2 after wrapping
    assert mountain_topography(-np.pi / 2, pc, spec) == pytest.approx(2000.0)
    assert mountain_topography(lc - np.pi / 18, pc, spec) == pytest.approx(1000.0)
    # half-radius offset reached through the wrap seam
    assert mountain_topography(-np.pi / 2 + np.pi / 18, pc, spec) == pytest.approx(
        1000.0
    )
    assert mountain_topography(lc + np.pi / 9, pc, spec) == pytest.approx(0.0, abs=1e-9)
    assert mountain_topography(np.pi / 2, -pc, spec) == 0.0
    lon = np.array([lc, 0.0, lc])
    lat = np.array([pc, 0.0, pc - np.pi / 9])
    B = mountain_topography(lon, lat, spec)
    assert B.shape == (3,) and B[0] == 2000.0 and B[1] == 0.0
    assert B[2] == pytest.approx(0.0, abs=1e-9)


def test_steady_state_thermal_fields():
    spec = case_spec("steady-state")
    disc = _disc(2)
    setup = init_steady_state(MCT, spec, disc)
    st = setup.state
    lon, lat = dof_lonlat(disc)
    g = spec.gravity
    ws = spec.flow_omega + spec.flow_sigma

    # depth against the coordinates directly, not through the lonlat path
    xyz = disc.mesh.cell_coords.reshape(-1, 3)
    sin_lat = xyz[:, 2] / np.linalg.norm(xyz, axis=1)
    assert np.allclose(st.D, spec.H - ws * sin_lat**2 / g, rtol=1e-12)

    equator = lat == 0.0
    assert equator.sum() > 0
    assert np.all(st.D[equator] == spec.H)
    assert np.allclose(st.b[equator], g * (1.0 - theta_background(0.0, spec)))
    assert np.array_equal(st.b, g * (1.0 - theta_background(lat, spec)))

    # xi = 0 means vapour sits exactly at saturation
    params = PhysicsParams(q0=spec.q0, H=spec.H)
    qsat = saturation(st.D, st.b, 0.0, params, MCT)
    assert np.array_equal(st.qv, qsat)
    assert not st.qc.any() and not st.qr.any()
    assert 0.015 < st.qv.max() < 0.025

    assert setup.B is None and setup.theta is None
    assert setup.f_cell.shape == (disc.mesh.num_cells, disc.ctab.weights.size)

    # zonal symmetry: dofs sharing a latitude share field values
    rounded = np.round(lat, 12)
    for value in np.unique(rounded)[::5]:
        group = rounded == value
        assert np.ptp(st.D[group]) < 1e-8
        assert np.ptp(st.b[group]) < 1e-12

    # the beta gating does not touch initial data
    other = init_steady_state(MT, spec, disc)
    for name in ("D", "b", "qv"):
        assert np.array_equal(getattr(other.state, name), getattr(st, name))
    assert np.array_equal(other.state.u, st.u)


def test_steady_state_convective_variants():
    spec = case_spec("steady-state")
    disc = _disc(2)
    thermal = init_steady_state(MCT, spec, disc).state
    _, lat = dof_lonlat(disc)
    g = spec.gravity

    mc = init_steady_state(MC, spec, disc)
    assert np.all(mc.state.b == g)
    assert np.array_equal(mc.theta, theta_background(lat, spec))
    # only the depth drops the sigma contribution
    gap = spec.flow_sigma * np.sin(lat) ** 2 / g
    assert np.allclose(mc.state.D - thermal.D, gap, rtol=0.0, atol=1e-9)
    expected = (spec.q0 * spec.H / mc.state.D) * np.exp(20.0 * mc.theta)
    assert np.allclose(mc.state.qv, expected, rtol=1e-14)

    ps = init_steady_state(MCPT, spec, disc)
    assert np.array_equal(ps.state.D, thermal.D)
    assert np.array_equal(ps.state.b, thermal.b)
    assert np.array_equal(ps.theta, theta_background(lat, spec))
    # frozen-theta saturation reproduces the buoyancy-based one
    assert np.allclose(ps.state.qv, thermal.qv, rtol=1e-12)
    assert np.array_equal(ps.state.u, thermal.u)


def test_mountain_fields():
    spec = case_spec("mountain", level=2)
    disc = _disc(2)
    lon, lat = dof_lonlat(disc)
    g = spec.gravity

    setup = init_mountain(MCT, spec, disc)
    st = setup.state
    ws = spec.flow_omega + spec.flow_sigma
    surface = spec.H - ws * np.sin(lat) ** 2 / g
    assert np.allclose(st.D + setup.B, surface, rtol=1e-13)
    assert np.array_equal(setup.B, mountain_topography(lon, lat, spec))
    assert setup.B.max() > 1500.0  # a dof lands near the peak at this level

    params = PhysicsParams(q0=spec.q0, H=spec.H, xi=spec.xi)
    qsat = saturation(st.D, st.b, setup.B, params, MCT)
    ratio = st.qv / qsat
    assert np.max(np.abs(ratio - 0.98)) < 1e-15

    mc = init_mountain(MC, spec, disc)
    assert np.allclose(
        mc.state.D + mc.B,
        spec.H - spec.flow_omega * np.sin(lat) ** 2 / g,
        rtol=1e-13,
    )

    # zero topography must reduce to the steady state with matched constants
    flat_spec = case_spec("mountain", level=2, mountain_h0=0.0)
    steady_spec = case_spec(
        "steady-state", level=2, days=flat_spec.days, H=5960.0, xi=0.02
    )
    flat = init_mountain(MCT, flat_spec, disc)
    steady = init_steady_state(MCT, steady_spec, disc)
    assert np.all(flat.B == 0.0)
    for name in ("u", "D", "b", "qv"):
        assert np.array_equal(getattr(flat.state, name), getattr(steady.state, name))

    with pytest.raises(ConfigError):
        init_mountain(MCT, case_spec("mountain", level=2, H=500.0), disc)


def test_jet_profile_shape():
    jet = JetProfile()
    edges = np.array([-np.pi / 2, jet.phi0, jet.phi1, np.pi / 2])
    assert np.all(jet_velocity(edges, jet) == 0.0)
    mid = 0.5 * (jet.phi0 + jet.phi1)
    assert jet_velocity(mid, jet) == pytest.approx(jet.u_max, rel=1e-10)
    inside = np.linspace(jet.phi0 + 0.01, jet.phi1 - 0.01, 50)
    assert np.all(jet_velocity(inside, jet) > 0.0)
    assert np.all(jet_velocity(inside, jet) <= jet.u_max)


def test_balance_depth_closed_forms():
    spec = case_spec("unstable-jet")
    g = spec.gravity
    H = spec.H
    query = np.linspace(-np.pi / 2, np.pi / 2, 101)

    def still(la):
        return np.zeros_like(la)

    flat = galewsky_balance_depth(still, H, spec, delta_b=0.0, panels=20_000)
    assert np.allclose(flat(query), H, rtol=1e-14)

    tilted = galewsky_balance_depth(still, H, spec, delta_b=1.0, panels=20_000)
    closed = H * np.sqrt(g - 1.0) / np.sqrt(g - np.cos(query))
    assert np.allclose(tilted(query), closed, rtol=1e-12)

    with pytest.raises(ConfigError):
        galewsky_balance_depth(np.ones_like, H, spec)
    with pytest.raises(ConfigError):
        galewsky_balance_depth(still, H, spec, panels=5000)
    with pytest.raises(ConfigError):
        galewsky_balance_depth(still, H, spec, delta_b=g)

    # quadrature self-convergence on the full jet
    jet = JetProfile()
    coarse = galewsky_balance_depth(jet, H, spec, panels=100_000)
    fine = galewsky_balance_depth(jet, H, spec, panels=200_000)
    diff = np.abs(coarse(query) - fine(query)) / np.abs(fine(query))
    assert diff.max() < 1e-8

    # depth drops from the south to the north side of a westerly jet
    profile = fine
    assert profile(jet.phi0 - 0.05) - profile(jet.phi1 + 0.05) > 500.0


def test_unstable_jet_fields():
    spec = case_spec("unstable-jet", level=2)
    disc = _disc(2)
    lon, lat = dof_lonlat(disc)
    jet = spec.jet
    g = spec.gravity

    setup = init_unstable_jet(MT, spec, disc)
    st = setup.state
    assert np.allclose(st.b, g - np.cos(lat), rtol=1e-15)
    # buoyancy range attained at the equator and pole dofs
    assert np.all((st.b >= g - 1.0 - 1e-12) & (st.b <= g + 1e-12))
    equator = lat == 0.0
    pole = np.abs(lat) == np.pi / 2
    assert equator.sum() > 0 and pole.sum() > 0
    assert np.allclose(st.b[equator], g - 1.0)
    assert np.max(np.abs(st.b[pole] - g)) < 1e-12

    # the bump dies out long before the equator, where the jet integral is 0
    assert np.allclose(st.D[equator], spec.H, rtol=1e-13)

    unspec = case_spec("unstable-jet", level=2, jet=JetProfile(h_hat=0.0))
    unperturbed = init_unstable_jet(MT, unspec, disc)
    bump = (
        jet.h_hat
        * np.cos(lat)
        * np.exp(-((lon / jet.alpha) ** 2))
        * np.exp(-(((jet.phi2 - lat) / jet.beta) ** 2))
    )
    assert np.allclose(st.D - unperturbed.state.D, bump, rtol=0.0, atol=1e-9)
    assert setup.theta is None

    profile = galewsky_balance_depth(JetProfile(h_hat=0.0), spec.H, spec)
    assert np.array_equal(unperturbed.state.D, profile(lat))

    mc = init_unstable_jet(MC, spec, disc)
    assert np.all(mc.state.b == g)
    assert np.allclose(mc.theta, np.cos(lat) / g, rtol=1e-15)
    south = lat <= 0.0
    assert np.allclose(mc.state.D[south], spec.H, rtol=1e-13)

    pseudo = init_unstable_jet(MCPT, spec, disc)
    assert np.array_equal(pseudo.state.D, st.D)
    assert np.array_equal(pseudo.state.b, st.b)
    assert np.allclose(pseudo.theta, np.cos(lat) / g, rtol=1e-15)
    assert np.allclose(pseudo.state.qv, st.qv, rtol=1e-12)

    for s in (st, mc.state, pseudo.state):
        assert 0.015 < s.qv.max() < 0.025
        assert not s.qc.any() and not s.qr.any()


def test_jet_discrete_balance_residual():
    # the unperturbed thermal jet should be steady: Coriolis plus pressure
    # forcing cancels the momentum transport up to discretisation error,
    # which shrinks with refinement (frozen measured levels: 0.098, 0.047)
    ratios = []
    for level in (4, 5):
        spec = case_spec("unstable-jet", level=level, jet=JetProfile(h_hat=0.0))
        disc = _disc(level)
        setup = init_unstable_jet(MT, spec, disc)
        st = setup.state
        static = StaticForcing.build(disc, f_cell=setup.f_cell)
        F = forcing_residual(disc, st.u, st.D, st.b, static)
        N = VelocityTransport(disc, st.u).apply(st.u)
        zero = np.zeros_like(st.D)
        coriolis = forcing_residual(disc, st.u, zero, zero, static)
        ratios.append(np.linalg.norm(F - N) / np.linalg.norm(coriolis))
    assert ratios[0] < 0.12
    assert ratios[1] < 0.06
    assert ratios[0] / ratios[1] > 1.6


@pytest.mark.parametrize("cfg", [MC, MCT, MT, MCPT], ids=lambda c: c.framework.value)
def test_all_cases_all_frameworks_invariants(cfg):
    disc = _disc(1)
    for case in Case:
        spec = case_spec(case, level=1)
        setup = initial_state(cfg, spec, disc)
        st = setup.state
        assert isinstance(setup, CaseSetup)
        for field in (st.u, st.D, st.b, st.qv):
            assert np.all(np.isfinite(field))
        assert np.all(st.D > 0.0)
        assert not st.qc.any() and not st.qr.any()
        assert np.all(st.qv >= 0.0)

        B = setup.B
        if case is Case.MOUNTAIN:
            assert B is not None and np.all(st.D + B > 0.0)
        else:
            assert B is None
        if cfg.depth_dependent_saturation_only:
            assert setup.theta is not None
        else:
            assert setup.theta is None

        params = PhysicsParams(q0=spec.q0, H=spec.H, xi=spec.xi)
        qsat = saturation(
            st.D, st.b, 0.0 if B is None else B, params, cfg, theta=setup.theta
        )
        assert np.all(st.qv <= qsat + 1e-18)
        assert 0.01 < st.qv.max() < 0.03

        again = initial_state(cfg, spec, disc)
        for name in ("u", "D", "b", "qv", "qc", "qr"):
            assert np.array_equal(getattr(again.state, name), getattr(st, name))


def test_dof_lonlat_shape_and_cache():
    disc = _disc(1)
    lon, lat = dof_lonlat(disc)
    ndofs = disc.mesh.num_cells * 3
    assert lon.shape == (ndofs,) and lat.shape == (ndofs,)
    assert dof_lonlat(disc) is disc.mesh._cache["dof_lonlat"]
    assert np.all(np.abs(lat) <= np.pi / 2)
    assert np.all((lon > -np.pi) & (lon <= np.pi))
