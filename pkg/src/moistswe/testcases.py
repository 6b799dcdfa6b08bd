"""Initial states for the three standard experiments in every framework.

Scalar fields are set nodally (the dof locations are mesh vertices), so
pointwise relations between them hold exactly at dofs: the vapour field is
a stated fraction of the saturation computed from the depth and buoyancy
dof values, and depth plus topography reproduces the smooth free surface.
Velocity is L2-projected into the flux space.

The three cases:

* steady zonal flow, the balanced state that should not move;
* the same flow impinging on an isolated conical mountain;
* a narrow mid-latitude jet whose balanced depth comes from a numerically
  integrated balance relation, optionally perturbed to trigger roll-up.

Frameworks without a prognostic buoyancy carry a constant-g buoyancy array
and a frozen latitude profile for their saturation function.  For the
zonal cases that profile keeps the full background structure even where
the depth drops the sigma term, so initial vapour looks alike across
frameworks.
"""

from dataclasses import dataclass, field, replace
import enum

import numpy as np
from scipy.integrate import cumulative_trapezoid

from moistswe.constants import EARTH_RADIUS, GRAVITY, OMEGA
from moistswe.dynamics import State, coriolis_samples
from moistswe.errors import ConfigError
from moistswe.femcore import project
from moistswe.meshes import lonlat_of
from moistswe.physics import PhysicsParams, saturation

__all__ = [
    "Case",
    "JetProfile",
    "TestCaseSpec",
    "case_spec",
    "CaseSetup",
    "theta_background",
    "jet_velocity",
    "mountain_topography",
    "galewsky_balance_depth",
    "init_steady_state",
    "init_mountain",
    "init_unstable_jet",
    "initial_state",
    "dof_lonlat",
]


class Case(enum.Enum):
    STEADY_STATE = "steady-state"
    MOUNTAIN = "mountain"
    UNSTABLE_JET = "unstable-jet"


@dataclass(frozen=True)
class JetProfile:
    """Zonal jet shape and the depth bump that destabilises it."""

    u_max: float = 80.0
    phi0: float = np.pi / 7
    phi1: float = np.pi / 2 - np.pi / 7
    h_hat: float = 120.0
    alpha: float = 1.0 / 3.0
    beta: float = 1.0 / 15.0
    phi2: float = np.pi / 4
    delta_b: float = 1.0

    def __post_init__(self):
        if not -np.pi / 2 < self.phi0 < self.phi1 < np.pi / 2:
            raise ConfigError("jet band must satisfy -pi/2 < phi0 < phi1 < pi/2")
        if self.u_max < 0.0:
            raise ConfigError("jet u_max must be nonnegative")
        if self.alpha <= 0.0 or self.beta <= 0.0:
            raise ConfigError("bump widths must be positive")
        if self.delta_b < 0.0:
            raise ConfigError("delta_b must be nonnegative")

    @property
    def normalization(self):
        """Peak factor so the profile maximum equals u_max."""
        return np.exp(-4.0 / (self.phi1 - self.phi0) ** 2)


@dataclass(frozen=True)
class TestCaseSpec:
    """Everything needed to build a case: constants picked per experiment."""

    name: Case
    level: int
    days: float
    q0: float
    H: float
    xi: float
    u0: float = 20.0
    geopotential0: float = 3.0e4
    epsilon: float = 1.0 / 300.0
    omega: float = OMEGA
    gravity: float = GRAVITY
    radius: float = EARTH_RADIUS
    coriolis: str = "sin"
    dt: float | None = None
    mountain_h0: float = 2000.0
    mountain_radius: float = np.pi / 9
    mountain_lon: float = 3 * np.pi / 2
    mountain_lat: float = np.pi / 6
    jet: JetProfile = field(default_factory=JetProfile)

    def __post_init__(self):
        if self.level < 0:
            raise ConfigError("mesh level must be nonnegative")
        if self.days <= 0.0:
            raise ConfigError("run length must be positive")
        if self.H <= 0.0:
            raise ConfigError("background depth must be positive")
        if self.q0 < 0.0:
            raise ConfigError("q0 must be nonnegative")
        if not 0.0 <= self.xi < 1.0:
            raise ConfigError("xi must lie in [0, 1)")
        if self.dt is not None and self.dt <= 0.0:
            raise ConfigError("dt must be positive when given")
        if self.mountain_radius <= 0.0:
            raise ConfigError("mountain radius must be positive")

    @property
    def flow_omega(self):
        """Speed scale of the zonal background, with units of geopotential."""
        return self.omega * self.radius * self.u0 + self.u0**2 / 2.0

    @property
    def flow_sigma(self):
        return self.flow_omega / 10.0

    @property
    def theta0(self):
        return self.epsilon * self.geopotential0**2

    @property
    def advective_speed(self):
        """Velocity scale for Courant-targeted timestep choices.

        The mountain flow accelerates to roughly 2.5x the initial wind as it
        is squeezed around the obstacle, so the timestep budget must absorb
        that peak rather than the t=0 speed; the other cases stay near their
        initial maxima throughout.
        """
        if self.name is Case.UNSTABLE_JET:
            return self.jet.u_max
        if self.name is Case.MOUNTAIN:
            return 2.5 * self.u0
        return self.u0

    def physics_params(self, **overrides):
        base = dict(q0=self.q0, H=self.H, xi=self.xi)
        base.update(overrides)
        return PhysicsParams(**base)


_CASE_DEFAULTS = {
    Case.STEADY_STATE: dict(level=3, days=5.0, q0=0.007, xi=0.0),
    Case.MOUNTAIN: dict(level=5, days=50.0, q0=0.007, xi=0.02, H=5960.0),
    Case.UNSTABLE_JET: dict(level=6, days=6.0, q0=0.0027, xi=0.02, H=1.0e4),
}


def case_spec(case, **overrides):
    """Spec for a named case with its standard constants, overridable.

    ``jet_h_hat`` is accepted as a shorthand for replacing the jet
    profile's perturbation amplitude; zero gives the balanced jet.
    """
    case = Case(case)
    kwargs = dict(_CASE_DEFAULTS[case])
    kwargs.update(overrides)
    h_hat = kwargs.pop("jet_h_hat", None)
    if h_hat is not None:
        kwargs["jet"] = replace(kwargs.get("jet", JetProfile()), h_hat=h_hat)
    if "H" not in kwargs:
        # the steady state pins its depth to the background geopotential
        g = kwargs.get("gravity", GRAVITY)
        kwargs["H"] = kwargs.get("geopotential0", 3.0e4) / g
    return TestCaseSpec(name=case, **kwargs)


@dataclass
class CaseSetup:
    """Initial state plus the fixed fields a run needs alongside it."""

    spec: TestCaseSpec
    state: State
    B: np.ndarray | None
    theta: np.ndarray | None
    f_cell: np.ndarray


def dof_lonlat(disc):
    """Longitude and latitude of every scalar dof, cached on the mesh."""
    cached = disc.mesh._cache.get("dof_lonlat")
    if cached is None:
        lon, lat = lonlat_of(disc.mesh.cell_coords.reshape(-1, 3))
        cached = (lon, lat)
        disc.mesh._cache["dof_lonlat"] = cached
    return cached


def theta_background(lat, spec):
    """Background latitude profile entering the depth-only saturation."""
    lat = np.asarray(lat, dtype=float)
    ws = spec.flow_omega + spec.flow_sigma
    g0 = spec.geopotential0
    c2 = np.cos(lat) ** 2
    s2 = np.sin(lat) ** 2
    num = spec.theta0 + spec.flow_sigma * c2 * (ws * c2 + 2.0 * (g0 - ws))
    den = g0**2 + ws**2 * s2**2 - 2.0 * g0 * ws * s2
    return num / den


def jet_velocity(lat, jet):
    """Zonal speed of the jet: a compact bump supported on (phi0, phi1)."""
    lat = np.asarray(lat, dtype=float)
    out = np.zeros_like(lat)
    inside = (lat > jet.phi0) & (lat < jet.phi1)
    x = lat[inside]
    out[inside] = (jet.u_max / jet.normalization) * np.exp(
        1.0 / ((x - jet.phi0) * (x - jet.phi1))
    )
    return out


def _wrap_angle(x):
    """Into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(x, dtype=float), 2.0 * np.pi)


def mountain_topography(lon, lat, spec):
    """Conical hill of height h0 inside an angular radius, minimal image."""
    dlon = _wrap_angle(np.asarray(lon, dtype=float) - spec.mountain_lon)
    dlat = np.asarray(lat, dtype=float) - spec.mountain_lat
    r = np.hypot(dlon, dlat)
    return spec.mountain_h0 * (
        1.0 - np.minimum(spec.mountain_radius, r) / spec.mountain_radius
    )


def galewsky_balance_depth(profile, H, spec, delta_b=None, panels=200_000):
    """Depth profile balancing a zonal jet, as a callable of latitude.

    ``profile`` is a :class:`JetProfile` or any callable mapping latitude
    to zonal speed; the speed must vanish at both poles so the integrand
    (which carries a tan factor) stays finite.  Integrates the balance
    relation from the south pole with an integrating factor of
    sqrt(g - delta_b cos(lat)); the integration constant is H times the
    factor's polar value, so a zero jet returns the constant H for any
    delta_b = 0, and delta_b = 0 with a jet gives the dry balance used
    by the framework without a buoyancy field.
    """
    if isinstance(profile, JetProfile):
        if delta_b is None:
            delta_b = profile.delta_b
        jet = profile

        def u_fn(la):
            return jet_velocity(la, jet)

    else:
        u_fn = profile
        if delta_b is None:
            delta_b = 0.0
    if panels < 10_000:
        raise ConfigError("balance integral needs at least 10000 panels")
    g = spec.gravity
    if delta_b >= g:
        raise ConfigError("delta_b must be below gravity for a real depth")
    u_pole = np.asarray(u_fn(np.array([-np.pi / 2, np.pi / 2])), dtype=float)
    if np.any(u_pole != 0.0):
        raise ConfigError("zonal profile must vanish at the poles")

    lat = np.linspace(-np.pi / 2, np.pi / 2, panels + 1)
    u = np.asarray(u_fn(lat), dtype=float)
    factor = np.sqrt(g - delta_b * np.cos(lat))
    integrand = np.zeros_like(lat)
    inside = u != 0.0
    if spec.coriolis == "cos":
        f = 2.0 * spec.omega * np.cos(lat[inside])
    else:
        f = 2.0 * spec.omega * np.sin(lat[inside])
    integrand[inside] = (
        u[inside] ** 2 * np.tan(lat[inside]) + spec.radius * f * u[inside]
    ) / factor[inside]
    integral = cumulative_trapezoid(integrand, lat, initial=0.0)
    depth = (H * np.sqrt(g - delta_b) - integral) / factor

    def profile(query_lat):
        return np.interp(np.asarray(query_lat, dtype=float), lat, depth)

    return profile


def _zonal_velocity_field(speed_of_lat):
    """3D tangent field for a purely zonal flow; zero where speed is zero."""

    def fn(pts):
        x, y, z = pts.T
        r = np.sqrt(x * x + y * y + z * z)
        rho = np.hypot(x, y)
        lat = np.arcsin(np.clip(z / r, -1.0, 1.0))
        s = speed_of_lat(lat)
        out = np.zeros_like(pts)
        ok = rho > 0.0
        out[ok, 0] = -s[ok] * y[ok] / rho[ok]
        out[ok, 1] = s[ok] * x[ok] / rho[ok]
        return out

    return fn


def _finish(cfg, spec, disc, u_fn, D, b, theta, B=None):
    if B is not None and np.any(D + B <= 0.0):
        raise ConfigError("initial depth plus topography must be positive")
    if np.any(D <= 0.0):
        raise ConfigError("initial depth must be positive")
    params = PhysicsParams(q0=spec.q0, H=spec.H, xi=spec.xi)
    qv = (1.0 - spec.xi) * saturation(
        D, b, 0.0 if B is None else B, params, cfg, theta=theta
    )
    u = project(disc.V, u_fn)
    state = State(
        u=u, D=D, b=b, qv=qv, qc=np.zeros_like(D), qr=np.zeros_like(D)
    )
    f_cell = coriolis_samples(disc, omega=spec.omega, variant=spec.coriolis)
    return CaseSetup(spec=spec, state=state, B=B, theta=theta, f_cell=f_cell)


def _zonal_background(cfg, spec, disc):
    """Shared pieces of the steady and mountain cases."""
    lon, lat = dof_lonlat(disc)
    g = spec.gravity
    theta = None
    if cfg.depth_dependent_saturation_only:
        theta = theta_background(lat, spec)
    if cfg.prognostic_buoyancy:
        b = g * (1.0 - theta_background(lat, spec))
        ws = spec.flow_omega + spec.flow_sigma
    else:
        # without a buoyancy gradient the depth only balances the Coriolis
        # and centrifugal terms, so the sigma part of the surface drops out
        b = np.full(lat.shape, g)
        ws = spec.flow_omega
    surface = spec.H - ws * np.sin(lat) ** 2 / g
    u_fn = _zonal_velocity_field(lambda la: spec.u0 * np.cos(la))
    return lon, lat, surface, b, theta, u_fn


def init_steady_state(cfg, spec, disc):
    """Balanced zonal flow; the solution should hold still."""
    _, _, surface, b, theta, u_fn = _zonal_background(cfg, spec, disc)
    return _finish(cfg, spec, disc, u_fn, surface, b, theta)


def init_mountain(cfg, spec, disc):
    """The zonal background impinging on a conical mountain."""
    lon, lat, surface, b, theta, u_fn = _zonal_background(cfg, spec, disc)
    B = mountain_topography(lon, lat, spec)
    # depth is carved out of the same smooth surface, exactly at dofs
    return _finish(cfg, spec, disc, u_fn, surface - B, b, theta, B=B)


def init_unstable_jet(cfg, spec, disc):
    """Balanced mid-latitude jet, perturbed by a depth bump if configured."""
    lon, lat = dof_lonlat(disc)
    jet = spec.jet
    g = spec.gravity
    if cfg.prognostic_buoyancy:
        b = g - jet.delta_b * np.cos(lat)
        profile = galewsky_balance_depth(jet, spec.H, spec)
    else:
        b = np.full(lat.shape, g)
        profile = galewsky_balance_depth(jet, spec.H, spec, delta_b=0.0)
    theta = None
    if cfg.depth_dependent_saturation_only:
        theta = jet.delta_b * np.cos(lat) / g
    D = profile(lat)
    if jet.h_hat != 0.0:
        D = D + jet.h_hat * np.cos(lat) * np.exp(-((lon / jet.alpha) ** 2)) * np.exp(
            -(((jet.phi2 - lat) / jet.beta) ** 2)
        )
    u_fn = _zonal_velocity_field(lambda la: jet_velocity(la, jet))
    return _finish(cfg, spec, disc, u_fn, D, b, theta)


_INITIALIZERS = {
    Case.STEADY_STATE: init_steady_state,
    Case.MOUNTAIN: init_mountain,
    Case.UNSTABLE_JET: init_unstable_jet,
}


def initial_state(cfg, spec, disc):
    """Dispatch to the case named in the spec."""
    return _INITIALIZERS[spec.name](cfg, spec, disc)
