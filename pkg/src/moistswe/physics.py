"""Pointwise moisture physics: saturation, conversion rates, increments.

Both schemes are pure maps over the scalar dof arrays; no assembly is
involved, so applying them nodally keeps the on/off switch sharp instead
of smearing it through a projection.  The three-state scheme exchanges
vapour with cloud (condensation when supersaturated, cloud-limited
evaporation otherwise) and then converts cloud above a threshold into
accumulated rain.  The one-way scheme sends supersaturated vapour
straight to the rain accumulator.  Either way the depth and buoyancy
feedbacks are the vapour exchange scaled by beta1 and beta2, and rain
never feeds back.

The conversion fraction gamma_v is chosen so that one application lands
the dof close to the saturation curve it will see after its own depth
and buoyancy feedback, rather than overshooting and oscillating.

Relaxation times default to the timestep of whichever call applies them;
comparisons at saturation are strict, so a dof sitting exactly on the
curve does nothing.
"""

import enum
import logging
from dataclasses import dataclass

import numpy as np

from moistswe.constants import GRAVITY
from moistswe.errors import ConfigError, StateValidityError

__all__ = [
    "CLIP_TOLERANCE",
    "Scheme",
    "PhysicsParams",
    "PhysicsIncrements",
    "saturation",
    "gamma_v",
    "three_state_step",
    "one_way_step",
    "physics_step",
]

logger = logging.getLogger(__name__)

# negatives larger than this (in magnitude) are logged, not just clipped
CLIP_TOLERANCE = 1e-14


class Scheme(enum.Enum):
    """Which conversion scheme produces the moisture increments."""

    THREE_STATE = "three-state"
    ONE_WAY = "one-way"


@dataclass(frozen=True)
class PhysicsParams:
    """Moisture parameters shared by both schemes.

    ``tau_v`` and ``tau_r`` left as None relax over exactly one step of
    whatever size the caller passes; set them explicitly to decouple the
    relaxation from the step size.
    """

    q0: float
    H: float
    tau_v: float | None = None
    tau_r: float | None = None
    gamma_r: float = 1.0e-3
    q_precip: float = 1.0e-4
    xi: float = 0.0
    scheme: Scheme = Scheme.THREE_STATE

    def __post_init__(self):
        if self.q0 < 0.0:
            raise ConfigError("q0 must be nonnegative")
        if self.H <= 0.0:
            raise ConfigError("background depth H must be positive")
        for name in ("tau_v", "tau_r"):
            tau = getattr(self, name)
            if tau is not None and tau <= 0.0:
                raise ConfigError(f"{name} must be positive when given")
        if self.gamma_r < 0.0:
            raise ConfigError("gamma_r must be nonnegative")
        if self.q_precip <= 0.0:
            raise ConfigError("q_precip must be positive")
        if not 0.0 <= self.xi < 1.0:
            raise ConfigError("xi must lie in [0, 1)")
        if not isinstance(self.scheme, Scheme):
            raise ConfigError(f"unknown physics scheme {self.scheme!r}")


@dataclass(frozen=True)
class PhysicsIncrements:
    """Per-dof changes produced by one physics application."""

    dqv: np.ndarray
    dqc: np.ndarray
    dqr: np.ndarray
    dD: np.ndarray
    db: np.ndarray


def _total_depth(D, B):
    depth = np.asarray(D) + B
    if np.any(depth <= 0.0):
        raise StateValidityError("total depth D + B must stay positive")
    return depth


def saturation(D, b, B, params, cfg, theta=None):
    """Saturation vapour value at each dof.

    Inversely proportional to the total depth, with an exponential factor
    in the buoyancy; frameworks whose saturation may not see the buoyancy
    field use the frozen latitude profile ``theta`` instead.
    """
    ratio = params.q0 * params.H / _total_depth(D, B)
    if cfg.depth_dependent_saturation_only:
        if theta is None:
            raise ConfigError(
                f"{cfg.framework.value} saturation needs the frozen theta field"
            )
        return ratio * np.exp(20.0 * theta)
    return ratio * np.exp(20.0 * (1.0 - np.asarray(b) / GRAVITY))


def gamma_v(q_sat, D, B, beta1, beta2, gravity=GRAVITY):
    """Fraction of the saturation excess converted in one application.

    Equals one with no feedback and shrinks as the feedbacks strengthen,
    so the post-conversion state sits near its own updated saturation
    curve.  Always in (0, 1] for nonnegative arguments.
    """
    feedback = 20.0 * beta2 / gravity + beta1 / _total_depth(D, B)
    return 1.0 / (1.0 + q_sat * feedback)


def _clipped_delta(value, delta, name):
    """Adjust delta so value + delta is nonnegative; log real violations."""
    new = value + delta
    bad = new < 0.0
    if not np.any(bad):
        return delta
    worst = float(new.min())
    if worst < -CLIP_TOLERANCE:
        count = int(np.count_nonzero(new < -CLIP_TOLERANCE))
        logger.error(
            "clipped %s to zero at %d dofs, worst violation %.3e", name, count, -worst
        )
    return np.where(bad, -np.asarray(value, dtype=float), delta)


def _finalize(qv, qc, D, B, dqv, dqc, dqr, dD, db):
    dqv = _clipped_delta(qv, dqv, "q_v")
    dqc = _clipped_delta(qc, dqc, "q_c")
    _total_depth(D + dD, B)
    return PhysicsIncrements(dqv=dqv, dqc=dqc, dqr=dqr, dD=dD, db=db)


def three_state_step(state, dt, params, cfg, B=0.0, theta=None):
    """Vapour/cloud exchange followed by cloud-to-rain conversion.

    Condensation moves the gamma_v fraction of the excess over one
    relaxation time; evaporation mirrors it but never removes more cloud
    than exists.  Rain then drains cloud above the precipitation
    threshold, judged on the exchanged cloud value.  Depth and buoyancy
    respond to the exchange only, scaled by the framework's betas.
    """
    if dt <= 0.0:
        raise ConfigError("physics step needs dt > 0")
    tau_v = params.tau_v if params.tau_v is not None else dt
    tau_r = params.tau_r if params.tau_r is not None else dt
    qv = np.asarray(state.qv, dtype=float)
    qc = np.asarray(state.qc, dtype=float)

    q_sat = saturation(state.D, state.b, B, params, cfg, theta)
    gv = gamma_v(q_sat, state.D, B, cfg.beta1, cfg.beta2)

    excess = qv - q_sat
    cond = np.where(excess > 0.0, gv * excess / tau_v, 0.0)
    evap = np.where(
        excess < 0.0,
        np.minimum(np.maximum(qc, 0.0) / dt, -gv * excess / tau_v),
        0.0,
    )
    conv = dt * (cond - evap)

    qc_mid = qc + conv
    rain = np.where(
        qc_mid > params.q_precip,
        params.gamma_r * (qc_mid - params.q_precip) * (dt / tau_r),
        0.0,
    )

    return _finalize(
        qv,
        qc,
        state.D,
        B,
        dqv=-conv,
        dqc=conv - rain,
        dqr=rain,
        dD=-cfg.beta1 * conv,
        db=-cfg.beta2 * conv,
    )


def one_way_step(state, dt, params, cfg, B=0.0, theta=None):
    """Supersaturated vapour converts straight to accumulated rain.

    The gamma_r fraction of the excess per relaxation time, no cloud stage
    and no evaporation; depth and buoyancy feedbacks apply as for the
    vapour/cloud exchange.
    """
    if dt <= 0.0:
        raise ConfigError("physics step needs dt > 0")
    tau = params.tau_v if params.tau_v is not None else dt
    qv = np.asarray(state.qv, dtype=float)
    qc = np.asarray(state.qc, dtype=float)

    q_sat = saturation(state.D, state.b, B, params, cfg, theta)
    excess = qv - q_sat
    conv = np.where(excess > 0.0, params.gamma_r * excess * (dt / tau), 0.0)

    return _finalize(
        qv,
        qc,
        state.D,
        B,
        dqv=-conv,
        dqc=np.zeros_like(conv),
        dqr=conv,
        dD=-cfg.beta1 * conv,
        db=-cfg.beta2 * conv,
    )


_STEPS = {
    Scheme.THREE_STATE: three_state_step,
    Scheme.ONE_WAY: one_way_step,
}


def physics_step(state, dt, params, cfg, B=0.0, theta=None):
    """Apply the configured scheme and return the updated state.

    The velocity array is shared with the input state, not copied;
    physics never touches it.
    """
    inc = _STEPS[params.scheme](state, dt, params, cfg, B=B, theta=theta)
    cls = type(state)
    return cls(
        u=state.u,
        D=state.D + inc.dD,
        b=state.b + inc.db,
        qv=state.qv + inc.dqv,
        qc=state.qc + inc.dqc,
        qr=state.qr + inc.dqr,
    )
