"""Physical constants shared across modules."""

from moistswe.meshes import EARTH_RADIUS

__all__ = ["EARTH_RADIUS", "GRAVITY", "OMEGA"]

GRAVITY = 9.80616       # m s^-2
OMEGA = 7.292e-5        # planetary rotation rate, s^-1
