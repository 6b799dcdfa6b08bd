"""Moist shallow-water dynamical core on the sphere.

Compatible finite elements (quadratic H(div) velocity, linear discontinuous
scalars) on icosahedral sphere meshes, a semi-implicit quasi-Newton time
stepper, and switchable moist thermodynamics (instantaneous one-way conversion
or a three-state vapour/cloud/rain scheme) coupled to the dynamics through
depth and buoyancy source terms.
"""

from moistswe.errors import (
    CheckpointMismatchError,
    ConfigError,
    InstabilityError,
    MeshQualityError,
    ResourceLimitError,
    SolverError,
    StateValidityError,
)

__all__ = [
    "CheckpointMismatchError",
    "ConfigError",
    "InstabilityError",
    "MeshQualityError",
    "ResourceLimitError",
    "SolverError",
    "StateValidityError",
]

__version__ = "0.1.0"
