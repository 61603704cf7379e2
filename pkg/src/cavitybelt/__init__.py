"""Semiclassical simulator of single-atom transport and positioning in an
optical micro-cavity: conveyor-belt standing-wave trap, cavity-enhanced
Raman scattering, photon counting, and the full figure-level analysis chain.
"""

from cavitybelt.config import (
    CavityParams,
    DetectionParams,
    DerivedParams,
    DynamicsParams,
    ExperimentConfig,
    PhysicalConstants,
    PumpParams,
    TrapParams,
    ConfigError,
    default_config,
    derive,
    validate_config,
)
from cavitybelt.fields import Mode, LatticeConfiguration, Position

__version__ = "0.1.0"

__all__ = [
    "CavityParams",
    "ConfigError",
    "DerivedParams",
    "DetectionParams",
    "DynamicsParams",
    "ExperimentConfig",
    "LatticeConfiguration",
    "Mode",
    "PhysicalConstants",
    "Position",
    "PumpParams",
    "TrapParams",
    "default_config",
    "derive",
    "validate_config",
    "__version__",
]
