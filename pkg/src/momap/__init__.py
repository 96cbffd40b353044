"""Motion maps: pixel-aligned dense 3D trajectories."""

from .core import (
    Camera,
    MoMap,
    MomapError,
    RigidTransform,
    SegMap,
    ValidationError,
    apply_rigid,
    read_momap,
    validate_momap,
    write_momap,
)

__all__ = [
    "Camera",
    "MoMap",
    "MomapError",
    "RigidTransform",
    "SegMap",
    "ValidationError",
    "apply_rigid",
    "read_momap",
    "validate_momap",
    "write_momap",
]
__version__ = "0.1.0"
