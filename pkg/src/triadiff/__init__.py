"""Bimanual trajectory generation guided by triadic arm-arm-object relations."""

__version__ = "0.1.0"

from .geometry import (
    Pose,
    Quaternion,
    TriadVector,
    aggregate_triads,
    compose,
    inverse,
    relative_pose,
    triad_from_poses,
)

__all__ = [
    "Pose",
    "Quaternion",
    "TriadVector",
    "aggregate_triads",
    "compose",
    "inverse",
    "relative_pose",
    "triad_from_poses",
    "__version__",
]
