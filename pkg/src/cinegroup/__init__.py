"""Groupwise registration and cardiac function quantification for 2D+t cine stacks."""

from .core import (
    STRUCTURES,
    CineSequence,
    DisplacementFieldSet,
    DistanceMapSet,
    LabelMaskSet,
    LandmarkSet,
    ProbabilityMaskSet,
    RegistrationConfig,
    normalize_sequence,
    read_container,
    write_container,
)
from .gwreg import GroupwiseRegistration, register_groupwise
from .phantom import PhantomSpec, generate

__version__ = "0.1.0"

__all__ = [
    "STRUCTURES",
    "CineSequence",
    "DisplacementFieldSet",
    "DistanceMapSet",
    "GroupwiseRegistration",
    "LabelMaskSet",
    "LandmarkSet",
    "PhantomSpec",
    "ProbabilityMaskSet",
    "RegistrationConfig",
    "generate",
    "normalize_sequence",
    "read_container",
    "register_groupwise",
    "write_container",
]
