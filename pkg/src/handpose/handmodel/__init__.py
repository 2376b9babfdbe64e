"""Synthetic hand, object and interaction prototypes, and synthetic scenes."""

from handpose.handmodel.generate import (
    DEFAULT_DENSITY,
    DEFAULT_VIEWPOINT,
    generate_model,
    generate_named_model,
    model_primitives,
    pose_angles,
    pose_category,
    pose_names,
    primitive_from_dict,
    visible_mask,
)
from handpose.handmodel.kinematics import (
    JOINT_NAMES,
    HandSkeleton,
    JointAngles,
    Violation,
    forward_kinematics,
    joint_frames,
    validate_joint_limits,
)
from handpose.handmodel.primitives import Primitive, sample_primitive, surface_area
from handpose.handmodel.scene import PlacedModel, Scene, SceneSpec, generate_scene

__all__ = [
    "DEFAULT_DENSITY", "DEFAULT_VIEWPOINT", "JOINT_NAMES", "HandSkeleton", "JointAngles",
    "PlacedModel", "Primitive", "Scene", "SceneSpec", "Violation", "forward_kinematics",
    "generate_model", "generate_named_model", "generate_scene", "joint_frames", "model_primitives",
    "pose_angles", "pose_category", "pose_names", "primitive_from_dict", "sample_primitive", "surface_area",
    "validate_joint_limits", "visible_mask",
]
