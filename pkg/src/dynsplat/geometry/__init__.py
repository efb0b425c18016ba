"""Rigid-body math, cameras, epipolar geometry, rasters, and 2-D morphology."""

from .quaternion import (
    quat_conjugate,
    quat_from_axis_angle,
    quat_from_matrix,
    quat_multiply,
    quat_normalize,
    quat_rotate,
    quat_to_matrix,
)
from .transforms import RigidTransform
from .camera import (
    Camera,
    backproject,
    fundamental_matrix,
    project,
    project_valid,
    sampson_distance,
)
from .rasters import BinaryMask, DepthMap, FlowField, bilinear_sample, nearest_pixel
from .morphology import dilate, disk_footprint, distance_transform, skeletonize

__all__ = [
    "BinaryMask",
    "Camera",
    "DepthMap",
    "FlowField",
    "RigidTransform",
    "backproject",
    "bilinear_sample",
    "dilate",
    "disk_footprint",
    "distance_transform",
    "fundamental_matrix",
    "nearest_pixel",
    "project",
    "project_valid",
    "quat_conjugate",
    "quat_from_axis_angle",
    "quat_from_matrix",
    "quat_multiply",
    "quat_normalize",
    "quat_rotate",
    "quat_to_matrix",
    "sampson_distance",
    "skeletonize",
]
