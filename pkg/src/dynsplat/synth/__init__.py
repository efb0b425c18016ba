"""Synthetic oracle scenes with exact geometry, appearance, and priors."""
from .presets import (
    PRESETS,
    preset_blurred_depth,
    preset_floater,
    preset_occlusion,
    preset_self_occlusion,
    preset_shadow,
    preset_thin_limb,
    preset_walker,
)
from .primitives import (
    Box,
    Capsule,
    Ellipsoid,
    Motion,
    Primitive,
    ProceduralTexture,
    Rectangle,
)
from .scene import (
    BACKGROUND_COLOR,
    FrameGeometry,
    OracleBundle,
    Part,
    SceneObject,
    SceneSpec,
    ShadowScript,
    TrackTruth,
    generate,
    pan_cameras,
    render_depth,
    retrack,
)

__all__ = [
    "BACKGROUND_COLOR",
    "Box",
    "Capsule",
    "Ellipsoid",
    "FrameGeometry",
    "Motion",
    "OracleBundle",
    "PRESETS",
    "Part",
    "Primitive",
    "ProceduralTexture",
    "Rectangle",
    "SceneObject",
    "SceneSpec",
    "ShadowScript",
    "TrackTruth",
    "generate",
    "pan_cameras",
    "preset_blurred_depth",
    "preset_floater",
    "preset_occlusion",
    "preset_self_occlusion",
    "preset_shadow",
    "preset_thin_limb",
    "preset_walker",
    "render_depth",
    "retrack",
]
