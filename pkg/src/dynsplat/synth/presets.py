"""Scripted scenes exercising one failure mode each.

Every preset is deterministic in its seed and sized so the full pipeline runs
in seconds. Geometry constants below were chosen so the relevant effect has a
comfortable margin (documented per preset) at a 64x64 working resolution.
"""
from __future__ import annotations

import numpy as np

from ..geometry import RigidTransform, quat_from_axis_angle
from .primitives import Box, Capsule, Ellipsoid, Motion, ProceduralTexture, Rectangle
from .scene import Part, SceneObject, SceneSpec, ShadowScript, pan_cameras

SIZE = 64
FOCAL = 70.0


def _at(x: float, y: float, z: float) -> RigidTransform:
    return RigidTransform(np.array([1.0, 0, 0, 0]), np.array([x, y, z]))


def _tex(rng: np.random.Generator) -> ProceduralTexture:
    return ProceduralTexture(rng)


def preset_shadow(seed: int = 0) -> SceneSpec:
    """A moving blob casts a moving shadow on a static ground plane.

    The shadow region darkens and carries corrupted (shadow-following) flow,
    so epipolar checks fire both on the blob and on the shadowed ground. The
    blob segment is almost fully covered by motion pixels while the ground is
    covered only a few percent, which is what mask selection must separate.
    Blob motion is mostly vertical while the camera pans horizontally, keeping
    it off the epipolar lines.
    """
    rng = np.random.default_rng([seed, 0])
    t_count = 12
    cams = pan_cameras(t_count, SIZE, SIZE, FOCAL, (0.025, 0.0, 0.0))
    road = SceneObject(
        "road",
        [Part(Rectangle(3.0, 1.9), _tex(rng), Motion(base=_at(0.15, 0.0, 4.0)))],
    )
    blob = SceneObject(
        "blob",
        [
            Part(
                Ellipsoid((0.38, 0.30, 0.22)),
                _tex(rng),
                Motion(base=_at(0.45, -0.15, 3.0), velocity=(-0.012, -0.048, 0.0)),
            )
        ],
        dynamic=True,
    )
    shadow = ShadowScript(
        object_index=0,
        center0=(-0.35, 0.75),
        velocity=(-0.016, -0.064),
        radii=(0.55, 0.30),
        darken=0.5,
    )
    return SceneSpec(SIZE, SIZE, t_count, cams, [road, blob], shadow=shadow, seed=seed)


def preset_blurred_depth(seed: int = 0) -> SceneSpec:
    """A tilted slab with internal thin relief, video depth blurred inside.

    The object is a depth ramp carrying a raised ridge over its far end and a
    recessed groove (seen through a slit) in its near end, both at the ramp's
    mid depth. Blurring the video depth melts the thin relief into the ramp —
    an error that is two-sided, mean-free, and nearly uncorrelated with depth,
    so a scale-shift fit of the (affine-ambiguous but sharp) mono depth can
    restore the relief while the blurred video alone cannot.
    """
    rng = np.random.default_rng([seed, 0])
    t_count = 8
    tilt = 0.6
    cams = pan_cameras(t_count, SIZE, SIZE, FOCAL, (0.02, 0.0, 0.0))
    bg = SceneObject(
        "backdrop",
        [Part(Rectangle(3.0, 2.0), _tex(rng), Motion(base=_at(0.1, 0.0, 4.2)))],
    )
    move = dict(velocity=(0.022, 0.004, 0.0))
    q_tilt = quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), tilt)
    base_t = np.array([0.0, -0.05, 3.05])
    c, s = np.cos(tilt), np.sin(tilt)

    def slab(lo: float, hi: float) -> Part:
        half = (hi - lo) / 2
        mid = (lo + hi) / 2
        pose = RigidTransform(q_tilt, base_t + np.array([mid * c, 0.0, -mid * s]))
        return Part(Box((half, 0.42, 0.03)), _tex(rng), Motion(base=pose, **move))

    gap0, gap1 = 0.26, 0.34  # world-x window exposing the groove floor
    player = SceneObject(
        "player",
        [
            slab(-0.55, gap0 / c),
            slab(gap1 / c, 0.55),
            Part(
                Box(((gap1 - gap0) / 2 + 0.06, 0.42, 0.015)),
                _tex(rng),
                Motion(base=_at((gap0 + gap1) / 2, -0.05, 3.02), **move),
            ),
            Part(
                Capsule((0.0, -0.40, 0.0), (0.0, 0.40, 0.0), 0.065),
                _tex(rng),
                Motion(base=_at(-0.28, -0.05, 3.02), **move),
            ),
        ],
        dynamic=True,
    )
    return SceneSpec(
        SIZE, SIZE, t_count, cams, [bg, player], depth_blur_sigma=2.0, seed=seed
    )


def preset_thin_limb(seed: int = 0) -> SceneSpec:
    """A large body with one ~1.5 px wide limb: uniform seeds almost never
    land on the limb, so boundary-distance-weighted skeleton seeds must.
    """
    rng = np.random.default_rng([seed, 0])
    t_count = 6
    cams = pan_cameras(t_count, SIZE, SIZE, FOCAL, (0.015, 0.0, 0.0))
    bg = SceneObject(
        "backdrop",
        [Part(Rectangle(3.0, 2.0), _tex(rng), Motion(base=_at(0.1, 0.0, 4.0)))],
    )
    move = dict(velocity=(0.018, -0.006, 0.0))
    creature = SceneObject(
        "creature",
        [
            Part(
                Ellipsoid((0.85, 0.62, 0.30)),
                _tex(rng),
                Motion(base=_at(-0.1, -0.12, 3.0), **move),
            ),
            Part(
                Capsule((-0.2, 0.42, 0.0), (1.05, 1.05, 0.0), 0.032),
                _tex(rng),
                Motion(base=_at(-0.1, -0.12, 3.0), **move),
            ),
        ],
        dynamic=True,
    )
    return SceneSpec(SIZE, SIZE, t_count, cams, [bg, creature], seed=seed)


def preset_occlusion(seed: int = 0) -> SceneSpec:
    """A nearer pillar sweeps in front of a farther one mid-sequence.

    Points tracked on the far pillar lose visibility for roughly frames 4-6
    and re-emerge afterwards; the scripted tracker never re-acquires them.
    """
    rng = np.random.default_rng([seed, 0])
    t_count = 12
    cams = pan_cameras(t_count, SIZE, SIZE, FOCAL, (0.012, 0.0, 0.0))
    bg = SceneObject(
        "backdrop",
        [Part(Rectangle(3.2, 2.2), _tex(rng), Motion(base=_at(0.1, 0.0, 4.5)))],
    )
    far = SceneObject(
        "far_pillar",
        [
            Part(
                Capsule((0.0, -0.55, 0.0), (0.0, 0.55, 0.0), 0.055),
                _tex(rng),
                Motion(base=_at(0.1, 0.0, 3.2), velocity=(0.0, 0.02, 0.0)),
            )
        ],
        dynamic=True,
    )
    front = SceneObject(
        "front_pillar",
        [
            Part(
                Capsule((0.0, -0.65, 0.0), (0.0, 0.65, 0.0), 0.075),
                _tex(rng),
                Motion(base=_at(-0.47, 0.0, 2.6), velocity=(0.105, 0.0, 0.0)),
            )
        ],
        dynamic=True,
    )
    return SceneSpec(SIZE, SIZE, t_count, cams, [bg, far, front], seed=seed)


def preset_self_occlusion(seed: int = 0) -> SceneSpec:
    """One object whose nearer part sweeps across its farther part.

    The parts counter-translate at ~3.2 px/frame each, so when the far part
    is hidden the occluding surface diverges by ~12.8 px over a two-frame
    window — past any sane re-identification threshold — while still lying
    inside the object's own mask. Correct behavior: label self-occlusion,
    recover nothing.
    """
    rng = np.random.default_rng([seed, 0])
    t_count = 12
    cams = pan_cameras(t_count, SIZE, SIZE, FOCAL, (0.012, 0.0, 0.0))
    bg = SceneObject(
        "backdrop",
        [Part(Rectangle(3.0, 2.1), _tex(rng), Motion(base=_at(0.05, 0.0, 4.2)))],
    )
    arm = SceneObject(
        "arm",
        [
            Part(
                Capsule((0.0, -0.5, 0.0), (0.0, 0.5, 0.0), 0.06),
                _tex(rng),
                Motion(base=_at(-0.72, 0.0, 3.0), velocity=(0.137, 0.0, 0.0)),
            ),
            Part(
                Capsule((0.0, -0.6, 0.0), (0.0, 0.6, 0.0), 0.13),
                _tex(rng),
                Motion(base=_at(0.78, 0.05, 2.55), velocity=(-0.1165, 0.0, 0.0)),
            ),
        ],
        dynamic=True,
    )
    return SceneSpec(SIZE, SIZE, t_count, cams, [bg, arm], seed=seed)


def preset_floater(seed: int = 0) -> SceneSpec:
    """Static scene seen under a very narrow baseline: poor depth conditioning
    makes reconstruction prone to floaters, and motion masks must stay empty.
    """
    rng = np.random.default_rng([seed, 0])
    t_count = 10
    cams = pan_cameras(t_count, SIZE, SIZE, FOCAL, (0.008, 0.0, 0.0))
    bg = SceneObject(
        "backdrop",
        [Part(Rectangle(3.2, 2.4), _tex(rng), Motion(base=_at(0.05, 0.0, 3.8)))],
    )
    crate = SceneObject(
        "crate",
        [Part(Box((0.5, 0.35, 0.25)), _tex(rng), Motion(base=_at(-0.5, 0.25, 2.9)))],
    )
    boulder = SceneObject(
        "boulder",
        [Part(Ellipsoid((0.3, 0.3, 0.3)), _tex(rng), Motion(base=_at(0.7, -0.5, 3.1)))],
    )
    return SceneSpec(
        SIZE, SIZE, t_count, cams, [bg, crate, boulder], static_tracks=10, seed=seed
    )


def preset_walker(seed: int = 0, frame_count: int = 12) -> SceneSpec:
    """Articulated walker: torso plus two swinging legs, everything moving.

    The general-purpose preset for end-to-end runs; legs swing about their
    hip pivots while the whole figure translates. The stride has a vertical
    component: motion parallel to the camera pan slides along the epipolar
    lines and would be invisible to the Sampson test, so a purely horizontal
    walk would never be selected as dynamic.
    """
    rng = np.random.default_rng([seed, 0])
    cams = pan_cameras(frame_count, SIZE, SIZE, FOCAL, (0.02, 0.0, 0.0))
    bg = SceneObject(
        "backdrop",
        [Part(Rectangle(3.4, 2.3), _tex(rng), Motion(base=_at(0.2, 0.0, 4.0)))],
    )
    stride = dict(velocity=(0.045, -0.03, 0.0))
    walker = SceneObject(
        "walker",
        [
            Part(
                Ellipsoid((0.28, 0.42, 0.24)),
                _tex(rng),
                Motion(base=_at(-0.45, -0.35, 3.0), **stride),
            ),
            Part(
                Capsule((0.0, 0.0, 0.0), (0.05, 0.62, 0.02), 0.05),
                _tex(rng),
                Motion(
                    base=_at(-0.5, 0.05, 3.02),
                    axis=(0.0, 0.0, 1.0),
                    pivot=(0.0, 0.0, 0.0),
                    swing_amp=0.3,
                    swing_period=8.0,
                    **stride,
                ),
            ),
            Part(
                Capsule((0.0, 0.0, 0.0), (-0.05, 0.62, 0.02), 0.05),
                _tex(rng),
                Motion(
                    base=_at(-0.38, 0.05, 3.1),
                    axis=(0.0, 0.0, 1.0),
                    pivot=(0.0, 0.0, 0.0),
                    swing_amp=-0.3,
                    swing_period=8.0,
                    **stride,
                ),
            ),
        ],
        dynamic=True,
    )
    return SceneSpec(SIZE, SIZE, frame_count, cams, [bg, walker], seed=seed)


PRESETS = {
    "shadow": preset_shadow,
    "blurred_depth": preset_blurred_depth,
    "thin_limb": preset_thin_limb,
    "occlusion": preset_occlusion,
    "self_occlusion": preset_self_occlusion,
    "floater": preset_floater,
    "walker": preset_walker,
}
