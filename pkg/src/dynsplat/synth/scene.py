"""Synthetic scene oracle: analytic ray-cast renderings with exact priors.

Everything downstream (motion masks, depth refinement, tracking, scaffold
fitting, reconstruction) is tested against scenes generated here, because the
generator can produce exact depth, flow, segmentation, and tracks alongside
deliberately degraded variants of each prior.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..errors import InvalidSpecError
from ..geometry import (
    BinaryMask,
    Camera,
    RigidTransform,
    dilate,
    distance_transform,
    project_valid,
    quat_to_matrix,
)
from ..masks import epi_frame_pairs
from ..tracks import Track, TrackSet
from .primitives import Motion, Primitive, ProceduralTexture

log = logging.getLogger(__name__)

BACKGROUND_COLOR = 0.08
_MIN_PART_PIXELS = 4


@dataclass
class Part:
    primitive: Primitive
    texture: ProceduralTexture
    motion: Motion = field(default_factory=Motion)


@dataclass
class SceneObject:
    name: str
    parts: list[Part]
    dynamic: bool = False


@dataclass
class ShadowScript:
    """Moving photometric distractor painted onto one rectangle part.

    The ellipse (center0 + velocity * t, radii) lives in the rectangle's local
    x-y plane. Pixels inside are darkened, and their flow is replaced by the
    motion of the shadow instead of the motion of the surface, mimicking a
    flow estimator latching onto the moving shading.
    """

    object_index: int
    center0: np.ndarray
    velocity: np.ndarray
    radii: np.ndarray
    darken: float = 0.5
    corrupt_flow: bool = True

    def __post_init__(self) -> None:
        self.center0 = np.asarray(self.center0, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        self.radii = np.asarray(self.radii, dtype=np.float64)

    def region(self, local_xy: np.ndarray, t: float) -> np.ndarray:
        c = self.center0 + self.velocity * t
        n = (local_xy - c) / self.radii
        return np.sum(n * n, axis=-1) <= 1.0


@dataclass
class SceneSpec:
    width: int
    height: int
    frame_count: int
    cameras: list[Camera]
    objects: list[SceneObject]
    shadow: ShadowScript | None = None
    depth_blur_sigma: float = 0.0
    flow_noise_sigma: float = 0.0
    over_segmentation: int = 1
    flow_gaps: tuple[int, ...] = (1, 4)
    tracks_per_object: int = 12
    static_tracks: int = 6
    seed: int = 0


def _validate(spec: SceneSpec) -> None:
    if spec.frame_count < 3:
        raise InvalidSpecError(f"need at least 3 frames, got {spec.frame_count}")
    if spec.width < 16 or spec.height < 16:
        raise InvalidSpecError(f"image {spec.width}x{spec.height} below 16x16 minimum")
    if len(spec.cameras) != spec.frame_count:
        raise InvalidSpecError(
            f"{len(spec.cameras)} cameras for {spec.frame_count} frames"
        )
    for cam in spec.cameras:
        if (cam.width, cam.height) != (spec.width, spec.height):
            raise InvalidSpecError("camera resolution disagrees with scene resolution")
    if not spec.objects:
        raise InvalidSpecError("scene has no objects")
    for obj in spec.objects:
        if not obj.parts:
            raise InvalidSpecError(f"object {obj.name!r} has no parts")
    if spec.over_segmentation < 1:
        raise InvalidSpecError("over-segmentation count must be >= 1")
    if spec.depth_blur_sigma < 0 or spec.flow_noise_sigma < 0:
        raise InvalidSpecError("noise magnitudes must be non-negative")
    if spec.shadow is not None:
        idx = spec.shadow.object_index
        if not 0 <= idx < len(spec.objects):
            raise InvalidSpecError(f"shadow object index {idx} out of range")
        if spec.objects[idx].dynamic:
            raise InvalidSpecError("shadow must be scripted on a static object")


@dataclass
class FrameGeometry:
    """Per-pixel hit description for one frame, flattened row-major."""

    object_index: np.ndarray  # (N,) int32, -1 = miss
    part_index: np.ndarray  # (N,) int32
    depth: np.ndarray  # (N,) float, camera-space z
    local: np.ndarray  # (N, 3) hit point in the winning part's local frame


def _cast(spec: SceneSpec, camera: Camera, t: float, pix: np.ndarray) -> FrameGeometry:
    """Ray-cast the scene state at time t through the given camera."""
    n = len(pix)
    dirs_cam = np.stack(
        [
            (pix[:, 0] - camera.cx) / camera.fx,
            (pix[:, 1] - camera.cy) / camera.fy,
            np.ones(n),
        ],
        axis=1,
    )
    r_cam_to_world = quat_to_matrix(camera.pose.q).T
    dirs_w = dirs_cam @ r_cam_to_world.T
    origin_w = camera.center()

    best_t = np.full(n, np.inf)
    best_obj = np.full(n, -1, dtype=np.int32)
    best_part = np.full(n, -1, dtype=np.int32)
    poses: dict[tuple[int, int], RigidTransform] = {}
    for oi, obj in enumerate(spec.objects):
        for pi, part in enumerate(obj.parts):
            pose = part.motion.pose(t)
            poses[(oi, pi)] = pose
            inv = pose.inverse()
            o_local = inv.apply(origin_w)
            d_local = dirs_w @ quat_to_matrix(inv.q).T
            hit_t = part.primitive.intersect(
                np.broadcast_to(o_local, (n, 3)), d_local
            )
            better = hit_t < best_t
            best_t = np.where(better, hit_t, best_t)
            best_obj[better] = oi
            best_part[better] = pi

    local = np.zeros((n, 3))
    for (oi, pi), pose in poses.items():
        sel = (best_obj == oi) & (best_part == pi)
        if not np.any(sel):
            continue
        inv = pose.inverse()
        o_local = inv.apply(origin_w)
        d_local = dirs_w[sel] @ quat_to_matrix(inv.q).T
        local[sel] = o_local + best_t[sel, None] * d_local
    depth = np.where(np.isfinite(best_t), best_t, 0.0)
    return FrameGeometry(best_obj, best_part, depth, local)


@dataclass
class TrackTruth:
    """Oracle-side labels for every generated track."""

    points3d: np.ndarray  # (N, T, 3) world positions of the surface point
    visible: np.ndarray  # (N, T) bool, true z-buffer visibility
    self_occluded: np.ndarray  # (N, T) bool
    occluded_by: np.ndarray  # (N, T) int32 object index, -1 when visible


@dataclass
class OracleBundle:
    spec: SceneSpec
    cameras: list[Camera]
    images: np.ndarray  # (T, H, W, 3) float in [0, 1]
    depth: np.ndarray  # (T, H, W) exact
    depth_validity: np.ndarray  # (T, H, W) bool
    video_depth: np.ndarray  # (T, H, W) temporally consistent, possibly blurred
    mono_depth: np.ndarray  # (T, H, W) per-frame affine-ambiguous
    mono_affines: np.ndarray  # (T, 2) the (scale, shift) applied per frame
    flows: dict[tuple[int, int], np.ndarray]  # (H, W, 2) forward flow
    flow_validity: dict[tuple[int, int], np.ndarray]
    segments: np.ndarray  # (T, H, W) int32, -1 = unlabeled
    object_masks: np.ndarray  # (D, T, H, W) bool, dynamic objects only
    dynamic_object_indices: list[int]
    object_segment_ids: dict[int, list[int]]
    part_masks: dict[tuple[int, int], np.ndarray]  # (T, H, W) bool per part
    shadow_masks: np.ndarray | None  # (T, H, W) bool
    tracks: TrackSet
    track_truth: TrackTruth


def generate(spec: SceneSpec) -> OracleBundle:
    _validate(spec)
    t_count, h, w = spec.frame_count, spec.height, spec.width
    ys, xs = np.mgrid[0:h, 0:w]
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    k_seg = spec.over_segmentation

    geoms: list[FrameGeometry] = []
    images = np.zeros((t_count, h, w, 3))
    depth = np.zeros((t_count, h, w))
    segments = np.full((t_count, h, w), -1, dtype=np.int32)
    shadow_masks = (
        np.zeros((t_count, h, w), dtype=bool) if spec.shadow is not None else None
    )
    part_masks: dict[tuple[int, int], np.ndarray] = {
        (oi, pi): np.zeros((t_count, h, w), dtype=bool)
        for oi, obj in enumerate(spec.objects)
        for pi in range(len(obj.parts))
    }

    for t in range(t_count):
        geom = _cast(spec, spec.cameras[t], float(t), pix)
        geoms.append(geom)
        frame = np.full((h * w, 3), BACKGROUND_COLOR)
        seg = np.full(h * w, -1, dtype=np.int32)
        for oi, obj in enumerate(spec.objects):
            for pi, part in enumerate(obj.parts):
                sel = (geom.object_index == oi) & (geom.part_index == pi)
                if not np.any(sel):
                    continue
                part_masks[(oi, pi)][t] = sel.reshape(h, w)
                pts = geom.local[sel]
                frame[sel] = part.texture.sample(pts)
                if k_seg == 1:
                    seg[sel] = oi
                else:
                    band = np.floor(
                        part.primitive.band_coordinate(pts) * k_seg
                    ).astype(np.int32)
                    seg[sel] = oi * k_seg + np.clip(band, 0, k_seg - 1)
        if spec.shadow is not None:
            sh = spec.shadow
            on_plane = (geom.object_index == sh.object_index) & (geom.part_index == 0)
            inside = on_plane & sh.region(geom.local[:, :2], float(t))
            frame[inside] *= 1.0 - sh.darken
            shadow_masks[t] = inside.reshape(h, w)
        images[t] = frame.reshape(h, w, 3)
        depth[t] = geom.depth.reshape(h, w)
        segments[t] = seg.reshape(h, w)

    depth_validity = depth > 0.0

    dyn_indices = [oi for oi, obj in enumerate(spec.objects) if obj.dynamic]
    object_masks = np.zeros((len(dyn_indices), t_count, h, w), dtype=bool)
    for d_idx, oi in enumerate(dyn_indices):
        for t in range(t_count):
            object_masks[d_idx, t] = (geoms[t].object_index == oi).reshape(h, w)
    object_segment_ids = {
        oi: list(range(oi * k_seg, (oi + 1) * k_seg)) if k_seg > 1 else [oi]
        for oi in range(len(spec.objects))
    }

    flows, flow_validity = _exact_flows(spec, geoms, shadow_masks, pix)
    video_depth = _degrade_video_depth(spec, depth, depth_validity, object_masks)
    mono_depth, mono_affines = _degrade_mono_depth(spec, depth)
    tracks, truth = _generate_tracks(spec, geoms, depth, dyn_indices)

    return OracleBundle(
        spec=spec,
        cameras=spec.cameras,
        images=images,
        depth=depth,
        depth_validity=depth_validity,
        video_depth=video_depth,
        mono_depth=mono_depth,
        mono_affines=mono_affines,
        flows=flows,
        flow_validity=flow_validity,
        segments=segments,
        object_masks=object_masks,
        dynamic_object_indices=dyn_indices,
        object_segment_ids=object_segment_ids,
        part_masks=part_masks,
        shadow_masks=shadow_masks,
        tracks=tracks,
        track_truth=truth,
    )


def _exact_flows(
    spec: SceneSpec,
    geoms: list[FrameGeometry],
    shadow_masks: np.ndarray | None,
    pix: np.ndarray,
) -> tuple[dict, dict]:
    t_count, h, w = spec.frame_count, spec.height, spec.width
    rng = np.random.default_rng([spec.seed, 1])
    flows: dict[tuple[int, int], np.ndarray] = {}
    validity: dict[tuple[int, int], np.ndarray] = {}
    sh = spec.shadow
    for t, t2 in epi_frame_pairs(t_count, spec.flow_gaps):
        geom = geoms[t]
        pos2 = pix.copy()
        ok = geom.object_index >= 0
        for oi, obj in enumerate(spec.objects):
            for pi, part in enumerate(obj.parts):
                sel = (geom.object_index == oi) & (geom.part_index == pi)
                if not np.any(sel):
                    continue
                local = geom.local[sel]
                if (
                    sh is not None
                    and sh.corrupt_flow
                    and oi == sh.object_index
                    and pi == 0
                ):
                    in_shadow = shadow_masks[t].ravel()[sel]
                    drift = np.concatenate([sh.velocity * (t2 - t), [0.0]])
                    local = np.where(in_shadow[:, None], local + drift, local)
                world2 = part.motion.pose(float(t2)).apply(local)
                px2, _z2, in_front = project_valid(spec.cameras[t2], world2)
                rows = np.flatnonzero(sel)
                pos2[rows] = px2
                ok[rows[~in_front]] = False
        flow = (pos2 - pix).reshape(h, w, 2)
        if spec.flow_noise_sigma > 0:
            flow = flow + rng.normal(0.0, spec.flow_noise_sigma, flow.shape)
        flows[(t, t2)] = flow
        validity[(t, t2)] = ok.reshape(h, w)
    return flows, validity


def _degrade_video_depth(
    spec: SceneSpec,
    depth: np.ndarray,
    depth_validity: np.ndarray,
    object_masks: np.ndarray,
) -> np.ndarray:
    video = depth.copy()
    sigma = spec.depth_blur_sigma
    if sigma <= 0 or object_masks.shape[0] == 0:
        return video
    # write only on the eroded interior so the blur redistributes depth within
    # the object (melting internal relief) instead of bleeding background in
    radius = int(np.ceil(2 * sigma))
    for t in range(spec.frame_count):
        region = np.any(object_masks[:, t], axis=0)
        if not region.any():
            continue
        interior = ~dilate(BinaryMask(~region), radius).values
        if not interior.any():
            continue
        filled = np.where(depth_validity[t], depth[t], np.max(depth[t]))
        blurred = ndimage.gaussian_filter(filled, sigma, mode="nearest")
        video[t] = np.where(interior & depth_validity[t], blurred, video[t])
    return video


def _degrade_mono_depth(
    spec: SceneSpec, depth: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([spec.seed, 2])
    mono = np.zeros_like(depth)
    affines = np.zeros((spec.frame_count, 2))
    for t in range(spec.frame_count):
        a = rng.uniform(0.45, 0.65)
        b = rng.uniform(0.10, 0.35)
        affines[t] = (a, b)
        mono[t] = a * depth[t] + b
    return mono, affines


def _interior_pixels(mask_flat: np.ndarray, h: int, w: int) -> np.ndarray:
    """Indices of pixels at least 2 px inside the mask; falls back to all."""
    mask = mask_flat.reshape(h, w)
    dist = distance_transform(BinaryMask(mask))
    interior = (dist >= 2.0).ravel()
    if not interior.any():
        interior = mask_flat
    return np.flatnonzero(interior)


def _generate_tracks(
    spec: SceneSpec,
    geoms: list[FrameGeometry],
    depth: np.ndarray,
    dyn_indices: list[int],
) -> tuple[TrackSet, TrackTruth]:
    t_count, h, w = spec.frame_count, spec.height, spec.width
    rng = np.random.default_rng([spec.seed, 3])

    # seed selection: (object_index or -1, part_index, spawn_frame, local point)
    seeds: list[tuple[int, int, int, np.ndarray]] = []
    for oi in dyn_indices:
        obj = spec.objects[oi]
        per_part = max(1, spec.tracks_per_object // len(obj.parts))
        for pi in range(len(obj.parts)):
            spawn = -1
            for t in range(t_count):
                sel = (geoms[t].object_index == oi) & (geoms[t].part_index == pi)
                if int(sel.sum()) >= _MIN_PART_PIXELS:
                    spawn = t
                    break
            if spawn < 0:
                log.warning("part (%d, %d) never visible; no tracks seeded", oi, pi)
                continue
            sel = (geoms[spawn].object_index == oi) & (geoms[spawn].part_index == pi)
            pool = _interior_pixels(sel, h, w)
            take = min(per_part, len(pool))
            chosen = rng.choice(pool, size=take, replace=False)
            for idx in np.sort(chosen):
                seeds.append((oi, pi, spawn, geoms[spawn].local[idx].copy()))
    if spec.static_tracks > 0:
        static_sel = np.zeros(h * w, dtype=bool)
        for oi, obj in enumerate(spec.objects):
            if not obj.dynamic:
                static_sel |= geoms[0].object_index == oi
        pool = _interior_pixels(static_sel, h, w)
        take = min(spec.static_tracks, len(pool))
        chosen = rng.choice(pool, size=take, replace=False)
        for idx in np.sort(chosen):
            oi = int(geoms[0].object_index[idx])
            pi = int(geoms[0].part_index[idx])
            seeds.append((-oi - 1, pi, 0, geoms[0].local[idx].copy()))

    n = len(seeds)
    points3d = np.zeros((n, t_count, 3))
    positions = np.zeros((n, t_count, 2))
    vis_true = np.zeros((n, t_count), dtype=bool)
    occluded_by = np.full((n, t_count), -1, dtype=np.int32)

    for t in range(t_count):
        cam = spec.cameras[t]
        for i, (tag, pi, _spawn, local) in enumerate(seeds):
            oi = tag if tag >= 0 else -tag - 1
            world = spec.objects[oi].parts[pi].motion.pose(float(t)).apply(local)
            points3d[i, t] = world
            px, z, in_front = project_valid(cam, world[None])
            px, z, in_front = px[0], float(z[0]), bool(in_front[0])
            if not in_front:
                positions[i, t] = positions[i, t - 1] if t > 0 else (0.0, 0.0)
                continue
            positions[i, t] = px
            in_bounds = (-0.5 <= px[0] <= w - 0.5) and (-0.5 <= px[1] <= h - 0.5)
            if not in_bounds:
                continue
            u = min(max(int(round(px[0])), 0), w - 1)
            v = min(max(int(round(px[1])), 0), h - 1)
            z_buffer = depth[t, v, u] if depth[t, v, u] > 0 else np.inf
            tol = max(0.02, 0.01 * z)
            if z <= z_buffer + tol:
                vis_true[i, t] = True
            else:
                occluded_by[i, t] = geoms[t].object_index[v * w + u]

    self_occluded = np.zeros((n, t_count), dtype=bool)
    tracks: list[Track] = []
    for i, (tag, _pi, spawn, _local) in enumerate(seeds):
        own = tag if tag >= 0 else -tag - 1
        self_occluded[i] = occluded_by[i] == own
        # the synthetic tracker follows the point until it first disappears
        # and never re-acquires it: a single visible run starting at spawn
        vis_tracker = np.zeros(t_count, dtype=bool)
        t = spawn
        while t < t_count and vis_true[i, t]:
            vis_tracker[t] = True
            t += 1
        tracks.append(
            Track(
                track_id=i,
                object_id=tag if tag >= 0 else None,
                spawn_frame=spawn,
                positions=positions[i].copy(),
                visibility=vis_tracker,
            )
        )

    truth = TrackTruth(points3d, vis_true, self_occluded, occluded_by)
    return TrackSet(tracks, t_count), truth


def retrack(
    spec: SceneSpec, frame: int, positions: np.ndarray, frames: list[int]
) -> np.ndarray:
    """Oracle point re-tracker: lock onto whatever surface is visible at the
    query pixel in the query frame and report its projection in other frames.

    Returns (N, len(frames), 2). Queries that hit nothing keep their input
    position everywhere.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    geom = _cast(spec, spec.cameras[frame], float(frame), positions)
    out = np.repeat(positions[:, None, :], len(frames), axis=1)
    for j, t in enumerate(frames):
        cam = spec.cameras[t]
        for oi, obj in enumerate(spec.objects):
            for pi, part in enumerate(obj.parts):
                sel = (geom.object_index == oi) & (geom.part_index == pi)
                if not np.any(sel):
                    continue
                world = part.motion.pose(float(t)).apply(geom.local[sel])
                px, _z, in_front = project_valid(cam, world)
                rows = np.flatnonzero(sel)[in_front]
                out[rows, j] = px[in_front]
    return out


def render_depth(
    spec: SceneSpec, camera: Camera, frame: int
) -> tuple[np.ndarray, np.ndarray]:
    """Exact depth of the scene state at `frame` seen from an arbitrary camera."""
    h, w = camera.height, camera.width
    ys, xs = np.mgrid[0:h, 0:w]
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    geom = _cast(spec, camera, float(frame), pix)
    depth = geom.depth.reshape(h, w)
    return depth, depth > 0


def pan_cameras(
    frame_count: int,
    width: int,
    height: int,
    focal: float,
    step: np.ndarray | tuple[float, float, float],
) -> list[Camera]:
    """Identity-rotation cameras translating by a fixed world step per frame."""
    step = np.asarray(step, dtype=np.float64)
    cams = []
    for t in range(frame_count):
        center = step * t
        pose = RigidTransform(np.array([1.0, 0, 0, 0]), -center)
        cams.append(
            Camera(
                fx=focal,
                fy=focal,
                cx=(width - 1) / 2.0,
                cy=(height - 1) / 2.0,
                width=width,
                height=height,
                pose=pose,
            )
        )
    return cams
