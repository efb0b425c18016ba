"""Loss assembly and gradient-descent fitting of the splat representation.

The total objective is a weighted sum of nine terms: photometric L1, a
structural-dissimilarity term, depth L1 against the refined prior, a
track-agreement term on the rendered flow, three scaffold regularizers
(rigidity, velocity, acceleration), the node reprojection term, and a depth
consistency term rendered from randomly sampled virtual viewpoints. The
virtual term is what keeps floaters from hiding in the blind spots of the
training cameras: a floater that looks fine from the training view lands in
the wrong place when the same scene is re-rendered a small baseline away.

`optimize` is deliberately plain gradient descent with per-group step sizes —
no momentum, no schedules, no densification. Every gradient it consumes is
analytic; nothing here differentiates numerically.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatchError,
    DivergenceDetectedError,
    NonFiniteLossError,
    NonPositiveDepthError,
    NoValidDepthError,
)
from .geometry import (
    Camera,
    DepthMap,
    FlowField,
    RigidTransform,
    bilinear_sample,
    quat_conjugate,
    quat_multiply,
    quat_normalize,
    quat_rotate,
)
from .render import (
    Gaussian,
    GaussianCloud,
    RenderAdjoint,
    RenderGradients,
    RenderOutput,
    bind_skinning,
    render,
    render_gradients,
    ssim,
    ssim_gradient,
)
from .scaffold import ScaffoldGraph, arap_loss, scaffold_projection_loss, vel_acc_losses
from .tracks import TrackSet

log = logging.getLogger(__name__)

# breakdown keys, in reporting order
LOSS_TERMS = (
    "rgb",
    "ssim",
    "depth",
    "track_gaussian",
    "arap",
    "vel",
    "acc",
    "track_scaffold",
    "depth_virtual",
)

_MIN_Z = 1e-9


@dataclass
class LossWeights:
    """Non-negative weight per loss term; a zero weight skips the term."""

    rgb: float = 1.0
    ssim: float = 0.1
    depth: float = 1.0
    track_gaussian: float = 1.0
    arap: float = 1.0
    vel: float = 0.1
    acc: float = 0.1
    track_scaffold: float = 1.0
    depth_virtual: float = 1.0

    def __post_init__(self) -> None:
        for name in LOSS_TERMS:
            value = float(getattr(self, name))
            if value < 0.0:
                raise ValueError(f"loss weight '{name}' must be non-negative, got {value}")
            setattr(self, name, value)


@dataclass
class VirtualViewConfig:
    """Sampling policy for virtual depth-supervision viewpoints.

    Offsets stay inside the camera's x-y plane with magnitude bounded by
    `max_offset_factor` times the median valid depth of the frame.
    """

    max_offset_factor: float = 0.18
    seed: int = 0
    samples_per_step: int = 1

    def __post_init__(self) -> None:
        if not self.max_offset_factor > 0.0:
            raise ValueError(f"max_offset_factor must be positive, got {self.max_offset_factor}")
        if self.samples_per_step < 1:
            raise ValueError("samples_per_step must be at least 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class OptimizerConfig:
    iterations: int = 500
    step_means: float = 2e-4
    step_colors: float = 5e-3
    step_opacities: float = 5e-3
    step_nodes: float = 2e-4
    seed: int = 0
    log_every: int = 25

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        steps = (self.step_means, self.step_colors, self.step_opacities, self.step_nodes)
        if min(steps) <= 0.0:
            raise ValueError(f"step sizes must be positive, got {steps}")
        if self.log_every < 1:
            raise ValueError("log_every must be at least 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class TrainingData:
    """Per-frame supervision: images in [0, 1], refined depth, cameras, tracks."""

    images: list[np.ndarray]
    depths: list[DepthMap]
    cameras: list[Camera]
    tracks: TrackSet | None = None

    def __post_init__(self) -> None:
        count = len(self.images)
        if count == 0:
            raise DimensionMismatchError("training data needs at least one frame")
        if len(self.depths) != count or len(self.cameras) != count:
            raise DimensionMismatchError(
                f"got {count} images, {len(self.depths)} depths, {len(self.cameras)} cameras"
            )
        for index, (image, depth, cam) in enumerate(zip(self.images, self.depths, self.cameras)):
            if image.shape != (cam.height, cam.width, 3):
                raise DimensionMismatchError(
                    f"frame {index}: image {image.shape} does not match camera "
                    f"{cam.height}x{cam.width}"
                )
            if depth.values.shape != (cam.height, cam.width):
                raise DimensionMismatchError(
                    f"frame {index}: depth {depth.values.shape} does not match camera"
                )
        if self.tracks is not None and self.tracks.frame_count != count:
            raise DimensionMismatchError(
                f"tracks span {self.tracks.frame_count} frames, data has {count}"
            )

    @property
    def frame_count(self) -> int:
        return len(self.images)


@dataclass
class ReconState:
    """Everything the optimizer is allowed to touch."""

    cloud: GaussianCloud
    graph: ScaffoldGraph | None = None


@dataclass
class StepGradients:
    """One descent step's analytic gradients plus the raw term values seen."""

    terms: dict[str, float]
    means: np.ndarray  # (N, 3)
    colors: np.ndarray  # (N, 3)
    opacities: np.ndarray  # (N,)
    node_translations: np.ndarray | None  # (M, T, 3)


# --- individual loss terms ----------------------------------------------------


def track_loss_gaussian(
    flow: FlowField | np.ndarray, tracks: TrackSet, frame: int, flow_frame: int
) -> float:
    """Mean pixel error between rendered flow and track motion.

    For every track visible at both frames, the rendered flow is bilinearly
    sampled at the track's position and compared against where the track
    actually went. Returns 0 (with a warning) when no track qualifies.
    """
    values = flow.values if isinstance(flow, FlowField) else np.asarray(flow, dtype=np.float64)
    return _track_flow_term(values, tracks, frame, flow_frame, 0.0, None)


def _track_flow_term(
    flow_values: np.ndarray,
    tracks: TrackSet,
    frame: int,
    flow_frame: int,
    adjoint_scale: float,
    adjoint_flow: np.ndarray | None,
) -> float:
    """Shared value/gradient path: scatters d(loss)/d(flow) into adjoint_flow."""
    chosen = [tr for tr in tracks.tracks if tr.visibility[frame] and tr.visibility[flow_frame]]
    if not chosen:
        log.warning("no tracks visible at both frame %d and frame %d", frame, flow_frame)
        return 0.0
    height, width = flow_values.shape[:2]
    total = 0.0
    for track in chosen:
        start = track.positions[frame]
        sampled = bilinear_sample(flow_values, start[None, :])[0]
        residual = start + sampled - track.positions[flow_frame]
        distance = float(np.linalg.norm(residual))
        total += distance
        if adjoint_flow is None or distance == 0.0:
            continue
        # distribute the unit residual over the same four corners the
        # bilinear lookup read, with identical border clamping
        spread = (adjoint_scale / (len(chosen) * distance)) * residual
        x = min(max(float(start[0]), 0.0), width - 1.0)
        y = min(max(float(start[1]), 0.0), height - 1.0)
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        x1, y1 = min(x0 + 1, width - 1), min(y0 + 1, height - 1)
        ax, ay = x - x0, y - y0
        adjoint_flow[y0, x0] += (1 - ax) * (1 - ay) * spread
        adjoint_flow[y0, x1] += ax * (1 - ay) * spread
        adjoint_flow[y1, x0] += (1 - ax) * ay * spread
        adjoint_flow[y1, x1] += ax * ay * spread
    return total / len(chosen)


def sample_virtual_view(
    cam: Camera, depth: DepthMap, cfg: VirtualViewConfig, seed
) -> Camera:
    """Shift the camera randomly inside its own x-y plane, depth-scaled.

    The offset direction is uniform on the circle and the magnitude uniform in
    [0, max_offset_factor * median valid depth]; intrinsics and orientation
    are untouched. Deterministic for a given seed.
    """
    valid_depths = depth.values[depth.validity]
    if valid_depths.size == 0:
        raise NoValidDepthError("cannot scale a virtual-view offset: no valid depth pixels")
    median = float(np.median(valid_depths))
    rng = np.random.default_rng(seed)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    magnitude = rng.uniform(0.0, cfg.max_offset_factor * median)
    offset_cam = np.array([magnitude * np.cos(angle), magnitude * np.sin(angle), 0.0])
    # pose maps world to camera, so shifting the camera center by R^T d means
    # subtracting d from the pose translation
    pose = RigidTransform(cam.pose.q.copy(), cam.pose.t - offset_cam)
    return Camera(
        fx=cam.fx,
        fy=cam.fy,
        cx=cam.cx,
        cy=cam.cy,
        width=cam.width,
        height=cam.height,
        pose=pose,
    )


def warp_depth_to_virtual(depth: DepthMap, cam: Camera, cam_virtual: Camera) -> DepthMap:
    """Forward point-splat of a depth map into a virtual camera.

    Every valid source pixel is lifted, moved into the virtual camera, and
    splatted onto its nearest target pixel; collisions keep the smallest
    depth, with ties broken by source pixel order (row-major). Pixels nothing
    lands on stay invalid.
    """
    height, width = cam.height, cam.width
    if depth.values.shape != (height, width):
        raise DimensionMismatchError(
            f"depth {depth.values.shape} does not match camera {height}x{width}"
        )
    if (cam_virtual.height, cam_virtual.width) != (height, width):
        raise DimensionMismatchError("virtual camera resolution differs from the source camera")

    out_values = np.zeros((height, width))
    out_valid = np.zeros((height, width), dtype=bool)
    src_y, src_x = np.nonzero(depth.validity)
    if src_y.size == 0:
        return DepthMap(out_values, out_valid)

    d = depth.values[src_y, src_x]
    x_cam = np.stack([(src_x - cam.cx) / cam.fx * d, (src_y - cam.cy) / cam.fy * d, d], axis=1)
    if np.array_equal(cam.pose.q, cam_virtual.pose.q):
        # pure translation between the cameras keeps the math exact, so a
        # zero-offset warp reproduces the input bit for bit
        x_virt = x_cam + (cam_virtual.pose.t - cam.pose.t)
    else:
        rot_src = cam.pose.rotation_matrix()
        rot_virt = cam_virtual.pose.rotation_matrix()
        rel_rot = rot_virt @ rot_src.T
        rel_t = cam_virtual.pose.t - rel_rot @ cam.pose.t
        x_virt = x_cam @ rel_rot.T + rel_t

    z = x_virt[:, 2]
    keep = z > _MIN_Z
    safe_z = np.where(keep, z, 1.0)
    px = np.rint(cam_virtual.fx * x_virt[:, 0] / safe_z + cam_virtual.cx).astype(np.int64)
    py = np.rint(cam_virtual.fy * x_virt[:, 1] / safe_z + cam_virtual.cy).astype(np.int64)
    keep &= (px >= 0) & (px < width) & (py >= 0) & (py < height)
    survivors = np.flatnonzero(keep)
    if survivors.size == 0:
        return DepthMap(out_values, out_valid)

    targets = py[survivors] * width + px[survivors]
    depths = z[survivors]
    # group by target pixel, nearest depth first, source order breaking ties
    order = np.lexsort((survivors, depths, targets))
    hit_pixels, first = np.unique(targets[order], return_index=True)
    winners = order[first]
    out_values.ravel()[hit_pixels] = depths[winners]
    out_valid.ravel()[hit_pixels] = True
    return DepthMap(out_values, out_valid)


def virtual_depth_loss(rendered: DepthMap, warped: DepthMap) -> float:
    """Mean absolute depth difference where both maps are valid."""
    if rendered.values.shape != warped.values.shape:
        raise DimensionMismatchError(
            f"rendered depth {rendered.values.shape} vs warped {warped.values.shape}"
        )
    support = rendered.validity & warped.validity
    if not np.any(support):
        log.warning("virtual depth loss has no supported pixels; contributes zero")
        return 0.0
    return float(np.mean(np.abs(rendered.values[support] - warped.values[support])))


# --- total loss and its gradients ---------------------------------------------


class _GradientSink:
    """Accumulates render gradients across the views touched by one step."""

    def __init__(self, state: ReconState):
        count = len(state.cloud.gaussians)
        self.means = np.zeros((count, 3))
        self.colors = np.zeros((count, 3))
        self.opacities = np.zeros(count)
        self.nodes = (
            np.zeros((len(state.graph.nodes), state.graph.frame_count, 3))
            if state.graph is not None
            else None
        )

    def add(self, grads: RenderGradients) -> None:
        self.means += grads.means
        self.colors += grads.colors
        self.opacities += grads.opacities
        if self.nodes is not None and grads.node_translations is not None:
            self.nodes += grads.node_translations


def _needs_render(weights: LossWeights, data: TrainingData, virtual_cfg) -> bool:
    if weights.rgb > 0 or weights.ssim > 0 or weights.depth > 0:
        return True
    if weights.track_gaussian > 0 and data.tracks is not None and data.frame_count > 1:
        return True
    return weights.depth_virtual > 0 and virtual_cfg is not None


def _render_frame_terms(
    state: ReconState,
    data: TrainingData,
    frame: int,
    weights: LossWeights,
    virtual_cfg: VirtualViewConfig | None,
    seed: int,
    skinning,
    sink: _GradientSink | None,
) -> dict[str, float]:
    """Value (and optionally gradient) pass for one frame's render losses.

    With a sink the per-pixel adjoints are assembled inside the renderer's
    forward pass, so each view is rasterized exactly once either way. The
    virtual viewpoints are seeded by (config seed, caller seed, frame, sample)
    so a step and a later re-evaluation can reproduce each other's views.
    """
    cloud, graph = state.cloud, state.graph
    cam = data.cameras[frame]
    image = data.images[frame]
    prior = data.depths[frame]
    use_flow = (
        weights.track_gaussian > 0 and data.tracks is not None and data.frame_count > 1
    )
    flow_frame = None
    flow_cam = None
    if use_flow:
        flow_frame = frame + 1 if frame + 1 < data.frame_count else frame - 1
        flow_cam = data.cameras[flow_frame]
    terms: dict[str, float] = {}

    def main_adjoint(out: RenderOutput) -> RenderAdjoint:
        adj_rgb = np.zeros_like(out.rgb) if sink is not None else None
        adj_depth = np.zeros_like(out.depth) if sink is not None else None
        adj_flow = np.zeros_like(out.flow) if sink is not None and use_flow else None
        if weights.rgb > 0:
            diff = out.rgb - image
            terms["rgb"] = float(np.mean(np.abs(diff)))
            if adj_rgb is not None:
                adj_rgb += (weights.rgb / diff.size) * np.sign(diff)
        if weights.ssim > 0:
            if adj_rgb is not None:
                similarity, image_grad = ssim_gradient(out.rgb, image)
                adj_rgb -= weights.ssim * image_grad
            else:
                similarity = ssim(out.rgb, image)
            terms["ssim"] = 1.0 - similarity
        if weights.depth > 0:
            support = out.depth_validity() & prior.validity
            count = int(np.count_nonzero(support))
            if count:
                diff = out.depth - prior.values
                terms["depth"] = float(np.mean(np.abs(diff[support])))
                if adj_depth is not None:
                    adj_depth += (weights.depth / count) * np.where(support, np.sign(diff), 0.0)
            else:
                log.debug("frame %d: no overlap between rendered and prior depth", frame)
        if use_flow:
            terms["track_gaussian"] = _track_flow_term(
                out.flow, data.tracks, frame, flow_frame, weights.track_gaussian, adj_flow
            )
        return RenderAdjoint(rgb=adj_rgb, depth=adj_depth, flow=adj_flow)

    if weights.rgb > 0 or weights.ssim > 0 or weights.depth > 0 or use_flow:
        if sink is None:
            main_adjoint(
                render(cloud, graph, cam, frame, flow_frame=flow_frame, flow_cam=flow_cam,
                       skinning=skinning)
            )
        else:
            sink.add(
                render_gradients(cloud, graph, cam, frame, main_adjoint,
                                 flow_frame=flow_frame, flow_cam=flow_cam, skinning=skinning)
            )

    if weights.depth_virtual > 0 and virtual_cfg is not None:
        accumulated = 0.0
        samples = virtual_cfg.samples_per_step
        for sample in range(samples):
            view_seed = (virtual_cfg.seed, seed, frame, sample)
            virtual_cam = sample_virtual_view(cam, prior, virtual_cfg, view_seed)
            warped = warp_depth_to_virtual(prior, cam, virtual_cam)
            if sink is None:
                virtual_out = render(cloud, graph, virtual_cam, frame, skinning=skinning)
                accumulated += virtual_depth_loss(virtual_out.depth_map(), warped)
            else:
                value_box = [0.0]

                def virtual_adjoint(out: RenderOutput, _warped=warped, _box=value_box):
                    adj_depth = np.zeros_like(out.depth)
                    support = out.depth_validity() & _warped.validity
                    count = int(np.count_nonzero(support))
                    if count:
                        diff = out.depth - _warped.values
                        _box[0] = float(np.mean(np.abs(diff[support])))
                        adj_depth += (weights.depth_virtual / (count * samples)) * np.where(
                            support, np.sign(diff), 0.0
                        )
                    else:
                        log.warning(
                            "virtual depth loss has no supported pixels; contributes zero"
                        )
                    return RenderAdjoint(depth=adj_depth)

                sink.add(
                    render_gradients(cloud, graph, virtual_cam, frame, virtual_adjoint,
                                     skinning=skinning)
                )
                accumulated += value_box[0]
        terms["depth_virtual"] = accumulated / samples
    return terms


def total_loss(
    state: ReconState,
    data: TrainingData,
    frames,
    weights: LossWeights,
    virtual_cfg: VirtualViewConfig | None = None,
    seed: int = 0,
    skinning=None,
) -> tuple[float, dict[str, float]]:
    """Weighted sum over a batch of frames, with the raw per-term breakdown.

    Render-dependent terms are averaged over the batch; scaffold terms are
    global. Raises NonFiniteLossError naming the first non-finite term.
    A precomputed `skinning` binding freezes the blend weights, e.g. to probe
    the loss with finite differences on exactly what the gradients model.
    """
    raw = {name: 0.0 for name in LOSS_TERMS}
    frames = list(frames)
    if frames and _needs_render(weights, data, virtual_cfg):
        if skinning is None:
            skinning = bind_skinning(state.cloud, state.graph)
        for frame in frames:
            frame_terms = _render_frame_terms(
                state, data, frame, weights, virtual_cfg, seed, skinning, sink=None
            )
            for name, value in frame_terms.items():
                raw[name] += value / len(frames)

    if state.graph is not None:
        if weights.arap > 0:
            raw["arap"] = arap_loss(state.graph)
        if weights.vel > 0 or weights.acc > 0:
            velocity, acceleration = vel_acc_losses(state.graph)
            if weights.vel > 0:
                raw["vel"] = velocity
            if weights.acc > 0:
                raw["acc"] = acceleration
        if weights.track_scaffold > 0 and data.tracks is not None:
            raw["track_scaffold"] = scaffold_projection_loss(
                state.graph, data.tracks, data.cameras
            )

    total = 0.0
    for name in LOSS_TERMS:
        if not math.isfinite(raw[name]):
            raise NonFiniteLossError(f"loss term '{name}' is not finite ({raw[name]})")
        total += getattr(weights, name) * raw[name]
    return total, raw


def step_gradients(
    state: ReconState,
    data: TrainingData,
    frame: int,
    weights: LossWeights,
    virtual_cfg: VirtualViewConfig | None = None,
    seed: int = 0,
    skinning=None,
) -> StepGradients:
    """Analytic gradients of the single-frame total loss.

    Matches `total_loss(state, data, [frame], ...)` evaluated with the same
    seed, including the virtual viewpoints it samples. Blend weights are
    treated as locally constant; pass the same precomputed `skinning` here
    and to `total_loss` to compare against finite differences.
    """
    sink = _GradientSink(state)
    terms = {name: 0.0 for name in LOSS_TERMS}
    if _needs_render(weights, data, virtual_cfg):
        if skinning is None:
            skinning = bind_skinning(state.cloud, state.graph)
        terms.update(
            _render_frame_terms(state, data, frame, weights, virtual_cfg, seed, skinning, sink)
        )

    graph = state.graph
    if graph is not None and sink.nodes is not None:
        if weights.arap > 0:
            value, grad = _arap_term_gradients(graph)
            terms["arap"] = value
            sink.nodes += weights.arap * grad
        if weights.vel > 0 or weights.acc > 0:
            velocity, vel_grad, acceleration, acc_grad = _smoothness_term_gradients(graph)
            if weights.vel > 0:
                terms["vel"] = velocity
                sink.nodes += weights.vel * vel_grad
            if weights.acc > 0:
                terms["acc"] = acceleration
                sink.nodes += weights.acc * acc_grad
        if weights.track_scaffold > 0 and data.tracks is not None:
            value, grad = _projection_term_gradients(graph, data.tracks, data.cameras)
            terms["track_scaffold"] = value
            sink.nodes += weights.track_scaffold * grad

    return StepGradients(
        terms=terms,
        means=sink.means,
        colors=sink.colors,
        opacities=sink.opacities,
        node_translations=sink.nodes,
    )


# --- scaffold term gradients ----------------------------------------------------


def _safe_unit(vectors: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Row-wise v / |v| with zero rows left at zero (the L2 subgradient)."""
    out = np.zeros_like(vectors)
    np.divide(vectors, norms[..., None], out=out, where=norms[..., None] > 0.0)
    return out


def _arap_term_gradients(graph: ScaffoldGraph) -> tuple[float, np.ndarray]:
    """Rigidity score and d(score)/d(node translations); rotations held fixed."""
    frame_count = graph.frame_count
    grads = np.zeros((len(graph.nodes), frame_count, 3))
    if graph.edges.size == 0 or frame_count < 2:
        return 0.0, grads
    total = 0.0
    for i, j in graph.edges:
        a, b = graph.nodes[i], graph.nodes[j]
        vec = b.translations - a.translations  # (T, 3)
        lengths = np.linalg.norm(vec, axis=1)
        rel = quat_multiply(a.rotations[1:], quat_conjugate(a.rotations[:-1]))
        carried = quat_rotate(rel, vec[:-1])
        length_diff = lengths[1:] - lengths[:-1]
        transport = vec[1:] - carried
        transport_norm = np.linalg.norm(transport, axis=1)
        total += float(np.sum(np.abs(length_diff)))
        total += float(np.sum(transport_norm))

        unit = _safe_unit(vec, lengths)
        sign = np.sign(length_diff)[:, None]
        d_vec = np.zeros_like(vec)
        d_vec[1:] += sign * unit[1:]
        d_vec[:-1] -= sign * unit[:-1]
        transport_unit = _safe_unit(transport, transport_norm)
        d_vec[1:] += transport_unit
        # the earlier edge vector enters through the rotation, so pull the
        # unit residual back through it
        d_vec[:-1] -= quat_rotate(quat_conjugate(rel), transport_unit)
        grads[j] += d_vec
        grads[i] -= d_vec
    scale = len(graph.edges) * (frame_count - 1)
    return total / scale, grads / scale


def _smoothness_term_gradients(
    graph: ScaffoldGraph,
) -> tuple[float, np.ndarray, float, np.ndarray]:
    """Velocity and acceleration magnitudes with their translation gradients."""
    frame_count = graph.frame_count
    shape = (len(graph.nodes), frame_count, 3)
    if not graph.nodes or frame_count < 2:
        return 0.0, np.zeros(shape), 0.0, np.zeros(shape)
    translations = np.stack([node.translations for node in graph.nodes])  # (N, T, 3)
    steps = np.diff(translations, axis=1)
    step_norms = np.linalg.norm(steps, axis=2)
    velocity = float(np.mean(step_norms))
    unit = _safe_unit(steps, step_norms)
    vel_grad = np.zeros(shape)
    vel_scale = 1.0 / (len(graph.nodes) * (frame_count - 1))
    vel_grad[:, 1:] += vel_scale * unit
    vel_grad[:, :-1] -= vel_scale * unit

    if frame_count < 3:
        return velocity, vel_grad, 0.0, np.zeros(shape)
    curvature = np.diff(steps, axis=1)
    curvature_norms = np.linalg.norm(curvature, axis=2)
    acceleration = float(np.mean(curvature_norms))
    curvature_unit = _safe_unit(curvature, curvature_norms)
    acc_grad = np.zeros(shape)
    acc_scale = 1.0 / (len(graph.nodes) * (frame_count - 2))
    acc_grad[:, 2:] += acc_scale * curvature_unit
    acc_grad[:, 1:-1] -= 2.0 * acc_scale * curvature_unit
    acc_grad[:, :-2] += acc_scale * curvature_unit
    return velocity, vel_grad, acceleration, acc_grad


def _projection_term_gradients(
    graph: ScaffoldGraph, tracks: TrackSet, cameras: list[Camera]
) -> tuple[float, np.ndarray]:
    """Node reprojection error and its gradient over visible frames."""
    if len(cameras) != graph.frame_count:
        raise DimensionMismatchError(
            f"graph spans {graph.frame_count} frames, got {len(cameras)} cameras"
        )
    by_id = {tr.track_id: tr for tr in tracks.tracks}
    rotations = [cam.pose.rotation_matrix() for cam in cameras]
    grads = np.zeros((len(graph.nodes), graph.frame_count, 3))
    total = 0.0
    count = 0
    for node_index, node in enumerate(graph.nodes):
        track = by_id.get(node.track_id)
        if track is None:
            raise KeyError(
                f"scaffold node {node.node_id} references unknown track {node.track_id}"
            )
        for t in np.flatnonzero(node.visible):
            cam = cameras[t]
            x_cam = rotations[t] @ node.translations[t] + cam.pose.t
            x, y, z = x_cam
            if z <= _MIN_Z:
                raise NonPositiveDepthError(
                    f"node {node.node_id} sits at or behind the camera at frame {t}"
                )
            pixel = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
            residual = pixel - track.positions[t]
            distance = float(np.linalg.norm(residual))
            total += distance
            count += 1
            if distance > 0.0:
                d_pixel = residual / distance
                jac = np.array(
                    [
                        [cam.fx / z, 0.0, -cam.fx * x / z**2],
                        [0.0, cam.fy / z, -cam.fy * y / z**2],
                    ]
                )
                grads[node_index, t] += rotations[t].T @ (jac.T @ d_pixel)
    if count == 0:
        return 0.0, grads
    return total / count, grads / count


# --- optimizer ------------------------------------------------------------------

_MIN_OPACITY = 1e-4


def _apply_step(state: ReconState, grads: StepGradients, cfg: OptimizerConfig) -> None:
    for index, g in enumerate(state.cloud.gaussians):
        g.mean -= cfg.step_means * grads.means[index]
        g.color = np.clip(g.color - cfg.step_colors * grads.colors[index], 0.0, 1.0)
        g.opacity = float(
            np.clip(
                g.opacity - cfg.step_opacities * grads.opacities[index],
                _MIN_OPACITY,
                1.0 - _MIN_OPACITY,
            )
        )
        g.rotation = quat_normalize(g.rotation)
    if state.graph is not None and grads.node_translations is not None:
        for node_index, node in enumerate(state.graph.nodes):
            node.translations -= cfg.step_nodes * grads.node_translations[node_index]
            node.rotations = quat_normalize(node.rotations)


def optimize(
    state: ReconState,
    data: TrainingData,
    weights: LossWeights,
    cfg: OptimizerConfig,
    virtual_cfg: VirtualViewConfig | None = None,
) -> tuple[ReconState, list[dict[str, float]]]:
    """Per-group gradient descent over means, colors, opacities, node motion.

    Each iteration takes one training frame (round-robin) and descends its
    single-frame loss; every `log_every` iterations the full-batch loss is
    evaluated with a fixed seed, appended to the returned history, and used to
    track the best iterate. Returns the best state seen, so the final loss
    never exceeds the initial one. Raises DivergenceDetectedError (with the
    best state attached as `.state` and the log as `.history`) if the
    full-batch loss grows past ten times its running minimum.

    The input state is not modified. Gaussian scales and rotations, and node
    rotations, are held fixed; quaternions are re-normalized after every step.
    """
    work = copy.deepcopy(state)
    frames = list(range(data.frame_count))
    total, raw = total_loss(work, data, frames, weights, virtual_cfg, seed=0)
    history = [{"iteration": 0, **raw, "total": total}]
    best_total = total
    best_state = copy.deepcopy(work)
    log.info("optimize: start, total loss %.6g over %d frames", total, len(frames))

    for iteration in range(1, cfg.iterations + 1):
        frame = frames[(iteration - 1) % len(frames)]
        grads = step_gradients(work, data, frame, weights, virtual_cfg, seed=iteration)
        _apply_step(work, grads, cfg)

        if iteration % cfg.log_every == 0 or iteration == cfg.iterations:
            total, raw = total_loss(work, data, frames, weights, virtual_cfg, seed=0)
            history.append({"iteration": iteration, **raw, "total": total})
            if total < best_total:
                best_total = total
                best_state = copy.deepcopy(work)
            log.info("optimize: iteration %d, total loss %.6g", iteration, total)
            if best_total > 0.0 and total > 10.0 * best_total:
                error = DivergenceDetectedError(
                    f"total loss {total:.6g} grew past 10x its minimum {best_total:.6g} "
                    f"at iteration {iteration}"
                )
                error.state = best_state
                error.history = history
                raise error

    return best_state, history


def format_loss_history(history: list[dict[str, float]]) -> str:
    """Plain-text table: one row per logged iteration, one column per term."""
    columns = ("iteration", *LOSS_TERMS, "total")
    rows = [columns]
    for record in history:
        rows.append(
            (str(int(record["iteration"])),)
            + tuple(f"{float(record[name]):.9e}" for name in columns[1:])
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(columns))]
    lines = ["  ".join(cell.rjust(width) for cell, width in zip(row, widths)) for row in rows]
    return "\n".join(lines) + "\n"


# --- initialization and checkpoints ----------------------------------------------


def seed_cloud(
    image: np.ndarray,
    depth: DepthMap,
    cam: Camera,
    dynamic_mask: np.ndarray | None = None,
    stride: int = 2,
    opacity: float = 0.7,
    size_factor: float = 0.7,
    background=(0.0, 0.0, 0.0),
    anchor_frame: int = 0,
) -> GaussianCloud:
    """Back-project a pixel grid into an isotropic starting cloud.

    One Gaussian per `stride` pixels where depth is valid, colored from the
    image, sized so neighbouring footprints overlap, and flagged dynamic
    where `dynamic_mask` is set.
    """
    height, width = depth.values.shape
    if image.shape != (height, width, 3):
        raise DimensionMismatchError(f"image {image.shape} does not match depth {depth.values.shape}")
    if stride < 1:
        raise ValueError("stride must be at least 1")
    pose_inverse = cam.pose.inverse()
    rot_back = pose_inverse.rotation_matrix()
    gaussians: list[Gaussian] = []
    for y in range(stride // 2, height, stride):
        for x in range(stride // 2, width, stride):
            if not depth.validity[y, x]:
                continue
            d = float(depth.values[y, x])
            ray = np.array([(x - cam.cx) / cam.fx * d, (y - cam.cy) / cam.fy * d, d])
            world = rot_back @ ray + pose_inverse.t
            extent = size_factor * d * stride / cam.fx
            gaussians.append(
                Gaussian(
                    mean=world,
                    scales=np.full(3, extent),
                    opacity=opacity,
                    color=np.clip(image[y, x], 0.0, 1.0),
                    dynamic=bool(dynamic_mask[y, x]) if dynamic_mask is not None else False,
                    anchor_frame=anchor_frame,
                )
            )
    return GaussianCloud(gaussians, np.asarray(background, dtype=np.float64))


def serialize_cloud(cloud: GaussianCloud) -> str:
    def pack(values) -> str:
        return ":".join(repr(float(v)) for v in np.atleast_1d(values))

    lines = [f"# gaussians v1 count={len(cloud)} background={pack(cloud.background)}"]
    for g in cloud.gaussians:
        lines.append(
            " ".join(
                [
                    "gaussian",
                    pack(g.mean),
                    pack(g.rotation),
                    pack(g.scales),
                    repr(float(g.opacity)),
                    pack(g.color),
                    str(int(g.dynamic)),
                    str(int(g.anchor_frame)),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def deserialize_cloud(text: str) -> GaussianCloud:
    background = np.zeros(3)
    gaussians: list[Gaussian] = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for token in line.split():
                if token.startswith("background="):
                    background = np.array([float(v) for v in token.split("=")[1].split(":")])
            continue
        cells = line.split()
        if cells[0] != "gaussian" or len(cells) != 8:
            raise ValueError(f"unrecognized cloud record: {line[:40]}")
        unpack = lambda cell: np.array([float(v) for v in cell.split(":")])  # noqa: E731
        gaussians.append(
            Gaussian(
                mean=unpack(cells[1]),
                rotation=unpack(cells[2]),
                scales=unpack(cells[3]),
                opacity=float(cells[4]),
                color=unpack(cells[5]),
                dynamic=bool(int(cells[6])),
                anchor_frame=int(cells[7]),
            )
        )
    return GaussianCloud(gaussians, background)
