"""Software splatting renderer for anisotropic 3-D Gaussians.

Each Gaussian is projected through a first-order (Jacobian) approximation of
the pinhole camera and rasterized exactly inside its 3-sigma footprint; pixels
are composited front to back in ascending camera-space depth, with ties broken
by Gaussian id, so the output is bit-deterministic no matter how the work is
scheduled. Dynamic Gaussians ride the motion scaffold: their canonical mean is
carried to the target frame by dual-quaternion blending of the nearest nodes.

The backward pass (`render_gradients`) is fully analytic — including the
dependence of the projected covariance on the camera-space mean — and treats
skinning blend weights as locally constant, which is the standard
linear-blend-skinning approximation.
"""
from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError, NoNodesError
from .geometry import (
    Camera,
    DepthMap,
    FlowField,
    quat_conjugate,
    quat_multiply,
    quat_normalize,
    quat_rotate,
    quat_to_matrix,
)
from .scaffold import ScaffoldGraph, skinning_weights

log = logging.getLogger(__name__)

# Depth readings are composited expectations; below this accumulated alpha the
# pixel is mostly background and the expectation is meaningless.
DEPTH_ALPHA_THRESHOLD = 0.5

_MIN_Z = 1e-6
_MIN_DET = 1e-18
# chi-square bound of the rasterized footprint: 3 sigma in the 2-D Gaussian
_FOOTPRINT_Q = 9.0


@dataclass
class Gaussian:
    """One anisotropic splat.

    `rotation` (wxyz) orients the principal axes, `scales` are per-axis
    standard deviations. Dynamic Gaussians live in a canonical frame
    (`anchor_frame`) and are deformed by the scaffold at render time.
    """

    mean: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    scales: np.ndarray = field(default_factory=lambda: np.full(3, 0.1))
    opacity: float = 0.5
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    dynamic: bool = False
    anchor_frame: int = 0

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3).copy()
        self.rotation = quat_normalize(np.asarray(self.rotation, dtype=np.float64).reshape(4))
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(3).copy()
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3).copy()
        self.opacity = float(self.opacity)
        if not np.all(self.scales > 0.0):
            raise ValueError(f"scales must be positive, got {self.scales.tolist()}")
        if not 0.0 < self.opacity < 1.0:
            raise ValueError(f"opacity must lie strictly inside (0, 1), got {self.opacity}")
        if np.any(self.color < 0.0) or np.any(self.color > 1.0):
            raise ValueError(f"color must lie in [0, 1], got {self.color.tolist()}")


@dataclass
class GaussianCloud:
    gaussians: list[Gaussian] = field(default_factory=list)
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3).copy()
        if np.any(self.background < 0.0) or np.any(self.background > 1.0):
            raise ValueError(f"background must lie in [0, 1], got {self.background.tolist()}")

    def __len__(self) -> int:
        return len(self.gaussians)

    def __iter__(self):
        return iter(self.gaussians)


@dataclass
class RenderOutput:
    """Composited rasters. Depth is only meaningful where `depth_validity()`
    holds; flow is the composited pixel displacement toward the flow frame."""

    rgb: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    flow: np.ndarray  # (H, W, 2)
    alpha: np.ndarray  # (H, W)

    def depth_validity(self) -> np.ndarray:
        return self.alpha > DEPTH_ALPHA_THRESHOLD

    def depth_map(self) -> DepthMap:
        valid = self.depth_validity()
        return DepthMap(np.where(valid, self.depth, 0.0), valid)

    def flow_field(self) -> FlowField:
        return FlowField(self.flow.copy())


@dataclass
class RenderAdjoint:
    """Per-pixel loss derivatives with respect to the rendered channels.

    Any channel left as None contributes nothing.
    """

    rgb: np.ndarray | None = None
    depth: np.ndarray | None = None
    flow: np.ndarray | None = None
    alpha: np.ndarray | None = None


@dataclass
class RenderGradients:
    """Loss derivatives for the optimizable render inputs.

    `node_translations` has one row per scaffold node and frame; it is None
    when no graph was supplied. `output` carries the forward render so callers
    do not pay for a second pass.
    """

    means: np.ndarray  # (N, 3) — canonical means for dynamic Gaussians
    colors: np.ndarray  # (N, 3)
    opacities: np.ndarray  # (N,)
    node_translations: np.ndarray | None  # (M, T, 3)
    output: RenderOutput


@dataclass(frozen=True)
class SkinBinding:
    """Frozen attachment of one dynamic Gaussian to its scaffold nodes."""

    node_ids: np.ndarray
    weights: np.ndarray


def bind_skinning(cloud: GaussianCloud, graph: ScaffoldGraph | None) -> list[SkinBinding | None]:
    """Compute each dynamic Gaussian's node weights at its anchor frame.

    Bindings are meant to be recomputed whenever means or nodes move, but are
    treated as constants inside a single render/gradient evaluation.
    """
    bindings: list[SkinBinding | None] = []
    for g in cloud.gaussians:
        if not g.dynamic:
            bindings.append(None)
            continue
        if graph is None:
            raise NoNodesError("dynamic Gaussians require a scaffold graph")
        ids, weights = skinning_weights(graph, g.mean, g.anchor_frame)
        bindings.append(SkinBinding(ids, weights))
    return bindings


def _camera_jacobian(cam: Camera, x_cam: np.ndarray) -> np.ndarray:
    """First-order pinhole projection Jacobian (2x3) at a camera-space point."""
    x, y, z = x_cam
    return np.array(
        [
            [cam.fx / z, 0.0, -cam.fx * x / z**2],
            [0.0, cam.fy / z, -cam.fy * y / z**2],
        ]
    )


def _pixel_of(cam: Camera, x_cam: np.ndarray) -> np.ndarray:
    return np.array(
        [cam.fx * x_cam[0] / x_cam[2] + cam.cx, cam.fy * x_cam[1] / x_cam[2] + cam.cy]
    )


@dataclass
class _RelTable:
    """Per-node relative motion between one frame pair, as dual quaternions.

    `rights` holds each node's d(raw dual)/d(relative translation) map and
    `rotmats` the relative rotations, both precomputed once per frame pair so
    the backward pass does not rebuild them per Gaussian.
    """

    reals: np.ndarray  # (M, 4)
    duals: np.ndarray  # (M, 4)
    rotmats: np.ndarray  # (M, 3, 3)
    rights: np.ndarray  # (M, 4, 3)


def _relative_dq_table(graph: ScaffoldGraph, frame_from: int, frame_to: int) -> _RelTable:
    q_from = np.stack([node.rotations[frame_from] for node in graph.nodes])
    q_to = np.stack([node.rotations[frame_to] for node in graph.nodes])
    t_from = np.stack([node.translations[frame_from] for node in graph.nodes])
    t_to = np.stack([node.translations[frame_to] for node in graph.nodes])
    rel_q = quat_multiply(q_to, quat_conjugate(q_from))
    rel_t = t_to - quat_rotate(rel_q, t_from)
    pure = np.concatenate([np.zeros((len(rel_t), 1)), rel_t], axis=1)
    duals = 0.5 * quat_multiply(pure, rel_q)

    m = len(rel_q)
    rw, rv = rel_q[:, 0], rel_q[:, 1:]
    rights = np.zeros((m, 4, 3))
    rights[:, 0, :] = -rv
    rights[:, 1:, :] = rw[:, None, None] * np.eye(3)
    for i in range(m):
        rights[i, 1:, :] -= _cross_matrix(rv[i])
    return _RelTable(rel_q, duals, quat_to_matrix(rel_q), rights)


@dataclass
class _Blend:
    """One Gaussian's normalized dual-quaternion blend, with the frozen
    sign-corrected weights kept around for the backward pass."""

    rot: np.ndarray  # (3, 3)
    trans: np.ndarray  # (3,)
    real_unit: np.ndarray  # (4,)
    real_norm: float
    signed_weights: np.ndarray  # (K,)


def _blend_rows(table: _RelTable, binding: SkinBinding) -> _Blend:
    rows_r = table.reals[binding.node_ids]
    rows_d = table.duals[binding.node_ids]
    reference = rows_r[int(np.argmax(binding.weights))]
    signed = np.where(rows_r @ reference < 0.0, -binding.weights, binding.weights)
    real_sum = signed @ rows_r
    dual_sum = signed @ rows_d
    norm = float(np.linalg.norm(real_sum))
    if norm < 1e-12:
        raise ZeroDivisionError("degenerate dual-quaternion blend")
    real_unit = real_sum / norm
    dual_n = (dual_sum - real_unit * float(real_unit @ dual_sum)) / norm
    trans = 2.0 * quat_multiply(dual_n, quat_conjugate(real_unit))[1:]
    return _Blend(quat_to_matrix(real_unit), trans, real_unit, norm, signed)


def _cross_matrix(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _dual_to_translation_map(blend: _Blend) -> np.ndarray:
    """Linear 3x4 map from the raw blended dual part to the translation.

    The normalized translation is t = 2 vec(dual_n x conj(real_unit)) with
    dual_n = (D - r(r.D)) / |R|, which is linear in the raw dual sum D.
    """
    rw, rv = blend.real_unit[0], blend.real_unit[1:]
    m_conj = np.concatenate([-rv[:, None], rw * np.eye(3) + _cross_matrix(rv)], axis=1)
    proj = np.eye(4) - np.outer(blend.real_unit, blend.real_unit)
    return (2.0 / blend.real_norm) * (m_conj @ proj)


@dataclass
class _Splat:
    """Per-Gaussian quantities shared by the forward and backward passes."""

    index: int
    gaussian: Gaussian
    binding: SkinBinding | None
    z: float
    pixel: np.ndarray  # (2,)
    disp: np.ndarray  # (2,) flow displacement of the projected mean
    inv_cov: np.ndarray  # (2, 2)
    x_cam: np.ndarray  # (3,)
    cov_cam: np.ndarray  # (3, 3)
    jac: np.ndarray  # (2, 3)
    rot_blend: np.ndarray  # (3, 3) scaffold rotation applied at the target frame
    rot_blend_flow: np.ndarray  # (3, 3) same at the flow frame
    x_cam_flow: np.ndarray | None  # camera-space mean at the flow frame, if in front
    ys: slice
    xs: slice
    blend: _Blend | None = None
    blend_flow: _Blend | None = None
    table: _RelTable | None = None  # node motion anchor -> frame
    table_flow: _RelTable | None = None


def _prepare_splats(
    cloud: GaussianCloud,
    graph: ScaffoldGraph | None,
    cam: Camera,
    frame: int,
    flow_frame: int,
    flow_cam: Camera,
    skinning: list[SkinBinding | None],
) -> list[_Splat]:
    rot_pose = cam.pose.rotation_matrix()
    t_pose = cam.pose.t
    rot_pose_flow = flow_cam.pose.rotation_matrix()
    t_pose_flow = flow_cam.pose.t
    eye = np.eye(3)
    rot_gauss = (
        quat_to_matrix(np.stack([g.rotation for g in cloud.gaussians]))
        if cloud.gaussians
        else np.zeros((0, 3, 3))
    )
    tables: dict[tuple[int, int], _RelTable] = {}

    def table_for(frame_from: int, frame_to: int) -> _RelTable:
        key = (frame_from, frame_to)
        if key not in tables:
            tables[key] = _relative_dq_table(graph, frame_from, frame_to)
        return tables[key]

    splats: list[_Splat] = []
    for index, g in enumerate(cloud.gaussians):
        binding = skinning[index]
        blend = blend_flow = None
        table = table_flow = None
        if g.dynamic:
            assert binding is not None
            table = table_for(g.anchor_frame, frame)
            table_flow = table_for(g.anchor_frame, flow_frame)
            blend = _blend_rows(table, binding)
            blend_flow = _blend_rows(table_flow, binding)
            mean = blend.rot @ g.mean + blend.trans
            mean_flow = blend_flow.rot @ g.mean + blend_flow.trans
            rot_blend = blend.rot
            rot_blend_flow = blend_flow.rot
        else:
            mean = g.mean
            mean_flow = g.mean
            rot_blend = eye
            rot_blend_flow = eye

        x_cam = rot_pose @ mean + t_pose
        if x_cam[2] <= _MIN_Z:
            continue

        rot_world = rot_blend @ rot_gauss[index]
        cov_world = (rot_world * g.scales**2) @ rot_world.T
        cov_cam = rot_pose @ cov_world @ rot_pose.T
        jac = _camera_jacobian(cam, x_cam)
        cov2d = jac @ cov_cam @ jac.T
        det = cov2d[0, 0] * cov2d[1, 1] - cov2d[0, 1] ** 2
        if not np.isfinite(det) or det <= _MIN_DET:
            log.debug("gaussian %d has a degenerate projected covariance; skipped", index)
            continue
        inv_cov = np.array(
            [[cov2d[1, 1], -cov2d[0, 1]], [-cov2d[0, 1], cov2d[0, 0]]]
        ) / det

        pixel = _pixel_of(cam, x_cam)
        half_trace = 0.5 * (cov2d[0, 0] + cov2d[1, 1])
        lam_max = half_trace + math.sqrt(max(half_trace**2 - det, 0.0))
        radius = 3.0 * math.sqrt(lam_max)
        x0 = max(0, int(math.ceil(pixel[0] - radius)))
        x1 = min(cam.width - 1, int(math.floor(pixel[0] + radius)))
        y0 = max(0, int(math.ceil(pixel[1] - radius)))
        y1 = min(cam.height - 1, int(math.floor(pixel[1] + radius)))
        if x0 > x1 or y0 > y1:
            continue

        x_cam_flow = rot_pose_flow @ mean_flow + t_pose_flow
        if x_cam_flow[2] > _MIN_Z:
            disp = _pixel_of(flow_cam, x_cam_flow) - pixel
        else:
            x_cam_flow = None
            disp = np.zeros(2)

        splats.append(
            _Splat(
                index=index,
                gaussian=g,
                binding=binding,
                z=float(x_cam[2]),
                pixel=pixel,
                disp=disp,
                inv_cov=inv_cov,
                x_cam=x_cam,
                cov_cam=cov_cam,
                jac=jac,
                rot_blend=rot_blend,
                rot_blend_flow=rot_blend_flow,
                x_cam_flow=x_cam_flow,
                ys=slice(y0, y1 + 1),
                xs=slice(x0, x1 + 1),
                blend=blend,
                blend_flow=blend_flow,
                table=table,
                table_flow=table_flow,
            )
        )
    splats.sort(key=lambda s: (s.z, s.index))
    return splats


def _splat_weights(splat: _Splat) -> np.ndarray:
    """Per-pixel alpha contribution inside the bounding box (0 outside 3 sigma)."""
    ys = np.arange(splat.ys.start, splat.ys.stop, dtype=np.float64)
    xs = np.arange(splat.xs.start, splat.xs.stop, dtype=np.float64)
    dx = xs[None, :] - splat.pixel[0]
    dy = ys[:, None] - splat.pixel[1]
    quad = (
        splat.inv_cov[0, 0] * dx**2
        + 2.0 * splat.inv_cov[0, 1] * dx * dy
        + splat.inv_cov[1, 1] * dy**2
    )
    weight = splat.gaussian.opacity * np.exp(-0.5 * quad)
    return np.where(quad <= _FOOTPRINT_Q, weight, 0.0)


def _resolve_frames(
    frame: int, flow_frame: int | None, cam: Camera, flow_cam: Camera | None
) -> tuple[int, Camera]:
    return (frame if flow_frame is None else flow_frame), (cam if flow_cam is None else flow_cam)


def render(
    cloud: GaussianCloud,
    graph: ScaffoldGraph | None,
    cam: Camera,
    frame: int = 0,
    flow_frame: int | None = None,
    flow_cam: Camera | None = None,
    skinning: list[SkinBinding | None] | None = None,
) -> RenderOutput:
    """Rasterize the cloud as seen by `cam` at `frame`.

    The flow channel holds the composited displacement each pixel's content
    would undergo when re-projected at `flow_frame` through `flow_cam` (both
    default to the render frame/camera, giving zero flow for static scenes).
    A precomputed `skinning` binding may be passed to freeze blend weights
    across repeated calls; by default it is derived from the current means.
    """
    flow_frame, flow_cam = _resolve_frames(frame, flow_frame, cam, flow_cam)
    if skinning is None:
        skinning = bind_skinning(cloud, graph)
    splats = _prepare_splats(cloud, graph, cam, frame, flow_frame, flow_cam, skinning)

    height, width = cam.height, cam.width
    rgb = np.zeros((height, width, 3))
    depth_sum = np.zeros((height, width))
    flow_sum = np.zeros((height, width, 2))
    alpha = np.zeros((height, width))
    transmit = np.ones((height, width))

    for splat in splats:
        sl = (splat.ys, splat.xs)
        w = _splat_weights(splat)
        omega = w * transmit[sl]
        rgb[sl] += omega[..., None] * splat.gaussian.color
        depth_sum[sl] += omega * splat.z
        flow_sum[sl] += omega[..., None] * splat.disp
        alpha[sl] += omega
        transmit[sl] *= 1.0 - w

    rgb += transmit[..., None] * cloud.background
    valid = alpha > DEPTH_ALPHA_THRESHOLD
    depth = np.zeros((height, width))
    np.divide(depth_sum, alpha, out=depth, where=valid)
    flow = np.zeros((height, width, 2))
    covered = alpha > 0.0
    np.divide(flow_sum, alpha[..., None], out=flow, where=covered[..., None])
    return RenderOutput(rgb=rgb, depth=depth, flow=flow, alpha=alpha)


def _node_translation_jacobians(
    blend: _Blend, table: _RelTable, binding: SkinBinding
) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """Exact 3x3 maps from node translation shifts to the blended position.

    With blend weights and quaternion signs frozen, the blended dual part is
    linear in every node's relative translation, and the relative translation
    is affine in the node's per-frame translations, so the whole chain
    collapses to two closed-form matrices per node. Returns
    (node_id, d_point/d_translation[target], d_point/d_translation[anchor])
    per chosen node.
    """
    dual_map = _dual_to_translation_map(blend)
    out: list[tuple[int, np.ndarray, np.ndarray]] = []
    for node_id, sw in zip(binding.node_ids, blend.signed_weights):
        m = int(node_id)
        # d(raw dual)/d(relative translation) is 0.5 * sw * ((0, v) x r)
        jac_target = (0.5 * float(sw)) * (dual_map @ table.rights[m])
        # the anchor translation enters through -R_rel, and the map is linear
        jac_anchor = -jac_target @ table.rotmats[m]
        out.append((m, jac_target, jac_anchor))
    return out


def render_gradients(
    cloud: GaussianCloud,
    graph: ScaffoldGraph | None,
    cam: Camera,
    frame: int,
    adjoint: RenderAdjoint | Callable[[RenderOutput], RenderAdjoint],
    flow_frame: int | None = None,
    flow_cam: Camera | None = None,
    skinning: list[SkinBinding | None] | None = None,
) -> RenderGradients:
    """Analytic loss gradients for means, colors, opacities, node translations.

    `adjoint` supplies d(loss)/d(channel) per pixel; losses that depend on the
    rendered image itself can instead pass a callable receiving the forward
    output and returning the adjoint, which avoids rendering twice. The chain
    runs through the compositing weights, the projected covariance (including
    its dependence on the camera-space mean), and the dual-quaternion blend
    with frozen skinning weights. Depth gradients vanish wherever the depth
    channel is invalid (accumulated alpha at or below the validity threshold).
    """
    flow_frame, flow_cam = _resolve_frames(frame, flow_frame, cam, flow_cam)
    if skinning is None:
        skinning = bind_skinning(cloud, graph)
    splats = _prepare_splats(cloud, graph, cam, frame, flow_frame, flow_cam, skinning)

    height, width = cam.height, cam.width
    n = len(cloud.gaussians)
    d_means = np.zeros((n, 3))
    d_colors = np.zeros((n, 3))
    d_opacities = np.zeros(n)
    d_nodes = (
        np.zeros((len(graph.nodes), graph.frame_count, 3)) if graph is not None else None
    )

    # forward pass, caching per-splat weights and incoming transmittance
    rgb = np.zeros((height, width, 3))
    depth_sum = np.zeros((height, width))
    flow_sum = np.zeros((height, width, 2))
    alpha = np.zeros((height, width))
    transmit = np.ones((height, width))
    cache: list[tuple[_Splat, np.ndarray, np.ndarray]] = []
    for splat in splats:
        sl = (splat.ys, splat.xs)
        w = _splat_weights(splat)
        t_in = transmit[sl].copy()
        omega = w * t_in
        rgb[sl] += omega[..., None] * splat.gaussian.color
        depth_sum[sl] += omega * splat.z
        flow_sum[sl] += omega[..., None] * splat.disp
        alpha[sl] += omega
        transmit[sl] *= 1.0 - w
        cache.append((splat, w, t_in))

    rgb += transmit[..., None] * cloud.background
    valid = alpha > DEPTH_ALPHA_THRESHOLD
    depth = np.zeros((height, width))
    np.divide(depth_sum, alpha, out=depth, where=valid)
    flow = np.zeros((height, width, 2))
    covered = alpha > 0.0
    np.divide(flow_sum, alpha[..., None], out=flow, where=covered[..., None])
    output = RenderOutput(rgb=rgb, depth=depth, flow=flow, alpha=alpha)

    if callable(adjoint):
        adjoint = adjoint(output)
    adj_rgb = adjoint.rgb if adjoint.rgb is not None else np.zeros((height, width, 3))
    adj_depth = adjoint.depth if adjoint.depth is not None else np.zeros((height, width))
    adj_flow = adjoint.flow if adjoint.flow is not None else np.zeros((height, width, 2))
    adj_alpha = adjoint.alpha if adjoint.alpha is not None else np.zeros((height, width))
    if adj_rgb.shape != rgb.shape or adj_depth.shape != depth.shape:
        raise DimensionMismatchError("adjoint shape differs from the rendered image")
    if adj_flow.shape != flow.shape or adj_alpha.shape != alpha.shape:
        raise DimensionMismatchError("adjoint shape differs from the rendered image")

    safe_alpha = np.where(covered, alpha, 1.0)
    rot_pose_t = cam.pose.rotation_matrix().T
    rot_pose_flow_t = flow_cam.pose.rotation_matrix().T

    # suffix accumulator of omega * dL/domega for the occlusion chain
    suffix = np.zeros((height, width))
    for splat, w, t_in in reversed(cache):
        sl = (splat.ys, splat.xs)
        g = splat.gaussian
        omega = w * t_in

        # dL/domega: color, alpha, and the normalized depth/flow expectations
        d_omega = (adj_rgb[sl] * (g.color - cloud.background)).sum(axis=-1) + adj_alpha[sl]
        d_omega += np.where(
            valid[sl], adj_depth[sl] * (splat.z - depth[sl]) / safe_alpha[sl], 0.0
        )
        flow_term = (adj_flow[sl] * (splat.disp - flow[sl])).sum(axis=-1)
        d_omega += np.where(covered[sl], flow_term / safe_alpha[sl], 0.0)

        d_w = t_in * d_omega - suffix[sl] / (1.0 - w)
        suffix[sl] += omega * d_omega

        # direct per-splat channels
        d_colors[splat.index] += omega.ravel() @ adj_rgb[sl].reshape(-1, 3)
        depth_share = np.where(valid[sl], omega / safe_alpha[sl], 0.0)
        d_z = float(np.sum(depth_share * adj_depth[sl]))
        flow_share = np.where(covered[sl], omega / safe_alpha[sl], 0.0)
        d_disp = flow_share.ravel() @ adj_flow[sl].reshape(-1, 2)

        # opacity and spatial chain through the Gaussian weight
        gw = d_w * w  # dL/dG * G, with G the unit-peak Gaussian
        d_opacities[splat.index] += float(np.sum(gw)) / g.opacity
        ys = np.arange(splat.ys.start, splat.ys.stop, dtype=np.float64)
        xs = np.arange(splat.xs.start, splat.xs.stop, dtype=np.float64)
        dx = np.broadcast_to(xs[None, :] - splat.pixel[0], w.shape)
        dy = np.broadcast_to(ys[:, None] - splat.pixel[1], w.shape)
        inv = splat.inv_cov
        moments = np.stack([dx, dy, dx * dx, dx * dy, dy * dy]).reshape(5, -1) @ gw.ravel()
        mx, my, mxx, mxy, myy = moments
        d_pixel = np.array(
            [inv[0, 0] * mx + inv[0, 1] * my, inv[0, 1] * mx + inv[1, 1] * my]
        )
        d_inv = -0.5 * np.array([[mxx, mxy], [mxy, myy]])
        d_cov2d = -inv @ d_inv @ inv

        # camera-space chain: projection, depth, and the covariance Jacobian
        d_pixel_total = d_pixel - d_disp
        d_x_cam = splat.jac.T @ d_pixel_total
        d_x_cam[2] += d_z
        x, y, z = splat.x_cam
        fx, fy = cam.fx, cam.fy
        d_jac = np.zeros((3, 2, 3))
        d_jac[0] = [[0.0, 0.0, -fx / z**2], [0.0, 0.0, 0.0]]
        d_jac[1] = [[0.0, 0.0, 0.0], [0.0, 0.0, -fy / z**2]]
        d_jac[2] = [
            [-fx / z**2, 0.0, 2.0 * fx * x / z**3],
            [0.0, -fy / z**2, 2.0 * fy * y / z**3],
        ]
        sigma_jt = splat.cov_cam @ splat.jac.T
        for k in range(3):
            d_x_cam[k] += 2.0 * float(np.sum(d_cov2d * (d_jac[k] @ sigma_jt)))
        d_mean_t = rot_pose_t @ d_x_cam

        d_mean_flow = np.zeros(3)
        if splat.x_cam_flow is not None and np.any(d_disp):
            jac_flow = _camera_jacobian(flow_cam, splat.x_cam_flow)
            d_mean_flow = rot_pose_flow_t @ (jac_flow.T @ d_disp)

        if not g.dynamic:
            d_means[splat.index] += d_mean_t + d_mean_flow
            continue

        d_means[splat.index] += splat.rot_blend.T @ d_mean_t
        d_means[splat.index] += splat.rot_blend_flow.T @ d_mean_flow
        assert splat.binding is not None and d_nodes is not None
        assert splat.blend is not None and splat.table is not None
        for node_id, jac_target, jac_anchor in _node_translation_jacobians(
            splat.blend, splat.table, splat.binding
        ):
            d_nodes[node_id, frame] += jac_target.T @ d_mean_t
            d_nodes[node_id, g.anchor_frame] += jac_anchor.T @ d_mean_t
        if np.any(d_mean_flow):
            assert splat.blend_flow is not None and splat.table_flow is not None
            for node_id, jac_target, jac_anchor in _node_translation_jacobians(
                splat.blend_flow, splat.table_flow, splat.binding
            ):
                d_nodes[node_id, flow_frame] += jac_target.T @ d_mean_flow
                d_nodes[node_id, g.anchor_frame] += jac_anchor.T @ d_mean_flow

    return RenderGradients(
        means=d_means,
        colors=d_colors,
        opacities=d_opacities,
        node_translations=d_nodes,
        output=output,
    )


# --- structural similarity ---------------------------------------------------

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def _ssim_kernel() -> np.ndarray:
    half = (_SSIM_WINDOW - 1) / 2.0
    offsets = np.arange(_SSIM_WINDOW) - half
    g = np.exp(-(offsets**2) / (2.0 * _SSIM_SIGMA**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _valid_windows(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Windowed weighted mean over all fully interior positions (no padding)."""
    kh, kw = kernel.shape
    out_h = img.shape[0] - kh + 1
    out_w = img.shape[1] - kw + 1
    out = np.zeros((out_h, out_w))
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * img[i : i + out_h, j : j + out_w]
    return out


def _spread_windows(coeff: np.ndarray, kernel: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Adjoint of `_valid_windows`: scatter window coefficients back to pixels."""
    kh, kw = kernel.shape
    out = np.zeros(shape)
    h, w = coeff.shape
    for i in range(kh):
        for j in range(kw):
            out[i : i + h, j : j + w] += kernel[i, j] * coeff
    return out


def _as_channels(img: np.ndarray) -> list[np.ndarray]:
    if img.ndim == 2:
        return [img]
    if img.ndim == 3:
        return [img[..., c] for c in range(img.shape[2])]
    raise DimensionMismatchError(f"expected a 2-D or 3-D image, got shape {img.shape}")


def _check_ssim_inputs(img_a: np.ndarray, img_b: np.ndarray) -> None:
    if img_a.shape != img_b.shape:
        raise DimensionMismatchError(
            f"image shapes differ: {img_a.shape} vs {img_b.shape}"
        )
    if img_a.shape[0] < _SSIM_WINDOW or img_a.shape[1] < _SSIM_WINDOW:
        raise DimensionMismatchError(
            f"image {img_a.shape[:2]} is smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window"
        )


def ssim(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Mean structural similarity over interior windows, averaged per channel.

    Uses the standard 11x11 Gaussian window (sigma 1.5) and stabilizers
    C1 = 0.01^2, C2 = 0.03^2 for images in [0, 1]. Returns a value in [-1, 1];
    identical images score exactly 1.
    """
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    _check_ssim_inputs(a, b)
    kernel = _ssim_kernel()
    total = 0.0
    channels_a = _as_channels(a)
    channels_b = _as_channels(b)
    for ca, cb in zip(channels_a, channels_b):
        mu_a = _valid_windows(ca, kernel)
        mu_b = _valid_windows(cb, kernel)
        var_a = _valid_windows(ca * ca, kernel) - mu_a**2
        var_b = _valid_windows(cb * cb, kernel) - mu_b**2
        cov = _valid_windows(ca * cb, kernel) - mu_a * mu_b
        score = ((2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)) / (
            (mu_a**2 + mu_b**2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
        )
        total += float(score.mean())
    return total / len(channels_a)


def ssim_gradient(img_a: np.ndarray, img_b: np.ndarray) -> tuple[float, np.ndarray]:
    """SSIM value and its derivative with respect to the first image."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    _check_ssim_inputs(a, b)
    kernel = _ssim_kernel()
    channels_a = _as_channels(a)
    channels_b = _as_channels(b)
    grad = np.zeros_like(a)
    grad_channels = _as_channels(grad)
    total = 0.0
    for ca, cb, gc in zip(channels_a, channels_b, grad_channels):
        mu_a = _valid_windows(ca, kernel)
        mu_b = _valid_windows(cb, kernel)
        m2a = _valid_windows(ca * ca, kernel)
        m12 = _valid_windows(ca * cb, kernel)
        var_a = m2a - mu_a**2
        var_b = _valid_windows(cb * cb, kernel) - mu_b**2
        cov = m12 - mu_a * mu_b
        a1 = 2.0 * mu_a * mu_b + _SSIM_C1
        a2 = 2.0 * cov + _SSIM_C2
        b1 = mu_a**2 + mu_b**2 + _SSIM_C1
        b2 = var_a + var_b + _SSIM_C2
        score = (a1 * a2) / (b1 * b2)
        total += float(score.mean())

        # derivatives with respect to the windowed moments of the first image
        d_m1 = 2.0 * (
            mu_b * a2 / (b1 * b2)
            - mu_a * a1 * a2 / (b1**2 * b2)
            + mu_a * a1 * a2 / (b1 * b2**2)
            - mu_b * a1 / (b1 * b2)
        )
        d_m2 = -a1 * a2 / (b1 * b2**2)
        d_m12 = 2.0 * a1 / (b1 * b2)
        scale = 1.0 / (score.size * len(channels_a))
        gc += scale * (
            _spread_windows(d_m1, kernel, ca.shape)
            + 2.0 * ca * _spread_windows(d_m2, kernel, ca.shape)
            + cb * _spread_windows(d_m12, kernel, ca.shape)
        )
    return total / len(channels_a), grad
