"""Sparse motion scaffold built from lifted 2-D tracks.

Each scaffold node carries a full rigid transform per frame (orientation plus
world position); the graph connects nodes to their spatial neighbours so that
local rigidity can be both measured (ARAP loss) and enforced (space-time gap
filling). Scene deformation between two frames is queried per point by
dual-quaternion blending of the nearest nodes' relative transforms.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from .depth import DepthStack
from .errors import DimensionMismatchError, NoNodesError
from .geometry import (
    Camera,
    RigidTransform,
    backproject,
    bilinear_sample,
    project,
    quat_conjugate,
    quat_from_matrix,
    quat_multiply,
    quat_normalize,
    quat_rotate,
)
from .tracks import TrackSet

log = logging.getLogger(__name__)

DEFAULT_NEIGHBOURS = 8

# Tie-break weight for the quadratic surrogate solved during gap filling.
# Velocity/acceleration smoothing must not bias gap positions away from an
# exactly-rigid completion, so it only breaks ties on directions the rigidity
# terms leave free.
_TIE_BREAK = 1e-8


# ---------------------------------------------------------------------------
# dual quaternions


@dataclass
class DualQuaternion:
    """Unit dual quaternion: rigid motion as real + dual quaternion parts.

    Both parts use wxyz layout. A valid unit dual quaternion has a unit real
    part and orthogonal real/dual parts; `normalized` restores both after a
    linear blend.
    """

    real: np.ndarray
    dual: np.ndarray

    def __post_init__(self) -> None:
        self.real = np.asarray(self.real, dtype=np.float64).reshape(4)
        self.dual = np.asarray(self.dual, dtype=np.float64).reshape(4)

    @staticmethod
    def identity() -> "DualQuaternion":
        return DualQuaternion(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(4))

    @staticmethod
    def from_transform(tf: RigidTransform) -> "DualQuaternion":
        real = quat_normalize(tf.q)
        t_quat = np.concatenate([[0.0], tf.t])
        return DualQuaternion(real, 0.5 * quat_multiply(t_quat, real))

    def to_transform(self) -> RigidTransform:
        t_quat = 2.0 * quat_multiply(self.dual, quat_conjugate(self.real))
        return RigidTransform(self.real, t_quat[1:])

    def normalized(self) -> "DualQuaternion":
        n = float(np.linalg.norm(self.real))
        if n == 0.0:
            raise ZeroDivisionError("cannot normalize a dual quaternion with zero real part")
        real = self.real / n
        dual = self.dual / n
        dual = dual - real * float(np.dot(real, dual))
        return DualQuaternion(real, dual)

    def norm_error(self) -> float:
        """Max of |1 - ||real||| and |real . dual|; 0 for a unit dual quaternion."""
        return max(
            abs(1.0 - float(np.linalg.norm(self.real))),
            abs(float(np.dot(self.real, self.dual))),
        )


# ---------------------------------------------------------------------------
# graph types


@dataclass
class ScaffoldNode:
    """One scaffold node: a track lifted to a rigid trajectory.

    translations[t] is the node's world position at frame t; rotations[t] its
    orientation (wxyz quaternion). visible marks frames where the position
    came from actual track + depth evidence rather than gap filling.
    """

    node_id: int
    track_id: int
    radius: float
    rotations: np.ndarray  # (T, 4)
    translations: np.ndarray  # (T, 3)
    visible: np.ndarray  # (T,) bool

    def __post_init__(self) -> None:
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.translations = np.asarray(self.translations, dtype=np.float64)
        self.visible = np.asarray(self.visible, dtype=bool)
        t = len(self.translations)
        if (
            self.rotations.shape != (t, 4)
            or self.translations.shape != (t, 3)
            or self.visible.shape != (t,)
        ):
            raise DimensionMismatchError(
                f"node {self.node_id}: rotations {self.rotations.shape}, translations "
                f"{self.translations.shape}, visible {self.visible.shape} disagree"
            )
        if not self.radius > 0.0:
            raise ValueError(f"node {self.node_id} blend radius must be positive")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError(f"node {self.node_id} has non-unit rotation quaternions")

    @property
    def frame_count(self) -> int:
        return len(self.translations)

    def transform_at(self, frame: int) -> RigidTransform:
        return RigidTransform(self.rotations[frame], self.translations[frame])


@dataclass
class ScaffoldGraph:
    """Scaffold nodes plus undirected K-NN edges.

    Edges are stored once as (i, j) node-id pairs with i < j. Connectivity is
    decided at each node's first visible frame, so nodes that never coexist
    can still be linked through the filled trajectories.
    """

    nodes: list[ScaffoldNode]
    edges: np.ndarray  # (E, 2) int
    frame_count: int
    neighbours: int = DEFAULT_NEIGHBOURS

    def __post_init__(self) -> None:
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        for node in self.nodes:
            if node.frame_count != self.frame_count:
                raise DimensionMismatchError(
                    f"node {node.node_id} spans {node.frame_count} frames, graph has "
                    f"{self.frame_count}"
                )
        n = len(self.nodes)
        if self.edges.size:
            lo = np.minimum(self.edges[:, 0], self.edges[:, 1])
            hi = np.maximum(self.edges[:, 0], self.edges[:, 1])
            self.edges = np.unique(np.stack([lo, hi], axis=1), axis=0)
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise ValueError("scaffold graph contains a self-edge")
            if self.edges.min() < 0 or self.edges.max() >= n:
                raise ValueError("scaffold edge references a missing node")
        if n > 1:
            touched = np.zeros(n, dtype=bool)
            if self.edges.size:
                touched[self.edges.ravel()] = True
            if not touched.all():
                missing = int(np.flatnonzero(~touched)[0])
                raise ValueError(f"scaffold node {missing} has no edges")

    def __len__(self) -> int:
        return len(self.nodes)

    def positions_at(self, frame: int) -> np.ndarray:
        return np.array([n.translations[frame] for n in self.nodes], dtype=np.float64)

    def neighbour_ids(self, node_id: int) -> list[int]:
        out: set[int] = set()
        for i, j in self.edges:
            if i == node_id:
                out.add(int(j))
            elif j == node_id:
                out.add(int(i))
        return sorted(out)


# ---------------------------------------------------------------------------
# lifting tracks to nodes


def _sample_depth(
    values: np.ndarray, validity: np.ndarray, position: np.ndarray
) -> float | None:
    """Bilinear depth under a subpixel position.

    Falls back to the nearest pixel when the 2x2 footprint touches invalid
    depth; None when even that pixel is invalid or the result is not a
    positive depth.
    """
    height, width = values.shape
    x, y = float(position[0]), float(position[1])
    if not (-0.5 <= x <= width - 0.5 and -0.5 <= y <= height - 0.5):
        return None
    xn, yn = min(max(int(round(x)), 0), width - 1), min(max(int(round(y)), 0), height - 1)
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(max(x0 + 1, 0), width - 1), min(max(y0 + 1, 0), height - 1)
    x0, y0 = max(x0, 0), max(y0, 0)
    if validity[y0, x0] and validity[y0, x1] and validity[y1, x0] and validity[y1, x1]:
        d = float(bilinear_sample(values, np.array([[x, y]]))[0])
    elif validity[yn, xn]:
        d = float(values[yn, xn])
    else:
        return None
    return d if d > 0.0 else None


def _fill_gaps_linear(values: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Linearly interpolate (T, 3) rows between anchor frames; hold at the ends."""
    t_all = np.arange(len(values), dtype=np.float64)
    t_anchor = np.flatnonzero(anchors).astype(np.float64)
    out = values.copy()
    for axis in range(values.shape[1]):
        out[:, axis] = np.interp(t_all, t_anchor, values[anchors, axis])
    return out


def lift_tracks(
    tracks: TrackSet,
    depths: DepthStack,
    cameras: list[Camera],
    neighbours: int = DEFAULT_NEIGHBOURS,
) -> ScaffoldGraph:
    """Back-project tracked points into world-space scaffold nodes.

    A node position is created for every frame where the track is visible and
    the refined depth under it is valid; tracks with fewer than two such
    frames carry too little motion evidence and are dropped. Gap frames get a
    provisional linear fill (see spacetime_init for the proper completion).
    Rotations start at identity. Each node's blend radius is the median
    distance to its nearest neighbours at its first visible frame.
    """
    t_count = tracks.frame_count
    if len(cameras) != t_count or depths.frame_count != t_count:
        raise DimensionMismatchError(
            f"tracks span {t_count} frames, got {len(cameras)} cameras and "
            f"{depths.frame_count} depth frames"
        )
    if neighbours < 1:
        raise ValueError("neighbour count must be at least 1")

    height, width = depths.shape
    kept: list[tuple[int, np.ndarray, np.ndarray]] = []
    for track in tracks.tracks:
        points = np.zeros((t_count, 3))
        usable = np.zeros(t_count, dtype=bool)
        for t in np.flatnonzero(track.visibility):
            depth_map = depths.video[t]
            d = _sample_depth(depth_map.values, depth_map.validity, track.positions[t])
            if d is None:
                log.debug("track %d frame %d: no valid depth under track", track.track_id, t)
                continue
            points[t] = backproject(cameras[t], track.positions[t], d)
            usable[t] = True
        if int(usable.sum()) < 2:
            log.debug("track %d: fewer than two usable frames, skipped", track.track_id)
            continue
        kept.append((track.track_id, _fill_gaps_linear(points, usable), usable))

    if not kept:
        log.warning("no tracks could be lifted; scaffold graph is empty")
        return ScaffoldGraph([], np.zeros((0, 2), dtype=np.int64), t_count, neighbours)

    n = len(kept)
    k = min(neighbours, n - 1)
    all_translations = np.stack([tr for _, tr, _ in kept])  # (N, T, 3)
    edge_set: set[tuple[int, int]] = set()
    nodes: list[ScaffoldNode] = []
    for i, (track_id, translations, usable) in enumerate(kept):
        first = int(np.flatnonzero(usable)[0])
        if k == 0:
            radius = 1.0
        else:
            dists = np.linalg.norm(all_translations[:, first] - translations[first], axis=1)
            dists[i] = np.inf
            order = np.argsort(dists)[:k]
            radius = max(float(np.median(dists[order])), 1e-6)
            for j in order:
                edge_set.add((min(i, int(j)), max(i, int(j))))
        rotations = np.tile([1.0, 0.0, 0.0, 0.0], (t_count, 1))
        nodes.append(ScaffoldNode(i, track_id, radius, rotations, translations, usable))

    edges = (
        np.array(sorted(edge_set), dtype=np.int64)
        if edge_set
        else np.zeros((0, 2), dtype=np.int64)
    )
    return ScaffoldGraph(nodes, edges, t_count, neighbours)


# ---------------------------------------------------------------------------
# losses


def _procrustes_rotation(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Best-fit rotation matrix R with dst ~ R @ src (no centering, no scale)."""
    if np.array_equal(src, dst):
        # degenerate fans make the SVD solution non-unique; a motionless fan
        # must map to the identity, not an arbitrary spin
        return np.eye(3)
    m = dst.T @ src
    u, _, vt = np.linalg.svd(m)
    sign = np.sign(np.linalg.det(u @ vt))
    if sign == 0.0:
        return np.eye(3)
    return u @ np.diag([1.0, 1.0, sign]) @ vt


def arap_loss(graph: ScaffoldGraph) -> float:
    """As-rigid-as-possible score of the node trajectories.

    For every edge and consecutive frame pair this adds the edge-length change
    plus the residual of the edge vector transported by the first endpoint's
    stored rotation. Zero exactly when each edge moves rigidly frame-to-frame
    with matching stored rotations; symmetric under time reversal. Mean over
    edges x frame pairs.
    """
    t_count = graph.frame_count
    if graph.edges.size == 0 or t_count < 2:
        return 0.0
    total = 0.0
    for i, j in graph.edges:
        a, b = graph.nodes[i], graph.nodes[j]
        vec = b.translations - a.translations  # (T, 3)
        lengths = np.linalg.norm(vec, axis=1)
        # relative rotation of node i between consecutive frames
        rel = quat_multiply(a.rotations[1:], quat_conjugate(a.rotations[:-1]))
        carried = quat_rotate(rel, vec[:-1])
        total += float(np.sum(np.abs(lengths[1:] - lengths[:-1])))
        total += float(np.sum(np.linalg.norm(vec[1:] - carried, axis=1)))
    return total / (len(graph.edges) * (t_count - 1))


def vel_acc_losses(graph: ScaffoldGraph) -> tuple[float, float]:
    """Mean frame-to-frame speed and mean second-difference magnitude."""
    t_count = graph.frame_count
    if not graph.nodes or t_count < 2:
        return 0.0, 0.0
    translations = np.stack([n.translations for n in graph.nodes])  # (N, T, 3)
    step = np.diff(translations, axis=1)
    vel = float(np.mean(np.linalg.norm(step, axis=2)))
    if t_count < 3:
        return vel, 0.0
    acc = float(np.mean(np.linalg.norm(np.diff(step, axis=1), axis=2)))
    return vel, acc


def scaffold_projection_loss(
    graph: ScaffoldGraph, tracks: TrackSet, cameras: list[Camera]
) -> float:
    """Mean reprojection error (px) of node positions against their source tracks.

    Only frames with direct evidence (node.visible) count; gap-filled frames
    have no 2-D observation to compare against.
    """
    if len(cameras) != graph.frame_count:
        raise DimensionMismatchError(
            f"graph spans {graph.frame_count} frames, got {len(cameras)} cameras"
        )
    by_id = {tr.track_id: tr for tr in tracks.tracks}
    total = 0.0
    count = 0
    for node in graph.nodes:
        track = by_id.get(node.track_id)
        if track is None:
            raise KeyError(f"scaffold node {node.node_id} references unknown track {node.track_id}")
        for t in np.flatnonzero(node.visible):
            pixel, _ = project(cameras[t], node.translations[t])
            total += float(np.linalg.norm(pixel - track.positions[t]))
            count += 1
    return total / count if count else 0.0


# ---------------------------------------------------------------------------
# space-time gap filling


@dataclass
class SpacetimeConfig:
    """Knobs for spacetime_init.

    The objective is lambda_arap * arap + lambda_vel * velocity +
    lambda_acc * acceleration over the gap (non-visible) node positions.
    """

    iterations: int = 60
    lambda_arap: float = 1.0
    lambda_vel: float = 1.0
    lambda_acc: float = 1.0

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if min(self.lambda_arap, self.lambda_vel, self.lambda_acc) < 0:
            raise ValueError("loss weights must be non-negative")


def _relative_rotations(
    translations: np.ndarray, neighbour_lists: list[list[int]]
) -> np.ndarray:
    """Per node and frame pair, the Procrustes rotation of its edge fan.

    translations is (N, T, 3); the result is (N, T-1, 3, 3) with entry
    [i, t] mapping node i's edge vectors at frame t onto frame t + 1.
    """
    n, t_count, _ = translations.shape
    out = np.tile(np.eye(3), (n, t_count - 1, 1, 1))
    for i, nbrs in enumerate(neighbour_lists):
        if not nbrs:
            continue
        fans = translations[nbrs] - translations[i]  # (deg, T, 3)
        for t in range(t_count - 1):
            out[i, t] = _procrustes_rotation(fans[:, t], fans[:, t + 1])
    return out


def _cumulative_quaternions(rel: np.ndarray) -> np.ndarray:
    """Chain (T-1, 3, 3) frame-to-frame rotations into (T, 4) absolute quats."""
    t_count = rel.shape[0] + 1
    quats = np.zeros((t_count, 4))
    quats[0] = [1.0, 0.0, 0.0, 0.0]
    current = np.eye(3)
    for t in range(1, t_count):
        current = rel[t - 1] @ current
        # SVD snap-back keeps the chained product orthonormal
        u, _, vt = np.linalg.svd(current)
        current = u @ vt
        quats[t] = quat_from_matrix(current)
    return quat_normalize(quats)


def _spacetime_objective(
    translations: np.ndarray,
    rotations: np.ndarray,
    edges: np.ndarray,
    cfg: SpacetimeConfig,
) -> float:
    """cfg-weighted sum of the three trajectory losses, computed on arrays."""
    n, t_count, _ = translations.shape
    vel = acc = arap = 0.0
    if t_count >= 2 and n:
        step = np.diff(translations, axis=1)
        vel = float(np.mean(np.linalg.norm(step, axis=2)))
        if t_count >= 3:
            acc = float(np.mean(np.linalg.norm(np.diff(step, axis=1), axis=2)))
    if edges.size and t_count >= 2:
        total = 0.0
        for i, j in edges:
            vec = translations[j] - translations[i]
            lengths = np.linalg.norm(vec, axis=1)
            rel = quat_multiply(rotations[i, 1:], quat_conjugate(rotations[i, :-1]))
            carried = quat_rotate(rel, vec[:-1])
            total += float(np.sum(np.abs(lengths[1:] - lengths[:-1])))
            total += float(np.sum(np.linalg.norm(vec[1:] - carried, axis=1)))
        arap = total / (len(edges) * (t_count - 1))
    return cfg.lambda_arap * arap + cfg.lambda_vel * vel + cfg.lambda_acc * acc


def _extrapolate_isolated(node_translations: np.ndarray, visible: np.ndarray) -> np.ndarray:
    """Constant-velocity fill for a node with no neighbours to lean on."""
    out = _fill_gaps_linear(node_translations, visible)
    anchor = np.flatnonzero(visible)
    first, last = int(anchor[0]), int(anchor[-1])
    if len(anchor) < 2:
        return out
    lead_v = (out[anchor[1]] - out[first]) / float(anchor[1] - first)
    for t in range(first - 1, -1, -1):
        out[t] = out[first] + lead_v * (t - first)
    tail_v = (out[last] - out[anchor[-2]]) / float(last - anchor[-2])
    for t in range(last + 1, len(out)):
        out[t] = out[last] + tail_v * (t - last)
    return out


def spacetime_init(
    graph: ScaffoldGraph,
    cfg: SpacetimeConfig | None = None,
    log_stream: TextIO | None = None,
) -> ScaffoldGraph:
    """Complete gap frames so trajectories deform as rigidly as possible.

    Visible-frame positions are hard constraints and never move. Gap frames
    are optimized by alternating a local rotation fit (Procrustes over each
    node's edge fan between consecutive frames) with a global linear solve
    whose rigidity residuals dominate; velocity and acceleration terms only
    break ties the rigidity terms leave open. Every iteration is accepted
    only if the combined objective does not increase, so the reported trace
    is non-increasing. Node rotations are rebuilt from the final trajectories
    by chaining the per-frame-pair fits from identity at frame zero. Isolated
    nodes fall back to linear interpolation inside their visible span and
    constant-velocity extrapolation beyond it.
    """
    cfg = cfg or SpacetimeConfig()
    t_count = graph.frame_count
    n = len(graph.nodes)
    if n == 0 or t_count < 2:
        return graph

    neighbour_lists = [graph.neighbour_ids(i) for i in range(n)]
    translations = np.stack([node.translations for node in graph.nodes]).astype(np.float64)
    visible = np.stack([node.visible for node in graph.nodes])

    for i in range(n):
        if not neighbour_lists[i] and visible[i].any():
            translations[i] = _extrapolate_isolated(translations[i], visible[i])

    # free variables: (node, frame) slots without direct evidence, for nodes
    # that have neighbours to constrain them
    free: list[tuple[int, int]] = [
        (i, t)
        for i in range(n)
        if neighbour_lists[i]
        for t in range(t_count)
        if not visible[i, t]
    ]
    slot = {key: 3 * k for k, key in enumerate(free)}

    rotations = _relative_rotations(translations, neighbour_lists)
    quats = np.stack([_cumulative_quaternions(rotations[i]) for i in range(n)])
    objective = _spacetime_objective(translations, quats, graph.edges, cfg)

    for iteration in range(cfg.iterations):
        if log_stream is not None:
            log_stream.write(f"iteration {iteration} objective {objective:.12e}\n")
        if not free:
            break
        proposal = _solve_gap_positions(
            translations, rotations, graph.edges, neighbour_lists, slot, cfg
        )
        new_rotations = _relative_rotations(proposal, neighbour_lists)
        new_quats = np.stack([_cumulative_quaternions(new_rotations[i]) for i in range(n)])
        new_objective = _spacetime_objective(proposal, new_quats, graph.edges, cfg)
        if new_objective >= objective - 1e-15:
            break
        translations, rotations, quats = proposal, new_rotations, new_quats
        if objective - new_objective < 1e-14:
            objective = new_objective
            break
        objective = new_objective

    if log_stream is not None:
        log_stream.write(f"final objective {objective:.12e}\n")

    nodes = [
        ScaffoldNode(
            node.node_id,
            node.track_id,
            node.radius,
            quats[i],
            translations[i],
            node.visible,
        )
        for i, node in enumerate(graph.nodes)
    ]
    return ScaffoldGraph(nodes, graph.edges.copy(), t_count, graph.neighbours)


def _solve_gap_positions(
    translations: np.ndarray,
    rotations: np.ndarray,
    edges: np.ndarray,
    neighbour_lists: list[list[int]],
    slot: dict[tuple[int, int], int],
    cfg: SpacetimeConfig,
) -> np.ndarray:
    """One global step: least-squares gap positions given frozen rotations.

    Minimizes the squared rigidity residuals (both edge directions) plus
    tiny velocity/acceleration tie-breakers and a proximal pull toward the
    current values, which keeps the normal matrix well conditioned.
    """
    n, t_count, _ = translations.shape
    size = 3 * len(slot)
    a = np.zeros((size, size))
    b = np.zeros(size)

    def accumulate(weight: float, terms: list[tuple[tuple[int, int], np.ndarray]], const: np.ndarray) -> None:
        # one residual: sum of coeff @ x_slot + const, added as weight * ||.||^2
        rows: list[tuple[int, np.ndarray]] = []
        rhs = const.astype(np.float64).copy()
        for key, coeff in terms:
            if key in slot:
                rows.append((slot[key], coeff))
            else:
                i, t = key
                rhs += coeff @ translations[i, t]
        w = weight
        for s1, c1 in rows:
            b[s1 : s1 + 3] -= w * (c1.T @ rhs)
            for s2, c2 in rows:
                a[s1 : s1 + 3, s2 : s2 + 3] += w * (c1.T @ c2)

    eye = np.eye(3)
    arap_w = max(cfg.lambda_arap, _TIE_BREAK)
    for i, j in edges:
        for t in range(t_count - 1):
            for src, dst in ((i, j), (j, i)):
                r = rotations[src, t]
                # (x_dst - x_src)_{t+1} - R (x_dst - x_src)_t = 0
                accumulate(
                    arap_w,
                    [
                        ((int(dst), t + 1), eye),
                        ((int(src), t + 1), -eye),
                        ((int(dst), t), -r),
                        ((int(src), t), r),
                    ],
                    np.zeros(3),
                )
    for i in range(n):
        if not neighbour_lists[i]:
            continue
        for t in range(t_count - 1):
            accumulate(
                cfg.lambda_vel * _TIE_BREAK,
                [((i, t + 1), eye), ((i, t), -eye)],
                np.zeros(3),
            )
        for t in range(1, t_count - 1):
            accumulate(
                cfg.lambda_acc * _TIE_BREAK,
                [((i, t + 1), eye), ((i, t), -2.0 * eye), ((i, t - 1), eye)],
                np.zeros(3),
            )

    for (i, t), s in slot.items():
        a[s : s + 3, s : s + 3] += _TIE_BREAK * eye
        b[s : s + 3] += _TIE_BREAK * translations[i, t]

    solution = np.linalg.solve(a, b)
    out = translations.copy()
    for (i, t), s in slot.items():
        out[i, t] = solution[s : s + 3]
    return out


# ---------------------------------------------------------------------------
# dual-quaternion blending


def skinning_weights(
    graph: ScaffoldGraph, point: np.ndarray, frame: int
) -> tuple[np.ndarray, np.ndarray]:
    """Node ids and normalized Gaussian weights binding a point to the scaffold.

    The nearest nodes at the given frame vote with Gaussian falloff set by
    each node's own blend radius. A point beyond three blend radii of every
    node is out of the scaffold's support; the nearest node alone is used and
    the event logged.
    """
    if not graph.nodes:
        raise NoNodesError("cannot blend against an empty scaffold graph")
    point = np.asarray(point, dtype=np.float64).reshape(3)
    positions = graph.positions_at(frame)
    dists = np.linalg.norm(positions - point, axis=1)
    nearest = int(np.argmin(dists))

    k = min(max(graph.neighbours, 1), len(graph.nodes))
    chosen = np.argsort(dists)[:k]
    radii = np.array([graph.nodes[int(m)].radius for m in chosen])
    weights = np.exp(-(dists[chosen] ** 2) / (2.0 * radii**2))
    total = float(weights.sum())

    if dists[nearest] > 3.0 * graph.nodes[nearest].radius or total <= 0.0:
        log.warning(
            "point %s at frame %d is outside the scaffold support "
            "(nearest node %d at %.3g, radius %.3g); using it alone",
            point.tolist(),
            frame,
            nearest,
            float(dists[nearest]),
            graph.nodes[nearest].radius,
        )
        return np.array([nearest]), np.array([1.0])
    return chosen.astype(np.int64), weights / total


def blend_node_transforms(
    graph: ScaffoldGraph,
    node_ids: np.ndarray,
    weights: np.ndarray,
    frame_from: int,
    frame_to: int,
) -> RigidTransform:
    """Dual-quaternion average of the chosen nodes' relative motions.

    Each node contributes its frame_from -> frame_to transform; summands are
    sign-aligned to the heaviest vote before averaging so antipodal
    quaternions cannot cancel.
    """
    blended: list[DualQuaternion] = []
    for m in node_ids:
        node = graph.nodes[int(m)]
        relative = node.transform_at(frame_to).compose(node.transform_at(frame_from).inverse())
        blended.append(DualQuaternion.from_transform(relative))
    reference = blended[int(np.argmax(weights))].real
    real_sum = np.zeros(4)
    dual_sum = np.zeros(4)
    for w, dq in zip(weights, blended):
        sign = -1.0 if float(np.dot(dq.real, reference)) < 0.0 else 1.0
        real_sum += sign * w * dq.real
        dual_sum += sign * w * dq.dual
    return DualQuaternion(real_sum, dual_sum).normalized().to_transform()


def dqb_transform(
    graph: ScaffoldGraph, point: np.ndarray, frame_from: int, frame_to: int
) -> RigidTransform:
    """Blended rigid transform carrying `point` from one frame to another."""
    node_ids, weights = skinning_weights(graph, point, frame_from)
    return blend_node_transforms(graph, node_ids, weights, frame_from, frame_to)


def dqb_deform(
    graph: ScaffoldGraph, point: np.ndarray, frame_from: int, frame_to: int
) -> np.ndarray:
    """Carry a world point from frame_from to frame_to through the scaffold."""
    return dqb_transform(graph, point, frame_from, frame_to).apply(
        np.asarray(point, dtype=np.float64).reshape(3)
    )


# ---------------------------------------------------------------------------
# serialization


def serialize_scaffold(graph: ScaffoldGraph) -> str:
    lines = [
        f"# scaffold v1 frames={graph.frame_count} nodes={len(graph.nodes)} "
        f"edges={len(graph.edges)} k={graph.neighbours}"
    ]
    for node in graph.nodes:
        bits = "".join("1" if v else "0" for v in node.visible)
        cells = [
            "node",
            str(node.node_id),
            str(node.track_id),
            repr(float(node.radius)),
            bits if bits else "-",
        ]
        for t in range(node.frame_count):
            tup = [float(v) for v in node.rotations[t]] + [float(v) for v in node.translations[t]]
            cells.append(":".join(repr(v) for v in tup))
        lines.append(" ".join(cells))
    for i, j in graph.edges:
        lines.append(f"edge {int(i)} {int(j)}")
    return "\n".join(lines) + "\n"


def deserialize_scaffold(text: str) -> ScaffoldGraph:
    frame_count = 0
    neighbours = DEFAULT_NEIGHBOURS
    nodes: list[ScaffoldNode] = []
    edges: list[tuple[int, int]] = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for token in line.split():
                if token.startswith("frames="):
                    frame_count = int(token.split("=")[1])
                elif token.startswith("k="):
                    neighbours = int(token.split("=")[1])
            continue
        cells = line.split()
        if cells[0] == "node":
            node_id, track_id = int(cells[1]), int(cells[2])
            radius = float(cells[3])
            bits = cells[4]
            visible = np.array([c == "1" for c in bits] if bits != "-" else [], dtype=bool)
            rotations = np.zeros((len(cells) - 5, 4))
            translations = np.zeros((len(cells) - 5, 3))
            for t, cell in enumerate(cells[5:]):
                values = [float(v) for v in cell.split(":")]
                if len(values) != 7:
                    raise ValueError(f"node {node_id} frame {t}: expected 7 values")
                rotations[t] = values[:4]
                translations[t] = values[4:]
            nodes.append(ScaffoldNode(node_id, track_id, radius, rotations, translations, visible))
        elif cells[0] == "edge":
            edges.append((int(cells[1]), int(cells[2])))
        else:
            raise ValueError(f"unrecognized scaffold record: {line[:40]}")
    edge_arr = np.array(edges, dtype=np.int64) if edges else np.zeros((0, 2), dtype=np.int64)
    if nodes and frame_count == 0:
        frame_count = nodes[0].frame_count
    return ScaffoldGraph(nodes, edge_arr, frame_count, neighbours)
