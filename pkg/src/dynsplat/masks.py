"""Dynamic-region discovery from optical flow via epipolar consistency.

Flow vectors on static surfaces must land on the epipolar line induced by the
camera motion; flow on moving objects generally does not. Thresholding the
Sampson distance of each flow correspondence yields per-frame motion masks,
which are then intersected with a segmentation to pick out whole moving
objects.

All epipolar errors are expressed at a canonical image scale (512-pixel long
side) so the threshold means the same thing regardless of working resolution.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError
from .geometry import Camera, FlowField, fundamental_matrix, sampson_distance

log = logging.getLogger(__name__)

CANONICAL_LONG_SIDE = 512
EPI_THRESHOLD = 2.0
MIN_EPI_FRACTION = 0.05
MIN_SEGMENT_FRACTION = 0.2
DEFAULT_GAPS = (1, 4)


@dataclass
class SegmentStack:
    """Per-frame segmentation with ids stable across time; -1 means no label."""

    labels: np.ndarray  # (T, H, W) int32

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int32)
        if self.labels.ndim != 3:
            raise DimensionMismatchError("segment stack must be (T, H, W)")

    @property
    def frame_count(self) -> int:
        return self.labels.shape[0]

    def ids(self) -> np.ndarray:
        present = np.unique(self.labels)
        return present[present >= 0]

    def mask_for(self, segment_id: int) -> np.ndarray:
        return self.labels == segment_id


@dataclass
class EpiMaskStack:
    """Per-frame motion masks plus the raw canonical-scale error maps."""

    masks: np.ndarray  # (T, H, W) bool
    errors: np.ndarray  # (T, H, W) float, canonical-scale Sampson distance
    threshold: float = EPI_THRESHOLD

    def __post_init__(self) -> None:
        self.masks = np.asarray(self.masks, dtype=bool)
        self.errors = np.asarray(self.errors, dtype=np.float64)
        if self.masks.shape != self.errors.shape or self.masks.ndim != 3:
            raise DimensionMismatchError("mask/error stacks must both be (T, H, W)")

    @property
    def frame_count(self) -> int:
        return self.masks.shape[0]


@dataclass
class ObjectMaskStack:
    """Masks of the selected dynamic objects, ordered by motion coverage."""

    masks: np.ndarray  # (O, T, H, W) bool
    segment_ids: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim != 4:
            raise DimensionMismatchError("object mask stack must be (O, T, H, W)")
        if self.masks.shape[0] != len(self.segment_ids):
            raise DimensionMismatchError("one segment id per object required")

    @property
    def object_count(self) -> int:
        return self.masks.shape[0]

    @property
    def frame_count(self) -> int:
        return self.masks.shape[1]

    def union_at(self, frame: int) -> np.ndarray:
        if self.object_count == 0:
            return np.zeros(self.masks.shape[2:4], dtype=bool)
        return np.any(self.masks[:, frame], axis=0)


def epi_frame_pairs(frame_count: int, gaps: tuple[int, ...] = DEFAULT_GAPS) -> list[tuple[int, int]]:
    """Frame pairs the motion masks are built from.

    Each frame pairs forward by every gap; near the end of the sequence the
    pair mirrors backward so every frame always has one partner per gap.
    """
    pairs: list[tuple[int, int]] = []
    seen = set()
    for gap in gaps:
        if gap < 1:
            raise ValueError(f"frame gap must be >= 1, got {gap}")
        for t in range(frame_count):
            other = t + gap if t + gap < frame_count else t - gap
            if other < 0 or other == t:
                continue
            key = (t, other)
            if key not in seen:
                seen.add(key)
                pairs.append(key)
    return pairs


def epi_error_map(
    flow: FlowField, cam_a: Camera, cam_b: Camera
) -> tuple[np.ndarray, np.ndarray]:
    """Sampson distance of every flow correspondence, at canonical scale.

    Returns (errors, validity). Both cameras and the correspondence endpoints
    are rescaled so the long image side measures CANONICAL_LONG_SIDE pixels;
    distances are then plain pixel distances at that scale.
    """
    h, w = flow.height, flow.width
    if (cam_a.height, cam_a.width) != (h, w):
        raise DimensionMismatchError("flow and camera resolutions disagree")
    scale = CANONICAL_LONG_SIDE / max(w, h)
    sa = cam_a.scaled(scale)
    sb = cam_b.scaled(scale)
    f_mat = fundamental_matrix(sa, sb)

    ys, xs = np.mgrid[0:h, 0:w]
    pts_a = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    pts_b = pts_a + flow.values.reshape(-1, 2)
    # map native pixel coordinates into the canonical raster
    pts_a = (pts_a + 0.5) * scale - 0.5
    pts_b = (pts_b + 0.5) * scale - 0.5

    err = sampson_distance(f_mat, pts_a, pts_b).reshape(h, w)
    validity = flow.validity.copy()
    err = np.where(validity, err, 0.0)
    return err, validity


def epi_masks(
    flows: dict[tuple[int, int], FlowField],
    cameras: list[Camera],
    gaps: tuple[int, ...] = DEFAULT_GAPS,
    threshold: float = EPI_THRESHOLD,
) -> EpiMaskStack:
    """Per-frame motion masks: max epipolar error over the gap set, thresholded.

    A pixel is marked moving if its flow violates the epipolar constraint for
    any gap; taking the max keeps slow movers visible through the larger gap.
    Missing pairs for a frame simply contribute nothing for that gap.
    """
    frame_count = len(cameras)
    if frame_count < 2:
        raise DimensionMismatchError("need at least two frames for epipolar checks")
    h, w = cameras[0].height, cameras[0].width
    errors = np.zeros((frame_count, h, w))
    covered = np.zeros((frame_count, h, w), dtype=bool)
    wanted = epi_frame_pairs(frame_count, gaps)
    for t, other in wanted:
        flow = flows.get((t, other))
        if flow is None:
            log.debug("no flow for frame pair (%d, %d); skipping", t, other)
            continue
        err, valid = epi_error_map(flow, cameras[t], cameras[other])
        errors[t] = np.maximum(errors[t], np.where(valid, err, 0.0))
        covered[t] |= valid
    masks = covered & (errors > threshold)
    return EpiMaskStack(masks=masks, errors=errors, threshold=threshold)


@dataclass
class SegmentScore:
    segment_id: int
    overlap: int  # pixels of segment covered by motion masks, summed over time
    segment_total: int
    epi_fraction: float  # overlap / total motion pixels
    segment_fraction: float  # overlap / segment pixels
    kept: bool


def select_dynamic_masks(
    segments: SegmentStack,
    epi: EpiMaskStack,
    min_epi_fraction: float = MIN_EPI_FRACTION,
    min_segment_fraction: float = MIN_SEGMENT_FRACTION,
) -> tuple[ObjectMaskStack, list[SegmentScore]]:
    """Pick segments that explain the motion masks.

    A segment is kept when it covers a meaningful share of all motion pixels
    (so tiny accidental overlaps are ignored) and the motion covers a
    meaningful share of the segment (so large mostly-static segments that
    merely touch a moving region, e.g. ground planes under cast shadows, are
    rejected). Kept objects are ordered by how much motion they explain.
    """
    if segments.frame_count != epi.frame_count:
        raise DimensionMismatchError(
            f"segments span {segments.frame_count} frames, motion masks {epi.frame_count}"
        )
    total_motion = int(np.sum(epi.masks))
    scores: list[SegmentScore] = []
    for seg_id in segments.ids():
        seg_mask = segments.mask_for(seg_id)
        seg_total = int(np.sum(seg_mask))
        overlap = int(np.sum(seg_mask & epi.masks))
        epi_frac = overlap / total_motion if total_motion > 0 else 0.0
        seg_frac = overlap / seg_total if seg_total > 0 else 0.0
        kept = (
            total_motion > 0
            and epi_frac >= min_epi_fraction
            and seg_frac >= min_segment_fraction
        )
        scores.append(
            SegmentScore(int(seg_id), overlap, seg_total, epi_frac, seg_frac, kept)
        )
        log.debug(
            "segment %d: overlap=%d epi_frac=%.3f seg_frac=%.3f kept=%s",
            seg_id, overlap, epi_frac, seg_frac, kept,
        )
    kept_scores = sorted(
        (s for s in scores if s.kept), key=lambda s: (-s.overlap, s.segment_id)
    )
    h, w = epi.masks.shape[1:]
    obj_masks = np.zeros((len(kept_scores), segments.frame_count, h, w), dtype=bool)
    for i, s in enumerate(kept_scores):
        obj_masks[i] = segments.mask_for(s.segment_id)
    stack = ObjectMaskStack(obj_masks, [s.segment_id for s in kept_scores])
    return stack, scores
