"""Epipolar motion masks and dynamic-segment selection."""
import numpy as np
import pytest

from dynsplat.errors import DimensionMismatchError
from dynsplat.geometry import Camera, FlowField, RigidTransform
from dynsplat.masks import (
    CANONICAL_LONG_SIDE,
    EPI_THRESHOLD,
    EpiMaskStack,
    SegmentStack,
    epi_error_map,
    epi_frame_pairs,
    epi_masks,
    select_dynamic_masks,
)
from dynsplat.synth import generate, preset_floater, preset_shadow

# ── frame-pair convention ──────────────────────────────────────────────


def test_frame_pairs_mirror_at_the_tail():
    # gap 1 runs forward until the last frame, which pairs backward; gap 4
    # mirrors for the last four frames and drops frames with no partner
    assert epi_frame_pairs(6, (1, 4)) == [
        (0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 4),
        (0, 4), (1, 5), (4, 0), (5, 1),
    ]


def test_frame_pairs_reject_bad_gap():
    with pytest.raises(ValueError):
        epi_frame_pairs(6, (0,))


# ── hand-built Sampson oracle ──────────────────────────────────────────
#
# Two axis-aligned cameras separated along x have horizontal epipolar
# lines, so a correspondence offset vertically by dy sits at Sampson
# distance dy / sqrt(2) -- independent of focal length, and measured at
# the canonical 512-long-side scale (here 8x the native 64px raster).


def _stereo_pair(size=64):
    half = (size - 1) / 2
    cam_a = Camera(70.0, 70.0, half, half, size, size)
    pose_b = RigidTransform(t=np.array([-0.1, 0.0, 0.0]))
    cam_b = Camera(70.0, 70.0, half, half, size, size, pose=pose_b)
    return cam_a, cam_b


@pytest.mark.parametrize("dy", [0.5, 0.1])
def test_vertical_offset_sampson_value(dy):
    cam_a, cam_b = _stereo_pair()
    flow = FlowField(np.full((64, 64, 2), [3.0, dy]))
    err, valid = epi_error_map(flow, cam_a, cam_b)
    assert valid.all()
    scale = CANONICAL_LONG_SIDE / 64
    expected = scale * dy / np.sqrt(2.0)
    assert np.abs(err - expected).max() < 1e-9


def test_horizontal_flow_satisfies_epipolar_constraint():
    cam_a, cam_b = _stereo_pair()
    flow = FlowField(np.full((64, 64, 2), [-7.3, 0.0]))
    err, _ = epi_error_map(flow, cam_a, cam_b)
    assert np.abs(err).max() < 1e-9


def test_threshold_splits_the_offsets():
    # 0.5px native -> 2.83 canonical (moving); 0.1px -> 0.57 (static)
    cam_a, cam_b = _stereo_pair()
    cams = [cam_a, cam_b]
    moving = {(0, 1): FlowField(np.full((64, 64, 2), [0.0, 0.5]))}
    stack = epi_masks(moving, cams, gaps=(1,))
    assert stack.masks[0].all()
    assert not stack.masks[1].any()  # mirror pair (1, 0) has no flow supplied

    still = {(0, 1): FlowField(np.full((64, 64, 2), [0.0, 0.1]))}
    stack = epi_masks(still, cams, gaps=(1,))
    assert not stack.masks.any()
    assert stack.threshold == EPI_THRESHOLD


def test_invalid_flow_pixels_never_marked():
    cam_a, cam_b = _stereo_pair()
    validity = np.ones((64, 64), dtype=bool)
    validity[10:20] = False
    flow = FlowField(np.full((64, 64, 2), [0.0, 0.5]), validity)
    stack = epi_masks({(0, 1): flow}, [cam_a, cam_b], gaps=(1,))
    assert not stack.masks[0, 10:20].any()
    assert stack.masks[0, :10].all() and stack.masks[0, 20:].all()


def test_more_gaps_only_raise_errors():
    b = generate(preset_shadow())
    flows = {
        k: FlowField(v, b.flow_validity[k]) for k, v in b.flows.items()
    }
    narrow = epi_masks(flows, b.cameras, gaps=(1,))
    wide = epi_masks(flows, b.cameras, gaps=(1, 4))
    assert (wide.errors >= narrow.errors - 1e-12).all()
    assert (wide.masks | ~narrow.masks).all()  # narrow mask is a subset


def test_flow_camera_resolution_mismatch():
    cam_a, cam_b = _stereo_pair()
    flow = FlowField(np.zeros((32, 32, 2)))
    with pytest.raises(DimensionMismatchError):
        epi_error_map(flow, cam_a, cam_b)


# ── segment selection ──────────────────────────────────────────────────


def _epi_from_masks(masks):
    masks = np.asarray(masks, dtype=bool)
    return EpiMaskStack(masks, np.where(masks, 3.0, 0.0))


def test_selection_thresholds_hand_example():
    # 4x4 single frame; segment 5 fills rows 0-1, segment 2 row 2,
    # segment 9 row 3.  Motion covers all of row 2 plus one pixel of row 0:
    #   seg 5: epi 1/5 = 0.2 >= 0.05 but seg 1/8 = 0.125 < 0.2 -> rejected
    #   seg 2: epi 4/5 = 0.8, seg 4/4 = 1.0               -> kept
    #   seg 9: no overlap                                  -> rejected
    labels = np.array([[[5, 5, 5, 5], [5, 5, 5, 5], [2, 2, 2, 2], [9, 9, 9, 9]]])
    motion = np.zeros((1, 4, 4), dtype=bool)
    motion[0, 2] = True
    motion[0, 0, 1] = True
    stack, scores = select_dynamic_masks(SegmentStack(labels), _epi_from_masks(motion))

    assert stack.segment_ids == [2]
    assert stack.object_count == 1
    assert (stack.masks[0, 0] == (labels[0] == 2)).all()

    by_id = {s.segment_id: s for s in scores}
    assert by_id[5].overlap == 1 and not by_id[5].kept
    assert by_id[5].epi_fraction == pytest.approx(0.2)
    assert by_id[5].segment_fraction == pytest.approx(0.125)
    assert by_id[2].kept and by_id[2].segment_fraction == 1.0
    assert by_id[9].overlap == 0 and not by_id[9].kept


def test_selection_orders_by_overlap_then_id():
    labels = np.zeros((1, 6, 6), dtype=np.int32)
    labels[0, :2] = 7   # 12 px
    labels[0, 2:4] = 3  # 12 px
    labels[0, 4:] = 11  # 12 px
    motion = np.zeros((1, 6, 6), dtype=bool)
    motion[0, 0] = True        # seg 7: overlap 6
    motion[0, 2] = True        # seg 3: overlap 6 -- ties with 7, lower id first
    motion[0, 4, :3] = True    # seg 11: overlap 3 (3/15=0.2, 3/12=0.25 kept)
    stack, _ = select_dynamic_masks(SegmentStack(labels), _epi_from_masks(motion))
    assert stack.segment_ids == [3, 7, 11]


def test_no_motion_selects_nothing():
    labels = np.zeros((2, 4, 4), dtype=np.int32)
    stack, scores = select_dynamic_masks(
        SegmentStack(labels), _epi_from_masks(np.zeros((2, 4, 4)))
    )
    assert stack.object_count == 0
    assert stack.union_at(0).sum() == 0
    assert not any(s.kept for s in scores)


def test_frame_count_mismatch_rejected():
    labels = np.zeros((2, 4, 4), dtype=np.int32)
    with pytest.raises(DimensionMismatchError):
        select_dynamic_masks(SegmentStack(labels), _epi_from_masks(np.zeros((3, 4, 4))))


# ── end to end on generated scenes ─────────────────────────────────────


def test_shadow_scene_keeps_blob_rejects_ground():
    b = generate(preset_shadow())
    flows = {k: FlowField(v, b.flow_validity[k]) for k, v in b.flows.items()}
    epi = epi_masks(flows, b.cameras)
    stack, scores = select_dynamic_masks(SegmentStack(b.segments), epi)

    assert stack.segment_ids == [1]  # the moving blob
    by_id = {s.segment_id: s for s in scores}
    ground, blob = by_id[0], by_id[1]
    assert blob.kept
    assert blob.segment_fraction >= 0.2 and blob.epi_fraction >= 0.05

    # the cast shadow pollutes the ground's motion mask enough to pass the
    # coverage-of-motion test, but the ground itself is mostly static
    assert ground.overlap > 0
    assert ground.epi_fraction >= 0.05
    assert ground.segment_fraction < 0.2
    assert not ground.kept


def test_static_scene_selects_nothing():
    b = generate(preset_floater())
    flows = {k: FlowField(v, b.flow_validity[k]) for k, v in b.flows.items()}
    epi = epi_masks(flows, b.cameras)
    assert not epi.masks.any()
    stack, _ = select_dynamic_masks(SegmentStack(b.segments), epi)
    assert stack.object_count == 0


def test_epi_masks_match_true_object_masks_on_shadow_scene():
    # sanity on mask quality: the selected mask IS the object's true mask
    b = generate(preset_shadow())
    flows = {k: FlowField(v, b.flow_validity[k]) for k, v in b.flows.items()}
    epi = epi_masks(flows, b.cameras)
    stack, _ = select_dynamic_masks(SegmentStack(b.segments), epi)
    assert (stack.masks[0] == b.object_masks[0]).all()
