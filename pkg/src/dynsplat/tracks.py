"""Long-range 2-D tracks: the container type, seed sampling, and
occlusion-aware re-identification of points the tracker lost.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage
from skimage.transform import resize as _skimage_resize

from .errors import (
    DimensionMismatchError,
    EmptyMaskError,
    EmptyMotionError,
    MissingObjectMaskError,
)
from .geometry import BinaryMask, dilate, distance_transform, skeletonize
from .masks import EpiMaskStack, ObjectMaskStack

log = logging.getLogger(__name__)

PROV_OBSERVED = "observed"
PROV_REIDENTIFIED = "re-identified"


@dataclass
class Track:
    """One tracked point across the whole sequence.

    positions holds a 2-D pixel position for every frame (tracker output is
    dense; confidence lives in the visibility flags). provenance marks frames
    whose visibility was recovered after the fact.
    """

    track_id: int
    object_id: int | None  # origin dynamic object, None for background
    spawn_frame: int
    positions: np.ndarray  # (T, 2) float
    visibility: np.ndarray  # (T,) bool
    provenance: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.visibility = np.asarray(self.visibility, dtype=bool)
        t = len(self.positions)
        if self.positions.shape != (t, 2) or self.visibility.shape != (t,):
            raise DimensionMismatchError("track positions/visibility shapes disagree")
        if not self.provenance:
            self.provenance = [PROV_OBSERVED] * t
        if not np.all(np.isfinite(self.positions)):
            raise ValueError(f"track {self.track_id} has non-finite positions")

    @property
    def frame_count(self) -> int:
        return len(self.positions)


@dataclass
class TrackSet:
    tracks: list[Track]
    frame_count: int

    def __post_init__(self) -> None:
        for tr in self.tracks:
            if tr.frame_count != self.frame_count:
                raise DimensionMismatchError(
                    f"track {tr.track_id} spans {tr.frame_count} frames, set has {self.frame_count}"
                )

    def __len__(self) -> int:
        return len(self.tracks)

    def visible_at(self, frame: int) -> np.ndarray:
        return np.array([tr.visibility[frame] for tr in self.tracks], dtype=bool)

    def positions_at(self, frame: int) -> np.ndarray:
        return np.array([tr.positions[frame] for tr in self.tracks], dtype=np.float64)


@dataclass
class SamplerConfig:
    """Seed-sampling budget and the working resolution tracks live at."""

    n_total: int = 19384
    n_skeleton: int = 3000
    skeleton_dilate_px: int = 5
    working_long_side: int = 512
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.n_skeleton <= self.n_total:
            raise ValueError(
                f"skeleton budget {self.n_skeleton} outside [0, {self.n_total}]"
            )
        if self.working_long_side <= 0:
            raise ValueError("working resolution must be positive")


@dataclass
class ReIdConfig:
    tau_self_occ: float = 10.0  # max re-track divergence, pixels
    window: int = 2  # frame half-width of the divergence check

    def __post_init__(self) -> None:
        if self.tau_self_occ <= 0:
            raise ValueError("divergence threshold must be positive")
        if self.window < 1:
            raise ValueError("window half-width must be at least 1")


@dataclass
class TrackSeed:
    """Where a track should be spawned: frame, pixel, owning object."""

    frame: int
    position: np.ndarray  # (2,) float, (x, y) at working resolution
    object_id: int | None  # segment id in the object mask stack, None if unowned


def resize_to_working(
    raster: np.ndarray | BinaryMask, cfg: SamplerConfig | None = None
) -> tuple[np.ndarray | BinaryMask, float]:
    """Resize so the longer side equals the working resolution.

    Masks (BinaryMask or bool arrays) use nearest-neighbor so labels stay
    crisp; everything else is interpolated bilinearly. Returns the resized
    raster and the scale factor for mapping coordinates along with it.
    """
    cfg = cfg or SamplerConfig()
    is_mask = isinstance(raster, BinaryMask)
    values = raster.values if is_mask else np.asarray(raster)
    h, w = values.shape[:2]
    if h <= 0 or w <= 0:
        raise DimensionMismatchError("raster has an empty dimension")
    scale = cfg.working_long_side / max(h, w)
    if scale == 1.0:
        return raster, 1.0
    out_h = cfg.working_long_side if h >= w else int(round(h * scale))
    out_w = cfg.working_long_side if w > h else int(round(w * scale))
    shape = (out_h, out_w) + values.shape[2:]
    if is_mask or values.dtype == bool:
        resized = _skimage_resize(
            values.astype(np.float64), shape, order=0, anti_aliasing=False
        ).astype(bool)
        return (BinaryMask(resized) if is_mask else resized), scale
    resized = _skimage_resize(
        values.astype(np.float64), shape, order=1, anti_aliasing=False
    )
    return resized, scale


def skeleton_band_distribution(
    mask: BinaryMask, cfg: SamplerConfig | None = None
) -> np.ndarray:
    """Sampling weights concentrated on the thin parts of a mask.

    Support is the mask's medial-axis skeleton dilated by a few pixels and
    clipped back to the mask; each supported pixel is weighted by the inverse
    of its distance to the mask boundary (floored at one), so 1-2 px limbs
    outweigh blob interiors where the skeleton runs deep inside. Weights
    sum to one.
    """
    cfg = cfg or SamplerConfig()
    if not mask.values.any():
        raise EmptyMaskError("cannot build a sampling distribution on an empty mask")
    band = dilate(skeletonize(mask), cfg.skeleton_dilate_px)
    support = band.values & mask.values
    boundary_dist = distance_transform(mask)
    weights = np.where(support, 1.0 / np.maximum(boundary_dist, 1.0), 0.0)
    return weights / weights.sum()


def sample_track_seeds(
    epi: EpiMaskStack,
    objects: ObjectMaskStack,
    cfg: SamplerConfig | None = None,
    seed: int | None = None,
) -> list[TrackSeed]:
    """Draw spawn points: uniform over motion-mask pixels plus a skeleton
    quota that targets thin structures.

    The uniform share treats all motion pixels across all frames as one
    pool. The skeleton share picks an object proportional to its total mask
    area, a frame uniformly among the frames where that object is present,
    then a pixel from skeleton_band_distribution of that frame's mask.
    Duplicates are allowed; exactly n_total seeds come back, deterministic
    for a fixed seed. If one of the two pools is empty its quota moves to
    the other; if both are empty there is no motion to track at all.
    """
    cfg = cfg or SamplerConfig()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)

    epi_coords = np.argwhere(epi.masks)  # (n, 3) of (t, y, x)
    areas = (
        objects.masks.reshape(objects.object_count, -1).sum(axis=1)
        if objects.object_count
        else np.zeros(0, dtype=np.int64)
    )
    total_area = int(areas.sum())

    n_skeleton = cfg.n_skeleton
    n_uniform = cfg.n_total - cfg.n_skeleton
    if len(epi_coords) == 0 and total_area == 0:
        raise EmptyMotionError("both the motion masks and the object masks are empty")
    if len(epi_coords) == 0 and n_uniform:
        log.warning("motion masks empty; drawing all %d seeds from skeleton bands", cfg.n_total)
        n_skeleton, n_uniform = cfg.n_total, 0
    if total_area == 0 and n_skeleton:
        log.warning("object masks empty; drawing all %d seeds uniformly", cfg.n_total)
        n_skeleton, n_uniform = 0, cfg.n_total

    seeds: list[TrackSeed] = []
    if n_uniform:
        picks = rng.integers(0, len(epi_coords), size=n_uniform)
        for t, y, x in epi_coords[picks]:
            owner = None
            for o in range(objects.object_count):
                if objects.masks[o, t, y, x]:
                    owner = objects.segment_ids[o]
                    break
            seeds.append(TrackSeed(int(t), np.array([x, y], dtype=float), owner))

    if n_skeleton:
        share = areas / total_area
        rows = rng.choice(objects.object_count, size=n_skeleton, p=share)
        span = [
            np.flatnonzero(objects.masks[o].any(axis=(1, 2)))
            for o in range(objects.object_count)
        ]
        dist_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        for o in rows:
            t = int(span[o][rng.integers(len(span[o]))])
            if (o, t) not in dist_cache:
                weights = skeleton_band_distribution(
                    BinaryMask(objects.masks[o, t]), cfg
                )
                coords = np.argwhere(weights > 0)
                dist_cache[(o, t)] = coords, weights[weights > 0]
            coords, probs = dist_cache[(o, t)]
            y, x = coords[rng.choice(len(coords), p=probs)]
            seeds.append(
                TrackSeed(t, np.array([x, y], dtype=float), objects.segment_ids[o])
            )
    return seeds


Resampler = Callable[[int, np.ndarray, Sequence[int]], np.ndarray]


def reidentify(
    tracks: TrackSet,
    objects: ObjectMaskStack,
    resampler: Resampler,
    cfg: ReIdConfig | None = None,
) -> TrackSet:
    """Flip lost track points back to visible where a re-track agrees.

    A frame qualifies when the tracker marked it invisible but the stored
    position falls inside the origin object's mask -- the point has come out
    from behind whatever hid it. The resampler (frame, position, frames) ->
    (len(frames), 2) re-tracks the point over a short window around the
    frame; if the re-track stays within tau of the stored positions the
    original loss was genuine occlusion and the frame is re-identified.
    Larger divergence means the surface moved on without the point
    (self-occlusion): the mask test alone would relabel it wrongly, so the
    frame stays invisible. Visible frames and positions are never touched,
    which also makes the operation idempotent.
    """
    cfg = cfg or ReIdConfig()
    if objects.frame_count != tracks.frame_count:
        raise DimensionMismatchError(
            f"masks span {objects.frame_count} frames, tracks {tracks.frame_count}"
        )
    row_of = {sid: row for row, sid in enumerate(objects.segment_ids)}
    t_count = tracks.frame_count
    h, w = objects.masks.shape[2:] if objects.object_count else (0, 0)

    def origin_mask(row: int, t: int) -> np.ndarray:
        m = objects.masks[row, t]
        if not m.any():
            raise MissingObjectMaskError(f"object {objects.segment_ids[row]} absent at frame {t}")
        return m

    out: list[Track] = []
    for tr in tracks.tracks:
        vis = tr.visibility.copy()
        prov = list(tr.provenance)
        row = row_of.get(tr.object_id) if tr.object_id is not None else None
        if tr.object_id is not None and row is None:
            log.debug("track %d: origin object %s has no mask stack entry", tr.track_id, tr.object_id)
        if row is not None:
            for t in range(tr.spawn_frame, t_count):
                if vis[t]:
                    continue
                try:
                    mask = origin_mask(row, t)
                except MissingObjectMaskError as exc:
                    log.debug("track %d frame %d: %s", tr.track_id, t, exc)
                    continue
                xi = int(round(tr.positions[t, 0]))
                yi = int(round(tr.positions[t, 1]))
                if not (0 <= yi < h and 0 <= xi < w) or not mask[yi, xi]:
                    continue
                frames = [f for f in range(t - cfg.window, t + cfg.window + 1) if 0 <= f < t_count]
                path = np.asarray(resampler(t, tr.positions[t].copy(), frames), dtype=np.float64)
                if path.shape != (len(frames), 2):
                    raise DimensionMismatchError(
                        f"resampler returned {path.shape}, wanted {(len(frames), 2)}"
                    )
                divergence = np.linalg.norm(path - tr.positions[frames], axis=1).max()
                if divergence <= cfg.tau_self_occ:
                    vis[t] = True
                    prov[t] = PROV_REIDENTIFIED
                else:
                    log.debug(
                        "track %d frame %d: re-track diverges %.1f px, keeping invisible",
                        tr.track_id, t, divergence,
                    )
        out.append(
            Track(tr.track_id, tr.object_id, tr.spawn_frame, tr.positions.copy(), vis, prov)
        )
    return TrackSet(out, t_count)


@dataclass
class CoverageReport:
    """How well the visible tracks blanket each object's mask over time."""

    coverage: np.ndarray  # (O, T) fraction of mask pixels near a visible track
    reidentified: np.ndarray  # (O, T) re-identified track-frames per object
    radius: float


def track_coverage_report(
    tracks: TrackSet, objects: ObjectMaskStack, radius: float = 4.0
) -> CoverageReport:
    """Per object and frame: share of mask pixels within radius of a track."""
    o_count, t_count = objects.object_count, objects.frame_count
    if tracks.frame_count != t_count:
        raise DimensionMismatchError(
            f"masks span {t_count} frames, tracks {tracks.frame_count}"
        )
    coverage = np.zeros((o_count, t_count))
    reident = np.zeros((o_count, t_count), dtype=np.int64)
    if o_count == 0:
        return CoverageReport(coverage, reident, radius)
    h, w = objects.masks.shape[2:]
    row_of = {sid: row for row, sid in enumerate(objects.segment_ids)}
    for t in range(t_count):
        hits = np.zeros((h, w), dtype=bool)
        for tr in tracks.tracks:
            if tr.visibility[t]:
                xi = int(round(tr.positions[t, 0]))
                yi = int(round(tr.positions[t, 1]))
                if 0 <= yi < h and 0 <= xi < w:
                    hits[yi, xi] = True
            if tr.provenance[t] == PROV_REIDENTIFIED and tr.object_id in row_of:
                reident[row_of[tr.object_id], t] += 1
        if hits.any():
            near = ndimage.distance_transform_edt(~hits) <= radius
            for o in range(o_count):
                sel = objects.masks[o, t]
                if sel.any():
                    coverage[o, t] = float(near[sel].mean())
    return CoverageReport(coverage, reident, radius)


def serialize_tracks(ts: TrackSet) -> str:
    """One track per line: id object origin frame-count then t:x:y:vis:prov
    tuples. Floats use shortest round-trip repr so reads are bit-exact.
    """
    lines = [f"# tracks v1 frames={ts.frame_count} count={len(ts.tracks)}"]
    for tr in ts.tracks:
        obj = "-" if tr.object_id is None else str(tr.object_id)
        cells = [str(tr.track_id), obj, str(tr.spawn_frame), str(tr.frame_count)]
        for t in range(tr.frame_count):
            prov = "r" if tr.provenance[t] == PROV_REIDENTIFIED else "o"
            x, y = float(tr.positions[t, 0]), float(tr.positions[t, 1])
            cells.append(f"{t}:{x!r}:{y!r}:{int(tr.visibility[t])}:{prov}")
        lines.append(" ".join(cells))
    return "\n".join(lines) + "\n"


def deserialize_tracks(text: str) -> TrackSet:
    tracks: list[Track] = []
    frame_count = 0
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            if line.startswith("#") and "frames=" in line:
                frame_count = int(line.split("frames=")[1].split()[0])
            continue
        cells = line.split()
        track_id = int(cells[0])
        object_id = None if cells[1] == "-" else int(cells[1])
        spawn = int(cells[2])
        t_count = int(cells[3])
        pos = np.zeros((t_count, 2))
        vis = np.zeros(t_count, dtype=bool)
        prov = [PROV_OBSERVED] * t_count
        for cell in cells[4:]:
            f, x, y, v, p = cell.split(":")
            f = int(f)
            pos[f] = (float(x), float(y))
            vis[f] = v == "1"
            prov[f] = PROV_REIDENTIFIED if p == "r" else PROV_OBSERVED
        tracks.append(Track(track_id, object_id, spawn, pos, vis, prov))
        frame_count = max(frame_count, t_count)
    return TrackSet(tracks, frame_count)
