"""Object-aware refinement of consistent video depth.

Temporally consistent video depth washes out thin moving structures: the
aggregation that makes it consistent blurs them into their surroundings.
Per-frame mono depth keeps that detail but floats on an arbitrary affine
gauge per frame.  The refinement pulls masked object pixels toward an
affine-aligned copy of the mono depth while an anchor term keeps the rest of
the stack glued to its input, so detail returns without the global geometry
drifting.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, TextIO

import numpy as np

from .errors import DegenerateFitError, DimensionMismatchError
from .geometry import BinaryMask, DepthMap
from .masks import ObjectMaskStack

log = logging.getLogger(__name__)

MIN_MONO_VARIANCE = 1e-12


@dataclass
class AffineFit:
    """Scale and shift aligning mono depth to metric depth on one mask."""

    alpha: float
    beta: float
    object_index: int = -1
    frame: int = -1

    def apply(self, mono: np.ndarray) -> np.ndarray:
        return self.alpha * mono + self.beta


@dataclass
class DepthStack:
    """Consistent video depth paired with per-frame mono depth."""

    video: list[DepthMap]
    mono: list[DepthMap]

    def __post_init__(self) -> None:
        if not self.video:
            raise DimensionMismatchError("depth stack needs at least one frame")
        if len(self.video) != len(self.mono):
            raise DimensionMismatchError(
                f"{len(self.video)} video frames vs {len(self.mono)} mono frames"
            )
        h, w = self.video[0].values.shape
        for m in (*self.video, *self.mono):
            if m.values.shape != (h, w):
                raise DimensionMismatchError("all depth maps must share one shape")

    @property
    def frame_count(self) -> int:
        return len(self.video)

    @property
    def shape(self) -> tuple[int, int]:
        return self.video[0].values.shape

    def video_values(self) -> np.ndarray:
        return np.stack([m.values for m in self.video])

    def mono_values(self) -> np.ndarray:
        return np.stack([m.values for m in self.mono])

    def video_validity(self) -> np.ndarray:
        return np.stack([m.validity for m in self.video])

    def mono_validity(self) -> np.ndarray:
        return np.stack([m.validity for m in self.mono])


@dataclass
class DepthRefineConfig:
    lambda_anchor: float = 1.0
    lambda_object: float = 4.0
    iterations: int = 20
    step_size: float = 0.5  # cap on per-iteration log-depth movement
    min_mask_pixels: int = 32

    def __post_init__(self) -> None:
        if self.lambda_anchor < 0 or self.lambda_object < 0:
            raise ValueError("loss weights must be non-negative")
        if self.iterations < 1:
            raise ValueError(f"need at least one iteration, got {self.iterations}")
        if self.step_size <= 0:
            raise ValueError("step size must be positive")


def fit_scale_shift(
    mono: DepthMap, video: DepthMap, mask: BinaryMask, min_pixels: int = 32
) -> AffineFit:
    """Least-squares (alpha, beta) with alpha*mono + beta closest to video.

    Only pixels inside the mask and valid in both maps participate.  Raises
    DegenerateFitError when the selection is too small, the mono depth has no
    spread to pin the scale, or the fitted scale is not positive.
    """
    if mono.values.shape != video.values.shape or mask.values.shape != mono.values.shape:
        raise DimensionMismatchError("fit inputs must share one shape")
    sel = mask.values & mono.validity & video.validity
    n = int(sel.sum())
    if n < min_pixels:
        raise DegenerateFitError(f"{n} usable pixels, need {min_pixels}")
    dm = mono.values[sel]
    dv = video.values[sel]
    if dm.var() < MIN_MONO_VARIANCE:
        raise DegenerateFitError("mono depth is flat on the mask; scale unconstrained")
    design = np.stack([dm, np.ones_like(dm)], axis=1)
    (alpha, beta), *_ = np.linalg.lstsq(design, dv, rcond=None)
    if alpha <= 0:
        raise DegenerateFitError(f"fitted scale {alpha:.3g} is not positive")
    return AffineFit(float(alpha), float(beta))


def fit_object_frames(
    stack: DepthStack, objects: ObjectMaskStack, min_pixels: int = 32
) -> dict[tuple[int, int], AffineFit | None]:
    """One fit per (object, frame); degenerate combinations map to None."""
    fits: dict[tuple[int, int], AffineFit | None] = {}
    for o in range(objects.object_count):
        for t in range(stack.frame_count):
            mask = BinaryMask(objects.masks[o, t])
            try:
                fit = fit_scale_shift(stack.mono[t], stack.video[t], mask, min_pixels)
                fit.object_index, fit.frame = o, t
            except DegenerateFitError as exc:
                log.debug("object %d frame %d: degenerate fit (%s)", o, t, exc)
                fit = None
            fits[(o, t)] = fit
    return fits


def object_depth_loss(
    stack: DepthStack,
    objects: ObjectMaskStack,
    fits: Mapping[tuple[int, int], AffineFit | None],
) -> float:
    """Mean absolute gap between video depth and aligned mono depth on masks.

    Summed over objects, frames and mask pixels, divided by frames times
    objects.  Degenerate (object, frame) fits contribute zero but still count
    in the normalization, so skipping an object cannot lower the loss average
    artificially.
    """
    if objects.frame_count != stack.frame_count:
        raise DimensionMismatchError(
            f"masks span {objects.frame_count} frames, depth {stack.frame_count}"
        )
    count = objects.object_count
    if count == 0:
        return 0.0
    valid = stack.video_validity() & stack.mono_validity()
    video = stack.video_values()
    mono = stack.mono_values()
    total = 0.0
    for o in range(count):
        for t in range(stack.frame_count):
            fit = fits.get((o, t))
            if fit is None:
                continue
            sel = objects.masks[o, t] & valid[t]
            if sel.any():
                total += float(
                    np.abs(video[t][sel] - fit.apply(mono[t][sel])).sum()
                )
    return total / (stack.frame_count * count)


def _loss_value(
    exp_x: np.ndarray,
    mono: np.ndarray,
    valid: np.ndarray,
    masks: np.ndarray,
    fits: Mapping[tuple[int, int], AffineFit | None],
    frame_count: int,
    object_count: int,
) -> float:
    total = 0.0
    for o in range(object_count):
        for t in range(frame_count):
            fit = fits.get((o, t))
            if fit is None:
                continue
            sel = masks[o, t] & valid[t]
            if sel.any():
                total += float(np.abs(exp_x[t][sel] - fit.apply(mono[t][sel])).sum())
    return total / (frame_count * object_count)


def refine_depth(
    stack: DepthStack,
    objects: ObjectMaskStack,
    cfg: DepthRefineConfig | None = None,
    log_stream: TextIO | None = None,
) -> DepthStack:
    """Alternate scale-shift refits with capped coordinate steps on log-depth.

    Minimizes lambda_object * object loss + lambda_anchor * mean |log D -
    log D_init|.  Each outer iteration refits (alpha, beta) on the current
    depth, then moves every covered pixel to the best of a few closed-form
    candidates within the step cap; both halves only ever accept changes that
    do not increase the objective, so the trace is non-increasing.  Pixels
    outside every object mask are returned bit-identical.

    When log_stream is given, one plain-text line per outer iteration is
    written: "iteration <k> objective <value>".
    """
    cfg = cfg or DepthRefineConfig()
    t_count = stack.frame_count
    if objects.frame_count != t_count:
        raise DimensionMismatchError(
            f"masks span {objects.frame_count} frames, depth {t_count}"
        )
    if objects.object_count and objects.masks.shape[2:] != stack.shape:
        raise DimensionMismatchError("mask and depth rasters disagree")

    video = stack.video_values()
    mono = stack.mono_values()
    vvalid = stack.video_validity()
    valid = vvalid & stack.mono_validity()
    o_count = objects.object_count
    masks = objects.masks if o_count else np.zeros((0, t_count) + stack.shape, bool)

    x0 = np.where(vvalid, np.log(np.where(vvalid, video, 1.0)), 0.0)
    x = x0.copy()
    n_anchor = int(vvalid.sum())
    anchor_w = cfg.lambda_anchor / n_anchor if n_anchor else 0.0

    def objective(cur_x: np.ndarray, fits) -> float:
        anchor = anchor_w * float(np.abs(cur_x - x0)[vvalid].sum())
        if o_count == 0:
            return anchor
        loss = _loss_value(np.exp(cur_x), mono, valid, masks, fits, t_count, o_count)
        return cfg.lambda_object * loss + anchor

    fits: dict[tuple[int, int], AffineFit | None] = {}
    warned = False

    for it in range(cfg.iterations):
        # (a) refit on the current depth, kept only if it does not hurt
        current = _stack_with_video(stack, np.exp(x), x != x0)
        new_fits = fit_object_frames(current, objects, cfg.min_mask_pixels)
        if not fits or objective(x, new_fits) <= objective(x, fits) + 1e-12:
            fits = new_fits
        if not warned:
            for (o, t), fit in sorted(fits.items()):
                if fit is None:
                    log.warning("object %d frame %d: degenerate fit, skipped", o, t)
            warned = True

        # (b) per-pixel move to the best candidate within the step cap
        if o_count:
            lo, hi = x - cfg.step_size, x + cfg.step_size
            targets = np.full((o_count,) + x.shape, np.nan)
            for (o, t), fit in fits.items():
                if fit is None:
                    continue
                sel = masks[o, t] & valid[t]
                targets[o, t][sel] = fit.apply(mono[t][sel])
            covered = ~np.isnan(targets)
            region = covered.any(axis=0)

            def pixel_cost(cand: np.ndarray) -> np.ndarray:
                cost = anchor_w * np.abs(cand - x0)
                d = np.exp(cand)
                w = cfg.lambda_object / (t_count * o_count)
                for o in range(o_count):
                    gap = np.abs(d - np.where(covered[o], targets[o], 0.0))
                    cost = cost + np.where(covered[o], w * gap, 0.0)
                return cost

            best = x.copy()
            best_cost = pixel_cost(x)
            candidates = [np.clip(x0, lo, hi)]
            for o in range(o_count):
                ok = covered[o] & (targets[o] > 0)
                cand = np.where(ok, np.log(np.where(ok, targets[o], 1.0)), x)
                candidates.append(np.clip(cand, lo, hi))
            for cand in candidates:
                cost = pixel_cost(cand)
                take = region & (cost < best_cost)
                best = np.where(take, cand, best)
                best_cost = np.where(take, cost, best_cost)
            x = best

        value = objective(x, fits)
        log.debug("refine iteration %d objective %.12e", it, value)
        if log_stream is not None:
            log_stream.write(f"iteration {it} objective {value:.12e}\n")

    return _stack_with_video(stack, np.exp(x), x != x0)


def _stack_with_video(
    stack: DepthStack, values: np.ndarray, touched: np.ndarray
) -> DepthStack:
    """Copy of the stack with video depth replaced where touched is set."""
    maps = []
    for t, m in enumerate(stack.video):
        out = np.where(touched[t], values[t], m.values)
        maps.append(DepthMap(out, m.validity.copy()))
    return DepthStack(video=maps, mono=list(stack.mono))
