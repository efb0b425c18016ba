"""Per-frame raster types: binary masks, depth maps, flow fields."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionMismatchError


@dataclass
class BinaryMask:
    values: np.ndarray  # (H, W) bool

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=bool)
        if self.values.ndim != 2:
            raise DimensionMismatchError(f"mask must be 2-D, got shape {self.values.shape}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def count(self) -> int:
        return int(self.values.sum())


@dataclass
class DepthMap:
    values: np.ndarray  # (H, W) float, meters
    validity: np.ndarray | None = None  # (H, W) bool; default all valid

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionMismatchError(f"depth must be 2-D, got shape {self.values.shape}")
        if self.validity is None:
            self.validity = np.ones_like(self.values, dtype=bool)
        else:
            self.validity = np.asarray(self.validity, dtype=bool)
            if self.validity.shape != self.values.shape:
                raise DimensionMismatchError("depth validity shape differs from values")
        bad = self.validity & ~(np.isfinite(self.values) & (self.values > 0))
        if np.any(bad):
            raise ValueError(f"{bad.sum()} valid depth pixels are non-finite or <= 0")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class FlowField:
    values: np.ndarray  # (H, W, 2) float, pixel displacement (dx, dy)
    validity: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[2] != 2:
            raise DimensionMismatchError(f"flow must be (H, W, 2), got {self.values.shape}")
        if self.validity is None:
            self.validity = np.ones(self.values.shape[:2], dtype=bool)
        else:
            self.validity = np.asarray(self.validity, dtype=bool)
            if self.validity.shape != self.values.shape[:2]:
                raise DimensionMismatchError("flow validity shape differs from values")
        if np.any(~np.isfinite(self.values[self.validity])):
            raise ValueError("valid flow pixels must be finite")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def bilinear_sample(values: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Bilinear lookup of an (H, W) or (H, W, C) raster at continuous pixel
    positions xy (N, 2), clamped at the borders.

    A position halfway between two pixels averages them, e.g. x=1.0 between
    columns it sits exactly on returns that column's value.
    """
    v = np.asarray(values, dtype=np.float64)
    squeeze = v.ndim == 2
    if squeeze:
        v = v[..., None]
    h, w = v.shape[:2]
    p = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    x = np.clip(p[:, 0], 0.0, w - 1.0)
    y = np.clip(p[:, 1], 0.0, h - 1.0)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (x - x0)[:, None]
    ay = (y - y0)[:, None]
    out = (
        v[y0, x0] * (1 - ax) * (1 - ay)
        + v[y0, x1] * ax * (1 - ay)
        + v[y1, x0] * (1 - ax) * ay
        + v[y1, x1] * ax * ay
    )
    return out[:, 0] if squeeze else out


def nearest_pixel(xy: np.ndarray, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Round positions to integer pixels; returns (cols, rows) and clips nothing.

    Out-of-image positions yield indices outside [0, w) x [0, h); callers
    decide how to treat them.
    """
    p = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    return np.rint(p[:, 0]).astype(int), np.rint(p[:, 1]).astype(int)
