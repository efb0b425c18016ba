"""2-D binary morphology: exact distance transform, thinning, dilation."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .rasters import BinaryMask


def distance_transform(mask: BinaryMask) -> np.ndarray:
    """Exact Euclidean distance from each true pixel to the nearest false
    pixel, with the image border counting as false. Zero on false pixels.
    """
    padded = np.zeros((mask.height + 2, mask.width + 2), dtype=bool)
    padded[1:-1, 1:-1] = mask.values
    d = ndimage.distance_transform_edt(padded)
    return d[1:-1, 1:-1]


def disk_footprint(radius_px: int) -> np.ndarray:
    """Lattice disk: offsets with dx^2 + dy^2 <= radius^2."""
    r = int(radius_px)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return xx * xx + yy * yy <= r * r


def dilate(mask: BinaryMask, radius_px: int) -> BinaryMask:
    """True wherever any true input pixel lies within Euclidean distance
    radius_px. Radius 0 is the identity.
    """
    if radius_px < 0:
        raise ValueError(f"radius must be >= 0, got {radius_px}")
    if radius_px == 0 or not mask.values.any():
        return BinaryMask(mask.values.copy())
    out = ndimage.binary_dilation(mask.values, structure=disk_footprint(radius_px))
    return BinaryMask(out)


def skeletonize(mask: BinaryMask) -> BinaryMask:
    """Two-subiteration morphological thinning (Zhang-Suen rule).

    The output is a subset of the input, keeps the input's 8-connectivity
    component count, and is a thinning fixpoint: running skeletonize on its
    own output changes nothing.
    """
    from skimage.morphology import skeletonize as _thin

    return BinaryMask(_thin(mask.values, method="zhang"))
