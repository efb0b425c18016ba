"""Pinhole camera, projection, and epipolar geometry.

Conventions: pixel x is the column coordinate, pixel y the row, and pixel
centers sit on integer coordinates. Poses map world points into camera space.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateBaselineError, InvalidDepthError, NonPositiveDepthError
from .transforms import RigidTransform

_MIN_DEPTH = 1e-9


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    def intrinsic_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return self.pose.inverse().t

    def scaled(self, s: float) -> "Camera":
        """Camera for the same view at a resolution scaled by s.

        Pixel centers map as x' = (x + 0.5) * s - 0.5, so intrinsics shift by
        half a pixel on top of the pure scaling.
        """
        return Camera(
            fx=self.fx * s,
            fy=self.fy * s,
            cx=(self.cx + 0.5) * s - 0.5,
            cy=(self.cy + 0.5) * s - 0.5,
            width=int(round(self.width * s)),
            height=int(round(self.height * s)),
            pose=RigidTransform(self.pose.q.copy(), self.pose.t.copy()),
        )


def project(cam: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project world points (N, 3) or (3,) to pixels and camera-space depths.

    Raises NonPositiveDepthError if any point sits at or behind the camera.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts_cam = cam.pose.apply(pts.reshape(-1, 3))
    z = pts_cam[:, 2]
    if np.any(z <= _MIN_DEPTH):
        raise NonPositiveDepthError(f"camera-space depth min {z.min():.3g} <= {_MIN_DEPTH}")
    px = np.stack(
        [cam.fx * pts_cam[:, 0] / z + cam.cx, cam.fy * pts_cam[:, 1] / z + cam.cy], axis=-1
    )
    if single:
        return px[0], float(z[0])
    return px, z


def project_valid(cam: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Like project but culls instead of raising: returns (pixels, z, in_front)."""
    pts_cam = cam.pose.apply(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = pts_cam[:, 2]
    ok = z > _MIN_DEPTH
    zs = np.where(ok, z, 1.0)
    px = np.stack(
        [cam.fx * pts_cam[:, 0] / zs + cam.cx, cam.fy * pts_cam[:, 1] / zs + cam.cy], axis=-1
    )
    return px, z, ok


def backproject(cam: Camera, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
    """Lift pixels (N, 2) or (2,) at the given depths back to world points."""
    px = np.asarray(pixels, dtype=np.float64)
    d = np.asarray(depths, dtype=np.float64)
    single = px.ndim == 1
    px = px.reshape(-1, 2)
    d = np.atleast_1d(d).astype(np.float64)
    if np.any(~np.isfinite(d)) or np.any(d <= 0):
        raise InvalidDepthError("depths must be finite and > 0")
    x = (px[:, 0] - cam.cx) / cam.fx * d
    y = (px[:, 1] - cam.cy) / cam.fy * d
    pts_cam = np.stack([x, y, d], axis=-1)
    out = cam.pose.inverse().apply(pts_cam)
    return out[0] if single else out


def _cross_matrix(v: np.ndarray) -> np.ndarray:
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


def fundamental_matrix(cam_a: Camera, cam_b: Camera) -> np.ndarray:
    """Fundamental matrix F with x_b^T F x_a = 0 for static correspondences.

    Built from the relative pose a->b as K_b^-T [t]x R K_a^-1 and normalized
    to unit Frobenius norm so thresholds on epipolar residuals are scale-free.
    """
    rel = cam_b.pose.compose(cam_a.pose.inverse())
    t = rel.t
    if np.linalg.norm(t) < 1e-9:
        raise DegenerateBaselineError(f"relative translation {np.linalg.norm(t):.3g} < 1e-9")
    e = _cross_matrix(t) @ rel.rotation_matrix()
    ka_inv = np.linalg.inv(cam_a.intrinsic_matrix())
    kb_inv = np.linalg.inv(cam_b.intrinsic_matrix())
    f = kb_inv.T @ e @ ka_inv
    f = f / np.linalg.norm(f)
    # deterministic sign: largest-magnitude entry positive
    flat = np.abs(f).argmax()
    if f.flat[flat] < 0:
        f = -f
    return f


def sampson_distance(f: np.ndarray, pts_a: np.ndarray, pts_b: np.ndarray) -> np.ndarray:
    """First-order geometric epipolar error of correspondences, in pixels.

    pts_a, pts_b: (N, 2) pixel coordinates in the two views.
    """
    pa = np.asarray(pts_a, dtype=np.float64).reshape(-1, 2)
    pb = np.asarray(pts_b, dtype=np.float64).reshape(-1, 2)
    ha = np.concatenate([pa, np.ones((len(pa), 1))], axis=1)
    hb = np.concatenate([pb, np.ones((len(pb), 1))], axis=1)
    fa = ha @ f.T  # epipolar lines in image b
    fb = hb @ f  # epipolar lines in image a
    num = np.abs(np.sum(hb * fa, axis=1))
    den = np.sqrt(fa[:, 0] ** 2 + fa[:, 1] ** 2 + fb[:, 0] ** 2 + fb[:, 1] ** 2)
    return num / np.maximum(den, 1e-30)
