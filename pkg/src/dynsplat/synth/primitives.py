"""Analytic scene primitives for the synthetic oracle.

Every primitive lives in its own local frame and answers ray queries there;
rigid motion scripts map local coordinates to world per frame. Because the
motion is rigid, the ray parameter found in local coordinates equals the
camera-space depth when rays are built with unit z in the camera frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import RigidTransform, quat_from_axis_angle, quat_rotate

_MISS = np.inf
_EPS = 1e-9


class ProceduralTexture:
    """Smooth tri-band sinusoidal albedo over local coordinates.

    Two superposed harmonics per channel give enough spatial detail for
    photometric losses without any stored images.
    """

    def __init__(self, rng: np.random.Generator, base: np.ndarray | None = None):
        self.base = np.asarray(base if base is not None else rng.uniform(0.35, 0.65, 3))
        self.freq_a = rng.uniform(3.0, 9.0, (3, 3)) * rng.choice([-1.0, 1.0], (3, 3))
        self.phase_a = rng.uniform(0.0, 2 * np.pi, 3)
        self.freq_b = rng.uniform(9.0, 22.0, (3, 3)) * rng.choice([-1.0, 1.0], (3, 3))
        self.phase_b = rng.uniform(0.0, 2 * np.pi, 3)

    def sample(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        out = np.empty(pts.shape[:-1] + (3,))
        for c in range(3):
            wave = 0.22 * np.sin(pts @ self.freq_a[c] + self.phase_a[c])
            wave += 0.10 * np.sin(pts @ self.freq_b[c] + self.phase_b[c])
            out[..., c] = self.base[c] + wave
        return np.clip(out, 0.0, 1.0)


@dataclass
class Motion:
    """Rigid local-to-world trajectory, one pose per integer frame.

    pose(t) = T(v t + a t^2 / 2) . base . R_pivot(axis, w0 t + w1 sin(2 pi t / period))

    The pivot rotation happens in local coordinates (about `pivot`), which is
    how swinging parts are scripted; the outer translation is in world units
    per frame.
    """

    base: RigidTransform = field(default_factory=RigidTransform.identity)
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    acceleration: np.ndarray = field(default_factory=lambda: np.zeros(3))
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    pivot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    spin_rate: float = 0.0  # radians per frame, monotone part
    swing_amp: float = 0.0  # radians, sinusoidal part
    swing_period: float = 8.0  # frames

    def __post_init__(self) -> None:
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        self.acceleration = np.asarray(self.acceleration, dtype=np.float64)
        self.axis = np.asarray(self.axis, dtype=np.float64)
        self.pivot = np.asarray(self.pivot, dtype=np.float64)

    def pose(self, t: float) -> RigidTransform:
        angle = self.spin_rate * t
        if self.swing_amp != 0.0:
            angle += self.swing_amp * np.sin(2 * np.pi * t / self.swing_period)
        out = self.base
        if angle != 0.0:
            q = quat_from_axis_angle(self.axis, angle)
            spin = RigidTransform(q, self.pivot - quat_rotate(q, self.pivot))
            out = out.compose(spin)
        shift = self.velocity * t + 0.5 * self.acceleration * t * t
        if np.any(shift != 0.0):
            out = RigidTransform(np.array([1.0, 0, 0, 0]), shift).compose(out)
        return out


class Primitive:
    """Base class: intersect rays given in local coordinates."""

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def band_coordinate(self, points: np.ndarray) -> np.ndarray:
        """Stable scalar in [0, 1) used to split over-segmented regions."""
        return np.zeros(points.shape[:-1])


class Rectangle(Primitive):
    """Bounded plane patch: local z = 0, |x| <= hx, |y| <= hy."""

    def __init__(self, hx: float, hy: float):
        self.hx = float(hx)
        self.hy = float(hy)

    def intersect(self, origins, dirs):
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -origins[:, 2] / dz
        x = origins[:, 0] + t * dirs[:, 0]
        y = origins[:, 1] + t * dirs[:, 1]
        ok = (np.abs(dz) > _EPS) & (t > _EPS) & (np.abs(x) <= self.hx) & (np.abs(y) <= self.hy)
        return np.where(ok, t, _MISS)

    def band_coordinate(self, points):
        return np.clip((points[..., 0] + self.hx) / (2 * self.hx), 0.0, 1.0 - 1e-9)


class Box(Primitive):
    """Axis-aligned box in local coordinates, half extents h."""

    def __init__(self, half_extents):
        self.h = np.asarray(half_extents, dtype=np.float64)

    def intersect(self, origins, dirs):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
        t0 = (-self.h - origins) * inv
        t1 = (self.h - origins) * inv
        near = np.nanmax(np.minimum(t0, t1), axis=1)
        far = np.nanmin(np.maximum(t0, t1), axis=1)
        ok = (near <= far) & (far > _EPS)
        t = np.where(near > _EPS, near, far)  # inside the box: exit face
        return np.where(ok & (t > _EPS), t, _MISS)

    def band_coordinate(self, points):
        return np.clip((points[..., 0] + self.h[0]) / (2 * self.h[0]), 0.0, 1.0 - 1e-9)


class Ellipsoid(Primitive):
    def __init__(self, radii):
        self.r = np.asarray(radii, dtype=np.float64)

    def intersect(self, origins, dirs):
        o = origins / self.r
        d = dirs / self.r
        a = np.sum(d * d, axis=1)
        b = 2.0 * np.sum(o * d, axis=1)
        c = np.sum(o * o, axis=1) - 1.0
        disc = b * b - 4 * a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t_lo = (-b - sq) / (2 * a)
        t_hi = (-b + sq) / (2 * a)
        t = np.where(t_lo > _EPS, t_lo, t_hi)
        return np.where(ok & (t > _EPS), t, _MISS)

    def band_coordinate(self, points):
        return np.clip((points[..., 0] + self.r[0]) / (2 * self.r[0]), 0.0, 1.0 - 1e-9)


class Capsule(Primitive):
    """Segment from a to b swept by a sphere of the given radius."""

    def __init__(self, a, b, radius: float):
        self.a = np.asarray(a, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.radius = float(radius)
        ab = self.b - self.a
        self.length = float(np.linalg.norm(ab))
        if self.length < _EPS:
            raise ValueError("degenerate capsule axis")
        self.axis = ab / self.length

    def _sphere(self, origins, dirs, center):
        o = origins - center
        a = np.sum(dirs * dirs, axis=1)
        b = 2.0 * np.sum(o * dirs, axis=1)
        c = np.sum(o * o, axis=1) - self.radius**2
        disc = b * b - 4 * a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t_lo = (-b - sq) / (2 * a)
        t_hi = (-b + sq) / (2 * a)
        t = np.where(t_lo > _EPS, t_lo, t_hi)
        return np.where(ok & (t > _EPS), t, _MISS)

    def intersect(self, origins, dirs):
        u = self.axis
        m = origins - self.a
        q = dirs - np.outer(dirs @ u, u)
        p = m - np.outer(m @ u, u)
        a = np.sum(q * q, axis=1)
        b = 2.0 * np.sum(p * q, axis=1)
        c = np.sum(p * p, axis=1) - self.radius**2
        disc = b * b - 4 * a * c
        ok = (disc >= 0) & (a > _EPS)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t_lo = (-b - sq) / (2 * a)
            t_hi = (-b + sq) / (2 * a)
        best = np.full(len(origins), _MISS)
        for t_cand in (t_lo, t_hi):
            s = (origins + t_cand[:, None] * dirs - self.a) @ u
            good = ok & (t_cand > _EPS) & (s >= 0) & (s <= self.length)
            best = np.where(good & (t_cand < best), t_cand, best)
        for center in (self.a, self.b):
            t_cap = self._sphere(origins, dirs, center)
            t_safe = np.where(np.isfinite(t_cap), t_cap, 0.0)
            s = (origins + t_safe[:, None] * dirs - self.a) @ u
            end_ok = np.isfinite(t_cap) & ((s < 0) | (s > self.length))
            best = np.where(end_ok & (t_cap < best), t_cap, best)
        return best

    def band_coordinate(self, points):
        s = (points - self.a) @ self.axis / self.length
        return np.clip(s, 0.0, 1.0 - 1e-9)
