"""Rigid transforms stored as unit quaternion + translation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quaternion import (
    quat_conjugate,
    quat_multiply,
    quat_normalize,
    quat_rotate,
    quat_to_matrix,
    quat_from_matrix,
)


@dataclass
class RigidTransform:
    """Maps points x to rotate(q, x) + t.

    The quaternion is normalized on construction so downstream math can rely
    on unit norm.
    """

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        self.q = quat_normalize(np.asarray(self.q, dtype=np.float64))
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3).copy()

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform()

    @staticmethod
    def from_matrix(m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return RigidTransform(quat_from_matrix(m[:3, :3]), m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.q)
        m[:3, 3] = self.t
        return m

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Apply to one point (3,) or a stack (N, 3)."""
        pts = np.asarray(points, dtype=np.float64)
        return quat_rotate(self.q, pts) + self.t

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Returns self after other: (self.compose(other)).apply(x) == self.apply(other.apply(x))."""
        return RigidTransform(
            quat_multiply(self.q, other.q), quat_rotate(self.q, other.t) + self.t
        )

    def inverse(self) -> "RigidTransform":
        qi = quat_conjugate(self.q)
        return RigidTransform(qi, -quat_rotate(qi, self.t))
