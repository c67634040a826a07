"""Axis-angle rotations and rigid transforms with derivatives."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from ..errors import InvalidShape

_SMALL_ANGLE = 1e-6


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix with ``hat(v) @ u == cross(v, u)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(rotvec) -> np.ndarray:
    w = np.asarray(rotvec, dtype=float)
    theta = float(np.linalg.norm(w))
    K = hat(w)
    if theta < _SMALL_ANGLE:
        a = 1.0 - theta**2 / 6.0
        b = 0.5 - theta**2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(R).as_rotvec()


def so3_right_jacobian(rotvec) -> np.ndarray:
    """J_r with ``exp(w + dw) ~= exp(w) exp(J_r(w) dw)``."""
    w = np.asarray(rotvec, dtype=float)
    theta = float(np.linalg.norm(w))
    K = hat(w)
    if theta < _SMALL_ANGLE:
        a = 0.5 - theta**2 / 24.0
        b = 1.0 / 6.0 - theta**2 / 120.0
    else:
        a = (1.0 - np.cos(theta)) / theta**2
        b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) - a * K + b * (K @ K)


def quat_to_rotvec(q) -> np.ndarray:
    """Unit quaternion (w, x, y, z) to axis-angle."""
    q = np.asarray(q, dtype=float)
    return Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_rotvec()


@dataclass
class RigidTransform:
    """``x -> scale * R(rotvec) @ x + translation`` (meters, radians)."""

    rotvec: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        self.rotvec = np.asarray(self.rotvec, dtype=float).reshape(3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        self.scale = float(self.scale)
        if not (np.all(np.isfinite(self.rotvec)) and np.all(np.isfinite(self.translation))
                and np.isfinite(self.scale)):
            raise InvalidShape("transform parameters must be finite")
        if self.scale <= 0:
            raise InvalidShape(f"transform scale must be positive, got {self.scale}")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @property
    def rotation(self) -> np.ndarray:
        return so3_exp(self.rotvec)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation / self.scale

    def inverse(self) -> "RigidTransform":
        R = self.rotation
        return RigidTransform(-self.rotvec, -(R.T @ self.translation) / self.scale, 1.0 / self.scale)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        R = self.rotation @ other.rotation
        t = self.scale * self.rotation @ other.translation + self.translation
        return RigidTransform(so3_log(R), t, self.scale * other.scale)

    def params(self) -> np.ndarray:
        return np.concatenate([self.rotvec, self.translation, [self.scale]])

    @classmethod
    def from_params(cls, p) -> "RigidTransform":
        p = np.asarray(p, dtype=float)
        scale = p[6] if p.size > 6 else 1.0
        return cls(p[:3], p[3:6], scale)

    def to_dict(self) -> dict:
        return {
            "rotvec": [float(v) for v in self.rotvec],
            "translation": [float(v) for v in self.translation],
            "scale": float(self.scale),
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> "RigidTransform":
        if not d:
            return cls()
        unknown = set(d) - {"rotvec", "translation", "scale"}
        if unknown:
            raise ValueError(f"unknown transform keys: {sorted(unknown)}")
        return cls(d.get("rotvec", (0, 0, 0)), d.get("translation", (0, 0, 0)), d.get("scale", 1.0))


def rotation_angle_between(a: RigidTransform, b: RigidTransform) -> float:
    """Geodesic angle between the two rotations, radians."""
    return float(np.linalg.norm(so3_log(a.rotation.T @ b.rotation)))
