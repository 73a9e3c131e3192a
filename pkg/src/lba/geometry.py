"""SE(3)/SO(3) primitives shared by the whole pipeline.

Conventions:
    - Rotations are 3x3 orthonormal matrices with det +1.
    - A pose X = (R, t) maps sensor-frame points to the world frame via
      p_W = R @ p_L + t.
    - Pose corrections are left-multiplicative on rotation and additive on
      translation: (Exp(dtheta) @ R, t + dt).
    - Unit normals carry two degrees of freedom; they are perturbed inside
      the tangent plane spanned by their orthonormal complement.

All functions here are pure and all types are treated as immutable values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Below this rotation angle the Rodrigues coefficients sin(a)/a and
# (1-cos(a))/a^2 are evaluated by their second-order Taylor expansions.
SMALL_ANGLE = 1e-9


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix [v]_x such that hat(v) @ u == cross(v, u)."""
    x, y, z = v
    return np.array([
        [0.0, -z, y],
        [z, 0.0, -x],
        [-y, x, 0.0],
    ])


def exp_map(dtheta: np.ndarray) -> np.ndarray:
    """Rodrigues exponential map from a rotation vector to SO(3)."""
    dtheta = np.asarray(dtheta, dtype=float)
    angle = float(np.linalg.norm(dtheta))
    K = hat(dtheta)
    if angle < SMALL_ANGLE:
        a2 = angle * angle
        c1 = 1.0 - a2 / 6.0
        c2 = 0.5 - a2 / 24.0
    else:
        c1 = np.sin(angle) / angle
        c2 = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + c1 * K + c2 * (K @ K)


def log_map(R: np.ndarray) -> np.ndarray:
    """Rotation vector of R, with angle in [0, pi].

    Inverse of :func:`exp_map`. The angle == pi case is handled by axis
    extraction from the symmetric part (R + I) / 2.
    """
    R = np.asarray(R, dtype=float)
    cos_angle = float(np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0))
    angle = float(np.arccos(cos_angle))
    skew = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < SMALL_ANGLE:
        return skew
    if np.pi - angle < 1e-6:
        # Near pi the antisymmetric part vanishes; recover the axis from
        # the dominant column of (R + I) / 2 = axis axis^T (+ O(pi-angle)).
        B = 0.5 * (R + np.eye(3))
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(max(B[k, k], 1e-32))
        axis /= np.linalg.norm(axis)
        # Keep continuity with the generic branch where it still has signal.
        if np.dot(axis, skew) < 0.0:
            axis = -axis
        return angle * axis
    return (angle / np.sin(angle)) * skew


@dataclass(frozen=True)
class Pose:
    """SE(3) pose of one LiDAR frame: world_point = rotation @ p + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Map local point(s) to the world frame. Accepts (3,) or (n, 3)."""
        p = np.asarray(p, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse_apply(self, p_world: np.ndarray) -> np.ndarray:
        """Map world point(s) back into this pose's local frame."""
        p_world = np.asarray(p_world, dtype=float)
        return (p_world - self.translation) @ self.rotation

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Pose equivalent to applying `other` first, then `self`."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class PoseCorrection:
    """6-DoF update: left-multiplicative rotation vector and translation shift."""

    dtheta: np.ndarray
    dt: np.ndarray

    @staticmethod
    def zero() -> "PoseCorrection":
        return PoseCorrection(np.zeros(3), np.zeros(3))

    @staticmethod
    def from_vector(v: np.ndarray) -> "PoseCorrection":
        v = np.asarray(v, dtype=float)
        return PoseCorrection(v[:3].copy(), v[3:6].copy())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.dtheta, self.dt])


@dataclass
class LidarFrame:
    """Raw points of one LiDAR sweep in the sensor frame."""

    frame_id: int
    timestamp: float
    points: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(self.points) < 1:
            raise ValueError("a LiDAR frame needs at least one point")


def apply_pose(pose: Pose, p_local: np.ndarray) -> np.ndarray:
    """World coordinates of a local point: R @ p + t."""
    return pose.apply(p_local)


def perturb_pose(pose: Pose, corr: PoseCorrection) -> Pose:
    """Apply a 6-DoF correction: (Exp(dtheta) @ R, t + dt)."""
    return Pose(exp_map(corr.dtheta) @ pose.rotation, pose.translation + corr.dt)


def tangent_frame(n: np.ndarray) -> np.ndarray:
    """Row-orthonormal basis M = [n0; n1; n] with last row equal to n.

    n1 = normalize((n_y, -n_x, 0)) and n0 = n1 x n; when n is nearly
    aligned with +-z that cross-product axis degenerates and (0, 1, 0)
    is substituted for n1 before the cross product.
    """
    n = np.asarray(n, dtype=float)
    n1 = np.array([n[1], -n[0], 0.0])
    norm1 = np.linalg.norm(n1)
    if norm1 < 1e-6:
        n1 = np.array([0.0, 1.0, 0.0])
    else:
        n1 = n1 / norm1
    n0 = np.cross(n1, n)
    n0 /= np.linalg.norm(n0)
    return np.vstack([n0, n1, n])


def normal_complement(n: np.ndarray) -> np.ndarray:
    """3x2 matrix whose columns span the plane orthogonal to unit n."""
    M = tangent_frame(n)
    return M[:2].T


def perturb_normal(n: np.ndarray, dphi: np.ndarray) -> np.ndarray:
    """Two-DoF normal update: normalize(n + [n0, n1] @ dphi)."""
    out = np.asarray(n, dtype=float) + normal_complement(n) @ np.asarray(dphi, dtype=float)
    return out / np.linalg.norm(out)
