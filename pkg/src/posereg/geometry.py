"""Quaternion and pose arithmetic.

Quaternions are plain float64 arrays ``(w, x, y, z)``, scalar first. A pose's
quaternion is the camera-to-world rotation; the camera frame is x right,
y down, z forward.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

UNIT_TOL = 1e-9
_MIN_NORM = 1e-12


class DegenerateOrientationError(ValueError):
    pass


class DegenerateAverageError(ValueError):
    pass


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.sqrt(np.sum(q * q, axis=-1, keepdims=True))
    if np.any(norm <= _MIN_NORM):
        raise DegenerateOrientationError(f"cannot normalize quaternion with norm {np.min(norm):.3g}")
    return q / norm


def quat_canonicalize(q) -> np.ndarray:
    """Return ``q`` or ``-q`` so that w >= 0.

    When w == 0 the first nonzero component decides the sign.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.ndim == 1:
        for value in q:
            if value != 0.0:
                return q.copy() if value > 0 else -q
        return q.copy()
    lead = np.zeros(q.shape[:-1])
    for k in range(q.shape[-1] - 1, -1, -1):
        comp = q[..., k]
        lead = np.where(comp != 0.0, comp, lead)
    return np.where((lead < 0)[..., None], -q, q)


def quat_angular_error_deg(q1, q2) -> np.ndarray | float:
    """Geodesic angle between two unit quaternions, in degrees, in [0, 180].

    Equal to ``2 * arccos(|<q1, q2>|)``; evaluated through half-chord lengths
    so it keeps full precision near 0 and 180 degrees.
    """
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    dot = np.sum(q1 * q2, axis=-1)
    sign = np.where(dot < 0, -1.0, 1.0)[..., None]
    near = np.sqrt(np.sum((q1 - sign * q2) ** 2, axis=-1))
    far = np.sqrt(np.sum((q1 + sign * q2) ** 2, axis=-1))
    angle = np.degrees(4.0 * np.arctan2(near, far))
    angle = np.clip(angle, 0.0, 180.0)
    return float(angle) if angle.ndim == 0 else angle


def position_error_m(p1, p2) -> np.ndarray | float:
    d = np.asarray(p1, dtype=np.float64) - np.asarray(p2, dtype=np.float64)
    err = np.sqrt(np.sum(d * d, axis=-1))
    return float(err) if err.ndim == 0 else err


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_from_axis_angle(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle_rad
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def _rotation_matrix(q) -> np.ndarray:
    """3x3 rotation matrix of a unit quaternion (internal; renderer and test oracle)."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_unit_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniformly distributed rotations (normalized 4-D Gaussians)."""
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera position (meters, world frame) and camera-to-world orientation.

    The orientation is normalized and canonicalized on construction.
    """

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        pos = np.array(self.position, dtype=np.float64).reshape(3)
        quat = np.array(self.orientation, dtype=np.float64).reshape(4)
        # leave already-unit input bit-identical so text round trips are exact
        if abs(np.sqrt(quat @ quat) - 1.0) > 4e-16:
            quat = quat_normalize(quat)
        quat = quat_canonicalize(quat)
        pos.setflags(write=False)
        quat.setflags(write=False)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", quat)

    @classmethod
    def from_vector(cls, vec) -> "Pose":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (7,):
            raise ValueError(f"pose vector must have 7 entries, got shape {vec.shape}")
        return cls(vec[:3], vec[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.orientation])

    def rotation_matrix(self) -> np.ndarray:
        return _rotation_matrix(self.orientation)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.position, other.position) and np.array_equal(
            self.orientation, other.orientation
        )

    def __hash__(self):
        return hash((self.position.tobytes(), self.orientation.tobytes()))

    def __repr__(self) -> str:
        p = ", ".join(f"{v:.4g}" for v in self.position)
        q = ", ".join(f"{v:.4g}" for v in self.orientation)
        return f"Pose(position=[{p}], orientation=[{q}])"


def stack_poses(poses: Sequence[Pose]) -> tuple[np.ndarray, np.ndarray]:
    """``(positions [N, 3], quaternions [N, 4])`` for a sequence of poses."""
    positions = np.array([p.position for p in poses], dtype=np.float64).reshape(-1, 3)
    quats = np.array([p.orientation for p in poses], dtype=np.float64).reshape(-1, 4)
    return positions, quats


def average_pose_vectors(vectors) -> Pose:
    """Average raw 7-D pose outputs (position, unnormalized quaternion).

    Quaternions are first normalized and sign-aligned to the first one, then
    averaged componentwise and renormalized.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[1] != 7 or len(vectors) == 0:
        raise ValueError(f"expected a non-empty [K, 7] array, got shape {vectors.shape}")
    position = vectors[:, :3].mean(axis=0)
    quats = quat_normalize(vectors[:, 3:])
    signs = np.where(quats @ quats[0] < 0, -1.0, 1.0)
    mean_q = (quats * signs[:, None]).mean(axis=0)
    if np.linalg.norm(mean_q) < 1e-9:
        raise DegenerateAverageError("quaternion average has near-zero norm")
    return Pose(position, quat_canonicalize(mean_q))


def format_pose_fields(pose: Pose) -> str:
    """``X Y Z W P Q R`` with round-trip precision."""
    return " ".join(format(float(v), ".17g") for v in pose.as_vector())


def parse_pose_fields(fields: Sequence[str]) -> Pose:
    values = np.array([float(f) for f in fields], dtype=np.float64)
    if values.shape != (7,):
        raise ValueError(f"expected 7 pose fields, got {len(fields)}")
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite pose value")
    return Pose.from_vector(values)
