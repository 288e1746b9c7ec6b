"""Rotation parameterizations, SO(3) samplers and rigid-transform algebra.

Transforms act actively on a volume: rotate about the volume center, then
translate by ``translation`` voxels. In center-relative coordinates
``q = p - c`` a transform is ``q -> R q + t``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFrame

# sine of the angle between a1 and a2 below which the frame is degenerate
DEGENERATE_SIN = 1e-6

WIDE_RANGE = np.pi / 2
NEAR_IDENTITY_RANGE = np.pi / 6


def s2s2_to_rotation(p) -> np.ndarray:
    """Gram-Schmidt two 3-vectors into a rotation with columns ``b1, b2, b3``.

    Accepts shape ``(6,)`` or ``(..., 6)``.
    """
    p = np.asarray(p, dtype=float)
    a1, a2 = p[..., :3], p[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    cross = np.linalg.norm(np.cross(a1, a2), axis=-1, keepdims=True)
    n2 = np.linalg.norm(a2, axis=-1, keepdims=True)
    if np.any(n1 <= 1e-12) or np.any(cross <= DEGENERATE_SIN * n1 * n2):
        raise DegenerateFrame("S2S2 vectors are zero or parallel")
    b1 = a1 / n1
    u = a2 - np.sum(a2 * b1, axis=-1, keepdims=True) * b1
    b2 = u / np.linalg.norm(u, axis=-1, keepdims=True)
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def rotation_to_s2s2(R) -> np.ndarray:
    """The first two columns of ``R``, flattened; a right inverse of ``s2s2_to_rotation``."""
    R = np.asarray(R, dtype=float)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_to_rotation(v) -> np.ndarray:
    """Rodrigues' formula; direction is the axis, norm the angle in radians."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v)
    if theta < 1e-15:
        return np.eye(3)
    K = skew(v / theta)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def rotation_angle(R) -> float:
    """Geodesic distance from the identity, in radians."""
    c = (np.trace(np.asarray(R)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def is_rotation(R, tol: float = 1e-6) -> bool:
    R = np.asarray(R)
    return bool(
        np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) <= tol
    )


def sample_rotation_wide(rng: np.random.Generator) -> np.ndarray:
    """Axis-angle components uniform in [-90°, 90°], converted to a matrix.

    This is not Haar-uniform on SO(3); see ``sample_rotation_haar``.
    """
    return axis_angle_to_rotation(rng.uniform(-WIDE_RANGE, WIDE_RANGE, size=3))


def sample_rotation_near_identity(rng: np.random.Generator) -> np.ndarray:
    """Axis-angle components uniform in [-30°, 30°]."""
    return axis_angle_to_rotation(
        rng.uniform(-NEAR_IDENTITY_RANGE, NEAR_IDENTITY_RANGE, size=3)
    )


def sample_rotation_haar(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation from a normalized Gaussian quaternion."""
    q = rng.standard_normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def sample_translation(rng: np.random.Generator, bound: float) -> np.ndarray:
    if bound < 0:
        raise ValueError(f"translation bound must be non-negative, got {bound}")
    if bound == 0:
        return np.zeros(3)
    return rng.uniform(-bound, bound, size=3)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points, center) -> np.ndarray:
        """Map points of shape ``(..., 3)`` about ``center``."""
        p = np.asarray(points, dtype=float) - center
        return p @ self.rotation.T + center + self.translation

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
        )

    def to_list(self) -> list:
        return self.rotation.ravel().tolist() + self.translation.tolist()

    @classmethod
    def from_list(cls, values) -> "RigidTransform":
        values = np.asarray(values, dtype=float)
        return cls(values[:9].reshape(3, 3), values[9:12])


def compose(t1: RigidTransform, t2: RigidTransform) -> RigidTransform:
    """The transform that applies ``t2`` first, then ``t1``."""
    return RigidTransform(
        t1.rotation @ t2.rotation, t1.rotation @ t2.translation + t1.translation
    )


def invert(t: RigidTransform) -> RigidTransform:
    Rt = t.rotation.T
    return RigidTransform(Rt, -Rt @ t.translation)


def inplane_rotation(angle: float) -> RigidTransform:
    """Rotation about the z axis (within the xy plane)."""
    c, s = np.cos(angle), np.sin(angle)
    return RigidTransform(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), np.zeros(3))


def cube_rotations() -> list:
    """The 24 proper rotations of the cube as signed permutation matrices."""
    out = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            R = np.zeros((3, 3))
            for row, (col, s) in enumerate(zip(perm, signs)):
                R[row, col] = s
            if np.linalg.det(R) > 0:
                out.append(R)
    return out
