"""Frame-agnostic rigid-body math shared by every other module.

Conventions
-----------
Lengths are millimeters, angles radians. Quaternions are numpy arrays
``[w, x, y, z]`` with unit norm and canonical sign ``w >= 0``. Rotation
matrices are 3x3 orthonormal with determinant +1. Everything here is a
pure function over immutable values and safe to call from any thread.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DomainError

UNIT_TOL = 1e-9


def vec3(x: float, y: float, z: float) -> np.ndarray:
    return np.array([x, y, z], dtype=float)


def as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.shape != (3,):
        raise DomainError(f"expected a 3-vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError("vector has non-finite components")
    return a


def unit(v) -> np.ndarray:
    """Normalize to unit length; raises on (near-)zero vectors."""
    a = as_vec3(v)
    n = float(np.linalg.norm(a))
    if n < 1e-12:
        raise DegenerateInputError("cannot normalize a zero vector")
    return a / n


def is_unit(v, tol: float = UNIT_TOL) -> bool:
    return abs(float(np.linalg.norm(np.asarray(v, dtype=float))) - 1.0) <= tol


# ---------------------------------------------------------------------------
# quaternions ([w, x, y, z], unit, w >= 0)

def quat(w: float, x: float, y: float, z: float) -> np.ndarray:
    """Build a canonical unit quaternion, normalizing the input."""
    q = np.array([w, x, y, z], dtype=float)
    n = float(np.linalg.norm(q))
    if n < 1e-12 or not np.all(np.isfinite(q)):
        raise DomainError("quaternion must be finite and non-zero")
    return quat_canonical(q / n)


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Flip sign so w >= 0 (q and -q encode the same rotation)."""
    q = np.asarray(q, dtype=float)
    return -q if q[0] < 0.0 else q.copy()


def check_unit_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise DomainError(f"expected a quaternion [w,x,y,z], got shape {q.shape}")
    if abs(float(np.linalg.norm(q)) - 1.0) > 1e-6:
        raise DomainError("quaternion is not unit norm")
    return q


def quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector v by quaternion q."""
    qv = np.array([0.0, v[0], v[1], v[2]])
    return quat_multiply(quat_multiply(q, qv), quat_conjugate(q))[1:]


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    a = unit(axis)
    half = 0.5 * float(angle)
    return quat_canonical(np.concatenate([[np.cos(half)], np.sin(half) * a]))


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the canonical unit quaternion."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return quat_canonical(q / np.linalg.norm(q))


def quat_angle(q0: np.ndarray, q1: np.ndarray) -> float:
    """Rotation angle in [0, pi] taking q0 into q1 (shortest way)."""
    d = quat_multiply(quat_conjugate(q0), q1)
    return 2.0 * float(np.arctan2(np.linalg.norm(d[1:]), abs(d[0])))


# ---------------------------------------------------------------------------
# interpolation

def lerp(p0: np.ndarray, p1: np.ndarray, t: float) -> np.ndarray:
    """Linear interpolation p0 + t*(p1 - p0); t must lie in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"lerp parameter t={t} outside [0, 1]")
    p0 = as_vec3(p0)
    p1 = as_vec3(p1)
    return p0 + t * (p1 - p0)


# Quaternions closer than this (in dot product) interpolate via nlerp to
# avoid dividing by a vanishing sin(theta).
_SLERP_DOT_LIMIT = 1.0 - 1e-6


def slerp(q0: np.ndarray, q1: np.ndarray, t: float) -> np.ndarray:
    """Constant-angular-speed interpolation along the shortest arc."""
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"slerp parameter t={t} outside [0, 1]")
    q0 = check_unit_quat(q0)
    q1 = check_unit_quat(q1)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:  # take the short way around
        q1 = -q1
        dot = -dot
    if dot > _SLERP_DOT_LIMIT:
        out = q0 + t * (q1 - q0)
        return quat_canonical(out / np.linalg.norm(out))
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    s = np.sin(theta)
    out = (np.sin((1.0 - t) * theta) / s) * q0 + (np.sin(t * theta) / s) * q1
    return quat_canonical(out / np.linalg.norm(out))


def _deterministic_perpendicular(v: np.ndarray) -> np.ndarray:
    # Swap the two largest-magnitude slots and zero the third; orthogonal by
    # construction and stable under small perturbations of v.
    i = int(np.argmax(np.abs(v)))
    j = (i + 1) % 3
    p = np.zeros(3)
    p[j] = v[i]
    p[i] = -v[j]
    return unit(p)


def axis_angle_align(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Smallest rotation (as a unit quaternion) mapping unit vector src onto dst.

    Antiparallel inputs rotate pi about a deterministic axis perpendicular
    to src.
    """
    src = as_vec3(src)
    dst = as_vec3(dst)
    if not (is_unit(src, 1e-6) and is_unit(dst, 1e-6)):
        raise DomainError("axis_angle_align expects unit vectors")
    c = float(np.dot(src, dst))
    axis = np.cross(src, dst)
    s = float(np.linalg.norm(axis))
    if s < 1e-12:
        if c > 0.0:
            return quat_identity()
        return quat_from_axis_angle(_deterministic_perpendicular(src), np.pi)
    angle = float(np.arctan2(s, c))
    return quat_from_axis_angle(axis / s, angle)


def angular_velocity(R_prev: np.ndarray, R_next: np.ndarray, dt: float) -> np.ndarray:
    """Space-fixed angular velocity from two rotation samples.

    Computes the skew-symmetric projection of (R_next - R_prev)/dt * R_prev^T
    and returns its axial vector (rad/s).
    """
    if dt <= 0.0:
        raise DomainError(f"dt must be positive, got {dt}")
    W = ((np.asarray(R_next, float) - np.asarray(R_prev, float)) / dt) @ np.asarray(R_prev, float).T
    W = 0.5 * (W - W.T)
    return np.array([W[2, 1], W[0, 2], W[1, 0]])


# ---------------------------------------------------------------------------
# rigid transforms

@dataclass(frozen=True)
class Transform:
    """Rigid map p -> rotation @ p + translation (mm)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = as_vec3(self.translation)
        if R.shape != (3, 3):
            raise DomainError("rotation must be 3x3")
        if abs(float(np.linalg.det(R)) - 1.0) > 1e-6 or np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6:
            raise DomainError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Transform":
        return Transform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def compose(self, other: "Transform") -> "Transform":
        """self after other: (self.compose(other)).apply(p) == self.apply(other.apply(p))."""
        return Transform(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Transform":
        return Transform(self.rotation.T, -(self.rotation.T @ self.translation))

    def rotation_angle(self) -> float:
        c = np.clip(0.5 * (np.trace(self.rotation) - 1.0), -1.0, 1.0)
        return float(np.arccos(c))


@dataclass(frozen=True)
class Pose:
    """Position (mm) plus unit-quaternion orientation."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", as_vec3(self.position))
        object.__setattr__(self, "orientation",
                           quat_canonical(check_unit_quat(self.orientation)))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), quat_identity())

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def probe_axis(self) -> np.ndarray:
        """World direction of the tool's -z axis (the pointing direction)."""
        return quat_rotate(self.orientation, np.array([0.0, 0.0, -1.0]))


@dataclass(frozen=True)
class Twist:
    """Task-space velocity: linear mm/s, angular rad/s."""

    linear: np.ndarray
    angular: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "linear", as_vec3(self.linear))
        object.__setattr__(self, "angular", as_vec3(self.angular))

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.linear, self.angular])


def rigid_fit(src: np.ndarray, dst: np.ndarray) -> Transform:
    """Least-squares rigid transform T minimizing sum ||T(src_i) - dst_i||^2.

    Kabsch with reflection rejection; needs at least 3 non-collinear
    correspondences of equal length.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise DegenerateInputError("src and dst must have equal lengths")
    if len(src) < 3:
        raise DegenerateInputError("rigid fit needs at least 3 correspondences")
    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    a = src - c_src
    b = dst - c_dst
    s = np.linalg.svd(a, compute_uv=False)
    if s[1] < 1e-9 * max(s[0], 1e-12):
        raise DegenerateInputError("correspondences are collinear")
    H = a.T @ b
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return Transform(R, c_dst - R @ c_src)
