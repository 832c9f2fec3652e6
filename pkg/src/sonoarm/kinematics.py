"""7-DOF serial arm model: FK, geometric Jacobian, pseudoinverse, velocity
mapping and the static torque-to-wrench conversion used for force monitoring.

Joint i is a revolute joint reached from its parent by a fixed translation
``offset`` (mm, in the parent frame) and rotating about ``axis`` (unit, in
its own frame). The tool transform maps the last joint frame to the probe
tip. All functions are pure given an immutable RobotModel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError, SingularityError
from .geometry import Pose, Transform, Twist, matrix_to_quat, unit

# Mixed-unit Jacobians (mm and rad rows) are rank-tested after dividing the
# linear rows by a characteristic length so singular values are comparable.
DEFAULT_CHAR_LENGTH_MM = 400.0
DEFAULT_SIGMA_MIN = 0.01


@dataclass(frozen=True)
class JointSpec:
    """One revolute joint: rotation axis (unit, local) and link offset (mm)."""

    axis: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "axis", unit(self.axis))
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float))


@dataclass(frozen=True)
class RobotModel:
    """Immutable 7-R arm description; shareable across threads."""

    joints: tuple
    lower_limits: np.ndarray
    upper_limits: np.ndarray
    velocity_limits: np.ndarray
    tool: Transform
    reach_min_mm: float = 150.0
    reach_max_mm: float = 1500.0
    sigma_min_threshold: float = DEFAULT_SIGMA_MIN
    char_length_mm: float = DEFAULT_CHAR_LENGTH_MM

    def __post_init__(self):
        if len(self.joints) != 7:
            raise ConfigurationError(f"model needs exactly 7 joints, got {len(self.joints)}")
        lo = np.asarray(self.lower_limits, dtype=float)
        hi = np.asarray(self.upper_limits, dtype=float)
        vel = np.asarray(self.velocity_limits, dtype=float)
        if lo.shape != (7,) or hi.shape != (7,) or vel.shape != (7,):
            raise ConfigurationError("limit vectors must have length 7")
        if np.any(lo >= hi):
            raise ConfigurationError("lower limits must be strictly below upper limits")
        object.__setattr__(self, "lower_limits", lo)
        object.__setattr__(self, "upper_limits", hi)
        object.__setattr__(self, "velocity_limits", vel)

    def check_limits(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if q.shape != (7,):
            raise ConfigurationError(f"joint vector must have length 7, got shape {q.shape}")
        if np.any(q < self.lower_limits - 1e-12) or np.any(q > self.upper_limits + 1e-12):
            bad = np.where((q < self.lower_limits) | (q > self.upper_limits))[0]
            raise ConfigurationError(f"joints {bad.tolist()} outside limits")
        return q


_Z = np.array([0.0, 0.0, 1.0])
_Y = np.array([0.0, 1.0, 0.0])


def default_model() -> RobotModel:
    """Generic 7-R arm with alternating Z/Y axes and a probe tool.

    Link lengths give a ~1.3 m straight reach; the exact dimensions are a
    config concern, not a constant of the system.
    """
    offsets = [
        (0.0, 0.0, 200.0),
        (0.0, 0.0, 0.0),
        (0.0, 0.0, 400.0),
        (0.0, 0.0, 0.0),
        (0.0, 0.0, 400.0),
        (0.0, 0.0, 0.0),
        (0.0, 0.0, 126.0),
    ]
    axes = [_Z, _Y, _Z, _Y, _Z, _Y, _Z]
    joints = tuple(JointSpec(a, o) for a, o in zip(axes, offsets))
    deg = np.pi / 180.0
    lower = np.array([-170, -160, -170, -150, -170, -150, -175], dtype=float) * deg
    upper = -lower
    vel = np.array([85, 85, 100, 75, 130, 135, 135], dtype=float) * deg
    # Probe hangs below the wrist along flange -z; its pointing (imaging)
    # direction is the tool frame's -z axis.
    tool = Transform(np.eye(3), np.array([0.0, 0.0, -180.0]))
    return RobotModel(joints, lower, upper, vel, tool)


@dataclass(frozen=True)
class Jacobian:
    """Geometric Jacobian: rows 0-2 linear (mm/s per rad/s), 3-5 angular."""

    matrix: np.ndarray
    frame: str = "base"

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape[0] != 6:
            raise DomainError(f"Jacobian must have 6 rows, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise DomainError("Jacobian has non-finite entries")
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True)
class WrenchReading:
    """End-effector force with its resultant and probe-axis component."""

    force: np.ndarray
    probe_axis: np.ndarray
    moment: np.ndarray = field(default_factory=lambda: np.zeros(3))
    f_resultant: float = field(init=False)
    f_probe: float = field(init=False)

    def __post_init__(self):
        f = np.asarray(self.force, dtype=float)
        axis = unit(self.probe_axis)
        object.__setattr__(self, "force", f)
        object.__setattr__(self, "probe_axis", axis)
        object.__setattr__(self, "moment", np.asarray(self.moment, dtype=float))
        object.__setattr__(self, "f_resultant", float(np.linalg.norm(f)))
        object.__setattr__(self, "f_probe", float(np.dot(f, axis)))


def _axis_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    # Rodrigues for a unit axis.
    c, s = np.cos(angle), np.sin(angle)
    K = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def _chain(model: RobotModel, q: np.ndarray):
    """World rotation/origin before each joint plus the final tip frame."""
    R = np.eye(3)
    t = np.zeros(3)
    origins = np.empty((7, 3))
    axes = np.empty((7, 3))
    for i, (joint, qi) in enumerate(zip(model.joints, q)):
        t = t + R @ joint.offset
        origins[i] = t
        axes[i] = R @ joint.axis
        R = R @ _axis_rotation(joint.axis, qi)
    t = t + R @ model.tool.translation
    R = R @ model.tool.rotation
    return R, t, origins, axes


def forward_kinematics(model: RobotModel, q: np.ndarray) -> Pose:
    """Probe-tip pose in the robot base frame."""
    q = model.check_limits(q)
    R, t, _, _ = _chain(model, q)
    return Pose(t, matrix_to_quat(R))


def jacobian(model: RobotModel, q: np.ndarray) -> Jacobian:
    """Geometric Jacobian at the probe tip, expressed in the base frame."""
    q = model.check_limits(q)
    _, tip, origins, axes = _chain(model, q)
    J = np.empty((6, 7))
    for i in range(7):
        J[:3, i] = np.cross(axes[i], tip - origins[i])
        J[3:, i] = axes[i]
    return Jacobian(J, frame="base")


def singularity_measure(J: Jacobian, char_length_mm: float = DEFAULT_CHAR_LENGTH_MM) -> float:
    """Smallest singular value of the unit-normalized Jacobian.

    Linear rows are divided by ``char_length_mm`` so translation and
    rotation rows carry comparable weight; callers compare the result
    against their sigma-min threshold.
    """
    scaled = J.matrix.copy()
    scaled[:3, :] /= char_length_mm
    return float(np.linalg.svd(scaled, compute_uv=False)[-1])


def pseudoinverse(J: Jacobian,
                  sigma_min: float = DEFAULT_SIGMA_MIN,
                  char_length_mm: float = DEFAULT_CHAR_LENGTH_MM) -> np.ndarray:
    """Moore-Penrose right inverse J^T (J J^T)^-1 of a full-row-rank Jacobian.

    This is the production path; rank deficiency raises SingularityError
    rather than falling back to damping (the supervisor halts instead).
    """
    if singularity_measure(J, char_length_mm) <= sigma_min:
        raise SingularityError("Jacobian is rank deficient (sigma_min below threshold)")
    Jm = J.matrix
    return Jm.T @ np.linalg.inv(Jm @ Jm.T)


def task_to_joint_velocity(J: Jacobian, xdot: Twist,
                           sigma_min: float = DEFAULT_SIGMA_MIN,
                           char_length_mm: float = DEFAULT_CHAR_LENGTH_MM) -> np.ndarray:
    """Minimum-norm joint velocity realizing the task-space twist."""
    return pseudoinverse(J, sigma_min, char_length_mm) @ xdot.as_vector()


def wrench_from_torques(J: Jacobian, tau: np.ndarray, probe_axis: np.ndarray,
                        sigma_min: float = DEFAULT_SIGMA_MIN,
                        char_length_mm: float = DEFAULT_CHAR_LENGTH_MM) -> WrenchReading:
    """Static end-effector wrench explaining the measured joint torques.

    Solves J^T w = tau in the least-squares sense (quasi-static model;
    scan velocities are low enough to neglect inertial terms). tau is in
    N*mm so the force block of w comes out in N.
    """
    tau = np.asarray(tau, dtype=float)
    if tau.shape != (7,):
        raise DomainError(f"torque vector must have length 7, got shape {tau.shape}")
    # lstsq of J^T w = tau equals (J^+)^T tau for full-row-rank J.
    w = pseudoinverse(J, sigma_min, char_length_mm).T @ tau
    return WrenchReading(force=w[:3], probe_axis=probe_axis, moment=w[3:])
