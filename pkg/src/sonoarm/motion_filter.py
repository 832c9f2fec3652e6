"""Operator-pose filtering: workspace/cone gating, contour locking, velocity
and acceleration limiting, and lerp/slerp smoothing.

The pipeline turns raw tele-operation samples into safe robot targets. Two
hard guarantees hold for every accepted step: the implied linear speed
never exceeds ``v_lin_max`` and the angular speed never exceeds
``v_ang_max`` (both with 1e-9 slack), and the commanded z always equals the
surface height at the commanded (x, y). Rejected samples hold the previous
command and leave the filter state untouched.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import OffSurfaceError, ParameterError
from .geometry import (
    Pose,
    Twist,
    quat_angle,
    quat_conjugate,
    quat_multiply,
    slerp,
    unit,
)
from .kinematics import RobotModel
from .pointcloud import PointCloud, surface_height_smooth


@dataclass(frozen=True)
class FilterConfig:
    cone_half_angle: float = math.radians(30.0)  # rad ("60-degree cone arc")
    v_lin_max: float = 20.0                      # mm/s
    v_ang_max_deg: float = 30.0                  # deg/s
    a_lin_max: float = 100.0                     # mm/s^2
    a_ang_max_deg: float = 150.0                 # deg/s^2
    smoothing_alpha: float = 0.5
    control_period: float = 0.002                # s (500 Hz)

    def __post_init__(self):
        positives = (self.cone_half_angle, self.v_lin_max, self.v_ang_max_deg,
                     self.a_lin_max, self.a_ang_max_deg, self.smoothing_alpha,
                     self.control_period)
        if any(v <= 0.0 for v in positives):
            raise ParameterError("all filter parameters must be positive")
        if self.smoothing_alpha > 1.0:
            raise ParameterError("smoothing_alpha must lie in (0, 1]")

    @property
    def v_ang_max(self) -> float:
        return math.radians(self.v_ang_max_deg)

    @property
    def a_ang_max(self) -> float:
        return math.radians(self.a_ang_max_deg)


class FilterReason(str, enum.Enum):
    OK = "ok"
    OUTSIDE_WORKSPACE = "outside-workspace"
    CONE_VIOLATION = "cone-violation"
    CLAMPED_VELOCITY = "clamped-velocity"
    CLAMPED_ACCELERATION = "clamped-acceleration"


@dataclass(frozen=True)
class FilterVerdict:
    accepted: bool
    reason: FilterReason

    @staticmethod
    def ok() -> "FilterVerdict":
        return FilterVerdict(True, FilterReason.OK)


# Boundary poses exactly on the cone are accepted (closed boundary).
_CONE_EDGE_SLACK = 1e-12


def workspace_filter(pose: Pose, surface_normal: np.ndarray,
                     model: RobotModel, cfg: FilterConfig) -> FilterVerdict:
    """Reachability shell plus the probe-orientation cone check."""
    n = unit(surface_normal)
    r = float(np.linalg.norm(pose.position))
    if not model.reach_min_mm <= r <= model.reach_max_mm:
        return FilterVerdict(False, FilterReason.OUTSIDE_WORKSPACE)
    tilt = math.acos(float(np.clip(np.dot(pose.probe_axis(), -n), -1.0, 1.0)))
    if tilt > cfg.cone_half_angle + _CONE_EDGE_SLACK:
        return FilterVerdict(False, FilterReason.CONE_VIOLATION)
    return FilterVerdict.ok()


def _clamped_step(distance: float, prev_speed: float, v_max: float,
                  a_max: float, dt: float):
    """Largest admissible step toward a target ``distance`` away.

    Speed increases are limited by a_max; slowing down is never limited
    (safety favours instant braking). Returns (step, reason-or-None).
    """
    allowed_speed = min(v_max, prev_speed + a_max * dt)
    budget = allowed_speed * dt
    if distance <= budget:
        return distance, None
    reason = (FilterReason.CLAMPED_VELOCITY if allowed_speed >= v_max
              else FilterReason.CLAMPED_ACCELERATION)
    return budget, reason


def rate_limit(prev: Pose, target: Pose, prev_twist: Twist, cfg: FilterConfig):
    """Clamp target so implied velocities and their growth stay in bounds.

    Free-space variant (no contour): clamping preserves the direction of
    motion. Returns (pose, twist, verdict).
    """
    dt = cfg.control_period
    delta = target.position - prev.position
    dist = float(np.linalg.norm(delta))
    lin_step, lin_reason = _clamped_step(dist, float(np.linalg.norm(prev_twist.linear)),
                                         cfg.v_lin_max, cfg.a_lin_max, dt)
    position = prev.position + (delta * (lin_step / dist) if dist > 0.0 else 0.0)

    ang = quat_angle(prev.orientation, target.orientation)
    ang_step, ang_reason = _clamped_step(ang, float(np.linalg.norm(prev_twist.angular)),
                                         cfg.v_ang_max, cfg.a_ang_max, dt)
    orientation = (slerp(prev.orientation, target.orientation, ang_step / ang)
                   if ang > 1e-15 else target.orientation)

    pose = Pose(position, orientation)
    twist = _implied_twist(prev, pose, dt)
    reason = _merge_reasons(lin_reason, ang_reason)
    return pose, twist, FilterVerdict(True, reason or FilterReason.OK)


def _merge_reasons(*reasons):
    if FilterReason.CLAMPED_ACCELERATION in reasons:
        return FilterReason.CLAMPED_ACCELERATION
    if FilterReason.CLAMPED_VELOCITY in reasons:
        return FilterReason.CLAMPED_VELOCITY
    return None


def _implied_twist(prev: Pose, new: Pose, dt: float) -> Twist:
    linear = (new.position - prev.position) / dt
    rel = quat_multiply(new.orientation, quat_conjugate(prev.orientation))
    vec = rel[1:]
    s = float(np.linalg.norm(vec))
    angle = 2.0 * math.atan2(s, abs(float(rel[0])))
    if s < 1e-15:
        return Twist(linear, np.zeros(3))
    axis = vec / s if rel[0] >= 0.0 else -vec / s
    return Twist(linear, axis * (angle / dt))


def smooth(prev: Pose, target: Pose, cfg: FilterConfig) -> Pose:
    """Exponential smoothing: lerp position, slerp orientation by alpha."""
    a = cfg.smoothing_alpha
    return Pose(prev.position + a * (target.position - prev.position),
                slerp(prev.orientation, target.orientation, a))


@dataclass
class FilterState:
    """Owned by exactly one control loop; hand over, never share."""

    prev_command: Pose
    prev_twist: Twist

    @staticmethod
    def initial(surface: PointCloud, start: Pose) -> "FilterState":
        anchored = np.array([start.position[0], start.position[1],
                             surface_height_smooth(surface, start.position[0],
                                                   start.position[1])])
        return FilterState(Pose(anchored, start.orientation), Twist.zero())


def _walk_on_surface(surface: PointCloud, prev_pos: np.ndarray,
                     target_xy: np.ndarray, budget: float, max_frac: float = 1.0):
    """March from prev_pos (on the contour) toward target_xy along the
    surface, spending at most ``budget`` mm of 3-D distance.

    Returns (position, fraction_of_horizontal_path, budget_limited). The
    returned point is on the contour and within budget by construction.
    """
    delta_xy = target_xy - prev_pos[:2]
    if float(np.linalg.norm(delta_xy)) < 1e-12 or max_frac <= 0.0:
        return prev_pos.copy(), 0.0, False

    def at(frac: float) -> np.ndarray:
        xy = prev_pos[:2] + frac * delta_xy
        return np.array([xy[0], xy[1], surface_height_smooth(surface, xy[0], xy[1])])

    candidate = at(max_frac)
    if float(np.linalg.norm(candidate - prev_pos)) <= budget:
        return candidate, max_frac, False
    lo, hi = 0.0, max_frac  # at(0) == prev_pos: zero cost, inside budget
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if float(np.linalg.norm(at(mid) - prev_pos)) <= budget:
            lo = mid
        else:
            hi = mid
    return at(lo), lo, True


def _normal_near(surface: PointCloud, p: np.ndarray) -> np.ndarray | None:
    """Nearest valid surface normal around p, or None if none nearby."""
    if surface.normals is None or len(surface) == 0:
        return None
    k = min(8, len(surface))
    _, idx = surface.index.query(p, k=k)
    for i in np.atleast_1d(idx):
        n = surface.normals[i]
        if not np.isnan(n).any():
            return n
    return None


def pipeline_step(raw: Pose, state: FilterState, surface: PointCloud,
                  model: RobotModel, cfg: FilterConfig):
    """One 2 ms filtering step: workspace -> contour projection -> rate
    limit -> smoothing, in that order.

    Returns (command, verdict). On rejection the previous command is
    returned unchanged and the state is not mutated.
    """
    hold = state.prev_command
    normal = _normal_near(surface, raw.position)
    if normal is None:
        return hold, FilterVerdict(False, FilterReason.OUTSIDE_WORKSPACE)
    verdict = workspace_filter(raw, normal, model, cfg)
    if not verdict.accepted:
        return hold, verdict

    target_xy = raw.position[:2]
    dt = cfg.control_period
    prev = state.prev_command
    lin_allowed = min(cfg.v_lin_max,
                      float(np.linalg.norm(state.prev_twist.linear)) + cfg.a_lin_max * dt)
    lin_budget = lin_allowed * dt
    try:
        surface_height_smooth(surface, target_xy[0], target_xy[1])  # reachability probe
        limited, frac, lin_clamped = _walk_on_surface(surface, prev.position,
                                                      target_xy, lin_budget)
        # Smoothing shrinks the step toward the rate-limited point; z re-anchors.
        position, _, _ = _walk_on_surface(surface, prev.position, target_xy,
                                          lin_budget, max_frac=cfg.smoothing_alpha * frac)
    except OffSurfaceError:
        return hold, FilterVerdict(False, FilterReason.OUTSIDE_WORKSPACE)

    ang = quat_angle(prev.orientation, raw.orientation)
    ang_allowed = min(cfg.v_ang_max,
                      float(np.linalg.norm(state.prev_twist.angular)) + cfg.a_ang_max * dt)
    ang_clamped = ang > ang_allowed * dt
    t_ang = min(1.0, (ang_allowed * dt) / ang) if ang > 1e-15 else 1.0
    limited_q = slerp(prev.orientation, raw.orientation, t_ang)
    orientation = slerp(prev.orientation, raw.orientation, cfg.smoothing_alpha * t_ang)

    command = Pose(position, orientation)
    reason = _merge_reasons(
        (FilterReason.CLAMPED_VELOCITY if lin_allowed >= cfg.v_lin_max
         else FilterReason.CLAMPED_ACCELERATION) if lin_clamped else None,
        (FilterReason.CLAMPED_VELOCITY if ang_allowed >= cfg.v_ang_max
         else FilterReason.CLAMPED_ACCELERATION) if ang_clamped else None,
    )
    # The acceleration reference tracks the rate-limit stage, not the
    # smoothed output: feeding the smoothed (alpha-shrunk) speed back in
    # pins the pipeline at alpha*a*dt/(1-alpha) and it never reaches the
    # velocity cap.
    state.prev_twist = _implied_twist(prev, Pose(limited, limited_q), dt)
    state.prev_command = command
    return command, FilterVerdict(True, reason or FilterReason.OK)
