"""The control core: consumes operator poses (manual mode) or a PathPlan
(autonomous mode) at 500 Hz, enforces position control with force
supervision, and emits joint velocity commands via the Jacobian
pseudoinverse.

One thread owns a Supervisor; telemetry readers consume the immutable
snapshots it publishes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, SingularityError
from .geometry import Pose, Twist, quat_angle, slerp
from .kinematics import (
    RobotModel,
    WrenchReading,
    forward_kinematics,
    jacobian,
    task_to_joint_velocity,
)
from .motion_filter import FilterConfig, FilterState, FilterVerdict, pipeline_step
from .planner import PathPlan
from .pointcloud import PointCloud

DESCEND_CAP_MM = 2.0     # largest single-period descend during regulation
RETRACT_MM = 5.0         # immediate retract on an over-limit reading
MAX_PRESS_MM = 10.0      # regulation offset saturates; beyond this the
                         # phantom model is wrong, not the controller
SETTLE_TOL_MM = 1.0      # descend only once position control has settled,
                         # otherwise the offset outruns the plant
RAW_RETENTION_PERIODS = 75  # operator samples arrive far below 500 Hz; the
                            # last one stays the active target for 150 ms
HAPTIC_ALERT_LEVEL = 0.8


@dataclass(frozen=True)
class ForceBand:
    f_contact: float = 2.0   # N, minimum force marking skin contact
    f_max: float = 5.0       # N, maximum permissible force

    def __post_init__(self):
        if not 0.0 < self.f_contact < self.f_max:
            raise ParameterError("force band needs 0 < f_contact < f_max")


class ForceVerdict(str, enum.Enum):
    OK = "ok"
    BELOW_CONTACT = "below-contact"
    OVER_LIMIT = "over-limit"


class Mode(str, enum.Enum):
    MANUAL = "manual"
    AUTONOMOUS = "autonomous"
    PAUSED = "paused"
    HALTED = "halted"


def force_check(w: WrenchReading, band: ForceBand) -> ForceVerdict:
    """Eq.-style band check applied to both the resultant and the
    probe-axis component; loss of contact is keyed on the axis component."""
    if w.f_resultant >= band.f_max or w.f_probe >= band.f_max:
        return ForceVerdict.OVER_LIMIT
    if w.f_probe <= band.f_contact:
        return ForceVerdict.BELOW_CONTACT
    return ForceVerdict.OK


def haptic_intensity(f_probe: float, band: ForceBand) -> float:
    """Linear ramp from 0 at the contact floor to 1 at the force ceiling."""
    return float(np.clip((f_probe - band.f_contact) / (band.f_max - band.f_contact),
                         0.0, 1.0))


def regulation_delta(verdict: ForceVerdict, cfg: FilterConfig) -> float:
    """Signed probe-axis offset change for one control period (mm)."""
    if verdict is ForceVerdict.BELOW_CONTACT:
        return min(DESCEND_CAP_MM, cfg.v_lin_max * cfg.control_period)
    if verdict is ForceVerdict.OVER_LIMIT:
        return -RETRACT_MM
    return 0.0


def contact_regulate(verdict: ForceVerdict, command: Pose, cfg: FilterConfig):
    """One-period regulation of a filtered command.

    Returns (pose, pause_requested): below-contact descends along the
    probe axis within the period's velocity budget; over-limit retracts
    immediately and requests a pause.
    """
    delta = regulation_delta(verdict, cfg)
    if delta == 0.0:
        return command, False
    moved = Pose(command.position + delta * command.probe_axis(), command.orientation)
    return moved, verdict is ForceVerdict.OVER_LIMIT


@dataclass(frozen=True)
class SupervisorState:
    """Immutable snapshot published to telemetry."""

    mode: Mode
    last_command: Pose
    last_twist: Twist
    contact: bool
    haptic: float
    force_verdict: ForceVerdict
    filter_verdict: FilterVerdict
    plan_cursor: float
    plan_duration: float
    fault: str = ""


class Supervisor:
    """Runs the per-period control law; exactly one owner thread."""

    def __init__(self, model: RobotModel, surface: PointCloud,
                 cfg: FilterConfig | None = None, band: ForceBand | None = None,
                 q0: np.ndarray | None = None):
        self.model = model
        self.surface = surface
        self.cfg = cfg or FilterConfig()
        self.band = band or ForceBand()
        self.mode = Mode.MANUAL
        self._resume_mode = Mode.MANUAL
        self.plan: PathPlan | None = None
        self.cursor = 0.0
        self.press_offset = 0.0
        self.held_target: Pose | None = None
        self.fault = ""
        self.last_twist = Twist.zero()
        self.last_filter_verdict = FilterVerdict.ok()
        self.last_force_verdict = ForceVerdict.BELOW_CONTACT
        self.contact = False
        self.haptic = 0.0
        self.last_regulation_delta = 0.0
        self.active_raw: Pose | None = None
        self._raw_age = 0
        q0 = np.asarray(q0, dtype=float) if q0 is not None else np.zeros(7)
        start_pose = forward_kinematics(model, q0)
        try:
            self.filter_state = FilterState.initial(surface, start_pose)
        except Exception:
            # Start pose hovers off the footprint; anchor lazily on first use.
            self.filter_state = FilterState(start_pose, Twist.zero())
        self.last_command = self.filter_state.prev_command

    # -- mode control -------------------------------------------------------

    def load_plan(self, plan: PathPlan) -> None:
        self.plan = plan
        self.cursor = 0.0

    def set_mode(self, mode: Mode) -> None:
        if self.mode is Mode.HALTED:
            raise ParameterError("halted; reset before selecting a mode")
        if mode is Mode.AUTONOMOUS and self.plan is None:
            raise ParameterError("autonomous mode needs a loaded plan")
        self.mode = mode
        if mode in (Mode.MANUAL, Mode.AUTONOMOUS):
            self._resume_mode = mode
            self.held_target = None

    def request_pause(self) -> None:
        if self.mode in (Mode.MANUAL, Mode.AUTONOMOUS):
            self._resume_mode = self.mode
            self.mode = Mode.PAUSED

    def request_resume(self) -> None:
        if self.mode is Mode.PAUSED:
            self.mode = self._resume_mode
            self.held_target = None

    def halt(self, reason: str) -> None:
        self.mode = Mode.HALTED
        self.fault = reason

    def reset(self, q: np.ndarray) -> None:
        """Operator reset: leave halted, re-anchor the filter at q."""
        pose = forward_kinematics(self.model, q)
        try:
            self.filter_state = FilterState.initial(self.surface, pose)
        except Exception:
            self.filter_state = FilterState(pose, Twist.zero())
        self.last_command = self.filter_state.prev_command
        self.mode = Mode.MANUAL
        self._resume_mode = Mode.MANUAL
        self.fault = ""
        self.press_offset = 0.0
        self.held_target = None
        self.cursor = 0.0

    # -- control steps ------------------------------------------------------

    def _update_force_state(self, wrench: WrenchReading) -> ForceVerdict:
        verdict = force_check(wrench, self.band)
        self.last_force_verdict = verdict
        self.contact = wrench.f_probe > 1e-6
        self.haptic = haptic_intensity(wrench.f_probe, self.band) if self.contact else 0.0
        return verdict

    def _apply_regulation(self, verdict: ForceVerdict, allow_descend: bool) -> bool:
        delta = regulation_delta(verdict, self.cfg)
        if delta > 0.0 and not allow_descend:
            delta = 0.0  # retracts always apply; descents wait for settling
        before = self.press_offset
        self.press_offset = float(np.clip(self.press_offset + delta,
                                          -RETRACT_MM, MAX_PRESS_MM))
        self.last_regulation_delta = self.press_offset - before
        return verdict is ForceVerdict.OVER_LIMIT

    def _pressed_target(self, command: Pose) -> Pose:
        if self.press_offset == 0.0:
            return command
        return Pose(command.position + self.press_offset * command.probe_axis(),
                    command.orientation)

    def _capped_twist(self, current: Pose, target: Pose) -> Twist:
        dt = self.cfg.control_period
        v = (target.position - current.position) / dt
        speed = float(np.linalg.norm(v))
        if speed > self.cfg.v_lin_max:
            v = v * (self.cfg.v_lin_max / speed)
        ang = quat_angle(current.orientation, target.orientation)
        if ang < 1e-15:
            w = np.zeros(3)
        else:
            step = min(ang, self.cfg.v_ang_max * dt)
            q_next = slerp(current.orientation, target.orientation, step / ang)
            from .motion_filter import _implied_twist
            w = _implied_twist(current, Pose(current.position, q_next), dt).angular
        return Twist(v, w)

    def _joint_command(self, q: np.ndarray, twist: Twist) -> np.ndarray:
        J = jacobian(self.model, q)
        qdot = task_to_joint_velocity(J, twist,
                                      self.model.sigma_min_threshold,
                                      self.model.char_length_mm)
        over = np.max(np.abs(qdot) / self.model.velocity_limits)
        if over > 1.0:
            qdot = qdot / over  # uniform scaling keeps the twist direction
        return qdot

    def manual_step(self, raw: Pose | None, q: np.ndarray,
                    wrench: WrenchReading) -> np.ndarray:
        """Filter the raw operator pose, regulate contact, map to joints.

        raw=None means no fresh operator sample this period: the previous
        command is held and the contact descend stays frozen (the pose
        must stay intact during command gaps).
        """
        if self.mode is not Mode.MANUAL:
            raise ParameterError(f"manual_step in mode {self.mode.value}")
        if raw is not None:
            self.active_raw = raw
            self._raw_age = 0
        else:
            self._raw_age += 1
            if self._raw_age > RAW_RETENTION_PERIODS:
                self.active_raw = None
        fresh = self.active_raw is not None
        command, verdict = pipeline_step(self.active_raw if fresh
                                         else self.filter_state.prev_command,
                                         self.filter_state, self.surface,
                                         self.model, self.cfg)
        self.last_filter_verdict = verdict
        force_verdict = self._update_force_state(wrench)
        current = forward_kinematics(self.model, q)
        settled = (np.linalg.norm(current.position - command.position)
                   < SETTLE_TOL_MM + abs(self.press_offset))
        pause = self._apply_regulation(force_verdict,
                                       allow_descend=fresh and settled)
        target = self._pressed_target(command)
        if pause:
            self.held_target = target
            self.mode = Mode.PAUSED
            self._resume_mode = Mode.MANUAL
        return self._finish_step(q, target, current)

    def autonomous_step(self, q: np.ndarray, wrench: WrenchReading,
                        dt: float | None = None) -> np.ndarray:
        """Advance the plan cursor by one period and track the plan pose."""
        if self.mode is not Mode.AUTONOMOUS:
            raise ParameterError(f"autonomous_step in mode {self.mode.value}")
        assert self.plan is not None
        self.cursor += dt if dt is not None else self.cfg.control_period
        position, orientation = self.plan.sample(self.cursor)
        command = Pose(position, orientation)
        self.last_filter_verdict = FilterVerdict.ok()
        force_verdict = self._update_force_state(wrench)
        current = forward_kinematics(self.model, q)
        settled = (np.linalg.norm(current.position - command.position)
                   < SETTLE_TOL_MM + abs(self.press_offset))
        pause = self._apply_regulation(force_verdict, allow_descend=settled)
        target = self._pressed_target(command)
        exhausted = self.cursor >= self.plan.duration
        if pause or exhausted:
            self.held_target = target
            self.mode = Mode.PAUSED
            self._resume_mode = Mode.AUTONOMOUS
        return self._finish_step(q, target, current)

    def paused_step(self, q: np.ndarray, wrench: WrenchReading) -> np.ndarray:
        """Hold position; finish any pending safety retract."""
        self._update_force_state(wrench)
        if self.held_target is None:
            self.last_twist = Twist.zero()
            return np.zeros(7)
        pose = forward_kinematics(self.model, q)
        if (np.linalg.norm(pose.position - self.held_target.position) < 1e-3
                and quat_angle(pose.orientation, self.held_target.orientation) < 1e-4):
            self.held_target = None
            self.last_twist = Twist.zero()
            return np.zeros(7)
        return self._finish_step(q, self.held_target, pose)

    def step(self, q: np.ndarray, wrench: WrenchReading,
             raw: Pose | None = None) -> np.ndarray:
        """Dispatch one control period according to the current mode."""
        if self.mode is Mode.HALTED:
            self.last_twist = Twist.zero()
            return np.zeros(7)
        if self.mode is Mode.PAUSED:
            return self.paused_step(q, wrench)
        if self.mode is Mode.AUTONOMOUS:
            return self.autonomous_step(q, wrench)
        return self.manual_step(raw, q, wrench)

    def _finish_step(self, q: np.ndarray, target: Pose,
                     current: Pose | None = None) -> np.ndarray:
        if current is None:
            current = forward_kinematics(self.model, q)
        twist = self._capped_twist(current, target)
        try:
            qdot = self._joint_command(q, twist)
        except SingularityError:
            self.halt("singular configuration")
            self.last_twist = Twist.zero()
            return np.zeros(7)
        self.last_command = target
        self.last_twist = twist
        return qdot

    def snapshot(self) -> SupervisorState:
        return SupervisorState(
            mode=self.mode, last_command=self.last_command,
            last_twist=self.last_twist, contact=self.contact, haptic=self.haptic,
            force_verdict=self.last_force_verdict,
            filter_verdict=self.last_filter_verdict,
            plan_cursor=self.cursor,
            plan_duration=self.plan.duration if self.plan is not None else 0.0,
            fault=self.fault)
