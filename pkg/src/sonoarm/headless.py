"""Headless closed-loop autonomous runs on a virtual clock.

Drives the supervisor against the simulated arm and spring phantom at the
control rate without sleeping, so a full scan simulates in seconds. Used
by the run-auto command and the acceptance benchmarks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import AppConfig
from .errors import PlanningError
from .geometry import Pose, quat_angle
from .planner import PathPlan, compute_key_points, default_patterns, plan_pattern
from .supervisor import RETRACT_MM, ForceVerdict, Mode
from .teleop.service import SimulatedArm, build_scene

APPROACH_TIMEOUT_S = 60.0
APPROACH_TOLERANCE_MM = 0.5


@dataclass
class ForceSample:
    t: float
    f_probe: float
    f_resultant: float
    verdict: ForceVerdict
    retract_commanded: bool


@dataclass
class AutoRunResult:
    completed: bool
    halted: bool
    fault: str
    sim_duration_s: float
    wall_seconds: float
    samples: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)   # (t, position) downsampled
    phase_timings: dict = field(default_factory=dict)

    @property
    def in_contact(self) -> list:
        return [s for s in self.samples if s.f_probe > 1e-6]

    def compliance_fraction(self, band) -> float:
        contact = self.in_contact
        if not contact:
            return 0.0
        ok = sum(1 for s in contact
                 if band.f_contact <= s.f_probe <= band.f_max
                 and s.f_resultant <= band.f_max)
        return ok / len(contact)

    def over_limit_followed_by_retract(self) -> bool:
        """Every over-limit sample must see a retract command within one
        control period (the very next sample reflects it)."""
        for i, s in enumerate(self.samples):
            if s.verdict is ForceVerdict.OVER_LIMIT and not s.retract_commanded:
                return False
        return True


def plan_for(pattern_id: str, config: AppConfig, surface, phantom) -> PathPlan:
    patterns = default_patterns()
    if pattern_id not in patterns:
        raise PlanningError(f"unknown pattern {pattern_id!r}")
    umbilicus_seed = phantom.center + np.array([0.0, 0.0, phantom.semi_axes[2]])
    kp = compute_key_points(umbilicus_seed, surface, phantom.fiducials)
    return plan_pattern(patterns[pattern_id], kp, surface,
                        sd=config.planner.sampling_distance, cfg=config.filter)


def run_autonomous(pattern_id: str, config: AppConfig, *,
                   plan: PathPlan | None = None,
                   max_sim_seconds: float = 300.0,
                   record_path=None) -> AutoRunResult:
    """Approach the plan start, execute the plan, collect force telemetry.

    With record_path a session log of virtual-clock telemetry frames is
    written; timestamps are simulation time, so identical configs yield
    byte-identical logs.
    """
    t_wall = time.perf_counter()
    phantom, surface, arm, sup = build_scene(config)
    timings = {}
    recorder = None
    rec_seq = 0
    if record_path is not None:
        from .teleop.recording import SessionRecorder
        recorder = SessionRecorder(record_path)

    def record(t_sim: float, wrench) -> None:
        nonlocal rec_seq
        if recorder is None:
            return
        from .teleop.frames import TelemetryFrame
        snap = sup.snapshot()
        frame = TelemetryFrame(
            seq=rec_seq, t_mono_us=int(round(t_sim * 1e6)), joints=arm.q.copy(),
            cartesian=arm.pose(), wrench=wrench, mode=snap.mode,
            haptic=snap.haptic, verdict=snap.filter_verdict)
        recorder.append_encoded(frame.encode())
        rec_seq += 1

    t0 = time.perf_counter()
    if plan is None:
        plan = plan_for(pattern_id, config, surface, phantom)
    timings["plan_s"] = time.perf_counter() - t0

    dt = config.filter.control_period
    samples: list = []
    trajectory: list = []

    # Approach phase: servo to the plan's first pose before starting the
    # plan clock, reusing the paused-mode hold-target machinery.
    start_pose = Pose(plan.points[0], plan.orientations[0])
    sup.mode = Mode.PAUSED
    sup._resume_mode = Mode.AUTONOMOUS
    sup.held_target = start_pose
    t_sim = 0.0
    t0 = time.perf_counter()
    while t_sim < APPROACH_TIMEOUT_S:
        wrench = arm.wrench()
        qdot = sup.step(arm.q, wrench)
        arm.tick(qdot, dt)
        t_sim += dt
        if int(round(t_sim / dt)) % 10 == 0:
            record(t_sim, wrench)
        pose = arm.pose()
        if (np.linalg.norm(pose.position - start_pose.position) < APPROACH_TOLERANCE_MM
                and quat_angle(pose.orientation, start_pose.orientation) < 0.01):
            break
        if sup.mode is Mode.HALTED:
            break
    timings["approach_s"] = time.perf_counter() - t0
    if sup.mode is Mode.HALTED:
        if recorder is not None:
            recorder.close()
        return AutoRunResult(False, True, sup.fault, t_sim,
                             time.perf_counter() - t_wall, samples, trajectory, timings)

    sup.load_plan(plan)
    sup.held_target = None
    sup.mode = Mode.AUTONOMOUS
    sup._resume_mode = Mode.AUTONOMOUS

    t0 = time.perf_counter()
    steps = 0
    run_t0 = t_sim
    while t_sim - run_t0 < max_sim_seconds:
        wrench = arm.wrench()
        press_before = sup.press_offset
        qdot = sup.step(arm.q, wrench)
        arm.tick(qdot, dt)
        t_sim += dt
        steps += 1
        samples.append(ForceSample(
            t=t_sim, f_probe=wrench.f_probe, f_resultant=wrench.f_resultant,
            verdict=sup.last_force_verdict,
            retract_commanded=(sup.press_offset < press_before
                               or sup.press_offset <= -RETRACT_MM + 1e-9)))
        if steps % 25 == 0:
            trajectory.append((t_sim, arm.pose().position.copy()))
        record(t_sim, wrench)
        if sup.mode is Mode.HALTED:
            break
        if sup.mode is Mode.PAUSED and sup.cursor >= plan.duration and sup.held_target is None:
            break  # plan exhausted and any trailing retract finished
        if sup.mode is Mode.PAUSED and sup.held_target is None and sup.cursor < plan.duration:
            sup.request_resume()  # resume after a safety retract completes
    timings["scan_s"] = time.perf_counter() - t0
    if recorder is not None:
        recorder.close()

    completed = sup.mode is not Mode.HALTED and sup.cursor >= plan.duration
    return AutoRunResult(completed, sup.mode is Mode.HALTED, sup.fault,
                         t_sim, time.perf_counter() - t_wall,
                         samples, trajectory, timings)
