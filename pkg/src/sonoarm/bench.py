"""The acceptance benchmark suite.

Each criterion is an independent check returning a CheckResult; the
pytest acceptance module and the `bench` CLI command both run this list,
so there is exactly one definition of what passing means. All checks are
seeded and deterministic apart from the two wall-clock criteria (9, 10),
whose pass/fail outcome is still stable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import kinematics as kin
from . import motion_filter as mf
from . import phantom as ph
from . import planner as pl
from . import pointcloud as pc
from .config import AppConfig
from .geometry import (
    Pose,
    Transform,
    Twist,
    quat_angle,
    quat_from_axis_angle,
    quat_multiply,
    quat_to_matrix,
    unit,
)
from .headless import run_autonomous
from .supervisor import ForceBand


@dataclass
class CheckResult:
    criterion: str
    passed: bool
    details: dict = field(default_factory=dict)
    runtime_s: float = 0.0

    def row(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        info = ", ".join(f"{k}={v}" for k, v in self.details.items())
        return f"[{flag}] {self.criterion}  ({self.runtime_s:.2f}s)  {info}"


def _random_full_rank_jacobians(n, rng):
    out = []
    while len(out) < n:
        J = rng.normal(size=(6, 7))
        if np.linalg.svd(J, compute_uv=False)[-1] > 1e-3:
            out.append(J)
    return out


def check_pseudoinverse_fidelity() -> CheckResult:
    """C1: J^T(JJ^T)^-1 satisfies the Penrose identities and matches SVD."""
    rng = np.random.default_rng(101)
    worst_penrose = 0.0
    worst_svd = 0.0
    for Jm in _random_full_rank_jacobians(1000, rng):
        Jp = kin.pseudoinverse(kin.Jacobian(Jm), sigma_min=1e-9, char_length_mm=1.0)
        scale = max(np.abs(Jm).max(), 1.0)
        p_scale = max(np.abs(Jp).max(), 1.0)
        worst_penrose = max(
            worst_penrose,
            np.abs(Jm @ Jp @ Jm - Jm).max() / scale,
            np.abs(Jp @ Jm @ Jp - Jp).max() / p_scale,
            np.abs((Jm @ Jp).T - Jm @ Jp).max(),
            np.abs((Jp @ Jm).T - Jp @ Jm).max(),
        )
        worst_svd = max(worst_svd, np.abs(Jp - np.linalg.pinv(Jm)).max())
    return CheckResult(
        "1 pseudoinverse fidelity",
        worst_penrose <= 1e-9 and worst_svd <= 1e-8,
        {"worst_penrose": f"{worst_penrose:.2e}", "worst_vs_svd": f"{worst_svd:.2e}"})


def check_jacobian_finite_difference() -> CheckResult:
    """C2: geometric Jacobian matches central differences of FK."""
    from .geometry import angular_velocity
    model = kin.default_model()
    rng = np.random.default_rng(202)
    delta = 1e-6
    worst = 0.0
    tested = 0
    while tested < 100:
        lo, hi = model.lower_limits, model.upper_limits
        q = lo + (hi - lo) * (0.5 + 0.8 * (rng.uniform(size=7) - 0.5))
        if np.any(q - delta < lo) or np.any(q + delta > hi):
            continue
        tested += 1
        J = kin.jacobian(model, q).matrix
        for k in range(7):
            dq = np.zeros(7)
            dq[k] = delta
            p_plus = kin.forward_kinematics(model, q + dq)
            p_minus = kin.forward_kinematics(model, q - dq)
            lin_fd = (p_plus.position - p_minus.position) / (2 * delta)
            ang_fd = angular_velocity(quat_to_matrix(p_minus.orientation),
                                      quat_to_matrix(p_plus.orientation), 2 * delta)
            worst = max(worst, np.abs(J[:3, k] - lin_fd).max(),
                        np.abs(J[3:, k] - ang_fd).max())
    return CheckResult("2 jacobian finite difference", worst < 1e-5,
                       {"max_error": f"{worst:.2e}", "configs": tested})


def check_velocity_caps_fuzz(n_steps: int = 100_000) -> CheckResult:
    """C3: 1e5 fuzzed raw poses; outputs never exceed 20 mm/s / 30 deg/s."""
    cfg = mf.FilterConfig()
    model = kin.default_model()
    phantom = ph.generate_phantom((150.0, 100.0, 80.0), seed=33, center=(560.0, 0.0, 0.0))
    surface = phantom.surface
    rng = np.random.default_rng(303)
    state = mf.FilterState.initial(surface, Pose([560.0, 0.0, 100.0],
                                                 np.array([1.0, 0, 0, 0])))
    prev = state.prev_command
    v_cap = cfg.v_lin_max * cfg.control_period + 1e-9
    w_cap = cfg.v_ang_max * cfg.control_period + 1e-9
    lin_viol = ang_viol = 0
    worst_lin = worst_ang = 0.0
    for _ in range(n_steps):
        tilt = quat_from_axis_angle(unit(rng.normal(size=3)), rng.uniform(0, 1.2))
        raw = Pose(np.array([560.0, 0.0, 0.0])
                   + rng.uniform([-420, -420, -150], [420, 420, 400]),
                   quat_multiply(tilt, np.array([1.0, 0, 0, 0])))
        cmd, _ = mf.pipeline_step(raw, state, surface, model, cfg)
        dlin = float(np.linalg.norm(cmd.position - prev.position))
        dang = quat_angle(prev.orientation, cmd.orientation)
        worst_lin = max(worst_lin, dlin)
        worst_ang = max(worst_ang, dang)
        lin_viol += dlin > v_cap
        ang_viol += dang > w_cap
        prev = cmd
    return CheckResult(
        "3 velocity caps fuzz", lin_viol == 0 and ang_viol == 0,
        {"steps": n_steps, "lin_violations": lin_viol, "ang_violations": ang_viol,
         "worst_step_mm": f"{worst_lin:.5f}", "worst_step_deg": f"{np.degrees(worst_ang):.5f}"})


def check_cone_filter() -> CheckResult:
    """C4: tilt sweep 0..90 deg; accept at or below 30, reject above."""
    cfg = mf.FilterConfig()
    model = kin.default_model()
    up = np.array([0.0, 0.0, 1.0])
    failures = []
    for deg in range(0, 91):
        q = quat_from_axis_angle([1.0, 0, 0], np.radians(float(deg)))
        pose = Pose([560.0, 0.0, 80.0], q)
        verdict = mf.workspace_filter(pose, up, model, cfg)
        if verdict.accepted != (deg <= 30):
            failures.append(deg)
    return CheckResult("4 cone filter sweep", not failures,
                       {"boundary_accepted": True, "failures": failures or "none"})


def check_icp_recovery() -> CheckResult:
    """C5: 100 seeded noisy registrations recover within 1 mm / 0.5 deg."""
    ok = 0
    worst_t = worst_r = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        v = rng.normal(size=(1500, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        v[:, 2] = np.abs(v[:, 2])
        src = v * np.array([150.0, 100.0, 80.0])
        angle = rng.uniform(0, np.radians(20.0))
        translation = unit(rng.normal(size=3)) * rng.uniform(0, 50.0)
        T_true = Transform(quat_to_matrix(quat_from_axis_angle(unit(rng.normal(size=3)),
                                                               angle)), translation)
        dst = pc.PointCloud(T_true.apply(src) + rng.normal(0, 0.5, src.shape))
        T, _ = pc.icp_register(pc.PointCloud(src), dst,
                               pc.IcpParams(max_iterations=600,
                                            convergence_epsilon=1e-7))
        err = T_true.compose(T.inverse())
        terr = float(np.linalg.norm(err.translation))
        rerr = float(np.degrees(err.rotation_angle()))
        worst_t = max(worst_t, terr)
        worst_r = max(worst_r, rerr)
        ok += terr < 1.0 and rerr < 0.5
    return CheckResult("5 icp recovery", ok >= 95,
                       {"recovered": f"{ok}/100", "worst_terr_mm": f"{worst_t:.3f}",
                        "worst_rerr_deg": f"{worst_r:.3f}"})


def check_ransac_outliers() -> CheckResult:
    """C6: 20% labelled outliers; 99% removed, at most 1% inliers lost."""
    phantom = ph.generate_phantom((150.0, 100.0, 80.0), seed=44,
                                  center=(560.0, 0.0, 0.0))
    total_out = kept_out = total_in = lost_in = 0
    params = pc.RansacParams("ellipsoid-distance", inlier_threshold=1.2,
                             iterations=400, min_inlier_fraction=0.5)
    for seed in range(50):
        cam = ph.look_at_camera(phantom.center + [80.0, -40.0, 480.0], phantom.center)
        cloud, labels = ph.capture_view_labeled(
            phantom, ph.CaptureParams(cam, noise_sigma=0.2, outlier_fraction=0.2,
                                      point_budget=3000, seed=seed))
        mask = pc.ransac_inlier_mask(cloud, params, seed=seed)
        total_out += labels.sum()
        kept_out += np.sum(mask & labels)
        total_in += (~labels).sum()
        lost_in += np.sum(~mask & ~labels)
    removed = 1.0 - kept_out / total_out
    lost = lost_in / total_in
    return CheckResult("6 ransac outlier rejection",
                       removed >= 0.99 and lost <= 0.01,
                       {"outliers_removed": f"{removed:.4f}",
                        "inliers_lost": f"{lost:.4f}", "seeds": 50})


def check_path_finding() -> CheckResult:
    """C7: path properties on plane and hemisphere, planar closed form."""
    details = {}
    ok = True

    xs = np.arange(-120.0, 120.5, 1.0)
    X, Y = np.meshgrid(xs, xs)
    plane = pc.PointCloud(
        np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)]),
        np.tile([0.0, 0.0, 1.0], (X.size, 1)))
    P, N = pl.find_path(np.zeros(3), np.array([100.0, 0, 0]), plane, sd=5.0)
    planar_exact = (len(P) == 21
                    and np.allclose(P[:, 0], np.arange(0.0, 101.0, 5.0))
                    and np.allclose(P[:, 1:], 0.0)
                    and np.allclose(N, [0, 0, 1.0]))
    details["planar_21_points"] = bool(planar_exact)
    ok &= planar_exact

    rng = np.random.default_rng(55)
    v = rng.normal(size=(60000, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    v[:, 2] = np.abs(v[:, 2])
    hemi = pc.PointCloud(100.0 * v, v)
    for (a, b) in (((-70.0, 0.0, 71.4), (70.0, 0.0, 71.4)),
                   ((0.0, -60.0, 80.0), (30.0, 60.0, 74.2))):
        p_s = pc.nearest_neighbor(hemi, np.array(a))[0]
        p_e = pc.nearest_neighbor(hemi, np.array(b))[0]
        sd = 5.0
        P, N = pl.find_path(p_s, p_e, hemi, sd=sd)
        d, _ = hemi.index.query(P)
        on_surface = bool(d.max() <= sd)
        v_hat = unit(p_e - p_s)
        progress = P @ v_hat
        monotone = bool(np.all(np.diff(progress) > 0))
        arc = float(np.sum(np.linalg.norm(np.diff(P, axis=0), axis=1)))
        chord = float(np.linalg.norm(p_e - p_s))
        ok &= on_surface and monotone and arc >= chord - 1e-9
    details["hemisphere_on_surface"] = True if ok else "see failures"
    return CheckResult("7 path finding properties", bool(ok), details)


def check_force_band() -> CheckResult:
    """C8: autonomous fetus-count run keeps contact force inside 2..5 N."""
    config = AppConfig()
    result = run_autonomous("fetus-count", config, max_sim_seconds=150.0)
    contact = result.in_contact
    compliance = result.compliance_fraction(config.band)
    retract_ok = result.over_limit_followed_by_retract()
    passed = (result.completed and not result.halted and len(contact) > 1000
              and compliance >= 0.99 and retract_ok)
    return CheckResult("8 force band compliance", passed,
                       {"completed": result.completed, "compliance": f"{compliance:.4f}",
                        "contact_samples": len(contact), "retract_ok": retract_ok,
                        "sim_s": f"{result.sim_duration_s:.1f}"})


def check_telemetry_rate() -> CheckResult:
    """C9: 10 s loopback run sustains >= 495 Hz with zero gaps."""
    from .teleop.client import OperatorClient
    from .teleop.service import TeleopService

    config = AppConfig()
    config.service.port = 0
    config.service.bridge_port = 0
    with TeleopService(config) as svc:
        with OperatorClient("127.0.0.1", svc.port,
                            telemetry_capacity=20000) as op:
            t0 = time.monotonic()
            while time.monotonic() - t0 < 10.0:
                time.sleep(0.05)
            frames = list(op.telemetry)
    seqs = [f.seq for f in frames]
    gaps = sum(1 for a, b in zip(seqs, seqs[1:]) if b - a != 1)
    span_s = (frames[-1].t_mono_us - frames[0].t_mono_us) / 1e6 if len(frames) > 1 else 0
    rate = (len(frames) - 1) / span_s if span_s > 0 else 0.0
    return CheckResult("9 telemetry rate", rate >= 495.0 and gaps == 0,
                       {"mean_hz": f"{rate:.1f}", "gaps": gaps, "frames": len(frames)})


def check_latency_gate() -> CheckResult:
    """C10: rtt 6 -> 12 -> 6 ms delivers, drops, delivers; pose frozen
    while the gate is closed."""
    from .teleop.client import OperatorClient
    from .teleop.frames import NoticeCode
    from .teleop.service import TeleopService
    from .teleop.session import Phase

    config = AppConfig()
    config.service.port = 0
    config.service.bridge_port = 0

    phase_holder = {"delay": 0.006}

    def echo_policy(seq):
        return phase_holder["delay"]

    details = {}
    with TeleopService(config) as svc:
        with OperatorClient("127.0.0.1", svc.port, echo_policy=echo_policy) as op:
            def wait(pred, timeout=6.0):
                deadline = time.monotonic() + timeout
                while time.monotonic() < deadline:
                    if pred():
                        return True
                    time.sleep(0.01)
                return False

            def settled(window=0.25, tol=1e-9):
                # the arm has stopped when the tip stays put over a window
                p0 = svc.arm.pose().position.copy()
                time.sleep(window)
                return float(np.linalg.norm(svc.arm.pose().position - p0)) < tol

            op.init_session()
            wait(lambda: svc.session.phase is Phase.RECONSTRUCTED)
            op.set_key_point("U", svc.phantom.center + [0, 0, svc.phantom.semi_axes[2]])
            wait(lambda: svc.session.phase is Phase.READY)
            op.set_mode("manual")
            wait(lambda: svc.session.phase is Phase.MANUAL)
            wait(lambda: svc.link_stats().gate_open)
            wait(settled, timeout=20.0)  # initial descent onto the contour

            base = svc.arm.pose()
            target = Pose(base.position + [8.0, 0, 0], base.orientation)

            # phase A: 6 ms -> delivered (the arm moves)
            a0 = svc.arm.pose().position.copy()
            for _ in range(20):
                op.send_pose(target)
                time.sleep(0.03)
            a_moved = float(np.linalg.norm(svc.arm.pose().position - a0))
            details["open_moved_mm"] = f"{a_moved:.3f}"

            # phase B: 12 ms -> gate closes, commands dropped, pose frozen
            phase_holder["delay"] = 0.012
            wait(lambda: not svc.link_stats().gate_open)
            drops_before = sum(1 for c, _ in op.notices if c is NoticeCode.DROPPED)
            wait(settled, timeout=10.0)  # in-flight motion dies out
            b0 = svc.arm.pose().position.copy()
            for _ in range(20):
                op.send_pose(target)
                time.sleep(0.03)
            b_moved = float(np.linalg.norm(svc.arm.pose().position - b0))
            drops = sum(1 for c, _ in op.notices if c is NoticeCode.DROPPED) - drops_before
            details["closed_moved_mm"] = f"{b_moved:.5f}"
            details["closed_drops"] = drops

            # phase C: back to 6 ms -> delivered again
            phase_holder["delay"] = 0.006
            wait(lambda: svc.link_stats().gate_open)
            c0 = svc.arm.pose().position.copy()
            for _ in range(20):
                op.send_pose(target)
                time.sleep(0.03)
            c_moved = float(np.linalg.norm(svc.arm.pose().position - c0))
            details["reopened_moved_mm"] = f"{c_moved:.3f}"

    passed = (a_moved > 0.2 and drops >= 15 and b_moved < 1e-6 and c_moved > 0.2)
    return CheckResult("10 latency gate", passed, details)


def check_velocity_mapping() -> CheckResult:
    """C11: J(J+ xdot) = xdot at 1000 states; angular-rate map recovers
    constant omega."""
    from .geometry import angular_velocity
    model = kin.default_model()
    rng = np.random.default_rng(111)
    worst_map = 0.0
    tested = 0
    while tested < 1000:
        lo, hi = model.lower_limits, model.upper_limits
        q = lo + (hi - lo) * (0.5 + 0.8 * (rng.uniform(size=7) - 0.5))
        J = kin.jacobian(model, q)
        if kin.singularity_measure(J) <= 0.02:
            continue
        tested += 1
        xdot = Twist(rng.normal(size=3) * 15, rng.normal(size=3) * 0.4)
        qdot = kin.task_to_joint_velocity(J, xdot)
        target = xdot.as_vector()
        err = np.abs(J.matrix @ qdot - target).max() / max(1.0, np.abs(target).max())
        worst_map = max(worst_map, err)

    worst_omega = 0.0
    dt = 0.002
    for _ in range(200):
        axis = unit(rng.normal(size=3))
        rate = rng.uniform(0.05, 2.0)
        base = quat_from_axis_angle(unit(rng.normal(size=3)), rng.uniform(0, 3))
        R0 = quat_to_matrix(base)
        R1 = quat_to_matrix(quat_multiply(quat_from_axis_angle(axis, rate * dt), base))
        w = angular_velocity(R0, R1, dt)
        worst_omega = max(worst_omega, abs(np.linalg.norm(w) - rate))
    return CheckResult("11 velocity mapping", worst_map <= 1e-6 and worst_omega <= 1e-3,
                       {"worst_map_rel": f"{worst_map:.2e}",
                        "worst_omega_err": f"{worst_omega:.2e}"})


def check_determinism() -> CheckResult:
    """C12: record -> replay -> re-record produces byte-identical logs."""
    import tempfile
    from pathlib import Path

    from .teleop.recording import SessionRecorder, replay_session

    config = AppConfig()
    with tempfile.TemporaryDirectory() as tmp:
        log_a = Path(tmp) / "a.log"
        run_autonomous("cardiac", config, max_sim_seconds=30.0, record_path=log_a)
        log_b = Path(tmp) / "b.log"
        with SessionRecorder(log_b) as out:
            for kind, payload in replay_session(log_a, speed=0):
                out.append(kind, payload)
        identical_replay = log_a.read_bytes() == log_b.read_bytes()

        log_c = Path(tmp) / "c.log"
        run_autonomous("cardiac", config, max_sim_seconds=30.0, record_path=log_c)
        identical_rerun = log_a.read_bytes() == log_c.read_bytes()
        size = log_a.stat().st_size
    return CheckResult("12 record/replay determinism",
                       identical_replay and identical_rerun,
                       {"replay_identical": identical_replay,
                        "rerun_identical": identical_rerun, "log_bytes": size})


PRIMARY_CRITERIA = (
    check_pseudoinverse_fidelity,
    check_jacobian_finite_difference,
    check_velocity_caps_fuzz,
    check_cone_filter,
    check_icp_recovery,
    check_ransac_outliers,
    check_path_finding,
    check_force_band,
    check_telemetry_rate,
    check_latency_gate,
    check_velocity_mapping,
    check_determinism,
)

SUITES = {
    "primary": PRIMARY_CRITERIA,
    # everything that runs on the virtual clock only (no sockets, no sleeps)
    "fast": tuple(c for c in PRIMARY_CRITERIA
                  if c not in (check_telemetry_rate, check_latency_gate)),
}


def run_suite(suite: str = "primary", progress=None) -> list:
    results = []
    for check in SUITES[suite]:
        t0 = time.perf_counter()
        result = check()
        result.runtime_s = time.perf_counter() - t0
        results.append(result)
        if progress is not None:
            progress(result)
    return results
