"""Live service integration: streaming, gating, sessions, bridge, replay."""

import json
import time

import numpy as np
import pytest

from sonoarm.config import AppConfig
from sonoarm.geometry import Pose
from sonoarm.supervisor import Mode
from sonoarm.teleop import recording as rec
from sonoarm.teleop.bridge import WebSocketClient
from sonoarm.teleop.client import OperatorClient
from sonoarm.teleop.frames import CommandKind, ErrorStatus, FrameKind, NoticeCode
from sonoarm.teleop.service import ReplayService, TeleopService
from sonoarm.teleop.session import Phase


def service_config():
    cfg = AppConfig()
    cfg.service.port = 0          # ephemeral ports keep tests parallel-safe
    cfg.service.bridge_port = 0
    return cfg


@pytest.fixture()
def service():
    svc = TeleopService(service_config()).start()
    yield svc
    svc.stop()


def wait_until(predicate, timeout=5.0, poll=0.01):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(poll)
    return False


class TestStreaming:
    def test_seq_starts_at_zero_and_is_gapless(self, service):
        with OperatorClient("127.0.0.1", service.port) as op:
            assert wait_until(lambda: len(op.telemetry) > 500)
            seqs = [f.seq for f in list(op.telemetry)]
        assert seqs[0] == 0
        assert all(b - a == 1 for a, b in zip(seqs, seqs[1:]))

    def test_timestamps_monotone(self, service):
        with OperatorClient("127.0.0.1", service.port) as op:
            assert wait_until(lambda: len(op.telemetry) > 300)
            ts = [f.t_mono_us for f in list(op.telemetry)]
        assert all(b > a for a, b in zip(ts, ts[1:]))

    def test_short_run_rate(self, service):
        # 2 s sanity check; the full 10 s / 495 Hz bound is acceptance #9
        with OperatorClient("127.0.0.1", service.port) as op:
            assert wait_until(lambda: len(op.telemetry) >= 1)
            n0 = op.telemetry[-1].seq
            time.sleep(2.0)
            n1 = op.telemetry[-1].seq
        assert (n1 - n0) / 2.0 >= 450.0

    def test_second_operator_gets_busy_notice(self, service):
        with OperatorClient("127.0.0.1", service.port):
            with OperatorClient("127.0.0.1", service.port) as second:
                assert wait_until(lambda: any(c is NoticeCode.BUSY
                                              for c, _ in second.notices))


class TestSessionFlow:
    def test_full_lora5_flow(self, service):
        with OperatorClient("127.0.0.1", service.port) as op:
            assert wait_until(lambda: op.pings_seen >= 2)
            op.init_session()
            assert wait_until(lambda: service.session.phase is Phase.RECONSTRUCTED)
            u = service.phantom.center + [0, 0, service.phantom.semi_axes[2]]
            op.set_key_point("U", u)
            assert wait_until(lambda: service.session.phase is Phase.READY)
            op.select_pattern("cardiac")
            assert wait_until(lambda: service.session.selected_pattern == "cardiac")
            op.set_mode("autonomous")
            assert wait_until(lambda: service.session.phase is Phase.AUTONOMOUS,
                              timeout=10.0)
            assert wait_until(lambda: (op.latest() or None) is not None
                              and op.latest().mode is Mode.AUTONOMOUS)
            op.pause()
            assert wait_until(lambda: service.session.phase is Phase.PAUSED)
            op.annotate("HC 230 mm", us_ref=1)
            op.set_mode("manual")
            op.resume()
            assert wait_until(lambda: service.session.phase is Phase.MANUAL)

    def test_illegal_transition_rejected_with_notice(self, service):
        with OperatorClient("127.0.0.1", service.port) as op:
            op.set_mode("autonomous")  # from idle: no reconstruction yet
            assert wait_until(lambda: any(c is NoticeCode.REJECTED
                                          for c, _ in op.notices))
            assert service.session.phase is Phase.IDLE

    def test_disconnect_mid_manual_halts_quickly(self, service):
        op = OperatorClient("127.0.0.1", service.port)
        op.init_session()
        wait_until(lambda: service.session.phase is Phase.RECONSTRUCTED)
        u = service.phantom.center + [0, 0, service.phantom.semi_axes[2]]
        op.set_key_point("U", u)
        wait_until(lambda: service.session.phase is Phase.READY)
        op.set_mode("manual")
        assert wait_until(lambda: service.session.phase is Phase.MANUAL)
        op.close()
        t0 = time.monotonic()
        assert wait_until(lambda: service.session.phase is Phase.HALTED, timeout=1.0)
        assert time.monotonic() - t0 <= 0.1 + 0.05  # 100 ms plus polling slop


class TestGating:
    @staticmethod
    def to_manual(service, op):
        op.init_session()
        wait_until(lambda: service.session.phase is Phase.RECONSTRUCTED)
        u = service.phantom.center + [0, 0, service.phantom.semi_axes[2]]
        op.set_key_point("U", u)
        wait_until(lambda: service.session.phase is Phase.READY)
        op.set_mode("manual")
        assert wait_until(lambda: service.session.phase is Phase.MANUAL)

    def test_pose_dropped_when_gate_closed(self, service):
        # echo policy: constant 12 ms rtt keeps the gate shut
        with OperatorClient("127.0.0.1", service.port,
                            echo_policy=lambda seq: 0.012) as op:
            self.to_manual(service, op)
            assert wait_until(lambda: op.pings_seen >= 3)
            assert not service.link_stats().gate_open
            pose = service.arm.pose()
            op.send_pose(Pose(pose.position + [5.0, 0, 0], pose.orientation))
            assert wait_until(lambda: any(c is NoticeCode.DROPPED
                                          for c, _ in op.notices))
            # the drop is flagged on exactly one telemetry frame; scan them all
            assert wait_until(lambda: any(
                f.error_status is ErrorStatus.GATE_DROPPED_POSE
                for f in list(op.telemetry)), timeout=2.0)

    def test_pose_delivered_when_gate_open(self, service):
        with OperatorClient("127.0.0.1", service.port) as op:  # immediate echo
            self.to_manual(service, op)
            assert wait_until(lambda: service.link_stats().gate_open, timeout=3.0)
            # let the arm finish its initial descent onto the contour
            anchor = service.supervisor.filter_state.prev_command.position
            assert wait_until(
                lambda: abs(service.arm.pose().position[2] - anchor[2]) < 3.0,
                timeout=10.0)
            start = service.arm.pose()
            target = Pose(start.position + [10.0, 0, 0], start.orientation)
            for _ in range(50):
                op.send_pose(target)
                time.sleep(0.05)
            moved = np.linalg.norm(service.arm.pose().position[:2] - start.position[:2])
            assert moved > 1.0

    def test_pause_always_delivered(self, service):
        with OperatorClient("127.0.0.1", service.port,
                            echo_policy=lambda seq: 0.012) as op:
            self.to_manual(service, op)
            assert wait_until(lambda: op.pings_seen >= 3)
            op.pause()
            assert wait_until(lambda: service.session.phase is Phase.PAUSED)


class TestBridge:
    def test_json_stream_and_command_round_trip(self, service):
        ws = WebSocketClient("127.0.0.1", service.bridge_port)
        try:
            seen = None
            for _ in range(50):
                line = ws.recv_text()
                assert line is not None
                obj = json.loads(line)
                if obj["type"] == "telemetry":
                    seen = obj
                    break
            assert seen is not None and "position" in seen
            # drive the session over the bridge
            ws.send_text(json.dumps({"type": "command", "kind": "init"}))
            assert wait_until(lambda: service.session.phase
                              in (Phase.INITIALIZED, Phase.RECONSTRUCTED))
        finally:
            ws.close()

    def test_us_frames_pushed(self, service):
        ws = WebSocketClient("127.0.0.1", service.bridge_port)
        try:
            deadline = time.monotonic() + 3.0
            got_us = False
            while time.monotonic() < deadline and not got_us:
                line = ws.recv_text()
                if line is None:
                    break
                obj = json.loads(line)
                if obj["type"] == "us-frame":
                    assert obj["w"] > 0 and obj["h"] > 0
                    import base64
                    raw = base64.b64decode(obj["b64"])
                    assert len(raw) == obj["w"] * obj["h"]
                    got_us = True
            assert got_us
        finally:
            ws.close()


class TestRecordingIntegration:
    def test_record_replay_re_record_identical(self, tmp_path):
        cfg = service_config()
        log_a = tmp_path / "a.log"
        with TeleopService(cfg, record_path=log_a) as svc:
            with OperatorClient("127.0.0.1", svc.port) as op:
                wait_until(lambda: len(op.telemetry) > 200)
                op.pause()  # recorded command (rejected, but logged)
                wait_until(lambda: len(op.telemetry) > 400)
        frames_a = rec.read_log(log_a)
        assert len(frames_a) > 300

        log_b = tmp_path / "b.log"
        with rec.SessionRecorder(log_b) as out:
            for kind, payload in rec.replay_session(log_a, speed=0):
                out.append(kind, payload)
        assert log_a.read_bytes() == log_b.read_bytes()

    def test_replay_service_reproduces_stream(self, tmp_path):
        cfg = service_config()
        log = tmp_path / "session.log"
        with TeleopService(cfg, record_path=log) as svc:
            with OperatorClient("127.0.0.1", svc.port) as op:
                wait_until(lambda: len(op.telemetry) > 300)
        from sonoarm.teleop.frames import TelemetryFrame
        recorded = [TelemetryFrame.decode(p) for k, p in rec.read_log(log)
                    if k == FrameKind.TELEMETRY]

        with ReplayService(log, speed=0.0) as replay:
            with OperatorClient("127.0.0.1", replay.port) as viewer:
                wait_until(lambda: len(viewer.telemetry) >= len(recorded),
                           timeout=10.0)
                got = list(viewer.telemetry)
        assert len(got) == len(recorded)
        assert [f.seq for f in got] == [f.seq for f in recorded]
        assert [f.t_mono_us for f in got] == [f.t_mono_us for f in recorded]

    def test_annotation_lands_in_log(self, tmp_path):
        cfg = service_config()
        log = tmp_path / "annotated.log"
        with TeleopService(cfg, record_path=log) as svc:
            with OperatorClient("127.0.0.1", svc.port) as op:
                op.init_session()
                wait_until(lambda: svc.session.phase is Phase.RECONSTRUCTED)
                u = svc.phantom.center + [0, 0, svc.phantom.semi_axes[2]]
                op.set_key_point("U", u)
                wait_until(lambda: svc.session.phase is Phase.READY)
                op.set_mode("manual")
                wait_until(lambda: svc.session.phase is Phase.MANUAL)
                op.pause()
                wait_until(lambda: svc.session.phase is Phase.PAUSED)
                op.annotate("FL 60 mm", us_ref=2)
                time.sleep(0.3)
        from sonoarm.teleop.frames import CommandFrame
        commands = [CommandFrame.decode(p) for k, p in rec.read_log(log)
                    if k == FrameKind.COMMAND]
        notes = [c for c in commands if c.kind is CommandKind.ANNOTATE]
        assert notes and notes[0].text == "FL 60 mm" and notes[0].us_ref == 2
