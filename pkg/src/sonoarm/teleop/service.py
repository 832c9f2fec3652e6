"""The robot-side service: runs the 500 Hz control/telemetry loop against
the simulated arm and phantom, accepts one operator over the binary
protocol, serves the JSON console bridge, monitors the link and gates
motion commands, and records sessions.
"""

from __future__ import annotations

import base64
import collections
import json
import queue
import socket
import threading
import time

import numpy as np

from ..config import AppConfig
from ..errors import IllegalTransitionError, ProtocolError, SingularityError
from ..geometry import Pose
from ..kinematics import WrenchReading, forward_kinematics, jacobian, wrench_from_torques
from ..phantom import PhantomModel, contact_force, generate_phantom, us_slice
from ..planner import compute_key_points, default_patterns, plan_pattern
from ..pointcloud import PointCloud, estimate_normals, load_cloud
from ..supervisor import Mode, Supervisor
from . import bridge
from .frames import (
    CommandFrame,
    CommandKind,
    ErrorStatus,
    FrameKind,
    NoticeCode,
    TelemetryFrame,
    decode_frames,
    decode_heartbeat,
    encode_heartbeat,
    encode_notice,
    encode_us_ref,
    frame_to_json_line,
)
from .link import HeartbeatSample, LinkStats, gate_command, measure_link
from .recording import SessionRecorder, replay_session
from .session import Event, Phase, SessionState, transition


class SimulatedArm:
    """The plant: integrates joint velocity commands and reads back
    torque-derived wrenches from the spring phantom."""

    def __init__(self, model, phantom: PhantomModel, q0: np.ndarray):
        self.model = model
        self.phantom = phantom
        self.q = np.asarray(q0, dtype=float).copy()

    def tick(self, qdot: np.ndarray, dt: float) -> None:
        self.q = np.clip(self.q + qdot * dt,
                         self.model.lower_limits, self.model.upper_limits)

    def pose(self) -> Pose:
        return forward_kinematics(self.model, self.q)

    def wrench(self) -> WrenchReading:
        """Joint-torque force sensing: the contact wrench enters the joints
        as tau = J^T w and is converted back at the probe tip."""
        pose = self.pose()
        reaction = contact_force(self.phantom, pose)
        applied = -reaction  # what the probe exerts on the phantom
        J = jacobian(self.model, self.q)
        tau = J.matrix.T @ np.concatenate([applied, np.zeros(3)])
        try:
            return wrench_from_torques(J, tau, pose.probe_axis(),
                                       self.model.sigma_min_threshold,
                                       self.model.char_length_mm)
        except SingularityError:
            return WrenchReading(force=applied, probe_axis=pose.probe_axis())


def build_scene(config: AppConfig):
    """(phantom, surface cloud, arm, supervisor) from a config."""
    phantom = generate_phantom(config.phantom.semi_axes, seed=config.phantom.seed,
                               center=config.phantom.center,
                               stiffness=config.phantom.stiffness)
    if config.cloud_file:
        surface = load_cloud(config.cloud_file)
        if surface.normals is None:
            surface = estimate_normals(surface, k=12)
    else:
        surface = phantom.surface
    q0 = np.array(config.scene.start_config_rad)
    arm = SimulatedArm(config.robot, phantom, q0)
    sup = Supervisor(config.robot, surface, config.filter, config.band, q0)
    return phantom, surface, arm, sup


class TeleopService:
    """One operator, one 500 Hz stream, a JSON bridge, LORA-5 sessions."""

    def __init__(self, config: AppConfig, record_path=None, host: str = "127.0.0.1"):
        self.config = config
        self.host = host
        self.phantom, self.surface, self.arm, self.supervisor = build_scene(config)
        self.patterns = default_patterns()
        self.session = SessionState(recording=record_path is not None)
        self.recorder = SessionRecorder(record_path) if record_path else None
        self.period = 1.0 / config.service.telemetry_hz
        self.heartbeat_every = max(1, int(round(config.service.telemetry_hz
                                                / config.service.heartbeat_hz)))
        self._seq = 0
        self._hb_seq = 0
        self._t_last_us = 0
        self._pending_error = ErrorStatus.OK
        self._raw_pose_queue: queue.Queue = queue.Queue(maxsize=64)
        self._heartbeats = collections.deque(maxlen=64)
        self._mutex = threading.RLock()
        self._operator_sock: socket.socket | None = None
        self._operator_lock = threading.Lock()
        self._bridge_clients: list = []
        self._bridge_lock = threading.Lock()
        self._stop = threading.Event()
        self._threads: list = []
        self.port = None
        self.bridge_port = None
        self._listen_sock = None
        self._bridge_listen = None
        self._us_seq = 0

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> "TeleopService":
        self._listen_sock = socket.create_server((self.host, self.config.service.port
                                                  if self.config.service.port else 0))
        self.port = self._listen_sock.getsockname()[1]
        self._bridge_listen = socket.create_server((self.host,
                                                    self.config.service.bridge_port
                                                    if self.config.service.bridge_port else 0))
        self.bridge_port = self._bridge_listen.getsockname()[1]
        for fn in (self._accept_loop, self._bridge_accept_loop,
                   self._control_loop, self._us_loop):
            t = threading.Thread(target=fn, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        self._stop.set()
        for sock in (self._listen_sock, self._bridge_listen):
            try:
                sock.close()
            except OSError:
                pass
        with self._operator_lock:
            if self._operator_sock is not None:
                try:
                    self._operator_sock.close()
                except OSError:
                    pass
                self._operator_sock = None
        with self._bridge_lock:
            for c in self._bridge_clients:
                try:
                    c.close()
                except OSError:
                    pass
            self._bridge_clients.clear()
        for t in self._threads:
            t.join(timeout=2.0)
        if self.recorder is not None:
            self.recorder.close()
            self.recorder = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    # -- connection handling --------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = self._listen_sock.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._operator_lock:
                if self._operator_sock is not None:
                    try:
                        sock.sendall(encode_notice(NoticeCode.BUSY,
                                                   "an operator is already connected"))
                        sock.close()
                    except OSError:
                        pass
                    continue
                sock.settimeout(0.25)
                self._operator_sock = sock
            threading.Thread(target=self._operator_reader, args=(sock,),
                             daemon=True).start()

    def _operator_reader(self, sock: socket.socket) -> None:
        buf = b""
        sock_timeout = sock.gettimeout()
        sock.settimeout(0.2)
        try:
            while not self._stop.is_set():
                try:
                    data = sock.recv(65536)
                except socket.timeout:
                    continue
                except OSError:
                    break
                if not data:
                    break
                buf += data
                try:
                    frames, buf = decode_frames(buf)
                except ProtocolError:
                    break
                for kind, payload in frames:
                    self._handle_frame(kind, payload)
        finally:
            try:
                sock.settimeout(sock_timeout)
            except OSError:
                pass
            self._on_operator_lost(sock)

    def _on_operator_lost(self, sock: socket.socket) -> None:
        with self._operator_lock:
            if self._operator_sock is sock:
                self._operator_sock = None
        try:
            sock.close()
        except OSError:
            pass
        with self._mutex:
            if self.session.phase in (Phase.MANUAL, Phase.AUTONOMOUS):
                self.supervisor.halt("operator disconnected")
                self.session = transition(self.session, Event("fault"))
                self._pending_error = ErrorStatus.OPERATOR_DISCONNECT

    # -- frame handling -------------------------------------------------------

    def _handle_frame(self, kind: int, payload: bytes) -> None:
        if kind == FrameKind.HEARTBEAT_ECHO:
            seq, t_sent = decode_heartbeat(payload)
            rtt_ms = (time.monotonic_ns() // 1000 - t_sent) / 1000.0
            with self._mutex:
                self._heartbeats.append(HeartbeatSample(seq, rtt_ms, time.monotonic()))
            return
        if kind != FrameKind.COMMAND:
            return
        try:
            cmd = CommandFrame.decode(payload)
        except ProtocolError:
            return
        self.handle_command(cmd, record=True)

    def link_stats(self) -> LinkStats:
        with self._mutex:
            samples = list(self._heartbeats)
        return measure_link(samples, self.config.service.rtt_gate_ms,
                            self.config.service.loss_gate_fraction)

    def handle_command(self, cmd: CommandFrame, record: bool = False) -> str:
        """Gate then apply one operator command; returns 'deliver'/'drop'."""
        verdict = gate_command(cmd, self.link_stats(), self.session)
        if record and self.recorder is not None:
            with self._mutex:
                self.recorder.append_encoded(cmd.encode())
        if verdict == "drop":
            with self._mutex:
                self._pending_error = ErrorStatus.GATE_DROPPED_POSE
            self._notify(NoticeCode.DROPPED, f"pose command {cmd.seq} dropped (gate closed)")
            return "drop"
        with self._mutex:
            self._apply_command(cmd)
        return "deliver"

    def _apply_command(self, cmd: CommandFrame) -> None:
        k = cmd.kind
        try:
            if k is CommandKind.POSE:
                if self.session.phase is Phase.MANUAL:
                    try:
                        self._raw_pose_queue.put_nowait(cmd.pose)
                    except queue.Full:
                        pass
                return
            if k is CommandKind.INIT:
                self.session = transition(self.session, Event("init"))
                threading.Thread(target=self._reconstruct, daemon=True).start()
                return
            if k is CommandKind.SET_KEY_POINT:
                if self.session.phase is not Phase.RECONSTRUCTED:
                    raise IllegalTransitionError(self.session.phase.value, "set-key-point")
                kp = compute_key_points(cmd.point, self.surface, self.phantom.fiducials)
                self.session = transition(self.session, Event("key-points-set"),
                                          key_points=kp)
                return
            if k is CommandKind.SELECT_PATTERN:
                self.session = transition(self.session,
                                          Event("select-pattern", cmd.text))
                return
            if k is CommandKind.SET_MODE:
                new_session = transition(self.session, Event("set-mode", cmd.text))
                if new_session.phase is Phase.AUTONOMOUS:
                    pattern = self.patterns[new_session.selected_pattern]
                    plan = plan_pattern(pattern, new_session.key_points, self.surface)
                    self.supervisor.load_plan(plan)
                    self.supervisor.set_mode(Mode.AUTONOMOUS)
                elif new_session.phase is Phase.MANUAL:
                    self.supervisor.set_mode(Mode.MANUAL)
                self.session = new_session
                return
            if k is CommandKind.PAUSE:
                self.session = transition(self.session, Event("pause"))
                self.supervisor.request_pause()
                return
            if k is CommandKind.RESUME:
                new_session = transition(self.session, Event("resume"))
                if new_session.phase is Phase.AUTONOMOUS:
                    if self.supervisor.plan is None:
                        raise IllegalTransitionError("paused", "resume")
                    self.supervisor.set_mode(Mode.AUTONOMOUS)
                elif new_session.phase is Phase.MANUAL:
                    self.supervisor.set_mode(Mode.MANUAL)
                self.session = new_session
                return
            if k is CommandKind.ANNOTATE:
                if not self.session.allows_annotation():
                    raise IllegalTransitionError(self.session.phase.value, "annotate")
                return  # recorded upstream; annotation is log content
            if k is CommandKind.RESET:
                self.session = transition(self.session, Event("reset"))
                self.supervisor.reset(self.arm.q)
                self.supervisor.set_mode(Mode.MANUAL)
                return
        except IllegalTransitionError as exc:
            self._notify(NoticeCode.REJECTED, str(exc))
        except Exception as exc:  # planning errors etc.: refuse, do not die
            self._notify(NoticeCode.REJECTED, f"{type(exc).__name__}: {exc}")

    def _reconstruct(self) -> None:
        # The surface is preloaded (ground truth or cloud file); the live
        # multi-view pipeline runs through the reconstruct CLI command.
        time.sleep(0.01)
        with self._mutex:
            if self.session.phase is Phase.INITIALIZED:
                self.session = transition(self.session, Event("reconstructed"))

    def _notify(self, code: NoticeCode, message: str) -> None:
        frame = encode_notice(code, message)
        self._send_operator(frame)
        self._broadcast_json(json.dumps(
            {"type": "notice", "code": code.name.lower(), "message": message},
            separators=(",", ":")))

    # -- control loop ---------------------------------------------------------

    def _now_us(self) -> int:
        t = time.monotonic_ns() // 1000
        if t <= self._t_last_us:
            t = self._t_last_us + 1
        self._t_last_us = t
        return t

    def _control_loop(self) -> None:
        next_tick = time.monotonic()
        ticks = 0
        while not self._stop.is_set():
            next_tick += self.period
            delay = next_tick - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            with self._mutex:
                self._tick(ticks)
            ticks += 1

    def _tick(self, ticks: int) -> None:
        raw = None
        while True:  # drain to most recent operator target
            try:
                raw = self._raw_pose_queue.get_nowait()
            except queue.Empty:
                break
        wrench = self.arm.wrench()
        active = self.session.phase in (Phase.MANUAL, Phase.AUTONOMOUS, Phase.PAUSED)
        if active:
            qdot = self.supervisor.step(self.arm.q, wrench,
                                        raw if self.session.phase is Phase.MANUAL else None)
            self.arm.tick(qdot, self.period)
            if self.supervisor.mode is Mode.HALTED and self.session.phase is not Phase.HALTED:
                self.session = transition(self.session, Event("fault"))
                self._pending_error = ErrorStatus.SINGULAR_HALT
            if (self.supervisor.mode is Mode.PAUSED
                    and self.session.phase in (Phase.MANUAL, Phase.AUTONOMOUS)):
                self.session = transition(self.session, Event("pause"))

        has_audience = self._operator_sock is not None or self._bridge_clients
        if not has_audience:
            return
        frame = self._telemetry_frame(wrench)
        encoded = frame.encode()
        if self.recorder is not None:
            self.recorder.append_encoded(encoded)
        self._send_operator(encoded)
        if self._bridge_clients:
            self._broadcast_json(json.dumps(frame.to_json(), separators=(",", ":")))
        if ticks % self.heartbeat_every == 0:
            hb = encode_heartbeat(FrameKind.HEARTBEAT_PING, self._hb_seq, self._now_us())
            self._hb_seq += 1
            self._send_operator(hb)

    def _telemetry_frame(self, wrench: WrenchReading) -> TelemetryFrame:
        snap = self.supervisor.snapshot()
        frame = TelemetryFrame(
            seq=self._seq, t_mono_us=self._now_us(), joints=self.arm.q.copy(),
            cartesian=self.arm.pose(), wrench=wrench,
            mode={Phase.MANUAL: Mode.MANUAL, Phase.AUTONOMOUS: Mode.AUTONOMOUS,
                  Phase.PAUSED: Mode.PAUSED, Phase.HALTED: Mode.HALTED}.get(
                      self.session.phase, self.supervisor.mode),
            haptic=snap.haptic, verdict=snap.filter_verdict,
            error_status=self._pending_error)
        self._seq += 1
        self._pending_error = ErrorStatus.OK
        return frame

    def _send_operator(self, frame: bytes) -> None:
        with self._operator_lock:
            sock = self._operator_sock
        if sock is None:
            return
        try:
            sock.sendall(frame)
        except (OSError, socket.timeout):
            self._on_operator_lost(sock)

    # -- console bridge -------------------------------------------------------

    def _bridge_accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = self._bridge_listen.accept()
            except OSError:
                return
            threading.Thread(target=self._bridge_client, args=(sock,),
                             daemon=True).start()

    def _bridge_client(self, sock: socket.socket) -> None:
        try:
            bridge.server_handshake(sock)
        except Exception:
            sock.close()
            return
        sock.settimeout(0.25)
        with self._bridge_lock:
            self._bridge_clients.append(sock)
        try:
            sock_reader = sock
            sock_reader.settimeout(0.2)
            while not self._stop.is_set():
                try:
                    op, payload = bridge.recv_message(sock_reader)
                except socket.timeout:
                    continue
                except (OSError, ConnectionError):
                    break
                if op == bridge.OP_CLOSE:
                    break
                try:
                    obj = json.loads(payload.decode("utf-8"))
                    if obj.get("type") == "command":
                        self.handle_command(CommandFrame.from_json(obj), record=True)
                except (ValueError, ProtocolError, KeyError):
                    continue
        finally:
            with self._bridge_lock:
                if sock in self._bridge_clients:
                    self._bridge_clients.remove(sock)
            try:
                sock.close()
            except OSError:
                pass

    def _broadcast_json(self, line: str) -> None:
        with self._bridge_lock:
            clients = list(self._bridge_clients)
        dead = []
        for c in clients:
            try:
                bridge.send_message(c, line)
            except (OSError, socket.timeout):
                dead.append(c)
        if dead:
            with self._bridge_lock:
                for c in dead:
                    if c in self._bridge_clients:
                        self._bridge_clients.remove(c)

    def _us_loop(self) -> None:
        period = 1.0 / self.config.service.us_frame_hz
        while not self._stop.is_set():
            time.sleep(period)
            with self._bridge_lock:
                have_clients = bool(self._bridge_clients)
            if not have_clients and self.recorder is None:
                continue
            with self._mutex:
                pose = self.arm.pose()
            frame = us_slice(self.phantom, pose)
            self._us_seq += 1
            t_us = self._now_us()
            if self.recorder is not None:
                with self._mutex:
                    self.recorder.append_encoded(encode_us_ref(self._us_seq, t_us))
            if have_clients:
                h, w = frame.pixels.shape
                self._broadcast_json(json.dumps({
                    "type": "us-frame", "seq": self._us_seq, "t_us": t_us,
                    "w": w, "h": h, "in_view": frame.in_view,
                    "b64": base64.b64encode(frame.pixels.tobytes()).decode("ascii"),
                }, separators=(",", ":")))


class ReplayService:
    """Streams a recorded session log over the same two ports.

    Telemetry frames are reproduced bit-exactly at the recorded cadence
    scaled by ``speed``; inbound commands are acknowledged with a notice
    but drive nothing.
    """

    def __init__(self, log_path, speed: float = 1.0, host: str = "127.0.0.1",
                 port: int = 0, bridge_port: int = 0, loop: bool = False):
        self.log_path = log_path
        self.speed = speed
        self.host = host
        self._port_req = port
        self._bridge_req = bridge_port
        self.loop = loop
        self._stop = threading.Event()
        self._operator: socket.socket | None = None
        self._op_lock = threading.Lock()
        self._bridge_clients: list = []
        self._bridge_lock = threading.Lock()
        self._threads = []
        self.port = None
        self.bridge_port = None

    def start(self) -> "ReplayService":
        self._listen = socket.create_server((self.host, self._port_req))
        self.port = self._listen.getsockname()[1]
        self._bridge_listen = socket.create_server((self.host, self._bridge_req))
        self.bridge_port = self._bridge_listen.getsockname()[1]
        for fn in (self._accept_loop, self._bridge_accept_loop, self._pump):
            t = threading.Thread(target=fn, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        self._stop.set()
        for s in (self._listen, self._bridge_listen):
            try:
                s.close()
            except OSError:
                pass
        with self._op_lock:
            if self._operator:
                try:
                    self._operator.close()
                except OSError:
                    pass
        with self._bridge_lock:
            for c in self._bridge_clients:
                try:
                    c.close()
                except OSError:
                    pass
            self._bridge_clients.clear()
        for t in self._threads:
            t.join(timeout=2.0)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = self._listen.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.settimeout(0.25)
            with self._op_lock:
                old = self._operator
                self._operator = sock
            if old:
                try:
                    old.close()
                except OSError:
                    pass

    def _bridge_accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = self._bridge_listen.accept()
            except OSError:
                return
            try:
                bridge.server_handshake(sock)
            except Exception:
                sock.close()
                continue
            sock.settimeout(0.2)
            with self._bridge_lock:
                self._bridge_clients.append(sock)
            threading.Thread(target=self._bridge_reader, args=(sock,), daemon=True).start()

    def _bridge_reader(self, sock: socket.socket) -> None:
        while not self._stop.is_set():
            try:
                op, payload = bridge.recv_message(sock)
            except socket.timeout:
                continue
            except (OSError, ConnectionError):
                break
            if op == bridge.OP_CLOSE:
                break
            # Acknowledge commands so the console round trip is observable.
            try:
                obj = json.loads(payload.decode("utf-8"))
                if obj.get("type") == "command":
                    ack = json.dumps({"type": "notice", "code": "info",
                                      "message": f"replay: command {obj.get('kind')} received"},
                                     separators=(",", ":"))
                    bridge.send_message(sock, ack)
            except (ValueError, OSError):
                continue
        with self._bridge_lock:
            if sock in self._bridge_clients:
                self._bridge_clients.remove(sock)
        try:
            sock.close()
        except OSError:
            pass

    def _pump(self) -> None:
        # Replay only once someone is listening; an unpaced replay would
        # otherwise drain before the first client connects.
        while not self._stop.is_set():
            with self._op_lock:
                have_op = self._operator is not None
            with self._bridge_lock:
                have_bridge = bool(self._bridge_clients)
            if have_op or have_bridge:
                break
            time.sleep(0.01)
        while not self._stop.is_set():
            for kind, payload in replay_session(self.log_path, self.speed):
                if self._stop.is_set():
                    return
                raw = None
                with self._op_lock:
                    op_sock = self._operator
                if op_sock is not None:
                    from .frames import encode_frame
                    raw = encode_frame(kind, payload)
                    try:
                        op_sock.sendall(raw)
                    except (OSError, socket.timeout):
                        with self._op_lock:
                            if self._operator is op_sock:
                                self._operator = None
                with self._bridge_lock:
                    clients = list(self._bridge_clients)
                if clients:
                    try:
                        line = frame_to_json_line(kind, payload)
                    except ProtocolError:
                        continue
                    for c in clients:
                        try:
                            bridge.send_message(c, line)
                        except (OSError, socket.timeout):
                            with self._bridge_lock:
                                if c in self._bridge_clients:
                                    self._bridge_clients.remove(c)
            if not self.loop:
                break
        self._stop.set()
