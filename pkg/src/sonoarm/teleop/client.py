"""Operator-side client for the binary protocol.

Used by the test harness and CLI loopback runs. Heartbeat echoes are
controlled by an injectable policy so link tests can shape round-trip
times and drop rates deterministically.
"""

from __future__ import annotations

import collections
import socket
import threading
import time

import numpy as np

from ..errors import ProtocolError
from ..geometry import Pose
from .frames import (
    CommandFrame,
    CommandKind,
    FrameKind,
    TelemetryFrame,
    decode_frames,
    decode_heartbeat,
    decode_notice,
    encode_heartbeat,
)


class OperatorClient:
    """Connects to a service, gathers telemetry, answers heartbeats.

    ``echo_policy(seq) -> delay_seconds | None`` shapes the measured link:
    None drops the echo entirely. The default echoes immediately.
    """

    def __init__(self, host: str, port: int, echo_policy=None,
                 telemetry_capacity: int = 20000):
        self.sock = socket.create_connection((host, port), timeout=5.0)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock.settimeout(0.2)
        self.echo_policy = echo_policy or (lambda seq: 0.0)
        self.telemetry = collections.deque(maxlen=telemetry_capacity)
        self.notices: list = []
        self.pings_seen = 0
        self._seq = 0
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    # -- outbound -------------------------------------------------------------

    def _send(self, frame: bytes) -> None:
        with self._lock:
            self.sock.sendall(frame)

    def send_command(self, kind: CommandKind, **kwargs) -> int:
        seq = self._seq
        self._seq += 1
        cmd = CommandFrame(seq=seq, t_sent_us=time.monotonic_ns() // 1000,
                           kind=kind, **kwargs)
        self._send(cmd.encode())
        return seq

    def send_pose(self, pose: Pose) -> int:
        return self.send_command(CommandKind.POSE, pose=pose)

    def init_session(self) -> int:
        return self.send_command(CommandKind.INIT)

    def set_key_point(self, name: str, point) -> int:
        return self.send_command(CommandKind.SET_KEY_POINT, text=name,
                                 point=np.asarray(point, dtype=float))

    def select_pattern(self, pattern_id: str) -> int:
        return self.send_command(CommandKind.SELECT_PATTERN, text=pattern_id)

    def set_mode(self, mode: str) -> int:
        return self.send_command(CommandKind.SET_MODE, text=mode)

    def pause(self) -> int:
        return self.send_command(CommandKind.PAUSE)

    def resume(self) -> int:
        return self.send_command(CommandKind.RESUME)

    def annotate(self, label: str, us_ref: int = 0) -> int:
        return self.send_command(CommandKind.ANNOTATE, text=label, us_ref=us_ref)

    def reset(self) -> int:
        return self.send_command(CommandKind.RESET)

    # -- inbound --------------------------------------------------------------

    def _read_loop(self) -> None:
        buf = b""
        while not self._stop.is_set():
            try:
                data = self.sock.recv(65536)
            except socket.timeout:
                continue
            except OSError:
                return
            if not data:
                return
            buf += data
            try:
                frames, buf = decode_frames(buf)
            except ProtocolError:
                return
            for kind, payload in frames:
                self._dispatch(kind, payload)

    def _dispatch(self, kind: int, payload: bytes) -> None:
        if kind == FrameKind.TELEMETRY:
            self.telemetry.append(TelemetryFrame.decode(payload))
        elif kind == FrameKind.HEARTBEAT_PING:
            self.pings_seen += 1
            seq, t_sent = decode_heartbeat(payload)
            delay = self.echo_policy(seq)
            if delay is None:
                return
            if delay <= 0.0:
                self._echo(seq, t_sent)
            else:
                timer = threading.Timer(delay, self._echo, args=(seq, t_sent))
                timer.daemon = True
                timer.start()
        elif kind == FrameKind.NOTICE:
            self.notices.append(decode_notice(payload))

    def _echo(self, seq: int, t_sent: int) -> None:
        try:
            self._send(encode_heartbeat(FrameKind.HEARTBEAT_ECHO, seq, t_sent))
        except OSError:
            pass

    def latest(self) -> TelemetryFrame | None:
        return self.telemetry[-1] if self.telemetry else None

    def wait_for(self, predicate, timeout: float = 5.0, poll: float = 0.01):
        """Newest telemetry frame satisfying the predicate, or None."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            frame = self.latest()
            if frame is not None and predicate(frame):
                return frame
            time.sleep(poll)
        return None

    def close(self) -> None:
        self._stop.set()
        try:
            self.sock.close()
        except OSError:
            pass
        self._reader.join(timeout=1.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
