"""Wire units of the state stream and the operator command channel.

Binary layout (little endian): every frame is
``u32 length | u8 kind | payload | u32 crc32`` where length counts kind +
payload + crc and the CRC covers kind + payload. The same frames travel as
line-delimited JSON over the console bridge.
"""

from __future__ import annotations

import enum
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from ..errors import ProtocolError
from ..geometry import Pose
from ..kinematics import WrenchReading
from ..motion_filter import FilterReason, FilterVerdict
from ..supervisor import Mode

HEADER = struct.Struct("<I")
KIND = struct.Struct("<B")
CRC = struct.Struct("<I")

LOG_MAGIC = b"SONOARMLOG\x00\x00"          # 12 bytes
LOG_VERSION = 1
LOG_HEADER = LOG_MAGIC + struct.pack("<HH", LOG_VERSION, 0)  # 16 bytes


class FrameKind(enum.IntEnum):
    TELEMETRY = 1
    COMMAND = 2
    HEARTBEAT_PING = 3
    HEARTBEAT_ECHO = 4
    US_REF = 5
    NOTICE = 6


class CommandKind(enum.IntEnum):
    POSE = 1
    SELECT_PATTERN = 2
    SET_MODE = 3
    PAUSE = 4
    RESUME = 5
    SET_KEY_POINT = 6
    ANNOTATE = 7
    RESET = 8
    INIT = 9

    @property
    def is_motion(self) -> bool:
        return self is CommandKind.POSE


class ErrorStatus(enum.IntEnum):
    OK = 0
    GATE_DROPPED_POSE = 1
    SINGULAR_HALT = 2
    OPERATOR_DISCONNECT = 3
    FAULT = 4


_MODES = tuple(Mode)
_REASONS = tuple(FilterReason)


def encode_frame(kind: int, payload: bytes) -> bytes:
    body = KIND.pack(kind) + payload
    return HEADER.pack(len(body) + CRC.size) + body + CRC.pack(zlib.crc32(body))


def decode_frames(buf: bytes):
    """Yield (kind, payload) for each complete frame; returns leftover bytes.

    Raises ProtocolError on a bad checksum or an impossible length.
    """
    frames = []
    off = 0
    while len(buf) - off >= HEADER.size:
        (length,) = HEADER.unpack_from(buf, off)
        if length < KIND.size + CRC.size or length > 1 << 24:
            raise ProtocolError(f"implausible frame length {length}")
        if len(buf) - off - HEADER.size < length:
            break
        start = off + HEADER.size
        body = buf[start:start + length - CRC.size]
        (crc,) = CRC.unpack_from(buf, start + length - CRC.size)
        if zlib.crc32(body) != crc:
            raise ProtocolError("frame checksum mismatch")
        frames.append((body[0], bytes(body[1:])))
        off = start + length
    return frames, buf[off:]


# ---------------------------------------------------------------------------
# telemetry

_TELEMETRY = struct.Struct("<QQ7d3d4d3ddd3dBdBBB")


@dataclass(frozen=True)
class TelemetryFrame:
    seq: int
    t_mono_us: int
    joints: np.ndarray
    cartesian: Pose
    wrench: WrenchReading
    mode: Mode
    haptic: float
    verdict: FilterVerdict
    error_status: ErrorStatus = ErrorStatus.OK

    def encode(self) -> bytes:
        w = self.wrench
        payload = _TELEMETRY.pack(
            self.seq, self.t_mono_us,
            *np.asarray(self.joints, dtype=float),
            *self.cartesian.position, *self.cartesian.orientation,
            *w.force, w.f_resultant, w.f_probe, *w.probe_axis,
            _MODES.index(self.mode), self.haptic,
            1 if self.verdict.accepted else 0, _REASONS.index(self.verdict.reason),
            int(self.error_status))
        return encode_frame(FrameKind.TELEMETRY, payload)

    @staticmethod
    def decode(payload: bytes) -> "TelemetryFrame":
        try:
            vals = _TELEMETRY.unpack(payload)
        except struct.error as exc:
            raise ProtocolError(f"bad telemetry payload: {exc}") from exc
        joints = np.array(vals[2:9])
        pose = Pose(np.array(vals[9:12]), np.array(vals[12:16]))
        wrench = WrenchReading(force=np.array(vals[16:19]),
                               probe_axis=np.array(vals[21:24]))
        return TelemetryFrame(
            seq=vals[0], t_mono_us=vals[1], joints=joints, cartesian=pose,
            wrench=wrench, mode=_MODES[vals[24]], haptic=vals[25],
            verdict=FilterVerdict(bool(vals[26]), _REASONS[vals[27]]),
            error_status=ErrorStatus(vals[28]))

    def to_json(self) -> dict:
        w = self.wrench
        return {
            "type": "telemetry", "seq": self.seq, "t_us": self.t_mono_us,
            "joints": list(map(float, self.joints)),
            "position": list(map(float, self.cartesian.position)),
            "orientation": list(map(float, self.cartesian.orientation)),
            "force": list(map(float, w.force)),
            "f_resultant": w.f_resultant, "f_probe": w.f_probe,
            "probe_axis": list(map(float, w.probe_axis)),
            "mode": self.mode.value, "haptic": self.haptic,
            "verdict": {"accepted": self.verdict.accepted,
                        "reason": self.verdict.reason.value},
            "error_status": int(self.error_status),
        }


# ---------------------------------------------------------------------------
# commands

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(payload: bytes, off: int):
    (n,) = struct.unpack_from("<H", payload, off)
    off += 2
    return payload[off:off + n].decode("utf-8"), off + n


_POSE7 = struct.Struct("<3d4d")


@dataclass(frozen=True)
class CommandFrame:
    seq: int
    t_sent_us: int
    kind: CommandKind
    pose: Pose | None = None
    text: str = ""                 # pattern id, mode name, key-point name, label
    point: np.ndarray | None = None
    us_ref: int = 0

    def __post_init__(self):
        if self.kind is CommandKind.POSE and self.pose is None:
            raise ProtocolError("pose command without a pose payload")
        if self.kind in (CommandKind.SELECT_PATTERN, CommandKind.SET_MODE,
                         CommandKind.SET_KEY_POINT) and not self.text:
            raise ProtocolError(f"{self.kind.name} command without its text payload")
        if self.kind is CommandKind.SET_KEY_POINT and self.point is None:
            raise ProtocolError("set-key-point command without a point")

    def encode(self) -> bytes:
        head = struct.pack("<QQB", self.seq, self.t_sent_us, int(self.kind))
        k = self.kind
        if k is CommandKind.POSE:
            body = _POSE7.pack(*self.pose.position, *self.pose.orientation)
        elif k in (CommandKind.SELECT_PATTERN, CommandKind.SET_MODE):
            body = _pack_str(self.text)
        elif k is CommandKind.SET_KEY_POINT:
            body = _pack_str(self.text) + struct.pack("<3d", *self.point)
        elif k is CommandKind.ANNOTATE:
            body = struct.pack("<Q", self.us_ref) + _pack_str(self.text)
        else:
            body = b""
        return encode_frame(FrameKind.COMMAND, head + body)

    @staticmethod
    def decode(payload: bytes) -> "CommandFrame":
        try:
            seq, t_sent, kind_raw = struct.unpack_from("<QQB", payload)
            kind = CommandKind(kind_raw)
            off = 17
            pose = None
            text = ""
            point = None
            us_ref = 0
            if kind is CommandKind.POSE:
                vals = _POSE7.unpack_from(payload, off)
                pose = Pose(np.array(vals[:3]), np.array(vals[3:]))
            elif kind in (CommandKind.SELECT_PATTERN, CommandKind.SET_MODE):
                text, off = _unpack_str(payload, off)
            elif kind is CommandKind.SET_KEY_POINT:
                text, off = _unpack_str(payload, off)
                point = np.array(struct.unpack_from("<3d", payload, off))
            elif kind is CommandKind.ANNOTATE:
                (us_ref,) = struct.unpack_from("<Q", payload, off)
                text, off = _unpack_str(payload, off + 8)
        except (struct.error, ValueError) as exc:
            raise ProtocolError(f"bad command payload: {exc}") from exc
        return CommandFrame(seq, t_sent, kind, pose, text, point, us_ref)

    def to_json(self) -> dict:
        out = {"type": "command", "seq": self.seq, "t_us": self.t_sent_us,
               "kind": self.kind.name.lower().replace("_", "-")}
        if self.pose is not None:
            out["position"] = list(map(float, self.pose.position))
            out["orientation"] = list(map(float, self.pose.orientation))
        if self.text:
            out["text"] = self.text
        if self.point is not None:
            out["point"] = list(map(float, self.point))
        if self.kind is CommandKind.ANNOTATE:
            out["us_ref"] = self.us_ref
        return out

    @staticmethod
    def from_json(obj: dict) -> "CommandFrame":
        kind = CommandKind[obj["kind"].upper().replace("-", "_")]
        pose = None
        if "position" in obj:
            pose = Pose(np.array(obj["position"], dtype=float),
                        np.array(obj["orientation"], dtype=float))
        point = np.array(obj["point"], dtype=float) if "point" in obj else None
        return CommandFrame(int(obj.get("seq", 0)), int(obj.get("t_us", 0)), kind,
                            pose, obj.get("text", ""), point, int(obj.get("us_ref", 0)))


# ---------------------------------------------------------------------------
# heartbeats, notices, us references

_HEARTBEAT = struct.Struct("<QQ")


def encode_heartbeat(kind: FrameKind, seq: int, t_us: int) -> bytes:
    return encode_frame(kind, _HEARTBEAT.pack(seq, t_us))


def decode_heartbeat(payload: bytes):
    try:
        return _HEARTBEAT.unpack(payload)
    except struct.error as exc:
        raise ProtocolError(f"bad heartbeat payload: {exc}") from exc


class NoticeCode(enum.IntEnum):
    INFO = 0
    BUSY = 1
    REJECTED = 2
    DROPPED = 3


def encode_notice(code: NoticeCode, message: str) -> bytes:
    return encode_frame(FrameKind.NOTICE, struct.pack("<B", int(code)) + _pack_str(message))


def decode_notice(payload: bytes):
    code = NoticeCode(payload[0])
    message, _ = _unpack_str(payload, 1)
    return code, message


_US_REF = struct.Struct("<QQ")


def encode_us_ref(us_seq: int, t_us: int) -> bytes:
    return encode_frame(FrameKind.US_REF, _US_REF.pack(us_seq, t_us))


def decode_us_ref(payload: bytes):
    try:
        return _US_REF.unpack(payload)
    except struct.error as exc:
        raise ProtocolError(f"bad us-ref payload: {exc}") from exc


def frame_to_json_line(kind: int, payload: bytes) -> str:
    """Console-bridge text encoding of any wire frame."""
    k = FrameKind(kind)
    if k is FrameKind.TELEMETRY:
        obj = TelemetryFrame.decode(payload).to_json()
    elif k is FrameKind.COMMAND:
        obj = CommandFrame.decode(payload).to_json()
    elif k in (FrameKind.HEARTBEAT_PING, FrameKind.HEARTBEAT_ECHO):
        seq, t = decode_heartbeat(payload)
        obj = {"type": "heartbeat", "echo": k is FrameKind.HEARTBEAT_ECHO,
               "seq": seq, "t_us": t}
    elif k is FrameKind.NOTICE:
        code, message = decode_notice(payload)
        obj = {"type": "notice", "code": code.name.lower(), "message": message}
    else:
        us_seq, t = decode_us_ref(payload)
        obj = {"type": "us-ref", "seq": us_seq, "t_us": t}
    return json.dumps(obj, separators=(",", ":"))
