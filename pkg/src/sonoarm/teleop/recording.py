"""Append-only session logs and their replay.

A log is the 16-byte magic header followed by the binary wire frames,
concatenated verbatim. Replay stops cleanly at the first corrupt record
(bad length prefix or checksum) and reproduces everything before it
bit-exactly.
"""

from __future__ import annotations

import time

from ..errors import ProtocolError
from .frames import (
    CRC,
    HEADER,
    KIND,
    LOG_HEADER,
    FrameKind,
    decode_frames,
    encode_frame,
)
import struct
import zlib


class SessionRecorder:
    """Writes frames as they pass through the service."""

    def __init__(self, path):
        self._fh = open(path, "wb")
        self._fh.write(LOG_HEADER)

    def append(self, kind: int, payload: bytes) -> None:
        self._fh.write(encode_frame(kind, payload))

    def append_encoded(self, frame: bytes) -> None:
        self._fh.write(frame)

    def close(self) -> None:
        self._fh.flush()
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_log(path):
    """All (kind, payload) records up to the first corruption."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(LOG_HEADER)] != LOG_HEADER:
        raise ProtocolError("not a sonoarm session log (bad magic header)")
    buf = blob[len(LOG_HEADER):]
    frames = []
    off = 0
    while len(buf) - off >= HEADER.size:
        (length,) = HEADER.unpack_from(buf, off)
        if length < KIND.size + CRC.size or length > 1 << 24:
            break  # corrupt length prefix: stop at last valid record
        if len(buf) - off - HEADER.size < length:
            break  # truncated tail
        start = off + HEADER.size
        body = buf[start:start + length - CRC.size]
        (crc,) = CRC.unpack_from(buf, start + length - CRC.size)
        if zlib.crc32(body) != crc:
            break  # corrupt checksum
        frames.append((body[0], bytes(body[1:])))
        off = start + length
    return frames


def _frame_time_us(kind: int, payload: bytes) -> int | None:
    # Telemetry, commands and heartbeats all lead with (seq: u64, t: u64).
    if kind in (FrameKind.TELEMETRY, FrameKind.COMMAND,
                FrameKind.HEARTBEAT_PING, FrameKind.HEARTBEAT_ECHO,
                FrameKind.US_REF):
        try:
            _, t = struct.unpack_from("<QQ", payload)
            return t
        except struct.error:
            return None
    return None


def replay_session(path, speed: float = 1.0):
    """Yield (kind, payload) at the recorded cadence scaled by speed.

    speed == 0 replays as fast as possible (test harness mode).
    """
    frames = read_log(path)
    prev_t = None
    for kind, payload in frames:
        t = _frame_time_us(kind, payload)
        if speed > 0.0 and t is not None and prev_t is not None and t > prev_t:
            time.sleep((t - prev_t) / 1e6 / speed)
        if t is not None:
            prev_t = t
        yield kind, payload


__all__ = ["SessionRecorder", "read_log", "replay_session", "decode_frames"]
