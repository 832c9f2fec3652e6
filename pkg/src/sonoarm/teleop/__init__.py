"""Networked boundary: 500 Hz telemetry streaming, the operator command
channel, link monitoring with command gating, the session state machine,
and session recording/replay."""

from .frames import (  # noqa: F401
    CommandFrame,
    CommandKind,
    FrameKind,
    TelemetryFrame,
)
from .link import HeartbeatSample, LinkStats, gate_command, measure_link  # noqa: F401
from .session import Event, Phase, SessionState, transition  # noqa: F401
