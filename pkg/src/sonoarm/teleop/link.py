"""Link-quality monitoring and command gating.

The service pings the operator at heartbeat rate; echoes yield round-trip
times. Motion commands are only delivered while the measured link is good
(rtt at or below the gate, negligible loss); safety commands always pass.
"""

from __future__ import annotations

from dataclasses import dataclass

from .frames import CommandFrame

RTT_GATE_MS = 8.0          # the demo steers only below this round trip
LOSS_GATE_FRACTION = 0.01
JITTER_ALPHA = 1.0 / 16.0  # RFC-3550-style smoothing of |delta rtt|
RTT_ALPHA = 1.0 / 8.0
LOSS_WINDOW_S = 1.0


@dataclass(frozen=True)
class HeartbeatSample:
    """One ping outcome; rtt_ms is None when the echo never came back."""

    seq: int
    rtt_ms: float | None
    t_mono: float       # seconds, when the echo arrived or was given up on


@dataclass(frozen=True)
class LinkStats:
    rtt_last_ms: float
    rtt_ewma_ms: float
    jitter_ms: float
    loss_fraction: float
    gate_open: bool
    samples: int = 0


def measure_link(samples, rtt_gate_ms: float = RTT_GATE_MS,
                 loss_gate_fraction: float = LOSS_GATE_FRACTION,
                 loss_window_s: float = LOSS_WINDOW_S) -> LinkStats:
    """Fold a heartbeat history into link statistics.

    Needs at least two completed round trips before the gate can open;
    loss is counted over the trailing window.
    """
    received = [s for s in samples if s.rtt_ms is not None]
    if len(received) < 2:
        return LinkStats(float("inf"), float("inf"), float("inf"), 1.0, False,
                         len(received))
    rtt_ewma = received[0].rtt_ms
    jitter = 0.0
    prev = received[0].rtt_ms
    for s in received[1:]:
        rtt_ewma += RTT_ALPHA * (s.rtt_ms - rtt_ewma)
        jitter += JITTER_ALPHA * (abs(s.rtt_ms - prev) - jitter)
        prev = s.rtt_ms
    rtt_last = received[-1].rtt_ms

    newest = max(s.t_mono for s in samples)
    windowed = [s for s in samples if newest - s.t_mono <= loss_window_s]
    lost = sum(1 for s in windowed if s.rtt_ms is None)
    loss = lost / len(windowed) if windowed else 0.0

    gate = rtt_last <= rtt_gate_ms and loss < loss_gate_fraction
    return LinkStats(rtt_last, rtt_ewma, jitter, loss, gate, len(received))


def gate_command(cmd: CommandFrame, stats: LinkStats, session=None) -> str:
    """'deliver' or 'drop'. Only motion (pose) commands are ever gated;
    pause/annotate/reset and the rest are safety or bookkeeping and always
    go through."""
    if cmd.kind.is_motion and not stats.gate_open:
        return "drop"
    return "deliver"
