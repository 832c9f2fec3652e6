"""Session state machine.

The autonomy level is a fixed option menu: the operator initializes,
the surface is reconstructed, key points are set, then the operator picks
manual mode or one of the predefined scan patterns. Faults from any phase
land in halted; reset returns to idle.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

from ..errors import IllegalTransitionError
from ..planner import PATTERN_IDS


class Phase(str, enum.Enum):
    IDLE = "idle"
    INITIALIZED = "initialized"
    RECONSTRUCTED = "reconstructed"
    READY = "ready"
    MANUAL = "manual"
    AUTONOMOUS = "autonomous"
    PAUSED = "paused"
    HALTED = "halted"


@dataclass(frozen=True)
class Event:
    name: str          # init | reconstructed | key-points-set | select-pattern
    value: str = ""    # | set-mode | pause | resume | fault | reset

    def __repr__(self):
        return f"Event({self.name}{':' + self.value if self.value else ''})"


@dataclass(frozen=True)
class SessionState:
    phase: Phase = Phase.IDLE
    selected_pattern: str | None = None
    key_points: object | None = None
    recording: bool = False
    resume_target: Phase = Phase.MANUAL

    def allows_annotation(self) -> bool:
        return self.phase is Phase.PAUSED


_MODE_PHASES = {"manual": Phase.MANUAL, "autonomous": Phase.AUTONOMOUS}

# Phases in which the operator may (re)select how to drive.
_DRIVE_SELECTABLE = (Phase.READY, Phase.MANUAL, Phase.AUTONOMOUS, Phase.PAUSED)


def transition(state: SessionState, event: Event, key_points=None) -> SessionState:
    """Apply one event; raises IllegalTransitionError (state unchanged) when
    the event is not legal in the current phase."""
    phase = state.phase
    name = event.name

    if name == "fault":
        return replace(state, phase=Phase.HALTED)
    if name == "reset":
        if phase is not Phase.HALTED:
            raise IllegalTransitionError(phase.value, name)
        return SessionState(recording=state.recording)

    if name == "init":
        if phase is not Phase.IDLE:
            raise IllegalTransitionError(phase.value, name)
        return replace(state, phase=Phase.INITIALIZED)

    if name == "reconstructed":
        if phase is not Phase.INITIALIZED:
            raise IllegalTransitionError(phase.value, name)
        return replace(state, phase=Phase.RECONSTRUCTED)

    if name == "key-points-set":
        if phase is not Phase.RECONSTRUCTED:
            raise IllegalTransitionError(phase.value, name)
        return replace(state, phase=Phase.READY, key_points=key_points)

    if name == "select-pattern":
        if phase not in _DRIVE_SELECTABLE:
            raise IllegalTransitionError(phase.value, event)
        if event.value not in PATTERN_IDS:
            raise IllegalTransitionError(phase.value, event)
        return replace(state, selected_pattern=event.value)

    if name == "set-mode":
        target = _MODE_PHASES.get(event.value)
        if target is None or phase not in _DRIVE_SELECTABLE:
            raise IllegalTransitionError(phase.value, event)
        if target is Phase.AUTONOMOUS and state.selected_pattern is None:
            raise IllegalTransitionError(phase.value, event)
        if phase is Phase.PAUSED:
            # While paused, mode selection only retargets what resume enters.
            return replace(state, resume_target=target)
        return replace(state, phase=target, resume_target=target)

    if name == "pause":
        if phase not in (Phase.MANUAL, Phase.AUTONOMOUS):
            raise IllegalTransitionError(phase.value, name)
        return replace(state, phase=Phase.PAUSED, resume_target=phase)

    if name == "resume":
        if phase is not Phase.PAUSED:
            raise IllegalTransitionError(phase.value, name)
        return replace(state, phase=state.resume_target)

    if name == "set-recording":
        return replace(state, recording=event.value == "on")

    raise IllegalTransitionError(phase.value, name)
