"""Streaming endpoint detection.

A DetectorSession consumes one frame at a time, advances the model's
recurrent state, and emits an endpoint event the first time the turn-end
probability reaches the session threshold while that speaker's detection
is armed. Detection disarms after firing (at most one event per armed
interval) and re-arms either explicitly or when system activity is
observed: single-stream sessions watch the input activity flag,
two-stream sessions watch the model's own system prediction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .labels import LABEL_SYSTEM, LABEL_SYSTEM_END, LABEL_USER_END
from .model import ModelCheckpoint, SINGLE_STREAM, StreamState, forward_step
from .features import FeatureSequence
from .labels import SystemActivitySequence

USER_END = "user_end"
SYSTEM_END = "system_end"

EVENT_CLASS = {USER_END: LABEL_USER_END, SYSTEM_END: LABEL_SYSTEM_END}


@dataclass
class EndpointEvent:
    kind: str                   # "user_end" or "system_end"
    frame_index: int
    time_ms: int                # frame_index * frame period, rounded to ms

    @classmethod
    def at(cls, kind: str, frame_index: int, frame_rate_hz: float) -> "EndpointEvent":
        return cls(kind=kind, frame_index=frame_index,
                   time_ms=int(round(frame_index * 1000.0 / frame_rate_hz)))


class _TriggerPolicy:
    """Arming/threshold logic shared by the live session and offline scans."""

    def __init__(self, threshold: float, arm_user: bool = True,
                 arm_system: bool = False):
        self.threshold = threshold
        self.armed = {USER_END: arm_user, SYSTEM_END: arm_system}

    def rearm(self, kind: str) -> None:
        if kind not in self.armed:
            raise ValueError(f"unknown endpoint kind {kind!r}")
        self.armed[kind] = True

    def observe(self, probs: np.ndarray, frame_index: int, frame_rate_hz: float,
                system_active: bool) -> Optional[EndpointEvent]:
        if system_active:
            self.armed[USER_END] = True
        for kind in (USER_END, SYSTEM_END):
            if self.armed[kind] and probs[EVENT_CLASS[kind]] >= self.threshold:
                self.armed[kind] = False
                return EndpointEvent.at(kind, frame_index, frame_rate_hz)
        return None


class DetectorSession:
    """Stateful per-dialogue endpoint detector. Drive from a single caller."""

    def __init__(self, checkpoint: ModelCheckpoint, threshold: float,
                 frame_rate_hz: float, arm_system: bool = False):
        if not 0.0 < threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
        self.checkpoint = checkpoint
        self.threshold = threshold
        self.frame_rate_hz = frame_rate_hz
        self.frame_index = 0
        self._state = StreamState(checkpoint.config)
        self._policy = _TriggerPolicy(threshold, arm_user=True,
                                      arm_system=arm_system)
        self._closed = False

    @property
    def armed(self) -> dict[str, bool]:
        return dict(self._policy.armed)

    def step(self, frames, sys_active: Optional[int] = None
             ) -> tuple[np.ndarray, Optional[EndpointEvent]]:
        """Advance one frame; returns (probs, event or None)."""
        if self._closed:
            raise RuntimeError("step() after close()")
        probs = forward_step(self.checkpoint, self._state, frames,
                             sys_active=sys_active)
        system_seen = self._system_observed(probs, sys_active)
        event = self._policy.observe(probs, self.frame_index,
                                     self.frame_rate_hz, system_seen)
        self.frame_index += 1
        return probs, event

    def rearm(self, kind: str = USER_END) -> None:
        """Re-enable detection for a speaker; idempotent."""
        self._policy.rearm(kind)

    def close(self) -> None:
        self._closed = True

    def _system_observed(self, probs: np.ndarray,
                         sys_active: Optional[int]) -> bool:
        if self.checkpoint.config.arch == SINGLE_STREAM:
            return bool(sys_active)
        return int(np.argmax(probs)) == LABEL_SYSTEM


def scan_events(probs: np.ndarray, threshold: float, frame_rate_hz: float,
                sys_flags: Optional[np.ndarray] = None,
                arm_system: bool = False,
                two_stream: bool = False) -> list[EndpointEvent]:
    """Offline event scan over a (T, 4) probability matrix.

    Applies the exact arming policy of a live session, so a recorded
    probability trace yields the same events a streaming run would emit.
    """
    policy = _TriggerPolicy(threshold, arm_user=True, arm_system=arm_system)
    events = []
    for t in range(probs.shape[0]):
        row = probs[t]
        if two_stream:
            system_seen = int(np.argmax(row)) == LABEL_SYSTEM
        else:
            system_seen = bool(sys_flags[t]) if sys_flags is not None else False
        event = policy.observe(row, t, frame_rate_hz, system_seen)
        if event is not None:
            events.append(event)
    return events


def run_session(checkpoint: ModelCheckpoint, features: FeatureSequence,
                sys_activity: Optional[SystemActivitySequence] = None,
                threshold: float = 0.95, arm_system: bool = False
                ) -> tuple[np.ndarray, list[EndpointEvent]]:
    """Stream a whole dialogue through a fresh session.

    Returns the per-frame probabilities and the emitted events. Useful both
    as a convenience and as the online half of streaming/batch equivalence
    checks (`forward` being the offline half).
    """
    config = checkpoint.config
    session = DetectorSession(checkpoint, threshold, features.frame_rate_hz,
                              arm_system=arm_system)
    t = features.num_frames
    probs = np.empty((t, config.n_classes), dtype=config.np_dtype)
    events: list[EndpointEvent] = []
    for i in range(t):
        if config.arch == SINGLE_STREAM:
            frame = features.streams[0][i]
            flag = int(sys_activity.flags[i]) if sys_activity is not None else 0
            row, event = session.step(frame, sys_active=flag)
        else:
            row, event = session.step((features.streams[0][i],
                                       features.streams[1][i]))
        probs[i] = row
        if event is not None:
            events.append(event)
    session.close()
    return probs, events
