"""Frame-level labels for endpointer training.

Four classes plus a padding sentinel:

    0 User        frames inside a user turn (mid-turn pauses included)
    1 UserEnd     frames in the silence following a user turn
    2 System      frames inside a system turn
    3 SystemEnd   frames in the silence following a system turn
    255 Pad       loss-mask sentinel, never a model output

The label delay shifts targets later in time by tau frames, padding the
head: with a 40 ms frame period, tau=2 bakes an implicit 80 ms of decision
delay into the training objective without any inference-time buffering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import DialogueScript, SYSTEM, USER

LABEL_USER = 0
LABEL_USER_END = 1
LABEL_SYSTEM = 2
LABEL_SYSTEM_END = 3
PAD = 255

N_CLASSES = 4
CLASS_NAMES = ("user", "user_end", "system", "system_end")

SYS_ACTIVE = 1
NON_SYSTEM = 0


@dataclass
class LabelSequence:
    """Per-frame targets; delay_tau records how far they have been shifted."""

    labels: np.ndarray          # (T,) uint8, values 0..3 or PAD
    frame_rate_hz: float
    delay_tau: int = 0

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class SystemActivitySequence:
    """Per-frame flag: 1 while the system speaker is inside a turn, else 0."""

    flags: np.ndarray           # (T,) uint8 in {0, 1}
    frame_rate_hz: float

    def __len__(self) -> int:
        return len(self.flags)


def _frame_starts_ms(frame_rate_hz: float, num_frames: int) -> np.ndarray:
    if frame_rate_hz <= 0:
        raise ValueError(f"frame rate must be positive, got {frame_rate_hz}")
    return np.arange(num_frames, dtype=np.float64) * (1000.0 / frame_rate_hz)


def labels_from_script(script: DialogueScript, frame_rate_hz: float,
                       num_frames: int) -> LabelSequence:
    """Label each frame by where its start time falls in the script.

    Inside a turn (pauses included) the frame carries the speaker's class.
    Silence after a turn carries that turn's end class until the next turn
    begins. Silence before the first turn counts as "awaiting the user"
    and is labeled SystemEnd.
    """
    starts = _frame_starts_ms(frame_rate_hz, num_frames)
    labels = np.full(num_frames, LABEL_SYSTEM_END, dtype=np.uint8)
    # Walk turns once; frames are in time order.
    for turn in script.turns:
        speech = LABEL_USER if turn.speaker == USER else LABEL_SYSTEM
        ended = LABEL_USER_END if turn.speaker == USER else LABEL_SYSTEM_END
        inside = (starts >= turn.start_ms) & (starts < turn.end_ms)
        labels[inside] = speech
        after = starts >= turn.end_ms
        labels[after] = ended       # later turns overwrite
    return LabelSequence(labels=labels, frame_rate_hz=frame_rate_hz, delay_tau=0)


def system_activity_from_script(script: DialogueScript, frame_rate_hz: float,
                                num_frames: int) -> SystemActivitySequence:
    """Flag frames whose start time lies inside a system turn."""
    starts = _frame_starts_ms(frame_rate_hz, num_frames)
    flags = np.zeros(num_frames, dtype=np.uint8)
    for turn in script.turns:
        if turn.speaker == SYSTEM:
            flags[(starts >= turn.start_ms) & (starts < turn.end_ms)] = SYS_ACTIVE
    return SystemActivitySequence(flags=flags, frame_rate_hz=frame_rate_hz)


def apply_label_delay(seq: LabelSequence, tau: int) -> LabelSequence:
    """Shift targets tau frames later, padding the head with Pad.

    Output keeps the input length: tau Pad sentinels are prepended and the
    final tau elements dropped. tau=0 is the identity.
    """
    n = len(seq.labels)
    if tau < 0:
        raise ValueError(f"delay must be non-negative, got {tau}")
    if tau > n:
        raise ValueError(f"delay {tau} exceeds sequence length {n}")
    shifted = np.empty_like(seq.labels)
    shifted[:tau] = PAD
    shifted[tau:] = seq.labels[:n - tau]
    return LabelSequence(labels=shifted, frame_rate_hz=seq.frame_rate_hz,
                         delay_tau=seq.delay_tau + tau)


def implicit_delay_ms(tau: int, frame_rate_hz: float) -> float:
    """Objective-side delay induced by a tau-frame label shift."""
    return 1000.0 * tau / frame_rate_hz
