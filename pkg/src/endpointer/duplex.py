"""Duplex interaction: a scripted dialogue agent under endpointer control.

Each query-response exchange runs on a shared frame clock:

1. the agent speaks an opening message (user channel silent),
2. the end of the opening is detected (endpointer, or oracle in the
   baseline), then a 200-300 ms conversational pause is inserted,
3. the user query plays on the user channel, mid-turn pauses included,
4. baseline mode: the agent picks its own response onset from a stochastic
   policy that produces both barge-ins and long waits; endpointer mode:
   pad tokens suppress the agent while listening and an unk token injected
   at the detector's user-end trigger starts the response on the next step,
5. response latency (query true end to response onset) and cutoff
   (onset before the true end) are recorded.

Latencies live on the frame grid and follow the evaluation conventions:
negative latency is a cutoff and is excluded from the percentiles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .corpus import DialogueScript, SYSTEM, USER
from .detector import DetectorSession, USER_END, SYSTEM_END
from .evaluation import nearest_rank
from .features import SynthFeatureConfig, _speaker_clusters
from .model import ModelCheckpoint, TWO_STREAM as ARCH_TWO_STREAM

log = logging.getLogger(__name__)

PAD_TOKEN = "pad"
UNK_TOKEN = "unk"

SPEAKING = "speaking"
LISTENING = "listening"
RESPONDING = "responding"
DONE = "done"

BASELINE = "baseline_fixed_delay"
ENDPOINTER = "endpointer"


class FrameSynth:
    """Per-speaker frame source sharing the corpus feature distributions.

    The duplex loop renders every timeline frame exactly once through these
    sources and feeds the same arrays to both the detector and the outcome
    bookkeeping, mirroring a deployment where one feature extractor serves
    the whole stack. `frames_rendered` exposes that single-extraction count.
    """

    def __init__(self, cfg: SynthFeatureConfig, speaker: str,
                 rng: np.random.Generator):
        self._cfg = cfg
        self._centers = _speaker_clusters(cfg, speaker)
        self._rng = rng
        self._cluster = int(rng.integers(len(self._centers)))
        self.frames_rendered = 0

    def speech_frame(self) -> np.ndarray:
        cfg = self._cfg
        if self._rng.random() < 1.0 / cfg.dwell_mean_frames:
            self._cluster = int(self._rng.integers(len(self._centers)))
        self.frames_rendered += 1
        return (self._centers[self._cluster]
                + cfg.speech_sigma * self._rng.standard_normal(cfg.dim))

    def silence_frame(self) -> np.ndarray:
        cfg = self._cfg
        self.frames_rendered += 1
        return (cfg.silence_mean
                + cfg.silence_sigma * self._rng.standard_normal(cfg.dim))


@dataclass
class AgentConfig:
    """Scripted stand-in for a speech LLM's timing behavior."""

    opening_ms_range: tuple[float, float] = (1200.0, 2400.0)
    response_ms_range: tuple[float, float] = (800.0, 2000.0)
    # Uncontrolled onset policy: either barge in during the query or wait
    # long after it, the failure modes endpointer control should beat.
    barge_in_prob: float = 0.45
    barge_min_into_query_ms: float = 500.0
    late_onset_ms_range: tuple[float, float] = (800.0, 3200.0)
    rng_seed: int = 0


class ScriptedAgent:
    """Frame-clocked agent: opening message, listening, response.

    Control tokens override the internal policy: pad forces a silent frame
    and holds state; unk received while listening starts the response on
    the next step; unk while speaking is ignored (logged).
    """

    def __init__(self, cfg: AgentConfig, synth: FrameSynth,
                 opening_frames: int, response_frames: int):
        self.cfg = cfg
        self.synth = synth
        self.state = SPEAKING if opening_frames > 0 else LISTENING
        self.step_index = 0
        self.opening_frames = opening_frames
        self.response_frames = response_frames
        self.planned_onset: Optional[int] = None
        self.response_started_at: Optional[int] = None
        self._respond_from: Optional[int] = None
        self.ignored_unk = 0

    def plan_response(self, onset_frame: int) -> None:
        """Baseline policy output: respond spontaneously at this frame."""
        self.planned_onset = onset_frame

    def force_unk(self) -> None:
        """Replace the current step's pad with unk after the fact.

        A listening step emits silence under either token, so the harness
        may step the agent with pad, run the detector on the resulting
        frame, and upgrade the token to unk when the trigger fires at that
        very step. The response then begins on the subsequent step, exactly
        as if unk had been passed to step().
        """
        if self.state == LISTENING:
            self._respond_from = self.step_index
        else:
            self.ignored_unk += 1
            log.debug("unk ignored in state %s at step %d", self.state,
                      self.step_index - 1)

    @property
    def response_pending(self) -> bool:
        """True once an unk has scheduled the response. Further pads would
        suppress it, so the controller must stop injecting them."""
        return self._respond_from is not None

    def step(self, control: Optional[str] = None) -> tuple[np.ndarray, str]:
        """Advance one frame; returns (audio frame, state after the step)."""
        t = self.step_index
        self.step_index += 1
        if control == UNK_TOKEN:
            if self.state == LISTENING:
                self._respond_from = t + 1       # from the subsequent step
            else:
                self.ignored_unk += 1
                log.debug("unk ignored in state %s at step %d", self.state, t)
        if control == PAD_TOKEN:
            # Suppress speech generation this step; state machine holds.
            self._advance_clock(t)
            return self.synth.silence_frame(), self.state

        self._advance_clock(t)
        if self.state == SPEAKING:
            return self.synth.speech_frame(), self.state
        if self.state == LISTENING:
            starting = []
            if self._respond_from is not None:
                starting.append(self._respond_from)
            if self.planned_onset is not None:
                starting.append(self.planned_onset)
            if starting and t >= min(starting):
                self.state = RESPONDING
                self.response_started_at = t
                return self.synth.speech_frame(), self.state
            return self.synth.silence_frame(), self.state
        if self.state == RESPONDING:
            if t - self.response_started_at >= self.response_frames:
                self.state = DONE
                return self.synth.silence_frame(), self.state
            return self.synth.speech_frame(), self.state
        return self.synth.silence_frame(), self.state

    def _advance_clock(self, t: int) -> None:
        if self.state == SPEAKING and t >= self.opening_frames:
            self.state = LISTENING


@dataclass
class Query:
    """A user query: per-frame speech mask with the true end on the grid."""

    query_id: str
    duration_ms: int
    speech_mask: np.ndarray      # (q_frames,) bool; False inside pauses
    pause_count: int


@dataclass
class DuplexOutcome:
    query_id: str
    response_latency_ms: Optional[float]   # None when the agent never responded
    cutoff: bool
    missed: bool = False


@dataclass
class DuplexSummary:
    n_queries: int
    median_latency_ms: Optional[float]
    worst_case_latency_ms: Optional[float]   # nearest-rank 90th percentile
    cutoff_rate_pct: float
    miss_count: int


def build_queries(scripts: list[DialogueScript], frame_rate_hz: float,
                  min_duration_ms: float = 1000.0,
                  limit: Optional[int] = None) -> list[Query]:
    """First sufficiently long user turn of each dialogue becomes a query.

    Turns at or under min_duration_ms are skipped with a warning, matching
    the run-time rule for externally supplied queries.
    """
    queries = []
    for script in scripts:
        turn = next((t for t in script.turns
                     if t.speaker == USER and t.duration_ms > min_duration_ms),
                    None)
        if turn is None:
            log.warning("dialogue %s has no user turn over %.0f ms; skipped",
                        script.dialogue_id, min_duration_ms)
            continue
        q_frames = int(np.ceil(turn.duration_ms * frame_rate_hz / 1000.0))
        starts = np.arange(q_frames) * (1000.0 / frame_rate_hz)
        mask = np.ones(q_frames, dtype=bool)
        for (ps, pe) in turn.pauses:
            rel_s, rel_e = ps - turn.start_ms, pe - turn.start_ms
            mask &= ~((starts >= rel_s) & (starts < rel_e))
        queries.append(Query(query_id=script.dialogue_id,
                             duration_ms=turn.duration_ms, speech_mask=mask,
                             pause_count=len(turn.pauses)))
        if limit is not None and len(queries) >= limit:
            break
    return queries


def run_duplex(queries: list[Query], agent_cfg: AgentConfig,
               synth_cfg: SynthFeatureConfig, mode: str,
               checkpoint: Optional[ModelCheckpoint] = None,
               threshold: float = 0.9,
               max_tail_ms: float = 6000.0
               ) -> tuple[list[DuplexOutcome], DuplexSummary]:
    """Simulate the query-response protocol over all queries.

    Baseline mode uses the oracle query end plus the agent's stochastic
    onset policy; endpointer mode requires a two-stream checkpoint and
    relies solely on detector events for control.
    """
    if mode not in (BASELINE, ENDPOINTER):
        raise ValueError(f"unknown duplex mode {mode!r}")
    if mode == ENDPOINTER:
        if checkpoint is None:
            raise ValueError("endpointer mode needs a checkpoint")
        if checkpoint.config.arch != ARCH_TWO_STREAM:
            raise ValueError("endpointer mode needs a two-stream model")
    fr = synth_cfg.frame_rate_hz
    period = 1000.0 / fr
    outcomes = []
    for qi, query in enumerate(queries):
        rng = np.random.default_rng(
            np.random.SeedSequence([agent_cfg.rng_seed, 23, qi]))
        outcomes.append(_run_one(query, agent_cfg, synth_cfg, mode, checkpoint,
                                 threshold, rng, fr, period, max_tail_ms))
    latencies = sorted(o.response_latency_ms for o in outcomes
                       if not o.cutoff and not o.missed
                       and o.response_latency_ms is not None)
    cutoffs = sum(1 for o in outcomes if o.cutoff)
    summary = DuplexSummary(
        n_queries=len(outcomes),
        median_latency_ms=nearest_rank(latencies, 50.0) if latencies else None,
        worst_case_latency_ms=nearest_rank(latencies, 90.0) if latencies else None,
        cutoff_rate_pct=100.0 * cutoffs / max(len(outcomes), 1),
        miss_count=sum(1 for o in outcomes if o.missed))
    return outcomes, summary


def _run_one(query: Query, agent_cfg: AgentConfig, synth_cfg: SynthFeatureConfig,
             mode: str, checkpoint: Optional[ModelCheckpoint], threshold: float,
             rng: np.random.Generator, fr: float, period: float,
             max_tail_ms: float) -> DuplexOutcome:
    user_synth = FrameSynth(synth_cfg, USER, rng)
    agent_synth = FrameSynth(synth_cfg, SYSTEM, rng)
    opening_frames = int(round(
        rng.uniform(*agent_cfg.opening_ms_range) / period))
    response_frames = max(1, int(round(
        rng.uniform(*agent_cfg.response_ms_range) / period)))
    agent = ScriptedAgent(agent_cfg, agent_synth, opening_frames, response_frames)

    session = None
    if mode == ENDPOINTER:
        session = DetectorSession(checkpoint, threshold, fr, arm_system=True)

    gap_frames = max(1, int(round(rng.uniform(200.0, 300.0) / period)))
    q_frames = len(query.speech_mask)
    max_tail_frames = int(round(max_tail_ms / period))

    # Timeline bookkeeping, resolved as the clock advances.
    gap_start: Optional[int] = None     # set once the opening end is detected
    query_start: Optional[int] = None
    true_end: Optional[int] = None
    onset: Optional[int] = None
    t = 0
    hard_stop = opening_frames + 100 + gap_frames + q_frames + max_tail_frames

    while t < hard_stop:
        # Resolve schedule milestones.
        if gap_start is None and mode == BASELINE and t >= opening_frames:
            gap_start = t
        if gap_start is not None and query_start is None and \
                t >= gap_start + gap_frames:
            query_start = t
            true_end = query_start + q_frames
            if mode == BASELINE:
                agent.plan_response(_baseline_onset(
                    agent_cfg, rng, query_start, true_end, period))

        # While listening under endpointer control the agent is padded; the
        # pad is upgraded to unk in-place when the trigger fires this step.
        # Once the unk has scheduled the response, padding stops.
        control = None
        if mode == ENDPOINTER and agent.state == LISTENING \
                and not agent.response_pending:
            control = PAD_TOKEN

        agent_frame, state = agent.step(control)
        if onset is None and state == RESPONDING:
            onset = agent.response_started_at

        if query_start is not None and query_start <= t < query_start + q_frames:
            user_frame = (user_synth.speech_frame()
                          if query.speech_mask[t - query_start]
                          else user_synth.silence_frame())
        else:
            user_frame = user_synth.silence_frame()

        if session is not None:
            _, event = session.step((user_frame, agent_frame))
            if event is not None:
                if event.kind == SYSTEM_END and gap_start is None:
                    gap_start = t
                    session.rearm(USER_END)
                elif event.kind == USER_END and gap_start is not None:
                    agent.force_unk()
        if mode == ENDPOINTER and gap_start is None and \
                t >= opening_frames + 50:
            # System-end detection stalled; fall back to the oracle end.
            log.warning("query %s: system-end not detected, using oracle",
                        query.query_id)
            gap_start = t
            session.rearm(USER_END)

        if onset is not None:
            break
        if true_end is not None and t >= true_end + max_tail_frames:
            break
        t += 1

    if onset is None or true_end is None:
        return DuplexOutcome(query_id=query.query_id, response_latency_ms=None,
                             cutoff=False, missed=True)
    latency = (onset - true_end) * period
    return DuplexOutcome(query_id=query.query_id,
                         response_latency_ms=latency,
                         cutoff=latency < 0)


def _baseline_onset(cfg: AgentConfig, rng: np.random.Generator,
                    query_start: int, true_end: int, period: float) -> int:
    """Uncontrolled onset: barge in mid-query or wait out a long delay."""
    if rng.random() < cfg.barge_in_prob:
        earliest = query_start + int(round(cfg.barge_min_into_query_ms / period))
        latest = max(earliest, true_end - 1)
        return int(rng.integers(earliest, latest + 1))
    delay_frames = int(round(rng.uniform(*cfg.late_onset_ms_range) / period))
    return true_end + max(1, delay_frames)
