"""Latency/cutoff evaluation for endpoint detectors.

Per user turn, the detector is armed from the turn's first frame until the
next turn begins; the first frame whose user-end probability reaches the
threshold is the trigger. Latency is measured on the frame grid: the true
end is mapped to the first frame at or after it, so every latency is a
whole number of frame periods.

* ep50 / ep90: nearest-rank 50th/90th percentile of non-negative latencies.
* ep-cutoff: percentage of user turns triggered before the true end.
* miss rate: percentage of user turns with no trigger inside the armed
  window; misses are excluded from the latency percentiles (reported
  separately, they are neither latencies nor cutoffs).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .corpus import DialogueScript
from .features import FeatureSequence
from .labels import LABEL_USER_END

VALID = "valid"
CUTOFF = "cutoff"
MISS = "miss"

REPORT_HEADER = ("threshold", "ep50_ms", "ep90_ms", "ep_cutoff_pct",
                 "miss_rate_pct", "n_turns")


@dataclass
class TurnOutcome:
    dialogue_id: str
    turn_index: int              # index into script.turns
    true_end_ms: int             # raw script value
    trigger_ms: Optional[float]  # frame-grid time of the trigger, None = miss
    latency_ms: Optional[float]  # (trigger frame - end frame) * period
    classification: str          # "valid" | "cutoff" | "miss"


@dataclass
class MetricsRow:
    threshold: float
    ep50_ms: Optional[float]
    ep90_ms: Optional[float]
    ep_cutoff_pct: float
    miss_rate_pct: float
    n_turns: int


@dataclass
class CutoffBin:
    lo_ms: float                 # inclusive lower bound of pause duration
    hi_ms: float                 # exclusive upper bound (inf for the last bin)
    count: int


def frame_of(time_ms: float, frame_rate_hz: float) -> int:
    """First frame whose start time is at or after time_ms."""
    return int(math.ceil(time_ms * frame_rate_hz / 1000.0 - 1e-9))


def evaluate_turns(probs: np.ndarray, script: DialogueScript, threshold: float,
                   frame_rate_hz: float) -> list[TurnOutcome]:
    """Classify every user turn of a dialogue given its probability trace."""
    t_total = probs.shape[0]
    period = 1000.0 / frame_rate_hz
    outcomes = []
    for i, turn in enumerate(script.turns):
        if turn.speaker != "user":
            continue
        window_start = frame_of(turn.start_ms, frame_rate_hz)
        window_end = (frame_of(script.turns[i + 1].start_ms, frame_rate_hz)
                      if i + 1 < len(script.turns) else t_total)
        window_end = min(window_end, t_total)
        window_start = min(window_start, window_end)
        end_frame = frame_of(turn.end_ms, frame_rate_hz)
        trace = probs[window_start:window_end, LABEL_USER_END]
        hits = np.flatnonzero(trace >= threshold)
        if len(hits) == 0:
            outcomes.append(TurnOutcome(script.dialogue_id, i, turn.end_ms,
                                        None, None, MISS))
            continue
        trigger_frame = window_start + int(hits[0])
        latency = (trigger_frame - end_frame) * period
        outcomes.append(TurnOutcome(
            script.dialogue_id, i, turn.end_ms,
            trigger_ms=trigger_frame * period,
            latency_ms=latency,
            classification=CUTOFF if latency < 0 else VALID))
    return outcomes


def nearest_rank(sorted_values: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile: element at index ceil(pct/100 * n), 1-based."""
    n = len(sorted_values)
    if n == 0:
        raise ValueError("empty sample")
    rank = max(1, math.ceil(pct / 100.0 * n))
    return sorted_values[min(rank, n) - 1]


def aggregate(outcomes: list[TurnOutcome], threshold: float) -> MetricsRow:
    """Reduce per-turn outcomes to one metrics row."""
    if not outcomes:
        raise ValueError("no outcomes to aggregate")
    n = len(outcomes)
    cutoffs = sum(1 for o in outcomes if o.classification == CUTOFF)
    misses = sum(1 for o in outcomes if o.classification == MISS)
    valid = sorted(o.latency_ms for o in outcomes if o.classification == VALID)
    ep50 = nearest_rank(valid, 50.0) if valid else None
    ep90 = nearest_rank(valid, 90.0) if valid else None
    return MetricsRow(threshold=threshold, ep50_ms=ep50, ep90_ms=ep90,
                      ep_cutoff_pct=100.0 * cutoffs / n,
                      miss_rate_pct=100.0 * misses / n, n_turns=n)


def default_threshold_grid(start: float = 0.70, stop: float = 0.99,
                           step: float = 0.01) -> np.ndarray:
    n = int(round((stop - start) / step)) + 1
    return np.round(start + step * np.arange(n), 10)


@dataclass
class SweepResult:
    rows: list[MetricsRow]
    # trigger frame per (dialogue, user turn) per threshold; -1 marks a miss.
    trigger_frames: np.ndarray           # (n_thresholds, n_user_turns)
    operating_points: dict[float, Optional[MetricsRow]]


def sweep_traces(traces: list[tuple[np.ndarray, DialogueScript]],
                 grid: Iterable[float], frame_rate_hz: float,
                 ep50_targets: Sequence[float] = (120.0, 160.0)
                 ) -> SweepResult:
    """Sweep thresholds over recorded probability traces.

    Uses the running maximum of each armed window, so the per-turn trigger
    frame for every threshold comes from one searchsorted pass (first
    crossing of a non-decreasing curve == nearest-rank lookup).
    """
    grid = np.asarray(sorted(grid), dtype=np.float64)
    if grid.size == 0:
        raise ValueError("empty threshold grid")
    if np.any((grid <= 0.0) | (grid >= 1.0)):
        raise ValueError("thresholds must lie in (0, 1)")
    period = 1000.0 / frame_rate_hz
    turn_meta = []                       # (dialogue_id, turn_idx, end_frame)
    turn_triggers = []                   # per turn: trigger frame per theta
    for probs, script in traces:
        t_total = probs.shape[0]
        for i, turn in enumerate(script.turns):
            if turn.speaker != "user":
                continue
            ws = frame_of(turn.start_ms, frame_rate_hz)
            we = (frame_of(script.turns[i + 1].start_ms, frame_rate_hz)
                  if i + 1 < len(script.turns) else t_total)
            we = min(we, t_total)
            ws = min(ws, we)
            trace = probs[ws:we, LABEL_USER_END]
            running = np.maximum.accumulate(trace) if len(trace) else trace
            idx = np.searchsorted(running, grid, side="left")
            trig = np.where(idx < len(running), ws + idx, -1)
            turn_meta.append((script.dialogue_id, i, turn.end_ms))
            turn_triggers.append(trig)
    if not turn_meta:
        raise ValueError("no user turns in the supplied traces")
    triggers = np.stack(turn_triggers, axis=1)    # (n_thresholds, n_turns)

    rows = []
    for k, theta in enumerate(grid):
        outcomes = []
        for (dlg, ti, end_ms), trig in zip(turn_meta, triggers[k]):
            if trig < 0:
                outcomes.append(TurnOutcome(dlg, ti, end_ms, None, None, MISS))
            else:
                end_frame = frame_of(end_ms, frame_rate_hz)
                latency = (int(trig) - end_frame) * period
                outcomes.append(TurnOutcome(
                    dlg, ti, end_ms, trigger_ms=int(trig) * period,
                    latency_ms=latency,
                    classification=CUTOFF if latency < 0 else VALID))
        rows.append(aggregate(outcomes, float(theta)))

    points = {target: select_operating_point(rows, target, period)
              for target in ep50_targets}
    return SweepResult(rows=rows, trigger_frames=triggers,
                       operating_points=points)


def select_operating_point(rows: list[MetricsRow], target_ep50_ms: float,
                           frame_period_ms: float,
                           tol_frames: int = 0) -> Optional[MetricsRow]:
    """Row whose ep50 matches the target within |tol_frames| frame periods.

    Among matches, the largest threshold wins; ties break toward lower
    ep-cutoff. Returns None when the target is not attained.
    """
    tol = tol_frames * frame_period_ms + 1e-9
    matches = [r for r in rows
               if r.ep50_ms is not None and abs(r.ep50_ms - target_ep50_ms) <= tol]
    if not matches:
        return None
    return max(matches, key=lambda r: (r.threshold, -r.ep_cutoff_pct))


def matched_ep50_rows(rows_a: list[MetricsRow], rows_b: list[MetricsRow],
                      tol_ms: float) -> Optional[tuple[MetricsRow, MetricsRow]]:
    """Pick one row from each sweep with (near-)equal ep50 for comparison.

    Each sweep is first reduced to one representative row per distinct ep50
    (largest threshold, ties toward lower ep-cutoff). Among cross pairs
    within tol, the pair with the smallest matched latency wins: the
    aggressive low-latency end of the trade-off, which is where fixed-ep50
    operating points are conventionally reported.
    """
    def reps(rows):
        by_val: dict[float, MetricsRow] = {}
        for r in rows:
            if r.ep50_ms is None:
                continue
            cur = by_val.get(r.ep50_ms)
            if cur is None or (r.threshold, -r.ep_cutoff_pct) > \
                    (cur.threshold, -cur.ep_cutoff_pct):
                by_val[r.ep50_ms] = r
        return list(by_val.values())

    best = None
    best_key = None
    for ra in reps(rows_a):
        for rb in reps(rows_b):
            gap = abs(ra.ep50_ms - rb.ep50_ms)
            if gap > tol_ms + 1e-9:
                continue
            key = (max(ra.ep50_ms, rb.ep50_ms), gap, -ra.threshold)
            if best_key is None or key < best_key:
                best_key = key
                best = (ra, rb)
    return best


# ---------------------------------------------------------------------------
# Cutoff error analysis
# ---------------------------------------------------------------------------

DEFAULT_BIN_EDGES_MS = tuple(float(x) for x in range(0, 1001, 100))


def cutoff_error_bins(outcomes: list[TurnOutcome],
                      scripts: dict[str, DialogueScript],
                      bin_edges_ms: Sequence[float] = DEFAULT_BIN_EDGES_MS
                      ) -> tuple[list[CutoffBin], int]:
    """Bin premature triggers by the duration of the enclosing mid-turn pause.

    Returns (bins, in_speech_count): cutoffs whose trigger does not fall in
    any ground-truth pause land in the in-speech count. Bin edges partition
    [edges[0], inf): the last bin is open-ended.
    """
    edges = list(bin_edges_ms) + [math.inf]
    bins = [CutoffBin(lo_ms=edges[i], hi_ms=edges[i + 1], count=0)
            for i in range(len(edges) - 1)]
    in_speech = 0
    for o in outcomes:
        if o.classification != CUTOFF:
            continue
        script = scripts[o.dialogue_id]
        turn = script.turns[o.turn_index]
        pause = next(((ps, pe) for (ps, pe) in turn.pauses
                      if ps <= o.trigger_ms < pe), None)
        if pause is None:
            in_speech += 1
            continue
        duration = pause[1] - pause[0]
        slot = np.searchsorted(edges, duration, side="right") - 1
        slot = max(0, min(slot, len(bins) - 1))
        bins[slot].count += 1
    return bins, in_speech


# ---------------------------------------------------------------------------
# Energy VAD (role stand-in for model-based trimming on real audio)
# ---------------------------------------------------------------------------

def energy_vad(source, threshold: Optional[float] = None,
               min_duration_ms: float = 120.0, sample_rate: int = 8000,
               window_ms: float = 80.0, hop_ms: float = 40.0
               ) -> list[tuple[float, float]]:
    """Detect silence segments as sustained runs of low frame energy.

    `source` is either a mono FeatureSequence (frame energy = mean square of
    the feature vector) or a 1-D waveform (framed at window/hop). With no
    explicit threshold, the geometric mean of the 10th and 90th energy
    percentiles is used, which lands between the silence and speech modes;
    inputs that are all-silence or all-speech have no such modes, so pass
    an explicit threshold for them. Returns maximal silent intervals of at
    least min_duration_ms as (start_ms, end_ms) pairs.
    """
    if isinstance(source, FeatureSequence):
        if source.n_streams != 1:
            raise ValueError("energy_vad expects a mono feature sequence")
        energies = np.mean(source.streams[0] ** 2, axis=1)
        period = 1000.0 / source.frame_rate_hz
    else:
        samples = np.asarray(source, dtype=np.float64).reshape(-1)
        win = int(round(sample_rate * window_ms / 1000.0))
        hop = int(round(sample_rate * hop_ms / 1000.0))
        if len(samples) < win:
            return []
        n_frames = (len(samples) - win) // hop + 1
        idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
        energies = np.mean(samples[idx] ** 2, axis=1)
        period = hop_ms
    if len(energies) == 0:
        return []
    if threshold is None:
        p10, p90 = np.percentile(energies, [10.0, 90.0])
        threshold = float(np.sqrt(max(p10, 1e-12) * max(p90, 1e-12)))
    silent = energies < threshold
    segments = []
    start = None
    for i, s in enumerate(silent):
        if s and start is None:
            start = i
        elif not s and start is not None:
            segments.append((start, i))
            start = None
    if start is not None:
        segments.append((start, len(silent)))
    out = []
    for (a, b) in segments:
        start_ms = a * period
        end_ms = b * period
        if end_ms - start_ms >= min_duration_ms:
            out.append((start_ms, end_ms))
    return out


# ---------------------------------------------------------------------------
# Delimited output
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return "nan"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def write_report_csv(rows: list[MetricsRow], path: str) -> None:
    """The canonical sweep report: one row per threshold."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_HEADER)
        for r in rows:
            writer.writerow([_fmt(r.threshold), _fmt(r.ep50_ms), _fmt(r.ep90_ms),
                             _fmt(r.ep_cutoff_pct), _fmt(r.miss_rate_pct),
                             _fmt(r.n_turns)])


def write_curve_csv(rows: list[MetricsRow], path: str) -> None:
    """Curve data for plotting cutoff against ep50 and ep90."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "ep50_ms", "ep90_ms", "ep_cutoff_pct"])
        for r in rows:
            writer.writerow([_fmt(r.threshold), _fmt(r.ep50_ms),
                             _fmt(r.ep90_ms), _fmt(r.ep_cutoff_pct)])


def write_bins_csv(bins: list[CutoffBin], in_speech: int, path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["lo_ms", "hi_ms", "count"])
        for b in bins:
            writer.writerow([_fmt(b.lo_ms),
                             "inf" if math.isinf(b.hi_ms) else _fmt(b.hi_ms),
                             b.count])
        writer.writerow(["in_speech", "", in_speech])


def write_outcomes_csv(outcomes: list[TurnOutcome], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["dialogue_id", "turn_index", "true_end_ms",
                         "trigger_ms", "latency_ms", "classification"])
        for o in outcomes:
            writer.writerow([o.dialogue_id, o.turn_index, o.true_end_ms,
                             _fmt(o.trigger_ms), _fmt(o.latency_ms),
                             o.classification])
