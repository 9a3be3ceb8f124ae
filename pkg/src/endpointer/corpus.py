"""Synthetic multi-turn dialogue corpus with exact ground-truth timing.

Dialogues alternate strictly between a user and a system speaker. Turns
carry mid-turn pauses whose durations deliberately overlap the inter-turn
gap distribution, so that "has the speaker finished?" cannot be answered
from silence alone, which is the core difficulty for an endpointer.

All timing is integer milliseconds. Generation is a pure function of
(config, seed): the same inputs always produce byte-identical corpora.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigurationError

USER = "user"
SYSTEM = "system"

# Minimum speech run inside a turn (before/after/between pauses), ms.
MIN_SPEECH_MS = 150


@dataclass
class Turn:
    """One speaking turn. Pauses are silent intervals strictly inside it."""

    speaker: str                 # "user" or "system"
    start_ms: int
    end_ms: int
    pauses: list[tuple[int, int]] = field(default_factory=list)

    @property
    def duration_ms(self) -> int:
        return self.end_ms - self.start_ms


@dataclass
class DialogueScript:
    """Ground-truth timing for one dialogue."""

    dialogue_id: str
    turns: list[Turn]
    total_duration_ms: int

    def user_turns(self) -> list[Turn]:
        return [t for t in self.turns if t.speaker == USER]

    def gaps(self) -> list[tuple[int, int]]:
        """Silent intervals between consecutive turns (excludes lead/tail)."""
        out = []
        for a, b in zip(self.turns, self.turns[1:]):
            out.append((a.end_ms, b.start_ms))
        return out


@dataclass
class CorpusConfig:
    """Ranges are inclusive (min, max); sampling is uniform.

    Defaults are tuned so that silence-duration evidence separates pauses
    from gaps well enough for a recurrent model to endpoint reliably, while
    the overlap of the two distributions still produces premature-cutoff
    pressure at aggressive thresholds.
    """

    n_dialogues: int = 450
    turns_per_dialogue: tuple[int, int] = (2, 8)
    turn_duration_ms: tuple[int, int] = (800, 6000)
    pause_duration_ms: tuple[int, int] = (80, 600)
    pauses_per_turn: tuple[int, int] = (0, 2)
    gap_ms: tuple[int, int] = (450, 2200)
    rng_seed: int = 1234
    # Train/valid/test split. Explicit counts win over the ratio.
    split_ratio: tuple[float, float, float] = (0.7, 0.15, 0.15)
    split_counts: Optional[tuple[int, int, int]] = (300, 50, 100)
    first_speaker: str = "random"    # "user" | "system" | "random"

    def validate(self) -> None:
        for name in ("turns_per_dialogue", "turn_duration_ms",
                     "pause_duration_ms", "pauses_per_turn", "gap_ms"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigurationError(f"{name}: min {lo} > max {hi}")
        if self.n_dialogues <= 0:
            raise ConfigurationError("n_dialogues must be positive")
        if self.gap_ms[0] <= 0:
            raise ConfigurationError("minimum gap must be > 0")
        if self.turns_per_dialogue[0] < 1:
            raise ConfigurationError("need at least one turn per dialogue")
        if self.turn_duration_ms[0] <= 0:
            raise ConfigurationError("turn durations must be positive")
        if self.pause_duration_ms[0] <= 0:
            raise ConfigurationError("pause durations must be positive")
        if self.pauses_per_turn[0] < 0:
            raise ConfigurationError("pauses_per_turn must be >= 0")
        if self.first_speaker not in (USER, SYSTEM, "random"):
            raise ConfigurationError(f"bad first_speaker {self.first_speaker!r}")
        if self.split_counts is not None:
            if sum(self.split_counts) != self.n_dialogues:
                raise ConfigurationError(
                    f"split_counts {self.split_counts} do not sum to "
                    f"n_dialogues={self.n_dialogues}")
        else:
            if any(r < 0 for r in self.split_ratio) or sum(self.split_ratio) <= 0:
                raise ConfigurationError("split_ratio must be non-negative, sum > 0")


@dataclass
class Corpus:
    """Generated dialogues partitioned into disjoint splits."""

    train: list[DialogueScript]
    valid: list[DialogueScript]
    test: list[DialogueScript]

    def all_scripts(self) -> list[DialogueScript]:
        return self.train + self.valid + self.test

    def split(self, name: str) -> list[DialogueScript]:
        try:
            return getattr(self, name)
        except AttributeError:
            raise KeyError(f"unknown split {name!r}") from None


def _uniform_int(rng: np.random.Generator, lo: int, hi: int) -> int:
    # inclusive range
    return int(rng.integers(lo, hi + 1))


def _place_pauses(rng: np.random.Generator, start: int, end: int,
                  n_pauses: int, dur_range: tuple[int, int]) -> list[tuple[int, int]]:
    """Place up to n_pauses disjoint silent intervals strictly inside the turn.

    The turn must begin and end with speech, and every speech run is at
    least MIN_SPEECH_MS. Pauses that cannot fit are dropped (never squeezed),
    so short turns naturally carry fewer pauses.
    """
    turn_len = end - start
    pauses: list[tuple[int, int]] = []
    durations = []
    for _ in range(n_pauses):
        durations.append(_uniform_int(rng, dur_range[0], dur_range[1]))
    while durations:
        need = sum(durations) + (len(durations) + 1) * MIN_SPEECH_MS
        if need <= turn_len:
            break
        durations.pop()         # drop the last-drawn pause; retry
    if not durations:
        return pauses
    # Distribute the leftover speech time over the n+1 speech runs.
    slack = turn_len - sum(durations) - (len(durations) + 1) * MIN_SPEECH_MS
    cuts = np.sort(rng.integers(0, slack + 1, size=len(durations)))
    extra = np.diff(np.concatenate([[0], cuts]))  # per-run extra speech
    pos = start + MIN_SPEECH_MS + int(extra[0])
    for dur, ext in zip(durations, np.concatenate([extra[1:], [0]])):
        pauses.append((pos, pos + dur))
        pos += dur + MIN_SPEECH_MS + int(ext)
    return pauses


def generate_dialogue(cfg: CorpusConfig, index: int) -> DialogueScript:
    """Generate one dialogue deterministically from (cfg.rng_seed, index)."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, index]))
    n_turns = _uniform_int(rng, *cfg.turns_per_dialogue)
    if cfg.first_speaker == "random":
        speaker = USER if rng.integers(0, 2) == 0 else SYSTEM
    else:
        speaker = cfg.first_speaker

    turns: list[Turn] = []
    t = _uniform_int(rng, *cfg.gap_ms)       # leading silence
    for _ in range(n_turns):
        dur = _uniform_int(rng, *cfg.turn_duration_ms)
        n_pauses = _uniform_int(rng, *cfg.pauses_per_turn)
        pauses = _place_pauses(rng, t, t + dur, n_pauses, cfg.pause_duration_ms)
        turns.append(Turn(speaker=speaker, start_ms=t, end_ms=t + dur, pauses=pauses))
        t += dur + _uniform_int(rng, *cfg.gap_ms)
        speaker = SYSTEM if speaker == USER else USER
    # t already includes a trailing gap after the final turn.
    return DialogueScript(dialogue_id=f"dlg{index:05d}", turns=turns,
                          total_duration_ms=t)


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    """Generate the full corpus and partition it into train/valid/test.

    Deterministic for a fixed config: dialogue i depends only on
    (cfg.rng_seed, i), and the partition is a fixed prefix split, so the
    three dialogue-id sets are pairwise disjoint and cover the corpus.
    """
    cfg.validate()
    scripts = [generate_dialogue(cfg, i) for i in range(cfg.n_dialogues)]
    if cfg.split_counts is not None:
        n_train, n_valid, n_test = cfg.split_counts
    else:
        total = sum(cfg.split_ratio)
        n_train = int(round(cfg.split_ratio[0] / total * cfg.n_dialogues))
        n_valid = int(round(cfg.split_ratio[1] / total * cfg.n_dialogues))
        n_test = cfg.n_dialogues - n_train - n_valid
        if n_test < 0:
            raise ConfigurationError("split_ratio rounds to more than n_dialogues")
    return Corpus(train=scripts[:n_train],
                  valid=scripts[n_train:n_train + n_valid],
                  test=scripts[n_train + n_valid:n_train + n_valid + n_test])


def check_script_invariants(script: DialogueScript) -> None:
    """Assert the structural guarantees of a generated script. Raises on violation."""
    prev_end = None
    prev_speaker = None
    for turn in script.turns:
        if turn.speaker not in (USER, SYSTEM):
            raise AssertionError(f"bad speaker {turn.speaker!r}")
        if not turn.start_ms < turn.end_ms:
            raise AssertionError("turn start must precede end")
        if prev_end is not None and turn.start_ms <= prev_end:
            raise AssertionError("turns overlap or touch")
        if prev_speaker is not None and turn.speaker == prev_speaker:
            raise AssertionError("speakers must alternate")
        last = None
        for (ps, pe) in turn.pauses:
            if not (turn.start_ms < ps < pe < turn.end_ms):
                raise AssertionError("pause not strictly inside turn")
            if last is not None and ps < last:
                raise AssertionError("pauses out of order or overlapping")
            last = pe
        prev_end = turn.end_ms
        prev_speaker = turn.speaker
    if script.turns and script.total_duration_ms < script.turns[-1].end_ms:
        raise AssertionError("total duration shorter than last turn")


def script_stats(scripts: list[DialogueScript]) -> dict:
    """Aggregate corpus statistics: counts, duration/pause/gap histograms.

    Raises ValueError on an empty list.
    """
    if not scripts:
        raise ValueError("script_stats: empty script list")
    turn_durs, pause_durs, gap_durs, turn_counts = [], [], [], []
    for s in scripts:
        turn_counts.append(len(s.turns))
        for t in s.turns:
            turn_durs.append(t.duration_ms)
            for (ps, pe) in t.pauses:
                pause_durs.append(pe - ps)
        for (gs, ge) in s.gaps():
            gap_durs.append(ge - gs)

    def _hist(values: list[int], bin_ms: int = 100) -> dict:
        if not values:
            return {"bin_ms": bin_ms, "counts": [], "start_ms": 0}
        arr = np.asarray(values)
        lo = int(arr.min() // bin_ms * bin_ms)
        hi = int(arr.max() // bin_ms * bin_ms + bin_ms)
        counts, _ = np.histogram(arr, bins=np.arange(lo, hi + bin_ms, bin_ms))
        return {"bin_ms": bin_ms, "counts": counts.tolist(), "start_ms": lo}

    def _summary(values: list[int]) -> dict:
        if not values:
            return {"n": 0, "mean": None, "min": None, "max": None}
        arr = np.asarray(values, dtype=float)
        return {"n": len(values), "mean": float(arr.mean()),
                "min": int(arr.min()), "max": int(arr.max())}

    return {
        "n_dialogues": len(scripts),
        "n_turns": int(sum(turn_counts)),
        "turns_per_dialogue": _summary(turn_counts),
        "turn_duration_ms": {**_summary(turn_durs), "hist": _hist(turn_durs)},
        "pause_duration_ms": {**_summary(pause_durs), "hist": _hist(pause_durs)},
        "gap_ms": {**_summary(gap_durs), "hist": _hist(gap_durs)},
    }


# ---------------------------------------------------------------------------
# JSON corpus files: {"dialogues": [{"id", "turns": [...]}, ...]}
# ---------------------------------------------------------------------------

def scripts_to_json(scripts: Iterable[DialogueScript]) -> str:
    doc = {"dialogues": [
        {
            "id": s.dialogue_id,
            "turns": [
                {"speaker": t.speaker, "start_ms": t.start_ms, "end_ms": t.end_ms,
                 "pauses": [[ps, pe] for (ps, pe) in t.pauses]}
                for t in s.turns
            ],
            # Not required by the format; preserves trailing silence on reload.
            "total_duration_ms": s.total_duration_ms,
        }
        for s in scripts
    ]}
    return json.dumps(doc, indent=2, sort_keys=True)


def scripts_from_json(text: str) -> list[DialogueScript]:
    doc = json.loads(text)
    out = []
    for d in doc["dialogues"]:
        turns = [Turn(speaker=t["speaker"], start_ms=int(t["start_ms"]),
                      end_ms=int(t["end_ms"]),
                      pauses=[(int(a), int(b)) for a, b in t.get("pauses", [])])
                 for t in d["turns"]]
        total = d.get("total_duration_ms")
        if total is None:
            total = turns[-1].end_ms if turns else 0
        out.append(DialogueScript(dialogue_id=d["id"], turns=turns,
                                  total_duration_ms=int(total)))
    return out


def save_corpus(corpus: Corpus, out_dir: str) -> dict[str, str]:
    """Write one JSON document per split; returns {split: path}."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for name in ("train", "valid", "test"):
        path = os.path.join(out_dir, f"{name}.json")
        with open(path, "w") as f:
            f.write(scripts_to_json(corpus.split(name)))
        paths[name] = path
    return paths


def load_corpus(dir_path: str) -> Corpus:
    splits = {}
    for name in ("train", "valid", "test"):
        path = os.path.join(dir_path, f"{name}.json")
        with open(path) as f:
            splits[name] = scripts_from_json(f.read())
    return Corpus(**splits)
