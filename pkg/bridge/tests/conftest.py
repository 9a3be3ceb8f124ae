"""Shared audio fixtures: synthetic dialogue-style WAV clips."""

import json
import os

import numpy as np
import pytest
from scipy.io import wavfile

RATE = 8000


def tone_burst(duration_s, freq, rate=RATE, amp=0.3):
    t = np.arange(int(duration_s * rate)) / rate
    return amp * np.sin(2 * np.pi * freq * t)


def render_channel(total_s, segments, rate=RATE, noise=0.005, seed=0):
    """segments: list of (start_s, end_s, freq); silence elsewhere."""
    rng = np.random.default_rng(seed)
    out = noise * rng.standard_normal(int(total_s * rate))
    for (start, end, freq) in segments:
        burst = tone_burst(end - start, freq, rate)
        a = int(start * rate)
        out[a:a + len(burst)] += burst
    return out


def write_wav(path, channels, rate=RATE):
    data = np.stack(channels, axis=1) if len(channels) > 1 else channels[0]
    scaled = np.clip(data, -1, 1)
    wavfile.write(path, rate, (scaled * 32767).astype(np.int16))


@pytest.fixture(scope="session")
def ten_second_clip(tmp_path_factory):
    """Mono 10 s clip: three tone bursts with silence between."""
    root = tmp_path_factory.mktemp("audio")
    path = str(root / "clip10s.wav")
    channel = render_channel(10.0, [(0.5, 2.5, 440.0), (4.0, 6.5, 880.0),
                                    (8.0, 9.5, 660.0)], seed=1)
    write_wav(path, [channel])
    return path


@pytest.fixture(scope="session")
def stereo_clip(tmp_path_factory):
    root = tmp_path_factory.mktemp("audio2")
    path = str(root / "stereo.wav")
    user = render_channel(8.0, [(0.5, 3.0, 500.0), (5.5, 7.5, 520.0)], seed=2)
    system = render_channel(8.0, [(3.5, 5.0, 300.0)], seed=3)
    write_wav(path, [user, system])
    return path


@pytest.fixture(scope="session")
def dialogue_workspace(tmp_path_factory):
    """Scripts JSON + matching WAVs, laid out for the endpointer trainer.

    Turn timings follow the corpus JSON schema; each dialogue gets a WAV
    whose user/system tone bursts match the script turns.
    """
    root = tmp_path_factory.mktemp("dialogues")
    dialogues = {
        "train": [
            ("b0000", [("user", 450, 2450), ("system", 3000, 4600),
                       ("user", 5200, 7000)]),
            ("b0001", [("system", 500, 2200), ("user", 2900, 5400)]),
            ("b0002", [("user", 400, 3400), ("system", 4100, 5600)]),
            ("b0003", [("user", 600, 2800), ("system", 3400, 5000),
                       ("user", 5700, 7600)]),
        ],
        "valid": [
            ("b0100", [("user", 500, 2600), ("system", 3200, 4800)]),
            ("b0101", [("system", 450, 2050), ("user", 2700, 5100)]),
        ],
        "test": [
            ("b0200", [("user", 500, 2900), ("system", 3500, 5100)]),
        ],
    }
    freq = {"user": 520.0, "system": 320.0}
    for split, items in dialogues.items():
        doc = {"dialogues": []}
        os.makedirs(os.path.join(root, "wav", split), exist_ok=True)
        for seed, (did, turns) in enumerate(items):
            total_ms = turns[-1][2] + 800
            doc["dialogues"].append({
                "id": did,
                "turns": [{"speaker": spk, "start_ms": a, "end_ms": b,
                           "pauses": []} for (spk, a, b) in turns],
                "total_duration_ms": total_ms,
            })
            segments = [(a / 1000.0, b / 1000.0, freq[spk])
                        for (spk, a, b) in turns]
            channel = render_channel(total_ms / 1000.0, segments, seed=seed)
            write_wav(os.path.join(root, "wav", split, f"{did}.wav"),
                      [channel])
        with open(os.path.join(root, f"{split}.json"), "w") as f:
            json.dump(doc, f)
    return str(root)
