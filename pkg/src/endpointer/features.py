"""Acoustic feature frames: synthetic rendering, log-mel, causal downsampling.

The synthetic renderer turns a dialogue script into per-frame feature
vectors: speech frames are drawn from the active speaker's Gaussian cluster
(with Markov dwell over a small set of clusters per speaker), while silence,
gaps and mid-turn pauses all share one near-zero silence distribution.
Because a pause frame is statistically identical to a gap frame, the only
way to tell them apart is how long the silence lasts, which is exactly
the ambiguity a real endpointer faces.

Two-stream mode renders separate user/system channels; mono mode is their
frame-wise average (mirroring a 2-channel recording mixed down to one).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .corpus import DialogueScript, SYSTEM, USER

MONO = "mono"
TWO_STREAM = "two_stream"


@dataclass
class FeatureSequence:
    """T x D feature matrix per stream, stamped with its frame rate.

    streams[0] is the merged (mono) signal or the user channel; streams[1],
    when present, is the system channel.
    """

    streams: tuple[np.ndarray, ...]
    frame_rate_hz: float

    def __post_init__(self):
        if len(self.streams) not in (1, 2):
            raise ValueError("FeatureSequence supports 1 or 2 streams")
        if len(self.streams) == 2 and self.streams[0].shape != self.streams[1].shape:
            raise ValueError("paired streams must have identical shapes")

    @property
    def n_streams(self) -> int:
        return len(self.streams)

    @property
    def num_frames(self) -> int:
        return self.streams[0].shape[0]

    @property
    def dim(self) -> int:
        return self.streams[0].shape[1]

    def __len__(self) -> int:
        return self.num_frames


@dataclass
class SynthFeatureConfig:
    """Controls the synthetic feature distributions.

    Speech cluster centers are placed on a sphere of radius in
    `cluster_norm_range`, guaranteeing separation from the silence mean
    (the origin) by at least the lower bound. When `weak_cluster_norm` is
    set, one cluster per speaker is pulled to that smaller radius: a
    low-energy speech state (quiet phones, trailing fillers) that sits
    between full speech and silence and keeps endpointing honestly hard.
    """

    dim: int = 40
    frame_rate_hz: float = 25.0
    clusters_per_speaker: int = 4
    cluster_norm_range: tuple[float, float] = (1.8, 2.6)
    weak_cluster_norm: Optional[float] = 1.1
    dwell_mean_frames: float = 8.0      # mean frames between cluster switches
    speech_sigma: float = 0.5
    silence_sigma: float = 0.35
    silence_mean: float = 0.0
    rng_seed: int = 99

    def validate(self) -> None:
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if self.frame_rate_hz <= 0:
            raise ValueError("frame rate must be positive")
        if self.cluster_norm_range[0] <= abs(self.silence_mean):
            raise ValueError("speech clusters must clear the silence mean")
        if self.weak_cluster_norm is not None and \
                self.weak_cluster_norm <= abs(self.silence_mean):
            raise ValueError("weak cluster must clear the silence mean")
        if self.dwell_mean_frames < 1:
            raise ValueError("dwell must be at least one frame")


def codec_study_config(rng_seed: int = 31) -> SynthFeatureConfig:
    """Feature geometry for quantizer/entropy studies.

    The endpointing defaults keep speech deliberately noisy, which in 40
    dimensions swamps the codebook geometry (every frame sits roughly
    equidistant from every code vector and the distance-softmax entropy
    flattens). This profile uses tight, well-separated speech clusters so a
    trained codebook organizes around speech content and silence shows up
    as the high-entropy region, as it does for real neural codecs.
    """
    return SynthFeatureConfig(dim=16, clusters_per_speaker=6,
                              cluster_norm_range=(2.0, 2.8),
                              weak_cluster_norm=None, speech_sigma=0.2,
                              silence_sigma=0.15, rng_seed=rng_seed)


def _speaker_clusters(cfg: SynthFeatureConfig, speaker: str) -> np.ndarray:
    """Deterministic per-speaker cluster centers, shape (k, D)."""
    tag = 0 if speaker == USER else 1
    rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, 7, tag]))
    k = cfg.clusters_per_speaker
    directions = rng.standard_normal((k, cfg.dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    norms = rng.uniform(*cfg.cluster_norm_range, size=(k, 1))
    if cfg.weak_cluster_norm is not None and k > 1:
        norms[0, 0] = cfg.weak_cluster_norm
    return directions * norms


def num_frames_for(script: DialogueScript, frame_rate_hz: float) -> int:
    return int(np.ceil(script.total_duration_ms * frame_rate_hz / 1000.0))


def speech_mask(script: DialogueScript, speaker: str, frame_rate_hz: float,
                 num_frames: int) -> np.ndarray:
    """True where the given speaker is actually producing speech (not pausing)."""
    starts = np.arange(num_frames) * (1000.0 / frame_rate_hz)
    mask = np.zeros(num_frames, dtype=bool)
    for turn in script.turns:
        if turn.speaker != speaker:
            continue
        inside = (starts >= turn.start_ms) & (starts < turn.end_ms)
        for (ps, pe) in turn.pauses:
            inside &= ~((starts >= ps) & (starts < pe))
        mask |= inside
    return mask


def _dialogue_rng(cfg: SynthFeatureConfig, script: DialogueScript) -> np.random.Generator:
    ident = zlib.crc32(script.dialogue_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, ident]))


def render_features(script: DialogueScript, cfg: SynthFeatureConfig,
                    mode: str = MONO,
                    num_frames: Optional[int] = None) -> FeatureSequence:
    """Render per-frame features for a script.

    Mono output is exactly the frame-wise average of the two rendered
    channels under the same seed, so mono and two-stream runs describe the
    same underlying audio.
    """
    cfg.validate()
    if mode not in (MONO, TWO_STREAM):
        raise ValueError(f"unknown render mode {mode!r}")
    if num_frames is None:
        num_frames = num_frames_for(script, cfg.frame_rate_hz)
    rng = _dialogue_rng(cfg, script)

    channels = []
    for speaker in (USER, SYSTEM):
        centers = _speaker_clusters(cfg, speaker)
        speech = speech_mask(script, speaker, cfg.frame_rate_hz, num_frames)
        # Markov dwell: at each frame, switch cluster with prob 1/dwell_mean.
        switch = rng.random(num_frames) < (1.0 / cfg.dwell_mean_frames)
        choices = rng.integers(0, len(centers), size=num_frames)
        noise = rng.standard_normal((num_frames, cfg.dim))
        if num_frames:
            switch[0] = True        # dwell state starts at choices[0]
        last_switch = np.maximum.accumulate(
            np.where(switch, np.arange(num_frames), 0))
        cluster = choices[last_switch]
        speech_frames = centers[cluster] + cfg.speech_sigma * noise
        silence_frames = cfg.silence_mean + cfg.silence_sigma * noise
        frames = np.where(speech[:, None], speech_frames, silence_frames)
        channels.append(frames)

    if mode == TWO_STREAM:
        return FeatureSequence(streams=(channels[0], channels[1]),
                               frame_rate_hz=cfg.frame_rate_hz)
    mono = (channels[0] + channels[1]) / 2.0
    return FeatureSequence(streams=(mono,), frame_rate_hz=cfg.frame_rate_hz)


# ---------------------------------------------------------------------------
# Log-mel extraction for real 8 kHz audio
# ---------------------------------------------------------------------------

LOGMEL_EPS = 1e-10


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters, shape (n_mels, n_fft//2 + 1)."""
    n_bins = n_fft // 2 + 1
    fft_freqs = np.arange(n_bins) * sample_rate / n_fft
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (fft_freqs - lo) / max(mid - lo, 1e-12)
        down = (hi - fft_freqs) / max(hi - mid, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def logmel(samples: np.ndarray, sample_rate: int = 8000, n_mels: int = 40,
           window_ms: float = 80.0, hop_ms: float = 40.0) -> FeatureSequence:
    """Natural-log mel filterbank energies.

    At the defaults (80 ms window, 40 ms hop) the output frame rate is
    1000/40 = 25 Hz. Audio shorter than one window yields an empty sequence.
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    win = int(round(sample_rate * window_ms / 1000.0))
    hop = int(round(sample_rate * hop_ms / 1000.0))
    frame_rate = 1000.0 / hop_ms
    if len(samples) < win:
        return FeatureSequence(streams=(np.zeros((0, n_mels)),),
                               frame_rate_hz=frame_rate)
    n_frames = (len(samples) - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = samples[idx] * np.hanning(win)[None, :]
    spectrum = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    fb = mel_filterbank(n_mels, win, sample_rate)
    energies = spectrum @ fb.T
    return FeatureSequence(streams=(np.log(energies + LOGMEL_EPS),),
                           frame_rate_hz=frame_rate)


# ---------------------------------------------------------------------------
# Causal downsampling
# ---------------------------------------------------------------------------

def causal_downsample(seq: FeatureSequence, factor: int) -> FeatureSequence:
    """Block-mean pooling emitted at each block's final frame time.

    Output frame j averages input frames [j*r, j*r + r); a trailing partial
    block is averaged over whatever frames exist, so no audio is dropped.
    Only frames at or before the block end are used, so streaming is safe.
    """
    if not isinstance(factor, (int, np.integer)) or factor <= 0:
        raise ValueError(f"downsample factor must be a positive integer, got {factor}")
    if factor == 1:
        return seq
    streams = tuple(block_mean(s, int(factor)) for s in seq.streams)
    return FeatureSequence(streams=streams, frame_rate_hz=seq.frame_rate_hz / factor)


def block_mean(frames: np.ndarray, r: int) -> np.ndarray:
    """Mean of consecutive r-frame blocks; trailing partial block kept."""
    t = frames.shape[0]
    n_full = t // r
    out_blocks = []
    if n_full:
        out_blocks.append(frames[:n_full * r].reshape(n_full, r, -1).mean(axis=1))
    if t % r:
        out_blocks.append(frames[n_full * r:].mean(axis=0, keepdims=True))
    if not out_blocks:
        return frames[:0]
    return np.concatenate(out_blocks, axis=0)
