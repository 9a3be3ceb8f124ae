"""Extraction jobs: audio file -> codec features -> EPF1."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .audio import load_wav, resample, to_mono
from .codecs import get_codec


@dataclass
class ExtractionJob:
    inputs: list[str]                 # wav paths
    codec: str = "dsp"
    nq: int = 4
    out_dir: str = "."
    streams: str = "mono"             # "mono" | "two" (stereo input required)
    target_frame_rate: Optional[float] = None   # causal block-mean downsample


def block_mean(frames: np.ndarray, r: int) -> np.ndarray:
    """Causal block averaging; trailing partial block averaged, not dropped.

    Matches the toolkit's downsampling rule bit for bit so files prepared
    here behave identically to features downsampled inside the toolkit.
    """
    t = frames.shape[0]
    n_full = t // r
    parts = []
    if n_full:
        parts.append(frames[:n_full * r].reshape(n_full, r, -1).mean(axis=1))
    if t % r:
        parts.append(frames[n_full * r:].mean(axis=0, keepdims=True))
    if not parts:
        return frames[:0]
    return np.concatenate(parts, axis=0)


def downsample_factor(native_rate: float, target_rate: float) -> int:
    factor = native_rate / target_rate
    if abs(factor - round(factor)) > 1e-9 or factor < 1:
        raise ValueError(
            f"target rate {target_rate} is not an integer division of the "
            f"codec frame rate {native_rate}")
    return int(round(factor))


def extract_file(path: str, job: ExtractionJob) -> str:
    """Encode one audio file; returns the written EPF1 path."""
    codec = get_codec(job.codec, job.nq)
    samples, rate = load_wav(path)
    if job.streams == "two":
        if samples.ndim != 2 or samples.shape[1] != 2:
            raise ValueError(f"{path}: two-stream extraction needs 2-channel "
                             "audio")
        channels = [samples[:, 0], samples[:, 1]]
    else:
        channels = [to_mono(samples)]
    frame_rate = codec.frame_rate
    factor = 1
    if job.target_frame_rate is not None:
        factor = downsample_factor(codec.frame_rate, job.target_frame_rate)
        frame_rate = codec.frame_rate / factor
    encoded = []
    for ch in channels:
        ch24 = resample(ch, rate, codec.native_rate)
        feats = codec.encode(ch24)
        if factor > 1:
            feats = block_mean(feats, factor)
        encoded.append(feats.astype(np.float32))
    os.makedirs(job.out_dir, exist_ok=True)
    out_path = os.path.join(
        job.out_dir, os.path.splitext(os.path.basename(path))[0] + ".epf1")
    from .epf_writer import write_epf1
    write_epf1(out_path, encoded, frame_rate)
    return out_path


def run_job(job: ExtractionJob) -> list[str]:
    return [extract_file(path, job) for path in job.inputs]
