"""EPF1 feature files: the on-disk interchange format for feature frames.

Layout (all little-endian):

    magic   "EPF1"          4 bytes
    version u32 = 1
    n_streams u8            1 or 2
    dim     u32
    frame_rate_hz f32
    num_frames u32
    has_labels u8           0 or 1
    stream data             per stream: num_frames * dim f32, row-major
    labels  (optional)      num_frames u8, values 0..3 or 255 (pad)

Round-trips are bit-exact; features are stored as f32.
"""

from __future__ import annotations

import struct
from typing import Optional

import numpy as np

from .errors import FormatError
from .features import FeatureSequence
from .labels import LabelSequence, PAD

MAGIC = b"EPF1"
VERSION = 1
_HEADER = struct.Struct("<4sIBIfIB")


def write_features(path: str, seq: FeatureSequence,
                   labels: Optional[LabelSequence] = None) -> None:
    """Write a feature sequence (and optional frame labels) to an EPF1 file."""
    if labels is not None and len(labels) != seq.num_frames:
        raise ValueError(f"labels length {len(labels)} != num_frames {seq.num_frames}")
    header = _HEADER.pack(MAGIC, VERSION, seq.n_streams, seq.dim,
                          seq.frame_rate_hz, seq.num_frames,
                          0 if labels is None else 1)
    with open(path, "wb") as f:
        f.write(header)
        for stream in seq.streams:
            f.write(np.ascontiguousarray(stream, dtype="<f4").tobytes())
        if labels is not None:
            lab = np.asarray(labels.labels, dtype=np.uint8)
            bad = (lab > 3) & (lab != PAD)
            if bad.any():
                raise ValueError("labels must be 0..3 or the pad sentinel 255")
            f.write(lab.tobytes())


def read_features(path: str) -> tuple[FeatureSequence, Optional[LabelSequence]]:
    """Read an EPF1 file; errors report the byte offset of the problem."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header: {len(raw)} bytes", offset=len(raw))
    magic, version, n_streams, dim, frame_rate, num_frames, has_labels = \
        _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if n_streams not in (1, 2):
        raise FormatError(f"n_streams must be 1 or 2, got {n_streams}", offset=8)
    if has_labels not in (0, 1):
        raise FormatError(f"has_labels must be 0 or 1, got {has_labels}",
                          offset=_HEADER.size - 1)
    offset = _HEADER.size
    stream_bytes = num_frames * dim * 4
    streams = []
    for _ in range(n_streams):
        end = offset + stream_bytes
        if len(raw) < end:
            raise FormatError("truncated stream payload", offset=len(raw))
        mat = np.frombuffer(raw, dtype="<f4", count=num_frames * dim,
                            offset=offset).reshape(num_frames, dim)
        streams.append(mat.astype(np.float32))
        offset = end
    seq = FeatureSequence(streams=tuple(streams), frame_rate_hz=frame_rate)
    labels = None
    if has_labels:
        end = offset + num_frames
        if len(raw) < end:
            raise FormatError("truncated label payload", offset=len(raw))
        lab = np.frombuffer(raw, dtype=np.uint8, count=num_frames,
                            offset=offset).copy()
        bad = (lab > 3) & (lab != PAD)
        if bad.any():
            first = int(np.argmax(bad))
            raise FormatError(f"invalid label value {lab[first]}",
                              offset=offset + first)
        labels = LabelSequence(labels=lab, frame_rate_hz=frame_rate, delay_tau=0)
        offset = end
    if len(raw) != offset:
        raise FormatError(f"{len(raw) - offset} trailing bytes", offset=offset)
    return seq, labels
