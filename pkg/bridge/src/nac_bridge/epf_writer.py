"""EPF1 writer: the byte contract the endpointer toolkit reads.

Layout (little-endian): magic "EPF1", u32 version=1, u8 n_streams, u32 dim,
f32 frame_rate_hz, u32 num_frames, u8 has_labels, then per stream
num_frames*dim f32 row-major (labels are never written by the bridge).
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"EPF1"
VERSION = 1
HEADER = struct.Struct("<4sIBIfIB")


def write_epf1(path: str, streams: list[np.ndarray], frame_rate_hz: float) -> None:
    if not 1 <= len(streams) <= 2:
        raise ValueError("EPF1 carries 1 or 2 streams")
    shapes = {s.shape for s in streams}
    if len(shapes) != 1:
        raise ValueError(f"streams disagree on shape: {shapes}")
    num_frames, dim = streams[0].shape
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, len(streams), dim,
                            frame_rate_hz, num_frames, 0))
        for s in streams:
            f.write(np.ascontiguousarray(s, dtype="<f4").tobytes())
