"""nac-extract: encode audio files into EPF1 feature files."""

from __future__ import annotations

import argparse
import sys
from typing import Optional

from .pipeline import ExtractionJob, run_job


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nac-extract",
        description="Extract codec features from WAV files into EPF1 files")
    parser.add_argument("--codec", default="dsp",
                        help="dsp (offline), encodec, or mimi")
    parser.add_argument("--nq", type=int, default=4,
                        help="number of quantizer codebooks to use")
    parser.add_argument("--in", dest="inputs", nargs="+", required=True,
                        metavar="WAV")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--streams", choices=("mono", "two"), default="mono")
    parser.add_argument("--frame-rate", type=float, default=None,
                        help="downsample to this rate via causal block means")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    job = ExtractionJob(inputs=args.inputs, codec=args.codec, nq=args.nq,
                        out_dir=args.out, streams=args.streams,
                        target_frame_rate=args.frame_rate)
    try:
        for path in run_job(job):
            print(path)
        return 0
    except Exception as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
