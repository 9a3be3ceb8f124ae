"""Streaming speech endpointing toolkit for multi-turn dialogue.

Provides synthetic dialogue corpora with ground-truth timing, frame-level
label generation with a configurable label delay, acoustic feature pipelines
(synthetic renderer, log-mel, causal downsampling, residual vector
quantization), a recurrent endpointer trained with masked cross-entropy,
streaming threshold-triggered endpoint detection, latency/cutoff evaluation,
and a duplex simulation that controls a scripted dialogue agent with
pad/unk tokens.
"""

__version__ = "0.1.0"
