"""Codec backends: a self-contained DSP+RVQ codec and pretrained adapters.

Every backend exposes the same surface: `native_rate` (audio is resampled
to it before encoding), `frame_rate`, `dim`, and `encode(mono_samples)`
returning one (T, dim) float matrix of code-vector features (sum over the
selected codebooks).

`dsp` works offline and deterministically: a log-mel frontend at 24 kHz
with a residual k-means quantizer trained on the clip being encoded.
`encodec` and `mimi` wrap pretrained models through the transformers
library and require their weights to be available locally.
"""

from __future__ import annotations

import numpy as np

from .quantizer import embed, train_residual_stages


class CodecUnavailableError(RuntimeError):
    """The requested backend cannot run in this environment."""


class DspCodec:
    """Log-mel frontend + residual k-means quantizer, trained per clip.

    The quantizer is fitted on the clip's own frames with a fixed seed, so
    the same audio always produces the identical file and no pretrained
    assets are needed.
    """

    name = "dsp"
    native_rate = 24000
    frame_rate = 25.0

    def __init__(self, nq: int = 4, dim: int = 64, codebook_size: int = 64,
                 iters: int = 15, seed: int = 0):
        self.nq = nq
        self.dim = dim
        self.codebook_size = codebook_size
        self.iters = iters
        self.seed = seed
        self._window = int(self.native_rate * 0.080)     # 80 ms
        self._hop = int(self.native_rate * 0.040)        # 40 ms -> 25 Hz

    def _logmel(self, samples: np.ndarray) -> np.ndarray:
        win, hop = self._window, self._hop
        if len(samples) < win:
            return np.zeros((0, self.dim))
        n_frames = (len(samples) - win) // hop + 1
        idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
        frames = samples[idx] * np.hanning(win)[None, :]
        spectrum = np.abs(np.fft.rfft(frames, axis=1)) ** 2
        fb = _mel_filterbank(self.dim, win, self.native_rate)
        return np.log(spectrum @ fb.T + 1e-10)

    def encode(self, samples: np.ndarray) -> np.ndarray:
        feats = self._logmel(np.asarray(samples, dtype=np.float64))
        if feats.shape[0] < self.codebook_size:
            raise ValueError(
                f"clip too short: {feats.shape[0]} frames, need at least "
                f"{self.codebook_size} to fit the quantizer")
        books = train_residual_stages(feats, self.nq, self.codebook_size,
                                      self.iters, self.seed)
        return embed(feats, books, self.nq)


def _mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)

    n_bins = n_fft // 2 + 1
    freqs = np.arange(n_bins) * sample_rate / n_fft
    pts = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0),
                                n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = pts[m], pts[m + 1], pts[m + 2]
        up = (freqs - lo) / max(mid - lo, 1e-12)
        down = (hi - freqs) / max(hi - mid, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


class _TransformersCodec:
    """Shared wiring for pretrained codecs served by transformers."""

    name = ""
    model_id = ""
    native_rate = 24000
    frame_rate = 75.0
    dim = 128

    def __init__(self, nq: int):
        self.nq = nq
        try:
            import torch                                   # noqa: F401
            import transformers                            # noqa: F401
        except ImportError as err:
            raise CodecUnavailableError(
                f"{self.name} backend needs torch and transformers "
                f"installed: {err}") from err
        self._model = self._load()

    def _load(self):
        raise NotImplementedError

    def _load_pretrained(self, cls):
        try:
            return cls.from_pretrained(self.model_id, local_files_only=True)
        except Exception as err:
            raise CodecUnavailableError(
                f"{self.name} weights for {self.model_id!r} are not cached "
                f"locally; fetch them on a connected machine first "
                f"({err})") from err

    def encode(self, samples: np.ndarray) -> np.ndarray:
        import torch

        model = self._model
        with torch.no_grad():
            wav = torch.tensor(samples, dtype=torch.float32)[None, None, :]
            enc = model.encode(wav)
            codes = enc.audio_codes
            # (chunks, batch, n_q, frames) or (batch, n_q, frames)
            if codes.dim() == 4:
                codes = codes[0]
            codes = codes[0, :self.nq]                    # (nq, frames)
            quantizer = model.quantizer
            total = None
            for q, layer in enumerate(quantizer.layers[:self.nq]):
                vecs = layer.codebook.embed(codes[q][None, :])[0]
                total = vecs if total is None else total + vecs
            return total.transpose(0, 1).cpu().numpy().astype(np.float64)


class EncodecCodec(_TransformersCodec):
    name = "encodec"
    model_id = "facebook/encodec_24khz"
    native_rate = 24000
    frame_rate = 75.0
    dim = 128

    def _load(self):
        from transformers import EncodecModel
        return self._load_pretrained(EncodecModel)


class MimiCodec(_TransformersCodec):
    name = "mimi"
    model_id = "kyutai/mimi"
    native_rate = 24000
    frame_rate = 12.5
    dim = 512

    def _load(self):
        from transformers import MimiModel
        return self._load_pretrained(MimiModel)


CODECS = {
    "dsp": DspCodec,
    "encodec": EncodecCodec,
    "mimi": MimiCodec,
}


def get_codec(name: str, nq: int):
    try:
        cls = CODECS[name]
    except KeyError:
        raise ValueError(f"unknown codec {name!r}; choose from "
                         f"{sorted(CODECS)}") from None
    return cls(nq=nq)
