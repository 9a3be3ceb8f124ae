"""Residual vector quantization with per-frame codebook entropy.

A stack of k-means codebooks: stage 1 quantizes raw frames, each later
stage quantizes the residual left by the stages before it. The embedded
feature for a frame is the sum of its selected code vectors.

The per-frame entropy treats squared distances to the stage-1 codebook as
negative logits of a softmax; frames close to one code vector get a peaked
distribution (low entropy), frames roughly equidistant from many
vectors come out near-uniform (high entropy); silence typically lands in
the second group because the codebook spends few vectors on it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass
class RvqCodec:
    """Trained quantizer stack. Immutable once trained; safe to share."""

    codebooks: np.ndarray        # (NQ, K, D)
    entropy_temperature: float
    trained_on: str = ""

    @property
    def num_quantizers(self) -> int:
        return self.codebooks.shape[0]

    @property
    def codebook_size(self) -> int:
        return self.codebooks.shape[1]

    @property
    def dim(self) -> int:
        return self.codebooks.shape[2]


def _sq_dists(frames: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, shape (N, K). Clipped at 0."""
    d2 = (np.sum(frames ** 2, axis=1)[:, None]
          - 2.0 * frames @ centers.T
          + np.sum(centers ** 2, axis=1)[None, :])
    return np.maximum(d2, 0.0)


def _kmeans_pp_init(frames: np.ndarray, k: int,
                    rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: spread initial centers by squared-distance sampling."""
    n = frames.shape[0]
    centers = np.empty((k, frames.shape[1]))
    centers[0] = frames[rng.integers(0, n)]
    closest = _sq_dists(frames, centers[:1]).ravel()
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            centers[i] = frames[rng.integers(0, n)]
        else:
            probs = closest / total
            centers[i] = frames[rng.choice(n, p=probs)]
        closest = np.minimum(closest, _sq_dists(frames, centers[i:i + 1]).ravel())
    return centers


def _lloyd(frames: np.ndarray, k: int, iters: int,
           rng: np.random.Generator) -> np.ndarray:
    centers = _kmeans_pp_init(frames, k, rng)
    for _ in range(iters):
        d2 = _sq_dists(frames, centers)
        assign = np.argmin(d2, axis=1)
        for c in range(k):
            members = frames[assign == c]
            if len(members) == 0:
                # Re-seed an empty cluster to the point farthest from its center.
                nearest = d2[np.arange(len(frames)), assign]
                centers[c] = frames[int(np.argmax(nearest))]
            else:
                centers[c] = members.mean(axis=0)
    return centers


def rvq_train(frames: np.ndarray, nq: int, k: int, iters: int = 25,
              rng_seed: int = 0, trained_on: str = "") -> RvqCodec:
    """Train an NQ-stage residual quantizer on (N, D) frames.

    Each stage runs Lloyd's k-means (k-means++ seeding, fixed seed) on the
    residual after all earlier stages. The entropy temperature defaults to
    the mean squared nearest-neighbor distance to the stage-1 codebook over
    the training frames, making the entropy scale-free.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise ValueError("training frames must be a 2-D array")
    n = frames.shape[0]
    if n < k:
        raise ValueError(f"need at least k={k} frames, got {n}")
    if nq < 1:
        raise ValueError("nq must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 17]))
    residual = frames.copy()
    books = []
    for _ in range(nq):
        centers = _lloyd(residual, k, iters, rng)
        books.append(centers)
        assign = np.argmin(_sq_dists(residual, centers), axis=1)
        residual = residual - centers[assign]
    codebooks = np.stack(books)
    nn_d2 = np.min(_sq_dists(frames, codebooks[0]), axis=1)
    temperature = float(np.mean(nn_d2))
    if temperature <= 1e-12:
        temperature = 1.0      # degenerate: data sits exactly on the codebook
    return RvqCodec(codebooks=codebooks, entropy_temperature=temperature,
                    trained_on=trained_on)


def rvq_quantize(codec: RvqCodec, frame: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Quantize one D-vector: stage-wise nearest neighbor on the residual.

    Returns (codes, embedded) where codes are the per-stage indices and
    embedded is the sum of the selected code vectors. Distance ties break
    toward the lowest index (argmin behavior).
    """
    frame = np.asarray(frame, dtype=np.float64).reshape(-1)
    if frame.shape[0] != codec.dim:
        raise ValueError(f"frame dim {frame.shape[0]} != codec dim {codec.dim}")
    codes = np.empty(codec.num_quantizers, dtype=np.int64)
    residual = frame.copy()
    embedded = np.zeros_like(frame)
    for s in range(codec.num_quantizers):
        d2 = np.sum((codec.codebooks[s] - residual) ** 2, axis=1)
        idx = int(np.argmin(d2))
        codes[s] = idx
        embedded += codec.codebooks[s, idx]
        residual -= codec.codebooks[s, idx]
    return codes, embedded


def rvq_encode_frames(codec: RvqCodec, frames: np.ndarray,
                      nq: int | None = None) -> np.ndarray:
    """Embed (T, D) frames using the first nq stages (all by default)."""
    frames = np.asarray(frames, dtype=np.float64)
    use = codec.num_quantizers if nq is None else min(nq, codec.num_quantizers)
    residual = frames.copy()
    embedded = np.zeros_like(frames)
    for s in range(use):
        assign = np.argmin(_sq_dists(residual, codec.codebooks[s]), axis=1)
        vecs = codec.codebooks[s][assign]
        embedded += vecs
        residual -= vecs
    return embedded


def codebook_entropy(codec: RvqCodec, frame: np.ndarray) -> float:
    """Entropy (nats) of the softmax over negative squared stage-1 distances."""
    return float(codebook_entropy_frames(codec, np.asarray(frame).reshape(1, -1))[0])


def codebook_entropy_frames(codec: RvqCodec, frames: np.ndarray) -> np.ndarray:
    """Vectorized entropy for (T, D) frames; values lie in [0, ln K]."""
    frames = np.asarray(frames, dtype=np.float64)
    d2 = _sq_dists(frames, codec.codebooks[0])
    logits = -d2 / codec.entropy_temperature
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    return -terms.sum(axis=1)


def reconstruction_error(codec: RvqCodec, frames: np.ndarray,
                         nq: int | None = None) -> float:
    """Mean squared error between frames and their embeddings."""
    emb = rvq_encode_frames(codec, frames, nq=nq)
    return float(np.mean(np.sum((frames - emb) ** 2, axis=1)))


# ---------------------------------------------------------------------------
# Codec files (.npz with a JSON metadata entry)
# ---------------------------------------------------------------------------

def save_codec(codec: RvqCodec, path: str) -> None:
    meta = {"entropy_temperature": codec.entropy_temperature,
            "trained_on": codec.trained_on}
    np.savez(path, codebooks=codec.codebooks.astype(np.float64),
             meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8))


def load_codec(path: str) -> RvqCodec:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        return RvqCodec(codebooks=data["codebooks"],
                        entropy_temperature=float(meta["entropy_temperature"]),
                        trained_on=meta.get("trained_on", ""))
