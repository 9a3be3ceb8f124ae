"""Residual k-means quantizer for the self-contained DSP codec backend."""

from __future__ import annotations

import numpy as np


def _sq_dists(frames: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (np.sum(frames ** 2, axis=1)[:, None]
          - 2.0 * frames @ centers.T
          + np.sum(centers ** 2, axis=1)[None, :])
    return np.maximum(d2, 0.0)


def kmeans(frames: np.ndarray, k: int, iters: int,
           rng: np.random.Generator) -> np.ndarray:
    """Lloyd's algorithm with distance-weighted seeding; deterministic."""
    n = frames.shape[0]
    centers = np.empty((k, frames.shape[1]))
    centers[0] = frames[rng.integers(0, n)]
    closest = _sq_dists(frames, centers[:1]).ravel()
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            centers[i] = frames[rng.integers(0, n)]
        else:
            centers[i] = frames[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, _sq_dists(frames, centers[i:i + 1]).ravel())
    for _ in range(iters):
        d2 = _sq_dists(frames, centers)
        assign = np.argmin(d2, axis=1)
        for c in range(k):
            members = frames[assign == c]
            if len(members) == 0:
                worst = np.argmax(d2[np.arange(n), assign])
                centers[c] = frames[int(worst)]
            else:
                centers[c] = members.mean(axis=0)
    return centers


def train_residual_stages(frames: np.ndarray, nq: int, k: int, iters: int,
                          seed: int) -> np.ndarray:
    """Stack of codebooks, each trained on the previous stages' residual."""
    if frames.shape[0] < k:
        raise ValueError(f"need at least {k} frames to train a codebook, "
                         f"got {frames.shape[0]}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 41]))
    residual = frames.astype(np.float64).copy()
    books = []
    for _ in range(nq):
        centers = kmeans(residual, k, iters, rng)
        books.append(centers)
        assign = np.argmin(_sq_dists(residual, centers), axis=1)
        residual -= centers[assign]
    return np.stack(books)


def embed(frames: np.ndarray, codebooks: np.ndarray, nq: int) -> np.ndarray:
    """Sum of selected code vectors over the first nq stages."""
    residual = frames.astype(np.float64).copy()
    out = np.zeros_like(residual)
    for s in range(min(nq, codebooks.shape[0])):
        assign = np.argmin(_sq_dists(residual, codebooks[s]), axis=1)
        vecs = codebooks[s][assign]
        out += vecs
        residual -= vecs
    return out
