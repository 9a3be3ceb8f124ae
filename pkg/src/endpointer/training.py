"""Training loop for the recurrent endpointer.

Per iteration, a training sequence is sampled from each dialogue: it starts
at a uniformly chosen turn start and is truncated after a fixed window
(40 s by default, shorter if the dialogue ends). Targets are the frame
labels of the window with the label delay applied after windowing, so every
window begins with exactly tau pad targets. The loss is masked
cross-entropy; optimization is Adam with global-norm gradient clipping.

After each epoch the model is scored on the validation set as the mean of
per-frame recall over the user and user-end classes; the checkpoint with
the best score is kept.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .corpus import DialogueScript
from .errors import NonFiniteGradientError
from .features import (FeatureSequence, SynthFeatureConfig, render_features,
                       num_frames_for)
from .labels import (LabelSequence, SystemActivitySequence, PAD,
                     apply_label_delay, labels_from_script,
                     system_activity_from_script, LABEL_USER, LABEL_USER_END,
                     N_CLASSES, CLASS_NAMES)
from .model import (ModelCheckpoint, ModelConfig, SINGLE_STREAM, TWO_STREAM as
                    ARCH_TWO_STREAM, _forward_arrays, backward,
                    batch_masked_loss, clone_checkpoint, init_model)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    window_s: float = 40.0
    batch_size: int = 16
    delay_tau: int = 0
    grad_clip: float = 5.0
    rng_seed: int = 0
    # Optional stopping aids (both off by default: run all epochs).
    early_stop_patience: Optional[int] = None
    target_score: Optional[float] = None

    def validate(self) -> None:
        for name in ("epochs", "lr", "window_s", "batch_size", "grad_clip"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.delay_tau:
            raise ValueError("delay_tau must be non-negative")


@dataclass
class AdamState:
    """First/second moment estimates per parameter plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
                   v={k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
                   step=0)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2))
                          for g in grads.values()))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, cfg: TrainConfig) -> None:
    """In-place Adam update with bias correction."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name].astype(np.float64)
        state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p -= (cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.dtype)


def backward_and_step(checkpoint: ModelCheckpoint, cache: dict,
                      labels: np.ndarray, time_mask: np.ndarray,
                      adam_state: AdamState, train_cfg: TrainConfig) -> float:
    """Full BPTT + clipped Adam update; returns the pre-clip gradient norm.

    Raises NonFiniteGradientError if any gradient is NaN/Inf.
    """
    grads = backward(checkpoint, cache, labels, time_mask)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {name}")
    norm = clip_global_norm(grads, train_cfg.grad_clip)
    adam_step(checkpoint.params, grads, adam_state, train_cfg)
    return norm


# ---------------------------------------------------------------------------
# Training examples
# ---------------------------------------------------------------------------

@dataclass
class TrainingExample:
    """One dialogue with everything the trainer needs, precomputed."""

    script: DialogueScript
    features: FeatureSequence
    labels: LabelSequence                    # undelayed ground truth
    sys_flags: SystemActivitySequence
    turn_start_frames: np.ndarray            # candidates for window starts

    @property
    def num_frames(self) -> int:
        return self.features.num_frames


def prepare_examples(scripts: list[DialogueScript], synth_cfg: SynthFeatureConfig,
                     mode: str) -> list[TrainingExample]:
    """Render features and derive labels/flags for a list of scripts."""
    out = []
    for script in scripts:
        n = num_frames_for(script, synth_cfg.frame_rate_hz)
        feats = render_features(script, synth_cfg, mode=mode, num_frames=n)
        out.append(example_from_features(script, feats))
    return out


def example_from_features(script: DialogueScript,
                          feats: FeatureSequence) -> TrainingExample:
    fr = feats.frame_rate_hz
    n = feats.num_frames
    labels = labels_from_script(script, fr, n)
    flags = system_activity_from_script(script, fr, n)
    starts = np.array(
        sorted({min(int(math.ceil(t.start_ms * fr / 1000.0)), max(n - 1, 0))
                for t in script.turns}), dtype=np.int64)
    if len(starts) == 0:
        starts = np.array([0], dtype=np.int64)
    return TrainingExample(script=script, features=feats, labels=labels,
                           sys_flags=flags, turn_start_frames=starts)


def _assemble_batch(windows: list[tuple[TrainingExample, int, int]],
                    config: ModelConfig, tau: int):
    """Pad sampled windows into batch arrays.

    Returns (streams, flags, labels, time_mask); label delay is applied per
    window after slicing, and padded frames carry the pad sentinel.
    """
    dtype = config.np_dtype
    b = len(windows)
    t_max = max(e - s for _, s, e in windows)
    n_streams = 2 if config.arch == ARCH_TWO_STREAM else 1
    streams = [np.zeros((b, t_max, config.input_dim), dtype=dtype)
               for _ in range(n_streams)]
    labels = np.full((b, t_max), PAD, dtype=np.uint8)
    flags = np.zeros((b, t_max), dtype=np.int64)
    time_mask = np.zeros((b, t_max), dtype=bool)
    for i, (ex, s, e) in enumerate(windows):
        n = e - s
        for j in range(n_streams):
            streams[j][i, :n] = ex.features.streams[j][s:e]
        window_labels = LabelSequence(labels=ex.labels.labels[s:e],
                                      frame_rate_hz=ex.labels.frame_rate_hz)
        delayed = apply_label_delay(window_labels, min(tau, n))
        labels[i, :n] = delayed.labels
        flags[i, :n] = ex.sys_flags.flags[s:e]
        time_mask[i, :n] = True
    return streams, flags, labels, time_mask


def train(train_set: list[TrainingExample], valid_set: list[TrainingExample],
          model_cfg: ModelConfig, train_cfg: TrainConfig,
          log_every: int = 0) -> tuple[ModelCheckpoint, list[dict]]:
    """Train a model; returns (best checkpoint, per-epoch log rows).

    Deterministic for fixed seeds: window sampling, batching order, and the
    update sequence are all driven by train_cfg.rng_seed.
    """
    train_cfg.validate()
    model_cfg.validate()
    if not train_set:
        raise ValueError("empty training set")
    rates = {ex.features.frame_rate_hz for ex in train_set + valid_set}
    if len(rates) > 1:
        raise ValueError(f"mixed frame rates in corpus: {sorted(rates)}")
    frame_rate = rates.pop()
    window_frames = int(round(train_cfg.window_s * frame_rate))

    checkpoint = init_model(model_cfg)
    adam = AdamState.init(checkpoint.params)
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.rng_seed, 11]))

    best: Optional[ModelCheckpoint] = None
    best_score = -1.0
    best_epoch = -1
    history: list[dict] = []
    since_best = 0

    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        # Sample one window per dialogue, starting at a uniform turn start.
        windows = []
        for idx in order:
            ex = train_set[idx]
            start = int(ex.turn_start_frames[rng.integers(len(ex.turn_start_frames))])
            end = min(start + window_frames, ex.num_frames)
            if end <= start:
                continue
            windows.append((ex, start, end))
        total_loss = 0.0
        n_batches = 0
        for ofs in range(0, len(windows), train_cfg.batch_size):
            chunk = windows[ofs:ofs + train_cfg.batch_size]
            streams, flags, labels, mask = _assemble_batch(
                chunk, model_cfg, train_cfg.delay_tau)
            probs, cache = _forward_arrays(
                checkpoint.params, model_cfg, streams,
                flags if model_cfg.arch == SINGLE_STREAM else None,
                want_cache=True)
            loss, count = batch_masked_loss(probs, labels, mask)
            if count == 0:
                continue
            try:
                backward_and_step(checkpoint, cache, labels, mask, adam, train_cfg)
            except NonFiniteGradientError as err:
                raise NonFiniteGradientError(
                    f"epoch {epoch}, batch {n_batches}: {err}") from err
            total_loss += loss
            n_batches += 1
        epoch_loss = total_loss / max(n_batches, 1)

        score, recalls = validate(checkpoint, valid_set, train_cfg.delay_tau)
        row = {"epoch": epoch, "train_loss": epoch_loss, "val_score": score}
        row.update({f"recall_{name}": recalls.get(name) for name in CLASS_NAMES})
        history.append(row)
        if log_every and epoch % log_every == 0:
            log.info("epoch %d: loss %.4f val %.4f", epoch, epoch_loss, score)

        if score > best_score:
            best_score = score
            best_epoch = epoch
            best = clone_checkpoint(checkpoint)
            since_best = 0
        else:
            since_best += 1
        if train_cfg.target_score is not None and best_score >= train_cfg.target_score:
            break
        if (train_cfg.early_stop_patience is not None
                and since_best >= train_cfg.early_stop_patience):
            break

    assert best is not None
    best.meta.update({
        "epoch": best_epoch,
        "val_score": best_score,
        "delay_tau": train_cfg.delay_tau,
        "epochs_run": len(history),
        "frame_rate_hz": frame_rate,
    })
    return best, history


def predict(checkpoint: ModelCheckpoint, examples: list[TrainingExample],
            batch_size: int = 8) -> list[np.ndarray]:
    """Full-dialogue probability traces, one (T, n_classes) array each."""
    config = checkpoint.config
    out: list[np.ndarray] = []
    for ofs in range(0, len(examples), batch_size):
        chunk = [(ex, 0, ex.num_frames)
                 for ex in examples[ofs:ofs + batch_size]]
        streams, flags, _, _ = _assemble_batch(chunk, config, 0)
        probs, _ = _forward_arrays(
            checkpoint.params, config, streams,
            flags if config.arch == SINGLE_STREAM else None, want_cache=False)
        for i, (ex, _, _) in enumerate(chunk):
            out.append(probs[i, :ex.num_frames].copy())
    return out


def validate(checkpoint: ModelCheckpoint, valid_set: list[TrainingExample],
             tau: int, batch_size: int = 8) -> tuple[float, dict[str, float]]:
    """Frame recall per class against tau-delayed targets on full dialogues.

    The selection score is the mean recall over the user and user-end
    classes; a class absent from the set is excluded with a warning.
    """
    if not valid_set:
        return 0.0, {}
    config = checkpoint.config
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for ofs in range(0, len(valid_set), batch_size):
        chunk = [(ex, 0, ex.num_frames)
                 for ex in valid_set[ofs:ofs + batch_size]]
        streams, flags, labels, mask = _assemble_batch(chunk, config, tau)
        probs, _ = _forward_arrays(
            checkpoint.params, config, streams,
            flags if config.arch == SINGLE_STREAM else None, want_cache=False)
        pred = probs.argmax(axis=2)
        valid = (labels != PAD) & mask
        np.add.at(confusion, (labels[valid].astype(np.int64), pred[valid]), 1)
    recalls: dict[str, float] = {}
    for c, name in enumerate(CLASS_NAMES):
        total = confusion[c].sum()
        if total > 0:
            recalls[name] = float(confusion[c, c] / total)
    picked = []
    for c in (LABEL_USER, LABEL_USER_END):
        name = CLASS_NAMES[c]
        if name in recalls:
            picked.append(recalls[name])
        else:
            warnings.warn(f"class {name!r} absent from validation set; "
                          "excluded from the selection score")
    score = float(np.mean(picked)) if picked else 0.0
    return score, recalls
