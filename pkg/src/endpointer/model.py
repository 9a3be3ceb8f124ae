"""Recurrent endpointer: architecture, forward pass, loss, and gradients.

Two architectures over shared building blocks:

* single-stream: one merged audio channel plus a learnable 2-row
  system-activity embedding added to the acoustic features before the
  projection stack, then an LSTM stack and a 4-way softmax head.
* two-stream: separate user/system channels through a shared projection
  stack, each into its own LSTM stack; the per-frame concatenation of both
  stacks feeds one joint 4-way head.

Everything is plain numpy with explicit backpropagation through time, so
gradients can be audited against finite differences in float64. The
streaming path (`forward_step`) reuses the exact same cell arithmetic as
the full-sequence path, which keeps online and offline probabilities equal.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .errors import FormatError
from .features import FeatureSequence
from .labels import LabelSequence, SystemActivitySequence, PAD

SINGLE_STREAM = "single"
TWO_STREAM = "two"

_GATES = 4   # i, f, g, o


@dataclass
class ModelConfig:
    arch: str = SINGLE_STREAM
    input_dim: int = 40
    proj_layers: int = 2
    proj_dim: int = 48
    lstm_layers: int = 2
    hidden_dim: int = 64
    n_classes: int = 4
    rng_seed: int = 0
    dtype: str = "float32"        # float64 for gradient audits

    def validate(self) -> None:
        if self.arch not in (SINGLE_STREAM, TWO_STREAM):
            raise ValueError(f"unknown arch {self.arch!r}")
        for name in ("input_dim", "lstm_layers", "hidden_dim", "n_classes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.proj_layers < 0 or (self.proj_layers > 0 and self.proj_dim <= 0):
            raise ValueError("projection config must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def lstm_input_dim(self) -> int:
        return self.proj_dim if self.proj_layers > 0 else self.input_dim

    def stacks(self) -> tuple[str, ...]:
        return ("u", "s") if self.arch == TWO_STREAM else ("m",)


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Declared parameter layout; iteration order is the storage order."""
    shapes: dict[str, tuple] = {}
    d, h, c = config.input_dim, config.hidden_dim, config.n_classes
    if config.arch == SINGLE_STREAM:
        shapes["embed.sys"] = (2, d)
    prev = d
    for i in range(config.proj_layers):
        shapes[f"proj.{i}.W"] = (prev, config.proj_dim)
        shapes[f"proj.{i}.b"] = (config.proj_dim,)
        prev = config.proj_dim
    for stack in config.stacks():
        in_dim = config.lstm_input_dim
        for l in range(config.lstm_layers):
            shapes[f"lstm.{stack}{l}.Wx"] = (in_dim, _GATES * h)
            shapes[f"lstm.{stack}{l}.Wh"] = (h, _GATES * h)
            shapes[f"lstm.{stack}{l}.b"] = (_GATES * h,)
            in_dim = h
    head_in = h * (2 if config.arch == TWO_STREAM else 1)
    shapes["head.W"] = (head_in, c)
    shapes["head.b"] = (c,)
    return shapes


def init_model(config: ModelConfig) -> ModelCheckpoint:
    """Deterministic init: uniform fan-in scaling, zero biases, forget bias +1."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([config.rng_seed, 3]))
    dtype = config.np_dtype
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            arr = np.zeros(shape, dtype=dtype)
            if ".W" not in name and name.startswith("lstm."):
                h = config.hidden_dim
                arr[h:2 * h] = 1.0       # forget-gate bias
        else:
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            scale = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-scale, scale, size=shape).astype(dtype)
        params[name] = arr
    return ModelCheckpoint(config=config, params=params, meta={})


# ---------------------------------------------------------------------------
# Elementwise pieces
# ---------------------------------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -60.0, 60.0)))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _cell(params: dict, key: str, x_t: np.ndarray, h_prev: np.ndarray,
          c_prev: np.ndarray):
    """One LSTM step for layer `key`; returns (h, c, gates)."""
    hid = h_prev.shape[-1]
    z = x_t @ params[f"{key}.Wx"] + h_prev @ params[f"{key}.Wh"] + params[f"{key}.b"]
    i = _sigmoid(z[:, :hid])
    f = _sigmoid(z[:, hid:2 * hid])
    g = np.tanh(z[:, 2 * hid:3 * hid])
    o = _sigmoid(z[:, 3 * hid:])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c, np.concatenate([i, f, g, o], axis=1)


def _project(params: dict, config: ModelConfig, x: np.ndarray,
             cache: Optional[list] = None) -> np.ndarray:
    for i in range(config.proj_layers):
        x = np.tanh(x @ params[f"proj.{i}.W"] + params[f"proj.{i}.b"])
        if cache is not None:
            cache.append(x)
    return x


def _run_stack(params: dict, config: ModelConfig, stack: str, x: np.ndarray,
               cache: Optional[dict] = None) -> np.ndarray:
    """Full-sequence LSTM stack over (B, T, in)."""
    b, t, _ = x.shape
    h_dim = config.hidden_dim
    dtype = x.dtype
    for l in range(config.lstm_layers):
        key = f"lstm.{stack}{l}"
        h_seq = np.empty((b, t, h_dim), dtype=dtype)
        c_seq = np.empty((b, t, h_dim), dtype=dtype)
        gate_seq = np.empty((b, t, _GATES * h_dim), dtype=dtype)
        h = np.zeros((b, h_dim), dtype=dtype)
        c = np.zeros((b, h_dim), dtype=dtype)
        for step in range(t):
            h, c, gates = _cell(params, key, x[:, step], h, c)
            h_seq[:, step] = h
            c_seq[:, step] = c
            gate_seq[:, step] = gates
        if cache is not None:
            cache[key] = {"x": x, "h": h_seq, "c": c_seq, "gates": gate_seq}
        x = h_seq
    return x


def _forward_arrays(params: dict, config: ModelConfig, streams: list[np.ndarray],
                    flags: Optional[np.ndarray], want_cache: bool):
    """Batched forward. streams: list of (B, T, D); flags: (B, T) ints or None."""
    cache: dict = {"streams": [], "proj": [], "lstm": {}, "flags": flags}
    tops = []
    for idx, (stack, x) in enumerate(zip(config.stacks(), streams)):
        if config.arch == SINGLE_STREAM:
            x = x + params["embed.sys"][flags]
        cache["streams"].append(x)
        proj_cache: list = [] if want_cache else None
        projected = _project(params, config, x, cache=proj_cache)
        cache["proj"].append(proj_cache)
        top = _run_stack(params, config, stack, projected,
                         cache=cache["lstm"] if want_cache else None)
        tops.append(top)
    h_top = tops[0] if len(tops) == 1 else np.concatenate(tops, axis=2)
    logits = h_top @ params["head.W"] + params["head.b"]
    probs = _softmax(logits)
    if want_cache:
        cache["h_top"] = h_top
        cache["probs"] = probs
        return probs, cache
    return probs, None


def forward(checkpoint: ModelCheckpoint, features: FeatureSequence,
            sys_activity: Optional[SystemActivitySequence] = None,
            want_cache: bool = False):
    """Frame probabilities (T, n_classes) for one dialogue.

    Single-stream models require `sys_activity` with one flag per frame;
    two-stream models require a two-stream FeatureSequence.
    """
    config = checkpoint.config
    dtype = config.np_dtype
    if config.arch == SINGLE_STREAM:
        if features.n_streams != 1:
            raise ValueError("single-stream model takes a 1-stream FeatureSequence")
        if sys_activity is None:
            raise ValueError("single-stream model requires system-activity flags")
        if len(sys_activity) != features.num_frames:
            raise ValueError(
                f"sys_activity length {len(sys_activity)} != "
                f"num_frames {features.num_frames}")
        flags = np.asarray(sys_activity.flags, dtype=np.int64)[None, :]
    else:
        if features.n_streams != 2:
            raise ValueError("two-stream model takes a 2-stream FeatureSequence")
        flags = None
    if features.dim != config.input_dim:
        raise ValueError(f"feature dim {features.dim} != model input_dim "
                         f"{config.input_dim}")
    streams = [np.asarray(s, dtype=dtype)[None, :, :] for s in features.streams]
    probs, cache = _forward_arrays(checkpoint.params, config, streams, flags,
                                   want_cache)
    if want_cache:
        return probs[0], cache
    return probs[0]


# ---------------------------------------------------------------------------
# Streaming single-frame path (shares _cell/_project with the batch path)
# ---------------------------------------------------------------------------

class StreamState:
    """Per-stack recurrent state for frame-at-a-time inference."""

    def __init__(self, config: ModelConfig):
        dtype = config.np_dtype
        self.hidden = {
            stack: [(np.zeros((1, config.hidden_dim), dtype=dtype),
                     np.zeros((1, config.hidden_dim), dtype=dtype))
                    for _ in range(config.lstm_layers)]
            for stack in config.stacks()
        }


def forward_step(checkpoint: ModelCheckpoint, state: StreamState,
                 frames, sys_active: Optional[int] = None) -> np.ndarray:
    """Advance one frame; mutates `state`; returns probs (n_classes,).

    `frames` is a single (D,) vector for single-stream models or a
    (user, system) pair for two-stream models.
    """
    config = checkpoint.config
    params = checkpoint.params
    dtype = config.np_dtype
    if config.arch == SINGLE_STREAM:
        if sys_active is None:
            raise ValueError("single-stream step requires sys_active flag")
        stream_list = [np.asarray(frames, dtype=dtype).reshape(1, -1)]
    else:
        user, system = frames
        stream_list = [np.asarray(user, dtype=dtype).reshape(1, -1),
                       np.asarray(system, dtype=dtype).reshape(1, -1)]
    for x in stream_list:
        if x.shape[1] != config.input_dim:
            raise ValueError(f"frame dim {x.shape[1]} != model input_dim "
                             f"{config.input_dim}")
    tops = []
    for stack, x in zip(config.stacks(), stream_list):
        if config.arch == SINGLE_STREAM:
            x = x + params["embed.sys"][np.array([int(sys_active)])]
        x = _project(params, config, x)
        layers = state.hidden[stack]
        for l in range(config.lstm_layers):
            h, c, _ = _cell(params, f"lstm.{stack}{l}", x, *layers[l])
            layers[l] = (h, c)
            x = h
        tops.append(x)
    h_top = tops[0] if len(tops) == 1 else np.concatenate(tops, axis=1)
    logits = h_top @ params["head.W"] + params["head.b"]
    return _softmax(logits)[0]


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def masked_loss(prob_seq: np.ndarray, labels: LabelSequence) -> tuple[float, int]:
    """Mean negative log-probability over non-pad frames.

    Returns (loss, count). All-pad input yields (0.0, 0) so the trainer can
    skip the window.
    """
    probs = np.asarray(prob_seq)
    lab = np.asarray(labels.labels)
    if probs.shape[0] != lab.shape[0]:
        raise ValueError(f"probs length {probs.shape[0]} != labels {lab.shape[0]}")
    valid = lab != PAD
    count = int(valid.sum())
    if count == 0:
        return 0.0, 0
    picked = probs[valid, lab[valid].astype(np.int64)]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
    return loss, count


def batch_loss_weights(labels: np.ndarray, time_mask: np.ndarray):
    """Per-frame loss weights implementing per-sequence normalization.

    labels: (B, T) with PAD sentinels; time_mask: (B, T) bool for real frames.
    Weight of a frame is 1 / (n_valid_in_its_sequence * B); sequences with
    no valid frames contribute nothing.
    """
    valid = (labels != PAD) & time_mask
    per_seq = valid.sum(axis=1)
    b = labels.shape[0]
    w = np.zeros(labels.shape, dtype=np.float64)
    for i in range(b):
        if per_seq[i] > 0:
            w[i, valid[i]] = 1.0 / (per_seq[i] * b)
    return w, valid


def batch_masked_loss(probs: np.ndarray, labels: np.ndarray,
                      time_mask: np.ndarray) -> tuple[float, int]:
    """Batch objective: mean over sequences of per-sequence mean CE."""
    w, valid = batch_loss_weights(labels, time_mask)
    count = int(valid.sum())
    if count == 0:
        return 0.0, 0
    safe_labels = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(probs, safe_labels[..., None], axis=2)[..., 0]
    ce = -np.log(np.maximum(picked, 1e-300))
    return float((ce * w).sum()), count


# ---------------------------------------------------------------------------
# Backward pass (full BPTT)
# ---------------------------------------------------------------------------

def _stack_backward(params: dict, config: ModelConfig, stack: str,
                    cache: dict, dh_top: np.ndarray, grads: dict) -> np.ndarray:
    """Backprop through one LSTM stack; returns gradient w.r.t. stack input."""
    h_dim = config.hidden_dim
    d_upper = dh_top
    for l in reversed(range(config.lstm_layers)):
        key = f"lstm.{stack}{l}"
        lc = cache[key]
        x, h_seq, c_seq, gates = lc["x"], lc["h"], lc["c"], lc["gates"]
        b, t, _ = x.shape
        d_wx = np.zeros_like(params[f"{key}.Wx"], dtype=np.float64)
        d_wh = np.zeros_like(params[f"{key}.Wh"], dtype=np.float64)
        d_b = np.zeros_like(params[f"{key}.b"], dtype=np.float64)
        dx = np.empty_like(x)
        dh_next = np.zeros((b, h_dim), dtype=x.dtype)
        dc_next = np.zeros((b, h_dim), dtype=x.dtype)
        wx_t = params[f"{key}.Wx"].T
        wh_t = params[f"{key}.Wh"].T
        for step in reversed(range(t)):
            i = gates[:, step, :h_dim]
            f = gates[:, step, h_dim:2 * h_dim]
            g = gates[:, step, 2 * h_dim:3 * h_dim]
            o = gates[:, step, 3 * h_dim:]
            c = c_seq[:, step]
            c_prev = c_seq[:, step - 1] if step > 0 else np.zeros_like(c)
            h_prev = h_seq[:, step - 1] if step > 0 else np.zeros_like(c)
            tanh_c = np.tanh(c)
            dh = d_upper[:, step] + dh_next
            do = dh * tanh_c
            dc = dc_next + dh * o * (1.0 - tanh_c ** 2)
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dz = np.concatenate([di * i * (1.0 - i),
                                 df * f * (1.0 - f),
                                 dg * (1.0 - g ** 2),
                                 do * o * (1.0 - o)], axis=1)
            d_wx += x[:, step].T @ dz
            d_wh += h_prev.T @ dz
            d_b += dz.sum(axis=0)
            dx[:, step] = dz @ wx_t
            dh_next = dz @ wh_t
            dc_next = dc * f
        grads[f"{key}.Wx"] = d_wx
        grads[f"{key}.Wh"] = d_wh
        grads[f"{key}.b"] = d_b
        d_upper = dx
    return d_upper


def _proj_backward(params: dict, config: ModelConfig, x_in: np.ndarray,
                   proj_cache: list, d_out: np.ndarray, grads: dict) -> np.ndarray:
    """Backprop through the projection stack (grads accumulate across streams)."""
    for i in reversed(range(config.proj_layers)):
        a = proj_cache[i]
        prev = proj_cache[i - 1] if i > 0 else x_in
        da = d_out * (1.0 - a ** 2)
        flat_prev = prev.reshape(-1, prev.shape[-1])
        flat_da = da.reshape(-1, da.shape[-1])
        grads[f"proj.{i}.W"] = grads.get(f"proj.{i}.W", 0.0) + flat_prev.T @ flat_da
        grads[f"proj.{i}.b"] = grads.get(f"proj.{i}.b", 0.0) + flat_da.sum(axis=0)
        d_out = da @ params[f"proj.{i}.W"].T
    return d_out


def backward(checkpoint: ModelCheckpoint, cache: dict, labels: np.ndarray,
             time_mask: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the batch objective w.r.t. every parameter.

    labels/time_mask are (B, T); pad-labeled and padded frames contribute
    zero gradient by construction.
    """
    config = checkpoint.config
    params = checkpoint.params
    probs = cache["probs"]
    w, valid = batch_loss_weights(labels, time_mask)
    safe_labels = np.where(valid, labels, 0).astype(np.int64)
    onehot_rows = np.arange(config.n_classes)
    one = (safe_labels[..., None] == onehot_rows).astype(probs.dtype)
    dlogits = (probs - one) * w[..., None].astype(probs.dtype)

    grads: dict[str, np.ndarray] = {}
    h_top = cache["h_top"]
    flat_h = h_top.reshape(-1, h_top.shape[-1])
    flat_dl = dlogits.reshape(-1, dlogits.shape[-1])
    grads["head.W"] = flat_h.T @ flat_dl
    grads["head.b"] = flat_dl.sum(axis=0)
    dh_cat = dlogits @ params["head.W"].T

    h_dim = config.hidden_dim
    for idx, stack in enumerate(config.stacks()):
        dh_top = dh_cat[:, :, idx * h_dim:(idx + 1) * h_dim]
        d_proj_out = _stack_backward(params, config, stack, cache["lstm"],
                                     dh_top, grads)
        x_in = cache["streams"][idx]
        dx = _proj_backward(params, config, x_in, cache["proj"][idx],
                            d_proj_out, grads)
        if config.arch == SINGLE_STREAM:
            flags = cache["flags"]
            d_embed = np.zeros_like(params["embed.sys"], dtype=np.float64)
            for k in (0, 1):
                sel = flags == k
                if sel.any():
                    d_embed[k] = dx[sel].sum(axis=0)
            grads["embed.sys"] = d_embed
    return grads


# ---------------------------------------------------------------------------
# Checkpoint files ("EPCK")
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"EPCK"
CKPT_VERSION = 1


def save_checkpoint(checkpoint: ModelCheckpoint, path: str,
                    extra_tensors: Optional[dict[str, np.ndarray]] = None) -> None:
    """Versioned binary container: JSON config block + named f32 tensors."""
    doc = {"config": asdict(checkpoint.config), "meta": checkpoint.meta}
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    tensors = dict(checkpoint.params)
    if extra_tensors:
        tensors.update(extra_tensors)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> tuple[ModelCheckpoint, dict[str, np.ndarray]]:
    """Load a checkpoint; returns (checkpoint, extra_tensors)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:4]!r}", offset=0)
    offset = 4
    (version,) = struct.unpack_from("<I", raw, offset); offset += 4
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    (blob_len,) = struct.unpack_from("<I", raw, offset); offset += 4
    doc = json.loads(raw[offset:offset + blob_len].decode("utf-8"))
    offset += blob_len
    config = ModelConfig(**doc["config"])
    config.validate()
    (n_tensors,) = struct.unpack_from("<I", raw, offset); offset += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", raw, offset); offset += 2
        name = raw[offset:offset + name_len].decode("utf-8"); offset += name_len
        (ndim,) = struct.unpack_from("<B", raw, offset); offset += 1
        shape = []
        for _ in range(ndim):
            (dim,) = struct.unpack_from("<I", raw, offset); offset += 4
            shape.append(dim)
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 4
        if len(raw) < end:
            raise FormatError("truncated tensor payload", offset=len(raw))
        arr = np.frombuffer(raw, dtype="<f4", count=count,
                            offset=offset).reshape(shape)
        tensors[name] = arr.astype(config.np_dtype)
        offset = end
    expected = param_shapes(config)
    params = {}
    extra = {}
    for name, arr in tensors.items():
        if name in expected:
            if tuple(arr.shape) != tuple(expected[name]):
                raise FormatError(
                    f"tensor {name} has shape {arr.shape}, config expects "
                    f"{expected[name]}")
            params[name] = arr
        else:
            extra[name] = arr
    missing = set(expected) - set(params)
    if missing:
        raise FormatError(f"checkpoint missing tensors: {sorted(missing)}")
    ckpt = ModelCheckpoint(config=config, params=params, meta=doc.get("meta", {}))
    return ckpt, extra


def clone_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def clone_checkpoint(checkpoint: ModelCheckpoint) -> ModelCheckpoint:
    return ModelCheckpoint(config=copy.deepcopy(checkpoint.config),
                           params=clone_params(checkpoint.params),
                           meta=copy.deepcopy(checkpoint.meta))
