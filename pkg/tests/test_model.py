"""Model construction, forward pass, loss, checkpoint files."""

import numpy as np
import pytest

from endpointer.errors import FormatError
from endpointer.features import FeatureSequence
from endpointer.labels import LabelSequence, SystemActivitySequence, PAD
from endpointer.model import (ModelCheckpoint, ModelConfig, forward,
                              init_model, load_checkpoint, masked_loss,
                              param_shapes, save_checkpoint)


def tiny_cfg(arch="single", **kw):
    base = dict(arch=arch, input_dim=6, proj_layers=1, proj_dim=5,
                lstm_layers=2, hidden_dim=4, rng_seed=3)
    base.update(kw)
    return ModelConfig(**base)


def rand_inputs(rng, cfg, t=20):
    n_streams = 1 if cfg.arch == "single" else 2
    streams = tuple(rng.standard_normal((t, cfg.input_dim)).astype(np.float32)
                    for _ in range(n_streams))
    feats = FeatureSequence(streams=streams, frame_rate_hz=25.0)
    flags = SystemActivitySequence(
        flags=rng.integers(0, 2, size=t).astype(np.uint8), frame_rate_hz=25.0)
    return feats, flags


def test_same_seed_identical_parameters():
    a = init_model(tiny_cfg())
    b = init_model(tiny_cfg())
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])


def test_different_seed_differs():
    a = init_model(tiny_cfg())
    b = init_model(tiny_cfg(rng_seed=4))
    assert any(not np.array_equal(a.params[n], b.params[n]) for n in a.params)


def test_zero_parameters_give_uniform_probs():
    ckpt = init_model(tiny_cfg())
    for name in ckpt.params:
        ckpt.params[name][:] = 0.0
    rng = np.random.default_rng(0)
    feats, flags = rand_inputs(rng, ckpt.config)
    probs = forward(ckpt, feats, flags)
    np.testing.assert_allclose(probs, 0.25, atol=1e-7)


def test_forget_gate_bias_initialized_to_one():
    ckpt = init_model(tiny_cfg())
    h = ckpt.config.hidden_dim
    b = ckpt.params["lstm.m0.b"]
    assert (b[h:2 * h] == 1.0).all()
    assert (b[:h] == 0.0).all() and (b[2 * h:] == 0.0).all()


def test_shape_audit_standard_gate_layout():
    cfg = ModelConfig(arch="single", input_dim=40, proj_layers=2, proj_dim=48,
                      lstm_layers=3, hidden_dim=324)
    shapes = param_shapes(cfg)
    assert shapes["embed.sys"] == (2, 40)
    assert shapes["proj.0.W"] == (40, 48)
    assert shapes["lstm.m0.Wx"] == (48, 4 * 324)
    assert shapes["lstm.m0.Wh"] == (324, 4 * 324)
    assert shapes["lstm.m2.Wx"] == (324, 4 * 324)
    assert shapes["head.W"] == (324, 4)
    ckpt = init_model(cfg)
    for name, arr in ckpt.params.items():
        assert tuple(arr.shape) == shapes[name]


def test_two_stream_shapes_shared_projection():
    cfg = tiny_cfg(arch="two")
    shapes = param_shapes(cfg)
    assert "embed.sys" not in shapes
    assert "proj.0.W" in shapes                     # one shared projector
    assert shapes["lstm.u0.Wx"] == shapes["lstm.s0.Wx"]
    assert shapes["head.W"] == (2 * cfg.hidden_dim, 4)


def test_rows_sum_to_one():
    rng = np.random.default_rng(1)
    for arch in ("single", "two"):
        ckpt = init_model(tiny_cfg(arch=arch))
        feats, flags = rand_inputs(rng, ckpt.config, t=40)
        probs = forward(ckpt, feats, flags if arch == "single" else None)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        assert (probs >= 0).all()


def test_forward_is_causal_prefix_property():
    rng = np.random.default_rng(2)
    for arch in ("single", "two"):
        ckpt = init_model(tiny_cfg(arch=arch, dtype="float64"))
        feats, flags = rand_inputs(rng, ckpt.config, t=30)
        full = forward(ckpt, feats, flags if arch == "single" else None)
        for cut in (1, 7, 15, 29):
            part_feats = FeatureSequence(
                streams=tuple(s[:cut] for s in feats.streams),
                frame_rate_hz=25.0)
            part_flags = SystemActivitySequence(flags=flags.flags[:cut],
                                                frame_rate_hz=25.0)
            part = forward(ckpt, part_feats,
                           part_flags if arch == "single" else None)
            np.testing.assert_allclose(part, full[:cut], atol=1e-12)


def test_length_mismatch_rejected():
    rng = np.random.default_rng(3)
    ckpt = init_model(tiny_cfg())
    feats, flags = rand_inputs(rng, ckpt.config, t=10)
    short = SystemActivitySequence(flags=flags.flags[:5], frame_rate_hz=25.0)
    with pytest.raises(ValueError):
        forward(ckpt, feats, short)


def test_nonpositive_dims_rejected():
    with pytest.raises(ValueError):
        init_model(tiny_cfg(hidden_dim=0))
    with pytest.raises(ValueError):
        init_model(tiny_cfg(input_dim=-3))


# ---------------------------------------------------------------------------
# masked loss
# ---------------------------------------------------------------------------

def lab(values):
    return LabelSequence(labels=np.asarray(values, dtype=np.uint8),
                         frame_rate_hz=25.0)


def test_all_pad_loss_zero_count_zero():
    probs = np.full((4, 4), 0.25)
    loss, count = masked_loss(probs, lab([PAD] * 4))
    assert loss == 0.0 and count == 0


def test_uniform_probs_loss_is_ln4():
    probs = np.full((6, 4), 0.25)
    loss, count = masked_loss(probs, lab([0, 1, 2, 3, 0, 1]))
    assert count == 6
    assert loss == pytest.approx(np.log(4.0), abs=1e-12)


def test_hand_computed_single_frame_loss():
    probs = np.array([[0.7, 0.1, 0.1, 0.1]])
    loss, count = masked_loss(probs, lab([0]))
    assert count == 1
    assert loss == pytest.approx(-np.log(0.7), abs=1e-12)


def test_pad_frames_skipped_in_mean():
    probs = np.array([[0.7, 0.1, 0.1, 0.1],
                      [0.25, 0.25, 0.25, 0.25]])
    loss, count = masked_loss(probs, lab([0, PAD]))
    assert count == 1
    assert loss == pytest.approx(-np.log(0.7), abs=1e-12)


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_bitwise_forward(tmp_path):
    rng = np.random.default_rng(4)
    for arch in ("single", "two"):
        ckpt = init_model(tiny_cfg(arch=arch))
        ckpt.meta["val_score"] = 0.5
        feats, flags = rand_inputs(rng, ckpt.config, t=15)
        before = forward(ckpt, feats, flags if arch == "single" else None)
        path = str(tmp_path / f"{arch}.epck")
        save_checkpoint(ckpt, path)
        loaded, extra = load_checkpoint(path)
        assert extra == {}
        assert loaded.meta["val_score"] == 0.5
        after = forward(loaded, feats, flags if arch == "single" else None)
        np.testing.assert_array_equal(before, after)


def test_checkpoint_corrupt_magic(tmp_path):
    ckpt = init_model(tiny_cfg())
    path = str(tmp_path / "c.epck")
    save_checkpoint(ckpt, path)
    raw = bytearray(open(path, "rb").read())
    raw[:4] = b"XXXX"
    open(path, "wb").write(bytes(raw))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch(tmp_path):
    ckpt = init_model(tiny_cfg())
    path = str(tmp_path / "s.epck")
    save_checkpoint(ckpt, path)
    loaded, _ = load_checkpoint(path)
    # Claim a different architecture in the config block: shapes disagree.
    bad = ModelCheckpoint(config=tiny_cfg(hidden_dim=9), params=ckpt.params,
                          meta={})
    path2 = str(tmp_path / "bad.epck")
    save_checkpoint(bad, path2)
    with pytest.raises(FormatError):
        load_checkpoint(path2)


def test_checkpoint_extra_tensors_round_trip(tmp_path):
    ckpt = init_model(tiny_cfg())
    extra = {"adam.m.head.W": np.ones((4, 4), dtype=np.float32)}
    path = str(tmp_path / "x.epck")
    save_checkpoint(ckpt, path, extra_tensors=extra)
    _, loaded_extra = load_checkpoint(path)
    assert set(loaded_extra) == {"adam.m.head.W"}
    np.testing.assert_array_equal(loaded_extra["adam.m.head.W"],
                                  extra["adam.m.head.W"])
