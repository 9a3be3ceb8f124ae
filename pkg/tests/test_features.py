"""Synthetic renderer, log-mel extraction, causal downsampling."""

import numpy as np
import pytest

from endpointer.corpus import CorpusConfig, DialogueScript, Turn, generate_corpus
from endpointer.features import (FeatureSequence, SynthFeatureConfig, MONO,
                                 TWO_STREAM, block_mean, causal_downsample,
                                 logmel, mel_filterbank, num_frames_for,
                                 render_features, LOGMEL_EPS)


def one_script():
    return generate_corpus(CorpusConfig(
        n_dialogues=1, split_counts=None, split_ratio=(1, 0, 0),
        rng_seed=9)).train[0]


def test_all_silence_region_near_silence_mean():
    script = DialogueScript(
        dialogue_id="s", turns=[Turn("user", 4000, 4400, [])],
        total_duration_ms=4400)
    cfg = SynthFeatureConfig()
    seq = render_features(script, cfg, mode=MONO)
    silence = seq.streams[0][:90]         # first 3.6 s is silence on both channels
    # Mono averages two silence channels: std = sigma / sqrt(2).
    bound = 3.0 * cfg.silence_sigma / np.sqrt(2.0)
    assert np.abs(silence - cfg.silence_mean).mean() < bound
    assert np.abs(silence).max() < 6.0 * cfg.silence_sigma


def test_mono_equals_average_of_two_stream():
    script = one_script()
    cfg = SynthFeatureConfig(rng_seed=4)
    two = render_features(script, cfg, mode=TWO_STREAM)
    mono = render_features(script, cfg, mode=MONO)
    recomputed = (two.streams[0] + two.streams[1]) / 2.0
    np.testing.assert_array_equal(mono.streams[0], recomputed)


def test_render_deterministic_per_seed():
    script = one_script()
    cfg = SynthFeatureConfig(rng_seed=4)
    a = render_features(script, cfg, mode=TWO_STREAM)
    b = render_features(script, cfg, mode=TWO_STREAM)
    np.testing.assert_array_equal(a.streams[0], b.streams[0])
    np.testing.assert_array_equal(a.streams[1], b.streams[1])
    c = render_features(script, SynthFeatureConfig(rng_seed=5), mode=TWO_STREAM)
    assert not np.array_equal(a.streams[0], c.streams[0])


def test_pause_frames_distributed_as_silence():
    # Mid-turn pause frames must be statistically indistinguishable from
    # silence: same mean and spread (this is what makes pauses confusable
    # with turn ends).
    script = DialogueScript(
        dialogue_id="p",
        turns=[Turn("user", 0, 10000, [(2000, 6000)])],
        total_duration_ms=12000)
    cfg = SynthFeatureConfig(rng_seed=11)
    seq = render_features(script, cfg, mode=TWO_STREAM)
    user = seq.streams[0]
    pause = user[50:150]          # inside the pause
    tail = user[250:]             # after the turn (true silence)
    assert abs(pause.mean() - tail.mean()) < 0.02
    assert abs(pause.std() - cfg.silence_sigma) < 0.02
    assert abs(tail.std() - cfg.silence_sigma) < 0.02


def test_speech_frames_clear_silence():
    script = DialogueScript(dialogue_id="sp",
                            turns=[Turn("user", 0, 8000, [])],
                            total_duration_ms=8000)
    cfg = SynthFeatureConfig(rng_seed=12)
    seq = render_features(script, cfg, mode=TWO_STREAM)
    norms = np.linalg.norm(seq.streams[0], axis=1)
    assert norms.mean() > cfg.cluster_norm_range[0]


def test_num_frames_matches_duration():
    script = one_script()
    cfg = SynthFeatureConfig()
    n = num_frames_for(script, cfg.frame_rate_hz)
    assert n == int(np.ceil(script.total_duration_ms * 25.0 / 1000.0))
    seq = render_features(script, cfg, mode=MONO)
    assert seq.num_frames == n


# ---------------------------------------------------------------------------
# log-mel
# ---------------------------------------------------------------------------

def test_logmel_frame_count():
    seq = logmel(np.zeros(8000), sample_rate=8000)
    assert seq.num_frames == (8000 - 640) // 320 + 1 == 24
    assert seq.frame_rate_hz == 25.0
    assert seq.dim == 40


def test_logmel_all_zero_waveform():
    seq = logmel(np.zeros(8000))
    np.testing.assert_allclose(seq.streams[0], np.log(LOGMEL_EPS), rtol=1e-12)


def test_logmel_shorter_than_window_is_empty():
    seq = logmel(np.zeros(639))
    assert seq.num_frames == 0


def test_logmel_pure_tone_band():
    # The mel band containing 1 kHz must carry the max mean energy; derive
    # the expected band index from the filterbank definition itself.
    sr = 8000
    t = np.arange(4 * sr) / sr
    tone = np.sin(2 * np.pi * 1000.0 * t)
    seq = logmel(tone, sample_rate=sr)
    mean_energy = seq.streams[0].mean(axis=0)
    got_band = int(np.argmax(mean_energy))
    fb = mel_filterbank(40, 640, sr)
    freqs = np.arange(640 // 2 + 1) * sr / 640
    bin_1k = int(np.argmin(np.abs(freqs - 1000.0)))
    expect_band = int(np.argmax(fb[:, bin_1k]))
    assert got_band == expect_band


# ---------------------------------------------------------------------------
# causal downsampling
# ---------------------------------------------------------------------------

def _seq(vals, fr=75.0):
    arr = np.asarray(vals, dtype=np.float64).reshape(len(vals), -1)
    return FeatureSequence(streams=(arr,), frame_rate_hz=fr)


def test_block_means_hand_case():
    out = causal_downsample(_seq([1, 2, 3, 4, 5, 6]), 3)
    assert out.streams[0].ravel().tolist() == [2.0, 5.0]
    assert out.frame_rate_hz == 25.0


def test_factor_one_is_identity():
    seq = _seq([1, 2, 3])
    out = causal_downsample(seq, 1)
    np.testing.assert_array_equal(out.streams[0], seq.streams[0])


def test_trailing_partial_block_is_averaged():
    out = causal_downsample(_seq([1, 2, 3, 4, 5]), 3)
    assert out.streams[0].ravel().tolist() == [2.0, 4.5]


def test_rate_mapping_75_to_25_and_80_to_20():
    assert causal_downsample(_seq(list(range(9)), fr=75.0), 3).frame_rate_hz == 25.0
    assert causal_downsample(_seq(list(range(8)), fr=80.0), 4).frame_rate_hz == 20.0


@pytest.mark.parametrize("r", [0, -2, 1.5])
def test_bad_factor_rejected(r):
    with pytest.raises(ValueError):
        causal_downsample(_seq([1, 2, 3]), r)


def test_causality_prefix_equivalence():
    # Feeding any prefix must reproduce a prefix of the full output for the
    # blocks that are complete in both.
    rng = np.random.default_rng(3)
    frames = rng.standard_normal((50, 4))
    full = block_mean(frames, 3)
    for cut in range(1, 50):
        part = block_mean(frames[:cut], 3)
        whole_blocks = cut // 3
        np.testing.assert_allclose(part[:whole_blocks], full[:whole_blocks],
                                   rtol=0, atol=0)


def test_two_stream_downsample():
    rng = np.random.default_rng(4)
    seq = FeatureSequence(streams=(rng.standard_normal((10, 3)),
                                   rng.standard_normal((10, 3))),
                          frame_rate_hz=50.0)
    out = causal_downsample(seq, 2)
    assert out.n_streams == 2
    assert out.num_frames == 5


def test_silence_entropy_exceeds_speech_entropy():
    # Corpus-level statistic: a quantizer trained on speech+silence frames
    # shows higher stage-1 entropy over silence than over speech.
    import math
    from endpointer.features import codec_study_config, speech_mask
    from endpointer.rvq import codebook_entropy_frames, rvq_train

    corpus = generate_corpus(CorpusConfig(n_dialogues=12, split_counts=None,
                                          split_ratio=(1, 0, 0), rng_seed=77))
    synth = codec_study_config()
    frames, silence = [], []
    for script in corpus.all_scripts():
        n = num_frames_for(script, synth.frame_rate_hz)
        seq = render_features(script, synth, mode=TWO_STREAM, num_frames=n)
        for ch, speaker in ((0, "user"), (1, "system")):
            speech = speech_mask(script, speaker, synth.frame_rate_hz, n)
            frames.append(seq.streams[ch])
            silence.append(~speech)
    frames = np.concatenate(frames)
    silence = np.concatenate(silence)
    codec = rvq_train(frames, nq=1, k=32, iters=25, rng_seed=5)
    entropy = codebook_entropy_frames(codec, frames)
    diff = entropy[silence].mean() - entropy[~silence].mean()
    assert diff > 0.2 * math.log(32)
