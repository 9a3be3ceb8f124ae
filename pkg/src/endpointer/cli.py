"""Command-line entry points for the full pipeline.

Every subcommand reads an optional JSON config file and applies flag
overrides on top. Report-producing commands write delimited data and render
the matching figure next to it (disable with --no-plots). Exit status is 0
on success; failures print one `error: ...` line on stderr and exit 1
(argparse flag errors exit 2).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import fields as dataclass_fields
from typing import Optional

import numpy as np

from . import corpus as corpus_mod
from . import epf
from . import evaluation as eval_mod
from . import report
from . import rvq as rvq_mod
from .corpus import Corpus, CorpusConfig, generate_corpus, load_corpus, \
    save_corpus, script_stats
from .duplex import (AgentConfig, BASELINE, ENDPOINTER, build_queries,
                     run_duplex)
from .errors import ConfigurationError
from .features import (MONO, TWO_STREAM, FeatureSequence, SynthFeatureConfig,
                       render_features, num_frames_for)
from .labels import labels_from_script
from .model import (ModelCheckpoint, ModelConfig, SINGLE_STREAM,
                    TWO_STREAM as ARCH_TWO, load_checkpoint, save_checkpoint)
from .training import (TrainConfig, TrainingExample, example_from_features,
                       predict, train)

SPLITS = ("train", "valid", "test")


def _build(dc_type, doc: dict, section: str, overrides: Optional[dict] = None):
    """Construct a config dataclass from config-file section + CLI overrides."""
    merged = dict(doc.get(section, {}))
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    known = {f.name for f in dataclass_fields(dc_type)}
    unknown = set(merged) - known
    if unknown:
        raise ConfigurationError(
            f"unknown {section} config keys: {sorted(unknown)}")
    def _tuplify(v):
        return tuple(v) if isinstance(v, list) else v
    return dc_type(**{k: _tuplify(v) for k, v in merged.items()})


def _load_doc(path: Optional[str]) -> dict:
    if not path:
        return {}
    with open(path) as f:
        return json.load(f)


def _apply_seed(cfg, seed: Optional[int]):
    if seed is not None and hasattr(cfg, "rng_seed"):
        cfg.rng_seed = seed
    return cfg


# ---------------------------------------------------------------------------
# Feature directory layout: <dir>/{train,valid,test}.json + <split>/<id>.epf1
# ---------------------------------------------------------------------------

def _write_feature_dir(corpus: Corpus, synth_cfg: SynthFeatureConfig,
                       mode: str, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    meta = {"mode": mode, "frame_rate_hz": synth_cfg.frame_rate_hz,
            "dim": synth_cfg.dim}
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    save_corpus(corpus, out_dir)
    for split in SPLITS:
        split_dir = os.path.join(out_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        for script in corpus.split(split):
            n = num_frames_for(script, synth_cfg.frame_rate_hz)
            feats = render_features(script, synth_cfg, mode=mode, num_frames=n)
            labels = labels_from_script(script, synth_cfg.frame_rate_hz, n)
            epf.write_features(
                os.path.join(split_dir, f"{script.dialogue_id}.epf1"),
                feats, labels)


def load_examples(features_dir: str, split: str) -> list[TrainingExample]:
    """Load one split of a feature directory into training examples."""
    path = os.path.join(features_dir, f"{split}.json")
    with open(path) as f:
        scripts = corpus_mod.scripts_from_json(f.read())
    out = []
    for script in scripts:
        feat_path = os.path.join(features_dir, split,
                                 f"{script.dialogue_id}.epf1")
        feats, _ = epf.read_features(feat_path)
        out.append(example_from_features(script, feats))
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    doc = _load_doc(args.config)
    cfg = _build(CorpusConfig, doc, "corpus")
    _apply_seed(cfg, args.seed)
    corpus = generate_corpus(cfg)
    paths = save_corpus(corpus, args.out)
    stats = script_stats(corpus.all_scripts())
    with open(os.path.join(args.out, "stats.json"), "w") as f:
        json.dump(stats, f, indent=2, sort_keys=True)
    print(f"wrote {stats['n_dialogues']} dialogues "
          f"({stats['n_turns']} turns) to {args.out}")
    for split, path in paths.items():
        print(f"  {split}: {path}")
    return 0


def cmd_extract_features(args) -> int:
    doc = _load_doc(args.config)
    synth_cfg = _build(SynthFeatureConfig, doc, "features")
    _apply_seed(synth_cfg, args.seed)
    corpus = load_corpus(args.corpus)
    mode = MONO if args.mode == "mono" else TWO_STREAM
    _write_feature_dir(corpus, synth_cfg, mode, args.out)
    n = sum(len(corpus.split(s)) for s in SPLITS)
    print(f"extracted {mode} features for {n} dialogues to {args.out}")
    return 0


def cmd_train_rvq(args) -> int:
    frames = []
    budget = args.max_frames
    paths = []
    if os.path.isdir(args.features):
        split_dir = os.path.join(args.features, args.split)
        paths = sorted(os.path.join(split_dir, p)
                       for p in os.listdir(split_dir) if p.endswith(".epf1"))
    else:
        paths = [args.features]
    if not paths:
        raise FileNotFoundError(f"no EPF1 files under {args.features}")
    for path in paths:
        seq, _ = epf.read_features(path)
        frames.append(np.asarray(seq.streams[0], dtype=np.float64))
        if sum(len(f) for f in frames) >= budget:
            break
    data = np.concatenate(frames, axis=0)[:budget]
    codec = rvq_mod.rvq_train(data, nq=args.nq, k=args.k, iters=args.iters,
                              rng_seed=args.seed or 0,
                              trained_on=args.features)
    rvq_mod.save_codec(codec, args.out)
    err = rvq_mod.reconstruction_error(codec, data)
    print(f"trained RVQ nq={args.nq} k={args.k} on {len(data)} frames; "
          f"mse {err:.5f}; temperature {codec.entropy_temperature:.5f}; "
          f"saved to {args.out}")
    return 0


def cmd_entropy(args) -> int:
    codec = rvq_mod.load_codec(args.codec)
    seq, _ = epf.read_features(args.features)
    frames = np.asarray(seq.streams[0], dtype=np.float64)
    entropy = rvq_mod.codebook_entropy_frames(codec, frames)
    silence = np.zeros(len(frames), dtype=bool)
    if seq.n_streams == 1:
        mono_seq = seq
    else:
        merged = (np.asarray(seq.streams[0], dtype=np.float64)
                  + np.asarray(seq.streams[1], dtype=np.float64)) / 2.0
        mono_seq = FeatureSequence(streams=(merged,),
                                   frame_rate_hz=seq.frame_rate_hz)
    for (s_ms, e_ms) in eval_mod.energy_vad(mono_seq):
        a = int(s_ms * seq.frame_rate_hz / 1000.0)
        b = int(e_ms * seq.frame_rate_hz / 1000.0)
        silence[a:b] = True
    with open(args.plot_csv, "w") as f:
        f.write("frame_index,time_ms,entropy_nats,is_silence\n")
        for i, h in enumerate(entropy):
            t_ms = i * 1000.0 / seq.frame_rate_hz
            f.write(f"{i},{t_ms:.1f},{h:.6f},{int(silence[i])}\n")
    mean_sil = float(entropy[silence].mean()) if silence.any() else math.nan
    mean_speech = float(entropy[~silence].mean()) if (~silence).any() else math.nan
    print(f"mean stage-1 entropy: silence {mean_sil:.4f} nats, "
          f"speech {mean_speech:.4f} nats (ln K = "
          f"{math.log(codec.codebook_size):.4f})")
    if not args.no_plots:
        png = os.path.splitext(args.plot_csv)[0] + ".png"
        report.save_entropy_figure(entropy, seq.frame_rate_hz, png,
                                   silence_mask=silence)
        print(f"figure: {png}")
    return 0


def cmd_train(args) -> int:
    doc = _load_doc(args.config)
    arch = SINGLE_STREAM if args.arch == "single" else ARCH_TWO
    train_set = load_examples(args.features, "train")
    valid_set = load_examples(args.features, "valid")
    expect_streams = 1 if arch == SINGLE_STREAM else 2
    if train_set and train_set[0].features.n_streams != expect_streams:
        raise ConfigurationError(
            f"{args.arch} model needs {expect_streams}-stream features; "
            f"directory holds {train_set[0].features.n_streams}-stream files "
            "(re-run extract-features with the matching --mode)")
    model_cfg = _build(ModelConfig, doc, "model",
                       {"arch": arch,
                        "input_dim": train_set[0].features.dim if train_set else None,
                        "rng_seed": args.seed})
    train_cfg = _build(TrainConfig, doc, "train",
                       {"delay_tau": args.tau, "epochs": args.epochs,
                        "rng_seed": args.seed})
    best, history = train(train_set, valid_set, model_cfg, train_cfg)
    save_checkpoint(best, args.out)
    log_csv = os.path.splitext(args.out)[0] + "_train_log.csv"
    with open(log_csv, "w") as f:
        cols = list(history[0].keys())
        f.write(",".join(cols) + "\n")
        for row in history:
            f.write(",".join("" if row[c] is None else f"{row[c]:.6g}"
                             if isinstance(row[c], float) else str(row[c])
                             for c in cols) + "\n")
    if not args.no_plots:
        report.save_training_figure(history,
                                    os.path.splitext(args.out)[0] + "_train_log.png")
    print(f"best checkpoint: epoch {best.meta['epoch']}, "
          f"validation score {best.meta['val_score']:.4f}; saved to {args.out}")
    return 0


def _load_ckpt_and_examples(args) -> tuple[ModelCheckpoint, list[TrainingExample]]:
    ckpt, _ = load_checkpoint(args.ckpt)
    examples = load_examples(args.features, args.split)
    if not examples:
        raise ConfigurationError(f"split {args.split!r} is empty")
    expect = 1 if ckpt.config.arch == SINGLE_STREAM else 2
    if examples[0].features.n_streams != expect:
        raise ConfigurationError(
            f"checkpoint needs {expect}-stream features, directory holds "
            f"{examples[0].features.n_streams}-stream files")
    return ckpt, examples


def cmd_eval(args) -> int:
    ckpt, examples = _load_ckpt_and_examples(args)
    probs = predict(ckpt, examples)
    outcomes = []
    for p, ex in zip(probs, examples):
        outcomes.extend(eval_mod.evaluate_turns(
            p, ex.script, args.threshold, ex.features.frame_rate_hz))
    row = eval_mod.aggregate(outcomes, args.threshold)
    os.makedirs(args.out, exist_ok=True)
    eval_mod.write_outcomes_csv(outcomes, os.path.join(args.out, "outcomes.csv"))
    eval_mod.write_report_csv([row], os.path.join(args.out, "metrics.csv"))
    print(f"threshold {row.threshold}: ep50 {row.ep50_ms} ms, "
          f"ep90 {row.ep90_ms} ms, ep-cutoff {row.ep_cutoff_pct:.2f}%, "
          f"miss rate {row.miss_rate_pct:.2f}% over {row.n_turns} user turns")
    return 0


def _parse_grid(spec: str) -> np.ndarray:
    try:
        start, stop, step = (float(x) for x in spec.split(":"))
    except ValueError:
        raise ConfigurationError(
            f"bad grid {spec!r}, expected start:stop:step") from None
    return eval_mod.default_threshold_grid(start, stop, step)


def cmd_sweep(args) -> int:
    ckpt, examples = _load_ckpt_and_examples(args)
    grid = _parse_grid(args.grid)
    probs = predict(ckpt, examples)
    traces = [(p, ex.script) for p, ex in zip(probs, examples)]
    result = eval_mod.sweep_traces(traces, grid,
                                   examples[0].features.frame_rate_hz)
    os.makedirs(args.out, exist_ok=True)
    eval_mod.write_report_csv(result.rows, os.path.join(args.out, "sweep.csv"))
    eval_mod.write_curve_csv(result.rows,
                             os.path.join(args.out, "sweep_curves.csv"))
    if not args.no_plots:
        report.save_sweep_figure(result.rows, os.path.join(args.out, "sweep.png"))
    for target, row in result.operating_points.items():
        if row is None:
            print(f"ep50 target {target:.0f} ms: not attained")
        else:
            print(f"ep50 target {target:.0f} ms: threshold {row.threshold}, "
                  f"ep90 {row.ep90_ms} ms, ep-cutoff {row.ep_cutoff_pct:.2f}%")
    print(f"wrote {len(result.rows)} rows to {args.out}/sweep.csv")
    return 0


def cmd_error_bins(args) -> int:
    ckpt, examples = _load_ckpt_and_examples(args)
    probs = predict(ckpt, examples)
    outcomes = []
    for p, ex in zip(probs, examples):
        outcomes.extend(eval_mod.evaluate_turns(
            p, ex.script, args.threshold, ex.features.frame_rate_hz))
    scripts = {ex.script.dialogue_id: ex.script for ex in examples}
    bins, in_speech = eval_mod.cutoff_error_bins(outcomes, scripts)
    os.makedirs(args.out, exist_ok=True)
    eval_mod.write_bins_csv(bins, in_speech,
                            os.path.join(args.out, "error_bins.csv"))
    if not args.no_plots:
        report.save_error_bins_figure(
            bins, in_speech, os.path.join(args.out, "error_bins.png"))
    total = sum(b.count for b in bins) + in_speech
    print(f"{total} cutoffs binned ({in_speech} outside any pause)")
    return 0


def cmd_simulate_duplex(args) -> int:
    doc = _load_doc(args.config)
    synth_cfg = _build(SynthFeatureConfig, doc, "features")
    agent_cfg = _build(AgentConfig, doc, "agent", {"rng_seed": args.seed})
    mode = BASELINE if args.mode == "baseline" else ENDPOINTER
    ckpt = None
    if mode == ENDPOINTER:
        if not args.ckpt:
            raise ConfigurationError("endpointer mode needs --ckpt")
        ckpt, _ = load_checkpoint(args.ckpt)
    if args.corpus:
        test_scripts = load_corpus(args.corpus).test
    else:
        corpus_cfg = _build(CorpusConfig, doc, "corpus")
        _apply_seed(corpus_cfg, args.seed)
        corpus_cfg.n_dialogues = max(corpus_cfg.n_dialogues,
                                     int(args.n * 1.5))
        corpus_cfg.split_counts = None
        corpus_cfg.split_ratio = (0.0, 0.0, 1.0)
        test_scripts = generate_corpus(corpus_cfg).test
    queries = build_queries(test_scripts, synth_cfg.frame_rate_hz,
                            limit=args.n)
    if not queries:
        raise ConfigurationError("no queries longer than 1 s in the test set")
    outcomes, summary = run_duplex(queries, agent_cfg, synth_cfg, mode,
                                   checkpoint=ckpt, threshold=args.threshold)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "summary.json"), "w") as f:
        json.dump({
            "mode": args.mode, "n_queries": summary.n_queries,
            "median_latency_ms": summary.median_latency_ms,
            "worst_case_latency_ms": summary.worst_case_latency_ms,
            "cutoff_rate_pct": summary.cutoff_rate_pct,
            "miss_count": summary.miss_count,
        }, f, indent=2, sort_keys=True)
    with open(os.path.join(args.out, "queries.csv"), "w") as f:
        f.write("query_id,response_latency_ms,cutoff,missed\n")
        for o in outcomes:
            lat = "nan" if o.response_latency_ms is None \
                else f"{o.response_latency_ms:.6g}"
            f.write(f"{o.query_id},{lat},{int(o.cutoff)},{int(o.missed)}\n")
    print(f"{args.mode}: {summary.n_queries} queries, median latency "
          f"{summary.median_latency_ms} ms, worst-case "
          f"{summary.worst_case_latency_ms} ms, cutoff rate "
          f"{summary.cutoff_rate_pct:.2f}%")
    return 0


def cmd_serve(args) -> int:
    from . import server as server_mod
    ckpt, _ = load_checkpoint(args.ckpt)
    bind_spec = os.environ.get("ENDPOINTER_BIND", args.bind)
    host, _, port = bind_spec.rpartition(":")
    server_mod.serve((host or "127.0.0.1", int(port)), ckpt, args.threshold,
                     arm_system=args.arm_system)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="endpointer",
        description="Streaming endpointing toolkit for multi-turn dialogue")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override every rng seed this command uses")
        p.add_argument("--no-plots", action="store_true",
                       help="skip figure rendering")

    p = sub.add_parser("gen-corpus", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("extract-features", help="render features to EPF1 files")
    common(p)
    p.add_argument("--corpus", required=True, help="directory from gen-corpus")
    p.add_argument("--mode", choices=("mono", "two_stream"), default="mono")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("train-rvq", help="train a residual vector quantizer")
    common(p)
    p.add_argument("--features", required=True,
                   help="feature directory or one EPF1 file")
    p.add_argument("--split", default="train")
    p.add_argument("--nq", type=int, default=4)
    p.add_argument("--k", type=int, default=32)
    p.add_argument("--iters", type=int, default=25)
    p.add_argument("--max-frames", type=int, default=200_000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_rvq)

    p = sub.add_parser("entropy", help="per-frame codebook entropy report")
    common(p)
    p.add_argument("--codec", required=True)
    p.add_argument("--features", required=True, help="EPF1 file")
    p.add_argument("--plot-csv", required=True)
    p.set_defaults(func=cmd_entropy)

    p = sub.add_parser("train", help="train an endpointer")
    common(p)
    p.add_argument("--arch", choices=("single", "two"), required=True)
    p.add_argument("--tau", type=int, default=None, help="label delay, frames")
    p.add_argument("--features", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate one threshold")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=0.95)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="threshold sweep report")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--grid", default="0.70:0.99:0.01")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("error-bins", help="bin cutoffs by mid-silence duration")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=0.95)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_error_bins)

    p = sub.add_parser("simulate-duplex", help="duplex agent simulation")
    common(p)
    p.add_argument("--mode", choices=("baseline", "endpointer"), required=True)
    p.add_argument("--ckpt", help="two-stream checkpoint (endpointer mode)")
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--n", type=int, default=700)
    p.add_argument("--corpus", help="reuse an existing corpus directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate_duplex)

    p = sub.add_parser("serve", help="run the streaming detector service")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bind", default="127.0.0.1:7007",
                   help="host:port (env ENDPOINTER_BIND overrides)")
    p.add_argument("--threshold", type=float, default=0.95)
    p.add_argument("--arm-system", action="store_true")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as err:                      # one-line machine-parsable
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
