"""Command-line interface: gen, codebook train, tokenize, train, finetune,
decode, score, sigtest, matrix."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import training as trn
from .corpus import (
    attach_tokens,
    generate,
    read_manifest,
    save_corpus,
    write_manifest,
    Vocabulary,
)
from .exceptions import CtxducerError, ShapeError
from .experiments import run_matrix, score_sessions
from .metrics import load_report, mapsswe, paired_error_counts, save_report
from .quantizer import load_codebook, save_codebook, train_codebook
from .training import (
    ExperimentConfig,
    load_config,
    load_training_checkpoint,
    params_from_arrays,
    save_training_checkpoint,
)


def _cmd_gen(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.generator.seed = args.seed
    out = Path(args.out)
    train = generate(cfg.generator)
    dev = generate(trn.dev_generator_config(cfg.generator))
    train_manifest = save_corpus(train, out / "train")
    dev_manifest = save_corpus(dev, out / "dev")
    print(f"wrote {train_manifest} ({sum(len(s.utterances) for s in train)} utterances)")
    print(f"wrote {dev_manifest} ({sum(len(s.utterances) for s in dev)} utterances)")
    return 0


def _cmd_codebook_train(args) -> int:
    sessions = read_manifest(args.manifest)
    frames = np.concatenate(
        [u.features for s in sessions for u in s.utterances if u.features is not None], axis=0
    )
    cb = train_codebook(frames, args.k, max_iters=args.iters, seed=args.seed)
    save_codebook(cb, args.out)
    print(f"trained codebook: K={cb.k} dim={cb.dim} iters={cb.trained_iters} "
          f"distortion={cb.final_distortion:.6f} -> {args.out}")
    return 0


def _cmd_tokenize(args) -> int:
    sessions = read_manifest(args.manifest)
    cb = load_codebook(args.codebook)
    for s in sessions:
        attach_tokens(s, cb)
    out = Path(args.out)
    src_dir = Path(args.manifest).parent.resolve()
    for s in sessions:
        for u in s.utterances:
            if u.feature_file:
                u.feature_file = os.path.relpath(src_dir / u.feature_file, out.parent.resolve())
    write_manifest(sessions, out)
    print(f"wrote tokenized manifest {out}")
    return 0


def _load_train_dev(cfg: ExperimentConfig):
    if not cfg.paths.train_manifest:
        raise ShapeError("config paths.train_manifest is required for training")
    train = read_manifest(cfg.paths.train_manifest)
    dev = read_manifest(cfg.paths.dev_manifest) if cfg.paths.dev_manifest else []
    if cfg.model.input_kind == "discrete":
        missing = any(u.tokens is None for s in train + dev for u in s.utterances)
        if missing:
            if not cfg.paths.codebook:
                raise ShapeError("manifest has no tokens and no codebook path is configured")
            cb = load_codebook(cfg.paths.codebook)
            for s in train + dev:
                attach_tokens(s, cb)
    return train, dev


def _apply_fusion_flags(cfg: ExperimentConfig, args) -> None:
    mode_map = {"none": "none", "input-concat": "input-concat",
                "enc-concat": "enc-concat", "compact": "compact"}
    if args.mode is not None:
        cfg.fusion.mode = mode_map[args.mode]
    if args.prec is not None:
        cfg.fusion.n_preceding = args.prec
    if args.future is not None:
        cfg.fusion.n_future = args.future
    if args.L is not None:
        cfg.fusion.compact_len = args.L


def _token_vocab_from_codebook(cfg: ExperimentConfig) -> None:
    if cfg.model.input_kind == "discrete" and cfg.model.token_vocab_size == 0 and cfg.paths.codebook:
        cfg.model.token_vocab_size = load_codebook(cfg.paths.codebook).k


def _write_run_outputs(out_dir: Path, cfg: ExperimentConfig, result, model_cfg) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_training_checkpoint(
        out_dir / "model.ctxc", result.params, result.optimizer, model_cfg,
        cfg.fusion, result.vocab, result.epochs_done,
    )
    save_report(result.report_dict(cfg), out_dir / "report.json")
    save_report(result.timing_dict(), out_dir / "timing.json")
    wer = result.wer.get("dev")
    wer_text = f"{wer:.4f}" if wer is not None else "n/a"
    print(f"trained {result.epochs_done} epochs; final loss "
          f"{result.epoch_losses[-1]:.4f}; dev WER {wer_text}; wrote {out_dir}")


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    _apply_fusion_flags(cfg, args)
    _token_vocab_from_codebook(cfg)
    train, dev = _load_train_dev(cfg)
    out_dir = Path(args.out or cfg.paths.out_dir or ".")
    result = trn.train_model(train, dev, cfg, out_dir=str(out_dir))
    model_cfg = trn.resolve_model_config(cfg, train, result.vocab)
    _write_run_outputs(out_dir, cfg, result, model_cfg)
    return 0


def _cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    _token_vocab_from_codebook(cfg)
    train, dev = _load_train_dev(cfg)
    vocab = Vocabulary.from_transcripts(train)
    model_cfg = trn.resolve_model_config(cfg, train, vocab)
    fresh = trn.init_experiment_parameters(cfg, model_cfg)
    init_arrays, _, _, _, _, _ = load_training_checkpoint(args.init)
    params = trn.finetune_params(init_arrays, fresh, reinit_output=not args.no_reinit_output)
    out_dir = Path(args.out or cfg.paths.out_dir or ".")
    result = trn.train_model(train, dev, cfg, params=params, vocab=vocab, out_dir=str(out_dir))
    _write_run_outputs(out_dir, cfg, result, model_cfg)
    return 0


def _cmd_decode(args) -> int:
    params_arrays, _, model_cfg, fusion_cfg, vocab, _ = load_training_checkpoint(args.ckpt)
    params = params_from_arrays(params_arrays)
    sessions = read_manifest(args.manifest)
    if model_cfg.input_kind == "discrete":
        for s in sessions:
            for u in s.utterances:
                if u.tokens is None:
                    raise ShapeError(f"{u.utterance_id}: manifest has no tokens; run tokenize first")
    from .decoding import decode_sessions

    rows, fps = decode_sessions(sessions, params, model_cfg, fusion_cfg, vocab)
    out = {"utterances": rows, "meta": {"ckpt": str(args.ckpt), "manifest": str(args.manifest)}}
    save_report(out, args.out)
    print(f"decoded {len(rows)} utterances ({fps:.0f} frames/sec) -> {args.out}")
    return 0


def _cmd_score(args) -> int:
    sessions = read_manifest(args.ref, load_features=False)
    hyp = load_report(args.hyp)
    hyp_by_id = {r["utterance_id"]: r["words"].split() for r in hyp["utterances"]}
    from .metrics import EvalReport

    report = EvalReport()
    for s in sessions:
        for u in s.utterances:
            if u.utterance_id not in hyp_by_id:
                raise ShapeError(f"hypothesis file is missing utterance {u.utterance_id}")
            report.add(u.utterance_id, list(u.transcript), hyp_by_id[u.utterance_id])
    out = report.to_dict(meta={"ref": str(args.ref), "hyp": str(args.hyp)})
    save_report(out, args.out)
    print(f"WER {out['aggregate']['wer']:.4f} "
          f"({out['aggregate']['errors']}/{out['aggregate']['ref_len']}) -> {args.out}")
    return 0


def _cmd_sigtest(args) -> int:
    a = load_report(args.sys_a)
    b = load_report(args.sys_b)
    errs_a, errs_b = paired_error_counts(a, b)
    result = mapsswe(errs_a, errs_b, alpha=args.alpha)
    print(json.dumps(result, sort_keys=True))
    return 0


def _cmd_matrix(args) -> int:
    with open(args.grid, "r", encoding="utf-8") as f:
        grid = json.load(f)
    table = run_matrix(grid, out_dir=args.out)
    ok = sum(1 for r in table["cells"] if r["status"] == "ok")
    print(f"matrix: {ok}/{len(table['cells'])} cells ok -> {Path(args.out) / 'matrix.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctxducer",
                                     description="Cross-utterance context transducer toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic conversational corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_gen)

    cb = sub.add_parser("codebook", help="codebook operations")
    cb_sub = cb.add_subparsers(dest="codebook_command", required=True)
    p = cb_sub.add_parser("train", help="train a k-means codebook from manifest features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_codebook_train)

    p = sub.add_parser("tokenize", help="attach codebook tokens to a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_tokenize)

    p = sub.add_parser("train", help="train a transducer")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=["none", "input-concat", "enc-concat", "compact"], default=None)
    p.add_argument("--prec", type=int, choices=[0, 1], default=None)
    p.add_argument("--future", type=int, choices=[0, 1], default=None)
    p.add_argument("--L", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("finetune", help="fine-tune from a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--init", required=True)
    p.add_argument("--no-reinit-output", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_finetune)

    p = sub.add_parser("decode", help="greedy-decode a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_decode)

    p = sub.add_parser("score", help="score a hypothesis file against a manifest")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_score)

    p = sub.add_parser("sigtest", help="matched-pairs significance test on two score reports")
    p.add_argument("--sys-a", required=True)
    p.add_argument("--sys-b", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(fn=_cmd_sigtest)

    p = sub.add_parser("matrix", help="run a fusion/scope experiment grid")
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_matrix)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CtxducerError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
