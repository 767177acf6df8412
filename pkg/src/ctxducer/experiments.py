"""Experiment orchestration: full pipeline runs and the fusion/scope matrix."""

from __future__ import annotations

import copy
import dataclasses
import itertools
import json
import traceback
from pathlib import Path

import numpy as np

from . import fusion as fus
from . import training as trn
from .corpus import Vocabulary, attach_tokens, generate
from .decoding import decode_sessions
from .exceptions import ConfigError
from .metrics import EvalReport, save_report
from .quantizer import train_codebook


def build_corpus_and_codebook(cfg: trn.ExperimentConfig, dev_sessions: int | None = None):
    """Generate train/dev sessions, fit the codebook on train frames, tokenize both."""
    train = generate(cfg.generator)
    dev = generate(trn.dev_generator_config(cfg.generator, dev_sessions))
    frames = np.concatenate([u.features for s in train for u in s.utterances], axis=0)
    codebook = train_codebook(
        frames, cfg.quantizer.n_clusters, max_iters=cfg.quantizer.max_iter, seed=cfg.training.seed
    )
    for s in train + dev:
        attach_tokens(s, codebook)
    return train, dev, codebook


def run_pipeline(cfg: trn.ExperimentConfig, out_dir: str = "", dev_sessions: int | None = None):
    """generate -> codebook -> train -> decode dev -> score; returns the result."""
    train, dev, _ = build_corpus_and_codebook(cfg, dev_sessions)
    result = trn.train_model(train, dev, cfg, out_dir=out_dir)
    return result, train, dev


def score_sessions(sessions, params, model_cfg, fusion_cfg, vocab: Vocabulary) -> tuple:
    """Decode and score; returns (EvalReport, frames/sec)."""
    rows, fps = decode_sessions(sessions, params, model_cfg, fusion_cfg, vocab)
    hyp_by_id = {r["utterance_id"]: r["words"].split() for r in rows}
    report = EvalReport()
    for s in sessions:
        for u in s.utterances:
            report.add(u.utterance_id, list(u.transcript), hyp_by_id[u.utterance_id])
    return report, fps


# ---------------------------------------------------------------------------
# matrix


def _grid_cells(grid: dict) -> list:
    if "cells" in grid:
        return [dict(c) for c in grid["cells"]]
    axes = grid.get("axes")
    if not axes:
        raise ConfigError("grid needs either 'cells' or 'axes'")
    names = sorted(axes)
    cells = []
    for combo in itertools.product(*(axes[n] for n in names)):
        cells.append(dict(zip(names, combo)))
    return cells


def _apply_cell(cfg: trn.ExperimentConfig, cell: dict) -> trn.ExperimentConfig:
    out = copy.deepcopy(cfg)
    for key, value in cell.items():
        if key == "mode":
            out.fusion.mode = value
        elif key == "prec":
            out.fusion.n_preceding = int(value)
        elif key == "future":
            out.fusion.n_future = int(value)
        elif key == "input_kind":
            out.model.input_kind = value
        elif key == "L":
            out.fusion.compact_len = int(value)
        else:
            raise ConfigError(f"unknown matrix axis {key!r}")
    return out


def run_matrix(grid: dict, out_dir: str = "") -> dict:
    """Train/score one cell per grid point; per-cell failures do not stop the matrix."""
    base = trn.config_from_dict(grid.get("config", {}))
    cells = _grid_cells(grid)
    train, dev, _ = build_corpus_and_codebook(base)
    vocab = Vocabulary.from_transcripts(train)

    rows = []
    for cell in cells:
        row: dict = {"cell": cell}
        try:
            cfg = _apply_cell(base, cell)
            cfg.fusion.validate()
            result = trn.train_model(train, dev, cfg, vocab=vocab, out_dir=out_dir)
            row.update(
                status="ok",
                wer=result.wer.get("dev"),
                train_seconds=result.train_seconds,
                decode_fps=result.decode_fps,
                epoch_losses=result.epoch_losses,
            )
        except Exception as e:  # noqa: BLE001 - cell isolation is the contract
            row.update(status="error", error=f"{type(e).__name__}: {e}")
            row["trace"] = traceback.format_exc(limit=4)
        rows.append(row)

    table = {"cells": rows, "config": base.to_dict()}
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        save_report(table, Path(out_dir) / "matrix.json")
    return table
