"""Greedy transducer decoding over sessions, context-aware."""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from . import fusion as fus
from . import model as mdl
from .corpus import Vocabulary


def greedy_decode_encoded(h: np.ndarray, params: mdl.Parameters, cfg: mdl.ModelConfig,
                          max_symbols_per_frame: int = 5) -> list:
    """Frame-synchronous greedy search over encoder output ``h``.

    Per frame, repeatedly take the argmax of the joint logits: emit on a
    non-blank (updating the predictor state), advance on blank or once
    ``max_symbols_per_frame`` symbols have been emitted. Ties resolve to the
    lowest index, so decoding is deterministic.
    """
    labels: list = []
    f_u = None
    for t in range(h.shape[0]):
        emitted = 0
        while emitted < max_symbols_per_frame:
            if f_u is None:
                with ad.no_grad():
                    f_u = mdl.predict(labels, params, cfg).values[0]
            logits = mdl.joint_single(h[t], f_u, params)
            best = int(np.argmax(logits))
            if best == 0:
                break
            labels.append(best)
            f_u = None
            emitted += 1
    return labels


def decode_utterance(
    current,
    params: mdl.Parameters,
    cfg: mdl.ModelConfig,
    fusion: fus.FusionConfig,
    prev=None,
    future=None,
    cache: fus.ContextCache | None = None,
    version: int = 0,
    max_symbols_per_frame: int = 5,
) -> list:
    with ad.no_grad():
        result = fus.contextual_forward(
            current, params, cfg, fusion, prev=prev, future=future,
            cache=cache, version=version,
        )
        h = result.encoded.values
    return greedy_decode_encoded(h, params, cfg, max_symbols_per_frame)


def decode_sessions(
    sessions,
    params: mdl.Parameters,
    cfg: mdl.ModelConfig,
    fusion: fus.FusionConfig,
    vocab: Vocabulary,
    max_symbols_per_frame: int = 5,
) -> tuple:
    """Hypotheses for every utterance, in session order.

    Returns (rows, frames_per_second); rows are {utterance_id, words}.
    Neighbour encoder passes are cached within the run since parameters are
    frozen during decoding.
    """
    cache = fus.ContextCache() if fusion.uses_encoder_context else None
    rows = []
    total_frames = 0
    started = time.perf_counter()
    for session in sessions:
        utts = session.utterances
        for i, utt in enumerate(utts):
            prev = utts[i - 1] if i > 0 else None
            future = utts[i + 1] if i < len(utts) - 1 else None
            labels = decode_utterance(
                utt, params, cfg, fusion, prev=prev, future=future,
                cache=cache, version=0, max_symbols_per_frame=max_symbols_per_frame,
            )
            rows.append({"utterance_id": utt.utterance_id, "words": " ".join(vocab.decode(labels))})
            total_frames += utt.num_frames
    elapsed = time.perf_counter() - started
    fps = total_frames / elapsed if elapsed > 0 else float("inf")
    return rows, fps
