"""Transducer negative log-likelihood via log-domain forward-backward.

The lattice has T time rows and U+1 label columns. From cell (t, u) a blank
advances time, an emission of label u+1 advances the label axis, and the
terminal blank leaves (T-1, U). The gradient is returned with respect to the
raw logits (log-softmax folded in). A pruning band restricts the lattice to
cells near the linear time/label diagonal; the full band reproduces the
exact loss bit for bit.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .exceptions import InstanceTooLargeError, ShapeError, TokenRangeError

NEG_INF = -np.inf


def _check_inputs(logits: np.ndarray, labels, blank: int) -> tuple:
    if logits.ndim != 3:
        raise ShapeError(f"logits must be (T, U+1, V+1), got shape {logits.shape}")
    t, u1, v1 = logits.shape
    labels = [int(l) for l in labels]
    if t < 1:
        raise ShapeError("need at least one time frame")
    if u1 != len(labels) + 1:
        raise ShapeError(f"logits label axis {u1} != len(labels)+1 = {len(labels) + 1}")
    for l in labels:
        if not 0 <= l < v1 or l == blank:
            raise TokenRangeError(f"label {l} out of range [0,{v1}) or equal to blank")
    return t, len(labels), labels


def _band_mask(t_len: int, u_len: int, band: int | None) -> np.ndarray:
    """Allowed cells: |u - floor(U*t/T)| <= band (or everything)."""
    mask = np.ones((t_len, u_len + 1), dtype=bool)
    if band is not None:
        for t in range(t_len):
            center = (u_len * t) // t_len
            for u in range(u_len + 1):
                mask[t, u] = abs(u - center) <= band
    return mask


def _forward_backward(logits: np.ndarray, labels, blank: int, band: int | None):
    t_len, u_len, labels = _check_inputs(logits, labels, blank)
    lp = logits - _logsumexp_last(logits)
    mask = _band_mask(t_len, u_len, band)

    alpha = np.full((t_len, u_len + 1), NEG_INF)
    if mask[0, 0]:
        alpha[0, 0] = 0.0
    for t in range(t_len):
        for u in range(u_len + 1):
            if t == 0 and u == 0:
                continue
            if not mask[t, u]:
                continue
            stay = alpha[t - 1, u] + lp[t - 1, u, blank] if t > 0 else NEG_INF
            emit = alpha[t, u - 1] + lp[t, u - 1, labels[u - 1]] if u > 0 else NEG_INF
            alpha[t, u] = np.logaddexp(stay, emit)

    total = alpha[t_len - 1, u_len] + lp[t_len - 1, u_len, blank]
    if not np.isfinite(total):
        # the band disconnected the lattice: no surviving alignment
        return math.inf, np.zeros_like(logits), alpha, None

    beta = np.full((t_len, u_len + 1), NEG_INF)
    beta[t_len - 1, u_len] = lp[t_len - 1, u_len, blank]
    for t in range(t_len - 1, -1, -1):
        for u in range(u_len, -1, -1):
            if t == t_len - 1 and u == u_len:
                continue
            if not mask[t, u]:
                continue
            stay = lp[t, u, blank] + beta[t + 1, u] if t < t_len - 1 else NEG_INF
            emit = lp[t, u, labels[u]] + beta[t, u + 1] if u < u_len else NEG_INF
            beta[t, u] = np.logaddexp(stay, emit)

    # occupancy-weighted gradient w.r.t. log-probs, then chain through softmax
    dlp = np.zeros_like(logits)
    for t in range(t_len):
        for u in range(u_len + 1):
            if not mask[t, u] or not np.isfinite(alpha[t, u]):
                continue
            if t == t_len - 1 and u == u_len:
                b_next = 0.0
            elif t < t_len - 1 and mask[t + 1, u]:
                b_next = beta[t + 1, u]
            else:
                b_next = NEG_INF
            if np.isfinite(b_next):
                dlp[t, u, blank] -= math.exp(alpha[t, u] + lp[t, u, blank] + b_next - total)
            if u < u_len and mask[t, u + 1] and np.isfinite(beta[t, u + 1]):
                dlp[t, u, labels[u]] -= math.exp(
                    alpha[t, u] + lp[t, u, labels[u]] + beta[t, u + 1] - total
                )

    soft = np.exp(lp)
    grad = dlp - soft * dlp.sum(axis=2, keepdims=True)
    return float(-total), grad, alpha, beta


def _logsumexp_last(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return np.log(np.exp(x - m).sum(axis=-1, keepdims=True)) + m


def rnnt_loss(logits, labels, blank: int = 0):
    """Exact negative log-likelihood and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    nll, grad, _, _ = _forward_backward(logits, labels, blank, band=None)
    return nll, grad


def rnnt_loss_pruned(logits, labels, band: int, blank: int = 0):
    """Band-restricted loss; band >= U+1 is bit-equal to the exact loss."""
    if band < 1:
        raise ShapeError("band must be >= 1")
    logits = np.asarray(logits, dtype=np.float64)
    nll, grad, _, _ = _forward_backward(logits, labels, blank, band=band)
    return nll, grad


def rnnt_loss_tensor(logits: ad.Tensor, labels, blank: int = 0, band: int | None = None) -> ad.Tensor:
    """Tape-aware wrapper: scalar loss node whose backward injects the DP gradient."""
    if band is None:
        nll, grad = rnnt_loss(logits.values, labels, blank)
    else:
        nll, grad = rnnt_loss_pruned(logits.values, labels, band, blank)
    if not math.isfinite(nll):
        raise ad.NotFiniteError("transducer loss is not finite (band disconnected the lattice?)")
    if not ad.grad_enabled():
        return ad.Tensor(np.asarray(nll))

    def backward(g: np.ndarray) -> None:
        logits.accum_grad(float(g) * grad)

    return ad.Tensor(np.asarray(nll), _parents=(logits,), _backward=backward)


# ---------------------------------------------------------------------------
# brute-force oracle


def enumerate_alignments(t_len: int, u_len: int, limit: int = 10_000) -> list:
    """All monotone blank/emit paths ending with the terminal blank.

    A path is a tuple of moves, each ("blank", t, u) or ("emit", t, u)
    meaning the symbol consumed while sitting at lattice cell (t, u); the
    terminal blank at (T-1, U) is included. The count is C(T-1+U, U).
    """
    if t_len < 1 or u_len < 0:
        raise ShapeError("need T >= 1 and U >= 0")
    if math.comb(t_len - 1 + u_len, u_len) > limit:
        raise InstanceTooLargeError(f"too many alignments for T={t_len}, U={u_len}")

    paths: list = []

    def walk(t: int, u: int, prefix: list) -> None:
        if t == t_len - 1 and u == u_len:
            paths.append(tuple(prefix + [("blank", t, u)]))
            return
        if t < t_len - 1:
            walk(t + 1, u, prefix + [("blank", t, u)])
        if u < u_len:
            walk(t, u + 1, prefix + [("emit", t, u)])

    walk(0, 0, [])
    return paths


def brute_force_loss(logits, labels, blank: int = 0) -> float:
    """-log of the path-probability sum by explicit alignment enumeration."""
    logits = np.asarray(logits, dtype=np.float64)
    t_len, u_len, labels = _check_inputs(logits, labels, blank)
    lp = logits - _logsumexp_last(logits)
    scores = []
    for path in enumerate_alignments(t_len, u_len):
        s = 0.0
        for move, t, u in path:
            s += lp[t, u, blank] if move == "blank" else lp[t, u, labels[u]]
        scores.append(s)
    m = max(scores)
    return float(-(m + math.log(sum(math.exp(s - m) for s in scores))))
