"""K-means codebook training and frame-to-token quantization.

Lloyd's algorithm with k-means++ seeding maps continuous feature frames to
discrete token indices; token quality against a frame-level phone labelling
is measured by phone-normalized mutual information.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .exceptions import FormatError, InsufficientDataError, ShapeError, UndefinedMetricError
from .seeding import derive_rng
from .validation import as_float_matrix, as_int_vector, check_same_length

_CODEBOOK_MAGIC = b"CTXK"
_CODEBOOK_VERSION = 1
_ASSIGN_CHUNK = 4096


@dataclass
class Codebook:
    """Trained centroid set mapping frames to token indices."""

    k: int
    dim: int
    centroids: np.ndarray
    trained_iters: int = 0
    final_distortion: float = 0.0
    distortion_history: list = field(default_factory=list)


def _sq_dists(frames: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances, chunked over frames."""
    n = frames.shape[0]
    out = np.empty((n, centroids.shape[0]), dtype=np.float64)
    for lo in range(0, n, _ASSIGN_CHUNK):
        hi = min(lo + _ASSIGN_CHUNK, n)
        diff = frames[lo:hi, None, :] - centroids[None, :, :]
        out[lo:hi] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _kmeanspp_init(frames: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = frames.shape[0]
    centroids = np.empty((k, frames.shape[1]), dtype=np.float64)
    centroids[0] = frames[int(rng.integers(n))]
    d2 = _sq_dists(frames, centroids[:1]).reshape(-1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = frames[idx]
        d2 = np.minimum(d2, _sq_dists(frames, centroids[j : j + 1]).reshape(-1))
    return centroids


def train_codebook(
    frames,
    k: int,
    max_iters: int = 50,
    seed: int = 0,
    init_centroids: np.ndarray | None = None,
) -> Codebook:
    """Lloyd's algorithm; stops at ``max_iters`` or when assignments freeze.

    Empty clusters are deterministically re-seeded to the point farthest
    from its nearest centroid. Distortion (mean squared distance) is
    recorded per iteration and is non-increasing.
    """
    frames = as_float_matrix(frames, "frames")
    n, dim = frames.shape
    if k < 1:
        raise ShapeError("k must be >= 1")
    if n < k:
        raise InsufficientDataError(f"need at least k={k} frames, got {n}")

    if init_centroids is not None:
        centroids = as_float_matrix(init_centroids, "init_centroids").copy()
        if centroids.shape != (k, dim):
            raise ShapeError(f"init_centroids must be ({k}, {dim})")
    else:
        centroids = _kmeanspp_init(frames, k, derive_rng(seed, "kmeans++"))

    history: list[float] = []
    prev_assign: np.ndarray | None = None
    iters = 0
    for _ in range(max_iters):
        d2 = _sq_dists(frames, centroids)
        assign = d2.argmin(axis=1)
        min_d2 = d2[np.arange(n), assign]
        history.append(float(min_d2.mean()))
        iters += 1
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign

        new_centroids = centroids.copy()
        counts = np.bincount(assign, minlength=k)
        for j in range(k):
            if counts[j] > 0:
                new_centroids[j] = frames[assign == j].mean(axis=0)
        taken: set[int] = set()
        for j in range(k):
            if counts[j] == 0:
                order = np.argsort(-min_d2, kind="stable")
                pick = next(int(i) for i in order if int(i) not in taken)
                taken.add(pick)
                new_centroids[j] = frames[pick]
        centroids = new_centroids

    return Codebook(
        k=k,
        dim=dim,
        centroids=centroids,
        trained_iters=iters,
        final_distortion=history[-1],
        distortion_history=history,
    )


def quantize(frames, codebook: Codebook) -> np.ndarray:
    """Nearest-centroid token per frame; ties resolve to the lowest index."""
    frames = as_float_matrix(frames, "frames")
    if frames.shape[1] != codebook.dim:
        raise ShapeError(f"frame dim {frames.shape[1]} != codebook dim {codebook.dim}")
    return _sq_dists(frames, codebook.centroids).argmin(axis=1).astype(np.int64)


def pnmi(frame_labels, tokens) -> float:
    """Mutual information between labels and tokens, normalized by label entropy."""
    labels = as_int_vector(frame_labels, "frame_labels")
    toks = as_int_vector(tokens, "tokens")
    check_same_length(labels, toks, "frame_labels", "tokens")
    if labels.size < 1:
        raise ShapeError("need at least one frame")

    _, li = np.unique(labels, return_inverse=True)
    _, ti = np.unique(toks, return_inverse=True)
    nl, nt = li.max() + 1, ti.max() + 1
    joint = np.bincount(li * nt + ti, minlength=nl * nt).reshape(nl, nt).astype(np.float64)
    joint /= joint.sum()
    pl = joint.sum(axis=1)
    pt = joint.sum(axis=0)

    h_label = -np.sum(pl[pl > 0] * np.log(pl[pl > 0]))
    if h_label <= 0.0:
        raise UndefinedMetricError("label entropy is zero; PNMI undefined")
    nz = joint > 0
    mi = np.sum(joint[nz] * (np.log(joint[nz]) - np.log(np.outer(pl, pt)[nz])))
    return float(min(max(mi / h_label, 0.0), 1.0))


def save_codebook(codebook: Codebook, path) -> None:
    with open(path, "wb") as f:
        f.write(_CODEBOOK_MAGIC)
        f.write(struct.pack("<III", _CODEBOOK_VERSION, codebook.k, codebook.dim))
        f.write(np.ascontiguousarray(codebook.centroids, dtype="<f8").tobytes())


def load_codebook(path) -> Codebook:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16 or data[:4] != _CODEBOOK_MAGIC:
        raise FormatError(f"{path}: bad codebook magic")
    version, k, dim = struct.unpack("<III", data[4:16])
    if version != _CODEBOOK_VERSION:
        raise FormatError(f"{path}: unsupported codebook version {version}")
    expected = 16 + k * dim * 8
    if len(data) != expected:
        raise FormatError(f"{path}: truncated codebook ({len(data)} != {expected} bytes)")
    centroids = np.frombuffer(data[16:], dtype="<f8").astype(np.float64).reshape(k, dim)
    return Codebook(k=k, dim=dim, centroids=centroids)


class TokenQuantizer(BaseEstimator, TransformerMixin):
    """K-means frame tokenizer with a fit/transform interface.

    Parameters
    ----------
    n_clusters : int, default=64
        Codebook size K.
    max_iter : int, default=50
        Lloyd iteration cap.
    random_state : int, default=0
        Seed for k-means++ initialization; same seed gives a bit-identical
        codebook.
    """

    def __init__(self, n_clusters: int = 64, max_iter: int = 50, random_state: int = 0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        cb = train_codebook(X, self.n_clusters, max_iters=self.max_iter, seed=self.random_state)
        self.codebook_ = cb
        self.cluster_centers_ = cb.centroids
        self.n_iter_ = cb.trained_iters
        self.distortion_ = cb.final_distortion
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "codebook_"):
            raise NotFittedError("TokenQuantizer is not fitted; call fit first")
        return quantize(X, self.codebook_)

    def transform(self, X) -> np.ndarray:
        return self.predict(X)
