"""The transducer network: input embedding, downsampling transformer encoder
with a cross-utterance key/value hook, stateless predictor, joint network.

The encoder runs pre-norm blocks grouped into stacks; each stack mean-pools
time by its factor, runs its blocks, and restores the frame rate by
nearest-repeat upsampling, so encoder output length equals its input length.
A context provider, when given, supplies each block's fused key/value
sequence; queries always come from the current utterance alone.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Protocol

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError, FormatError, ShapeError, TokenRangeError
from .seeding import derive_rng

_CKPT_MAGIC = b"CTXC"
_CKPT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int = 0  # words, excluding blank (id 0)
    token_vocab_size: int = 0  # codebook size for discrete input
    token_embed_dim: int = 80
    downsample_factors: tuple = (1, 2)
    blocks_per_stack: int = 1
    model_dim: int = 16
    num_heads: int = 2
    ff_dim: int = 32
    pred_embed_dim: int = 16
    pred_context: int = 2
    pred_dim: int = 16
    joint_dim: int = 16
    input_kind: str = "discrete"  # or "continuous"
    feature_dim: int = 0

    @property
    def num_blocks(self) -> int:
        return len(self.downsample_factors) * self.blocks_per_stack

    def validate(self) -> None:
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be >= 1")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError("model_dim must be divisible by num_heads")
        if any(f < 1 for f in self.downsample_factors):
            raise ConfigError("downsample factors must be >= 1")
        if self.blocks_per_stack < 1:
            raise ConfigError("blocks_per_stack must be >= 1")
        if self.pred_context < 1:
            raise ConfigError("pred_context must be >= 1")
        if self.input_kind not in ("discrete", "continuous"):
            raise ConfigError(f"unknown input_kind {self.input_kind!r}")
        if self.input_kind == "discrete" and self.token_vocab_size < 1:
            raise ConfigError("token_vocab_size must be >= 1 for discrete input")
        if self.input_kind == "continuous" and self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1 for continuous input")


class Parameters:
    """Named leaf tensors with a stable enumeration order."""

    def __init__(self):
        self._tensors: dict = {}

    def add(self, name: str, values: np.ndarray) -> None:
        if name in self._tensors:
            raise ShapeError(f"duplicate parameter {name}")
        self._tensors[name] = Tensor(np.asarray(values, dtype=np.float64))

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def set_values(self, name: str, values: np.ndarray) -> None:
        """Replace a leaf with fresh values (optimizer update)."""
        self._tensors[name] = Tensor(np.asarray(values, dtype=np.float64))

    def arrays(self) -> dict:
        return {name: t.values for name, t in self._tensors.items()}

    def num_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())


def _glorot(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_in = shape[0] if len(shape) > 1 else shape[0]
    fan_out = shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_parameters(cfg: ModelConfig, seed: int, compact_len: int | None = None) -> Parameters:
    """All model weights; every tensor draws from its own named stream."""
    cfg.validate()
    p = Parameters()
    d, e = cfg.model_dim, cfg.token_embed_dim

    def mat(name: str, shape: tuple) -> None:
        p.add(name, _glorot(derive_rng(seed, "init", name), shape))

    def zeros(name: str, shape: tuple) -> None:
        p.add(name, np.zeros(shape))

    def ones(name: str, shape: tuple) -> None:
        p.add(name, np.ones(shape))

    if cfg.input_kind == "discrete":
        mat("input.embed", (cfg.token_vocab_size, e))
    else:
        mat("input.proj", (cfg.feature_dim, e))
    mat("input.subsample.weight", (2 * e, d))
    zeros("input.subsample.bias", (d,))

    for b in range(cfg.num_blocks):
        pre = f"enc.b{b}"
        ones(f"{pre}.ln1.gain", (d,))
        zeros(f"{pre}.ln1.bias", (d,))
        for w in ("wq", "wk", "wv", "wo"):
            mat(f"{pre}.attn.{w}", (d, d))
        zeros(f"{pre}.attn.bias", (d,))
        ones(f"{pre}.ln2.gain", (d,))
        zeros(f"{pre}.ln2.bias", (d,))
        mat(f"{pre}.ffn.w1", (d, cfg.ff_dim))
        zeros(f"{pre}.ffn.b1", (cfg.ff_dim,))
        mat(f"{pre}.ffn.w2", (cfg.ff_dim, d))
        zeros(f"{pre}.ffn.b2", (d,))

    # row 0 of the predictor embedding is the learned start pad
    mat("pred.embed", (cfg.vocab_size + 1, cfg.pred_embed_dim))
    mat("pred.conv.weight", (cfg.pred_context * cfg.pred_embed_dim, cfg.pred_dim))
    zeros("pred.conv.bias", (cfg.pred_dim,))

    mat("joint.enc.weight", (d, cfg.joint_dim))
    zeros("joint.enc.bias", (cfg.joint_dim,))
    mat("joint.pred.weight", (cfg.pred_dim, cfg.joint_dim))
    zeros("joint.pred.bias", (cfg.joint_dim,))
    mat("joint.out.weight", (cfg.joint_dim, cfg.vocab_size + 1))
    zeros("joint.out.bias", (cfg.vocab_size + 1,))

    for seg in ("prev", "cur", "future"):
        rng = derive_rng(seed, "init", f"fusion.segment.{seg}")
        p.add(f"fusion.segment.{seg}", 0.02 * rng.normal(size=(d,)))
    if compact_len is not None:
        mat("fusion.compact.query", (compact_len, d))
    return p


# ---------------------------------------------------------------------------
# forward pieces


@lru_cache(maxsize=64)
def positional_encoding(length: int, dim: int) -> np.ndarray:
    """Sinusoidal table, restarted per utterance."""
    pos = np.arange(length)[:, None].astype(np.float64)
    i = np.arange(dim)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2.0 * (i // 2) / dim)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    pe.flags.writeable = False
    return pe


def embed_tokens(tokens: np.ndarray, params: Parameters, cfg: ModelConfig) -> Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and tokens.max() >= cfg.token_vocab_size:
        raise TokenRangeError(f"token id {int(tokens.max())} >= codebook size {cfg.token_vocab_size}")
    if tokens.size and tokens.min() < 0:
        raise TokenRangeError("negative token id")
    return ad.gather_rows(params["input.embed"], tokens)


def project_features(features: np.ndarray, params: Parameters, cfg: ModelConfig) -> Tensor:
    if features.shape[1] != cfg.feature_dim:
        raise ShapeError(f"feature dim {features.shape[1]} != configured {cfg.feature_dim}")
    return ad.matmul(Tensor(features), params["input.proj"])


def embed_sequence(utt_input, params: Parameters, cfg: ModelConfig) -> Tensor:
    """Token lookup or feature projection, before subsampling: (T, E)."""
    if cfg.input_kind == "discrete":
        return embed_tokens(utt_input, params, cfg)
    return project_features(np.asarray(utt_input, dtype=np.float64), params, cfg)


def subsample(x: Tensor, params: Parameters) -> Tensor:
    """Stride-2 kernel-2 convolution: (T, E) -> (floor(T/2), D)."""
    t = x.shape[0]
    if t < 2:
        raise ShapeError("need at least 2 frames for stride-2 subsampling")
    half = t // 2
    even = ad.slice_axis(x, 0, 0, 2 * half, 2)
    odd = ad.slice_axis(x, 0, 1, 2 * half, 2)
    win = ad.concat([even, odd], axis=1)
    return ad.add(ad.matmul(win, params["input.subsample.weight"]), params["input.subsample.bias"])


def embed_input(utt_input, params: Parameters, cfg: ModelConfig) -> Tensor:
    """Full input stage: embed/project then subsample to the model dim."""
    return subsample(embed_sequence(utt_input, params, cfg), params)


class ContextProvider(Protocol):
    """Supplies fused keys/values for one encoder block."""

    def kv_for_block(self, block: int, current_normed: Tensor, params: Parameters):
        """Return (kv tensor, score bias over keys or None)."""
        ...


def _mhsa(
    q_in: Tensor,
    kv_in: Tensor,
    params: Parameters,
    prefix: str,
    num_heads: int,
    score_bias: np.ndarray | None,
    trace: dict | None,
    block: int,
) -> Tensor:
    d = q_in.shape[1]
    dh = d // num_heads
    tq, tk = q_in.shape[0], kv_in.shape[0]

    q = ad.matmul(q_in, params[f"{prefix}.attn.wq"])
    k = ad.matmul(kv_in, params[f"{prefix}.attn.wk"])
    v = ad.matmul(kv_in, params[f"{prefix}.attn.wv"])
    qh = ad.transpose(ad.reshape(q, (tq, num_heads, dh)), (1, 0, 2))
    kh = ad.transpose(ad.reshape(k, (tk, num_heads, dh)), (1, 2, 0))
    vh = ad.transpose(ad.reshape(v, (tk, num_heads, dh)), (1, 0, 2))
    scores = ad.scale(ad.matmul(qh, kh), 1.0 / np.sqrt(dh))
    if score_bias is not None:
        scores = ad.add(scores, Tensor(np.asarray(score_bias, dtype=np.float64)))
    attn = ad.softmax(scores, axis=-1)
    if trace is not None:
        trace.setdefault("attention", {})[block] = attn.values.copy()
    ctx = ad.matmul(attn, vh)
    merged = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (tq, d))
    return ad.add(ad.matmul(merged, params[f"{prefix}.attn.wo"]), params[f"{prefix}.attn.bias"])


def _block(
    h: Tensor,
    params: Parameters,
    cfg: ModelConfig,
    block: int,
    ctx: ContextProvider | None,
    trace: dict | None,
) -> Tensor:
    prefix = f"enc.b{block}"
    normed = ad.layernorm(h, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
    if ctx is not None:
        kv, bias = ctx.kv_for_block(block, normed, params)
    else:
        kv, bias = normed, None
    h = ad.add(h, _mhsa(normed, kv, params, prefix, cfg.num_heads, bias, trace, block))
    normed2 = ad.layernorm(h, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
    ff = ad.add(ad.matmul(normed2, params[f"{prefix}.ffn.w1"]), params[f"{prefix}.ffn.b1"])
    ff = ad.add(ad.matmul(ad.relu(ff), params[f"{prefix}.ffn.w2"]), params[f"{prefix}.ffn.b2"])
    return ad.add(h, ff)


def _downsample(h: Tensor, factor: int) -> tuple:
    t = h.shape[0]
    if factor == 1:
        return h, t
    full = t // factor
    parts = []
    if full > 0:
        head = ad.slice_axis(h, 0, 0, full * factor)
        pooled = ad.mean_axis(ad.reshape(head, (full, factor, h.shape[1])), axis=1)
        parts.append(pooled)
    if t - full * factor > 0:
        tail = ad.slice_axis(h, 0, full * factor, t)
        parts.append(ad.reshape(ad.mean_axis(tail, axis=0), (1, h.shape[1])))
    return (parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)), t


def _upsample(h: Tensor, factor: int, orig_len: int) -> Tensor:
    if factor == 1:
        return h
    ids = np.repeat(np.arange(h.shape[0]), factor)[:orig_len]
    return ad.gather_rows(h, ids)


def encode(
    x: Tensor,
    params: Parameters,
    cfg: ModelConfig,
    ctx: ContextProvider | None = None,
    collect_states: list | None = None,
    trace: dict | None = None,
) -> Tensor:
    """Encoder stack chain; output length equals input length.

    When ``collect_states`` is given, the hidden state entering each block
    (in that block's downsampled time base) is appended to it.
    """
    h = ad.add(x, Tensor(positional_encoding(x.shape[0], cfg.model_dim)))
    block = 0
    for factor in cfg.downsample_factors:
        h, orig_len = _downsample(h, factor)
        for _ in range(cfg.blocks_per_stack):
            if collect_states is not None:
                collect_states.append(h)
            h = _block(h, params, cfg, block, ctx, trace)
            block += 1
        h = _upsample(h, factor, orig_len)
    return h


def encoded_length(input_len: int, cfg: ModelConfig) -> int:
    """Output frame count is a pure function of input length and config."""
    return input_len // 2


# ---------------------------------------------------------------------------
# predictor and joint


def _history_ids(labels, order: int) -> np.ndarray:
    """ids[u, c] = label at position u-order+c of the prefix, 0-padded."""
    u_len = len(labels)
    ids = np.zeros((u_len + 1, order), dtype=np.int64)
    for u in range(u_len + 1):
        for c in range(order):
            j = u - order + c
            ids[u, c] = labels[j] if j >= 0 else 0
    return ids


def predict_all(labels, params: Parameters, cfg: ModelConfig) -> Tensor:
    """Predictor outputs for every prefix of ``labels``: (U+1, pred_dim)."""
    vocab = params["pred.embed"].shape[0]
    for l in labels:
        if not 0 <= int(l) < vocab:
            raise TokenRangeError(f"label {l} outside [0, {vocab})")
    ids = _history_ids([int(l) for l in labels], cfg.pred_context)
    cols = [ad.gather_rows(params["pred.embed"], ids[:, c]) for c in range(cfg.pred_context)]
    stacked = cols[0] if len(cols) == 1 else ad.concat(cols, axis=1)
    return ad.add(ad.matmul(stacked, params["pred.conv.weight"]), params["pred.conv.bias"])


def predict(prefix, params: Parameters, cfg: ModelConfig) -> Tensor:
    """Predictor state after the given label prefix; depends only on its
    last ``pred_context`` labels."""
    tail = [int(l) for l in prefix][-cfg.pred_context :]
    full = predict_all(tail, params, cfg)
    return ad.slice_axis(full, 0, full.shape[0] - 1, full.shape[0])


def joint_all(h: Tensor, f: Tensor, params: Parameters) -> Tensor:
    """Logits over the full (T, U+1) lattice: (T, U+1, V+1)."""
    he = ad.add(ad.matmul(h, params["joint.enc.weight"]), params["joint.enc.bias"])
    fe = ad.add(ad.matmul(f, params["joint.pred.weight"]), params["joint.pred.bias"])
    g = ad.relu(ad.outer_add(he, fe))
    t, u1, j = g.shape
    flat = ad.matmul(ad.reshape(g, (t * u1, j)), params["joint.out.weight"])
    flat = ad.add(flat, params["joint.out.bias"])
    return ad.reshape(flat, (t, u1, params["joint.out.weight"].shape[1]))


def joint_single(h_t: np.ndarray, f_u: np.ndarray, params: Parameters) -> np.ndarray:
    """One lattice cell's logits, plain numpy (decode path)."""
    he = h_t @ params["joint.enc.weight"].values + params["joint.enc.bias"].values
    fe = f_u @ params["joint.pred.weight"].values + params["joint.pred.bias"].values
    g = np.maximum(he + fe, 0.0)
    return g @ params["joint.out.weight"].values + params["joint.out.bias"].values


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(arrays: dict, path) -> None:
    """Named float64 tensors, little-endian; bit-exact round-trip."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    version, count = struct.unpack("<II", data[4:12])
    if version != _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    out: dict = {}
    offset = 12
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, offset)
            offset += 4
            name = data[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", data, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}I", data, offset)
            offset += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset)
            offset += 8 * n
            out[name] = arr.astype(np.float64).reshape(shape)
    except (struct.error, ValueError) as e:
        raise FormatError(f"{path}: truncated checkpoint") from e
    if offset != len(data):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return out
