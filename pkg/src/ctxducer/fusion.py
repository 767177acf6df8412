"""Building, caching, and fusing cross-utterance encoder contexts.

Three fusion routes share one contract: the current utterance's queries
never change, context only widens each attention block's key/value
sequence, and an empty context degrades exactly to the non-contextual
computation.

* ``enc-concat``: full-length neighbour hidden states join the keys/values.
* ``compact``: neighbour states are first attention-pooled to a fixed
  number of summary vectors.
* ``input-concat``: neighbour token/feature sequences are concatenated
  before embedding; after encoding, only the current utterance's frames are
  kept for the joint network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .autodiff import Tensor
from .exceptions import ConfigError, ContextCacheMissError, ShapeError

VALID_MODES = ("none", "input-concat", "enc-concat", "compact")


@dataclass
class FusionConfig:
    mode: str = "none"
    n_preceding: int = 0  # 0 or 1
    n_future: int = 0  # 0 or 1
    detach_context: bool = True
    compact_len: int = 32
    final_layer_context: bool = False

    def validate(self) -> None:
        if self.mode not in VALID_MODES:
            raise ConfigError(f"unknown fusion mode {self.mode!r}")
        if self.n_preceding not in (0, 1) or self.n_future not in (0, 1):
            raise ConfigError("context scope counts must be 0 or 1")
        if self.mode == "none" and (self.n_preceding or self.n_future):
            raise ConfigError("mode 'none' requires n_preceding = n_future = 0")
        if self.mode == "compact" and self.compact_len < 1:
            raise ConfigError("compact_len must be >= 1")

    @property
    def uses_encoder_context(self) -> bool:
        return self.mode in ("enc-concat", "compact")


@dataclass
class ContextStates:
    """Per-block hidden states of one neighbour (block-input time base),
    plus the final encoder output."""

    per_block: list
    final: object
    detached: bool


class ContextCache:
    """(session_id, utterance index, layer) -> hidden states, tagged with the
    parameter version that produced them. Lookups for a missing neighbour
    raise; they are never silently empty."""

    def __init__(self):
        self._store: dict = {}

    def put(self, session_id: str, index: int, layer: int, states: np.ndarray, version: int) -> None:
        self._store[(session_id, index, layer)] = (version, states)

    def get(self, session_id: str, index: int, layer: int, version: int) -> np.ndarray:
        key = (session_id, index, layer)
        if key not in self._store:
            raise ContextCacheMissError(f"no cached context for {key}")
        stored_version, states = self._store[key]
        if stored_version != version:
            raise ContextCacheMissError(
                f"cached context for {key} has parameter version {stored_version}, wanted {version}"
            )
        return states

    def has(self, session_id: str, index: int, layer: int, version: int) -> bool:
        key = (session_id, index, layer)
        return key in self._store and self._store[key][0] == version

    def clear(self) -> None:
        self._store.clear()


def utterance_model_input(utt, cfg: mdl.ModelConfig):
    if cfg.input_kind == "discrete":
        if utt.tokens is None:
            raise ShapeError(f"{utt.utterance_id}: discrete input requires tokens")
        return utt.tokens
    if utt.features is None:
        raise ShapeError(f"{utt.utterance_id}: continuous input requires features")
    return utt.features


def build_context(
    neighbour,
    params: mdl.Parameters,
    cfg: mdl.ModelConfig,
    fusion: FusionConfig,
    cache: ContextCache | None = None,
    version: int = 0,
) -> ContextStates:
    """Full encoder pass over a neighbour; per-block states are recorded.

    With ``detach_context`` the pass runs off-tape and the states are plain
    arrays (gradients cannot flow into the neighbour pass); otherwise the
    live tensors stay connected to the shared parameters.
    """
    n_blocks = cfg.num_blocks
    if cache is not None and fusion.detach_context:
        if all(cache.has(neighbour.session_id, neighbour.index, l, version) for l in range(n_blocks + 1)):
            per_block = [
                cache.get(neighbour.session_id, neighbour.index, l, version) for l in range(n_blocks)
            ]
            final = cache.get(neighbour.session_id, neighbour.index, n_blocks, version)
            return ContextStates(per_block=per_block, final=final, detached=True)

    def run():
        collected: list = []
        x = mdl.embed_input(utterance_model_input(neighbour, cfg), params, cfg)
        final = mdl.encode(x, params, cfg, ctx=None, collect_states=collected)
        return collected, final

    if fusion.detach_context:
        with ad.no_grad():
            collected, final = run()
        per_block = [t.values.copy() for t in collected]
        final_arr = final.values.copy()
        if cache is not None:
            for l, arr in enumerate(per_block):
                cache.put(neighbour.session_id, neighbour.index, l, arr, version)
            cache.put(neighbour.session_id, neighbour.index, n_blocks, final_arr, version)
        return ContextStates(per_block=per_block, final=final_arr, detached=True)

    collected, final = run()
    return ContextStates(per_block=collected, final=final, detached=False)


def compact_pool(h_ctx: Tensor, params: mdl.Parameters) -> Tensor:
    """Learned-query attention pooling to a fixed number of summary rows.

    A = row-softmax(Q_c h^T / sqrt(D)); output A h is (L, D) for any input
    length, each row a convex combination of context rows.
    """
    if h_ctx.shape[0] < 1:
        raise ShapeError("compact_pool needs at least one context frame")
    q = params["fusion.compact.query"]
    d = h_ctx.shape[1]
    scores = ad.scale(ad.matmul(q, ad.transpose(h_ctx, (1, 0))), 1.0 / np.sqrt(d))
    attn = ad.softmax(scores, axis=-1)
    return ad.matmul(attn, h_ctx)


@dataclass
class FusionPlan:
    """Key/value sequence for one attention block plus an optional score bias."""

    kv: Tensor
    score_bias: np.ndarray | None
    spans: tuple  # (prev_len, cur_len, future_len)


def fuse(
    current_normed: Tensor,
    ctx_prev: Tensor | None,
    ctx_future: Tensor | None,
    params: mdl.Parameters,
    key_bias: float | None = None,
) -> FusionPlan:
    """Concatenate [prev | current | future] along time as keys/values.

    Segment embeddings tag context entries' origin (positions restart per
    utterance, so origin is otherwise ambiguous); current entries stay
    untagged so that masking context keys away reproduces the baseline
    attention exactly. With no context at all the plan is exactly the
    current sequence: no tags, no bias.
    """
    if ctx_prev is None and ctx_future is None:
        return FusionPlan(kv=current_normed, score_bias=None, spans=(0, current_normed.shape[0], 0))

    parts = []
    p_len = f_len = 0
    if ctx_prev is not None:
        parts.append(ad.add(ctx_prev, params["fusion.segment.prev"]))
        p_len = ctx_prev.shape[0]
    parts.append(current_normed)
    c_len = current_normed.shape[0]
    if ctx_future is not None:
        parts.append(ad.add(ctx_future, params["fusion.segment.future"]))
        f_len = ctx_future.shape[0]
    kv = ad.concat(parts, axis=0)

    bias = None
    if key_bias is not None:
        bias = np.zeros(p_len + c_len + f_len)
        bias[:p_len] = key_bias
        bias[p_len + c_len :] = key_bias
    return FusionPlan(kv=kv, score_bias=bias, spans=(p_len, c_len, f_len))


class _BlockContextProvider:
    """Adapts cached neighbour states into per-block key/value plans."""

    def __init__(
        self,
        cfg: mdl.ModelConfig,
        fusion: FusionConfig,
        prev: ContextStates | None,
        future: ContextStates | None,
        key_bias: float | None = None,
    ):
        self._cfg = cfg
        self._fusion = fusion
        self._prev = prev
        self._future = future
        self._key_bias = key_bias

    def _ctx_tensor(self, states: ContextStates | None, block: int) -> Tensor | None:
        if states is None:
            return None
        raw = states.final if self._fusion.final_layer_context else states.per_block[block]
        return Tensor(raw) if states.detached else raw

    def kv_for_block(self, block: int, current_normed: Tensor, params: mdl.Parameters):
        prefix = f"enc.b{block}"
        gain, bias = params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"]

        def prepare(states: ContextStates | None) -> Tensor | None:
            raw = self._ctx_tensor(states, block)
            if raw is None:
                return None
            if self._fusion.mode == "compact":
                raw = compact_pool(raw, params)
            return ad.layernorm(raw, gain, bias)

        plan = fuse(current_normed, prepare(self._prev), prepare(self._future), params, self._key_bias)
        return plan.kv, plan.score_bias


# ---------------------------------------------------------------------------
# input-level concatenation


def concat_current_span(prev_len: int, cur_len: int, fut_len: int) -> tuple:
    """Current-utterance frame span after stride-2 subsampling of the
    concatenated input, by boundary-marker propagation: an output frame is
    "current" iff the majority of its input window is."""
    total = prev_len + cur_len + fut_len
    marker = np.zeros(total)
    marker[prev_len : prev_len + cur_len] = 1.0
    half = total // 2
    pooled = (marker[0 : 2 * half : 2] + marker[1 : 2 * half : 2]) / 2.0
    idx = np.nonzero(pooled > 0.5)[0]
    if idx.size == 0:
        raise ShapeError("current utterance vanished in subsampling; too short")
    return int(idx[0]), int(idx[-1]) + 1


def concat_inputs(prev, cur, fut, cfg: mdl.ModelConfig):
    """Concatenate neighbour inputs along time, pre-embedding."""
    parts = []
    lens = []
    for u in (prev, cur, fut):
        if u is None:
            lens.append(0)
            continue
        arr = utterance_model_input(u, cfg)
        parts.append(arr)
        lens.append(len(arr))
    joined = np.concatenate(parts, axis=0)
    return joined, tuple(lens)


# ---------------------------------------------------------------------------
# one entry point for every mode


@dataclass
class ForwardResult:
    encoded: Tensor
    trace: dict = field(default_factory=dict)


def contextual_forward(
    current,
    params: mdl.Parameters,
    cfg: mdl.ModelConfig,
    fusion: FusionConfig,
    prev=None,
    future=None,
    augment_fn=None,
    cache: ContextCache | None = None,
    version: int = 0,
    context_key_bias: float | None = None,
    trace: dict | None = None,
) -> ForwardResult:
    """Encode the current utterance under the configured fusion mode.

    ``prev``/``future`` are neighbour utterances or None (session edges).
    ``augment_fn`` maps the embedded (pre-subsampling) sequence through the
    training-time perturbations; it is never applied at evaluation.
    """
    fusion.validate()
    if fusion.n_preceding == 0:
        prev = None
    if fusion.n_future == 0:
        future = None
    if fusion.mode == "none":
        prev = future = None

    if fusion.mode == "input-concat" and (prev is not None or future is not None):
        joined, (p_len, c_len, f_len) = concat_inputs(prev, current, future, cfg)
        x = mdl.embed_sequence(joined, params, cfg)
        if augment_fn is not None:
            x = augment_fn(x)
        h = mdl.encode(mdl.subsample(x, params), params, cfg, ctx=None, trace=trace)
        lo, hi = concat_current_span(p_len, c_len, f_len)
        return ForwardResult(encoded=ad.slice_axis(h, 0, lo, hi), trace=trace or {})

    ctx = None
    if fusion.uses_encoder_context and (prev is not None or future is not None):
        prev_states = (
            build_context(prev, params, cfg, fusion, cache=cache, version=version)
            if prev is not None
            else None
        )
        fut_states = (
            build_context(future, params, cfg, fusion, cache=cache, version=version)
            if future is not None
            else None
        )
        ctx = _BlockContextProvider(cfg, fusion, prev_states, fut_states, key_bias=context_key_bias)

    x = mdl.embed_sequence(utterance_model_input(current, cfg), params, cfg)
    if augment_fn is not None:
        x = augment_fn(x)
    h = mdl.encode(mdl.subsample(x, params), params, cfg, ctx=ctx, trace=trace)
    return ForwardResult(encoded=h, trace=trace or {})
