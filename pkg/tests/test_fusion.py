import dataclasses

import numpy as np
import pytest

from ctxducer import autodiff as ad
from ctxducer.autodiff import Tensor
from ctxducer.corpus import GeneratorConfig, attach_tokens, generate
from ctxducer.exceptions import ConfigError, ContextCacheMissError
from ctxducer.fusion import (
    ContextCache,
    FusionConfig,
    _BlockContextProvider,
    build_context,
    compact_pool,
    concat_current_span,
    contextual_forward,
    fuse,
)
from ctxducer.loss import rnnt_loss_tensor
from ctxducer.model import ModelConfig, embed_input, encode, init_parameters, joint_all, predict_all
from ctxducer.quantizer import train_codebook


def micro_cfg(**kw):
    base = dict(
        vocab_size=4, token_vocab_size=6, token_embed_dim=8, downsample_factors=(1, 2),
        blocks_per_stack=1, model_dim=8, num_heads=2, ff_dim=16, pred_embed_dim=8,
        pred_context=2, pred_dim=8, joint_dim=8, input_kind="discrete",
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_session(seed=0):
    cfg = GeneratorConfig(num_sessions=1, utterances_per_session=3, phone_count=3,
                          feature_dim=5, seed=seed, middle_words=1)
    sessions = generate(cfg)
    frames = np.concatenate([u.features for s in sessions for u in s.utterances])
    cb = train_codebook(frames, k=6, seed=0)
    for s in sessions:
        attach_tokens(s, cb)
    return sessions[0]


def encoded_for(utt, params, cfg, fusion, prev=None, future=None, **kw):
    return contextual_forward(utt, params, cfg, fusion, prev=prev, future=future, **kw).encoded


class TestFusionConfig:
    def test_compact_len_default_is_32(self):
        assert FusionConfig().compact_len == 32

    def test_mode_none_requires_zero_scope(self):
        with pytest.raises(ConfigError):
            FusionConfig(mode="none", n_preceding=1).validate()

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            FusionConfig(mode="sideways").validate()


class TestDegeneracy:
    @pytest.mark.parametrize("mode", ["input-concat", "enc-concat", "compact"])
    def test_empty_context_bitwise_equals_baseline(self, mode):
        session = tiny_session()
        cfg = micro_cfg()
        compact = 4 if mode == "compact" else None
        params = init_parameters(cfg, seed=0, compact_len=compact)
        utt = session.utterances[0]
        base = encoded_for(utt, params, cfg, FusionConfig(mode="none"))
        fusion = FusionConfig(mode=mode, n_preceding=1, n_future=1, compact_len=4)
        # session edge: no neighbours passed at all
        out = encoded_for(utt, params, cfg, fusion)
        assert out.values.tobytes() == base.values.tobytes()

    def test_scope_zero_bitwise_equals_baseline_with_neighbours_present(self):
        session = tiny_session()
        cfg = micro_cfg()
        params = init_parameters(cfg, seed=0)
        utt = session.utterances[1]
        base = encoded_for(utt, params, cfg, FusionConfig(mode="none"))
        fusion = FusionConfig(mode="enc-concat", n_preceding=0, n_future=0)
        out = encoded_for(utt, params, cfg, fusion,
                          prev=session.utterances[0], future=session.utterances[2])
        assert out.values.tobytes() == base.values.tobytes()


class TestEncoderConcat:
    def test_key_length_shape_law(self):
        session = tiny_session()
        cfg = micro_cfg()
        params = init_parameters(cfg, seed=0)
        prev, cur, fut = session.utterances
        fusion = FusionConfig(mode="enc-concat", n_preceding=1, n_future=1)
        trace = {}
        contextual_forward(cur, params, cfg, fusion, prev=prev, future=fut, trace=trace)

        def down_lengths(t):
            out = []
            length = t // 2  # input subsampler
            for factor in cfg.downsample_factors:
                down = -(-length // factor)
                out.append(down)
            return out

        lp = down_lengths(prev.num_frames)
        lc = down_lengths(cur.num_frames)
        lf = down_lengths(fut.num_frames)
        for block, attn in trace["attention"].items():
            assert attn.shape[1] == lc[block]
            assert attn.shape[2] == lp[block] + lc[block] + lf[block]
            assert np.max(np.abs(attn.sum(axis=-1) - 1.0)) <= 1e-9

    def test_masked_context_reproduces_baseline(self):
        session = tiny_session()
        cfg = micro_cfg()
        params = init_parameters(cfg, seed=0)
        prev, cur, fut = session.utterances
        base = encoded_for(cur, params, cfg, FusionConfig(mode="none"))
        fusion = FusionConfig(mode="enc-concat", n_preceding=1, n_future=1)
        masked = encoded_for(cur, params, cfg, fusion, prev=prev, future=fut,
                             context_key_bias=-1e30)
        assert np.max(np.abs(masked.values - base.values)) <= 1e-9

    def test_context_changes_output(self):
        session = tiny_session()
        cfg = micro_cfg()
        params = init_parameters(cfg, seed=0)
        prev, cur, fut = session.utterances
        base = encoded_for(cur, params, cfg, FusionConfig(mode="none"))
        fusion = FusionConfig(mode="enc-concat", n_preceding=1, n_future=1)
        out = encoded_for(cur, params, cfg, fusion, prev=prev, future=fut)
        assert not np.allclose(out.values, base.values)

    def test_final_layer_context_variant_runs(self):
        session = tiny_session()
        cfg = micro_cfg()
        params = init_parameters(cfg, seed=0)
        prev, cur, _ = session.utterances
        fusion = FusionConfig(mode="enc-concat", n_preceding=1, final_layer_context=True)
        out = encoded_for(cur, params, cfg, fusion, prev=prev)
        assert out.shape == (cur.num_frames // 2, cfg.model_dim)


class TestCompactPool:
    @pytest.mark.parametrize("t_c", [1, 3, 17, 100])
    def test_output_always_L_by_D(self, t_c):
        cfg = micro_cfg()
        params = init_parameters(cfg, seed=0, compact_len=5)
        h = Tensor(np.random.default_rng(t_c).uniform(-2, 2, (t_c, 8)))
        out = compact_pool(h, params)
        assert out.shape == (5, 8)

    def test_single_frame_forced(self):
        cfg = micro_cfg()
        params = init_parameters(cfg, seed=0, compact_len=5)
        h = np.random.default_rng(1).uniform(-2, 2, (1, 8))
        out = compact_pool(Tensor(h), params)
        for row in out.values:
            assert np.allclose(row, h[0])

    def test_attention_rows_sum_to_one_and_match_recompute(self):
        cfg = micro_cfg()
        params = init_parameters(cfg, seed=0, compact_len=5)
        h = np.random.default_rng(2).uniform(-2, 2, (9, 8))
        out = compact_pool(Tensor(h), params).values
        q = params["fusion.compact.query"].values
        scores = q @ h.T / np.sqrt(8)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        attn = e / e.sum(axis=1, keepdims=True)
        assert np.max(np.abs(attn.sum(axis=1) - 1.0)) <= 1e-9
        assert np.max(np.abs(out - attn @ h)) <= 1e-12

    def test_rows_inside_convex_hull(self):
        cfg = micro_cfg()
        params = init_parameters(cfg, seed=0, compact_len=4)
        for seed in range(5):
            h = np.random.default_rng(seed).uniform(-3, 3, (7, 8))
            out = compact_pool(Tensor(h), params).values
            lo, hi = h.min(axis=0), h.max(axis=0)
            assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


class TestBuildContext:
    def test_per_block_state_shapes(self):
        session = tiny_session()
        cfg = micro_cfg()
        params = init_parameters(cfg, seed=0)
        fusion = FusionConfig(mode="enc-concat", n_preceding=1)
        utt = session.utterances[0]
        states = build_context(utt, params, cfg, fusion)
        t_sub = utt.num_frames // 2
        assert states.per_block[0].shape == (t_sub, cfg.model_dim)  # factor 1 stack
        assert states.per_block[1].shape == (-(-t_sub // 2), cfg.model_dim)  # factor 2 stack
        assert states.final.shape == (t_sub, cfg.model_dim)

    def test_cache_hit_bit_identical(self):
        session = tiny_session()
        cfg = micro_cfg()
        params = init_parameters(cfg, seed=0)
        fusion = FusionConfig(mode="enc-concat", n_preceding=1)
        cache = ContextCache()
        utt = session.utterances[0]
        first = build_context(utt, params, cfg, fusion, cache=cache, version=3)
        second = build_context(utt, params, cfg, fusion, cache=cache, version=3)
        for a, b in zip(first.per_block, second.per_block):
            assert a.tobytes() == b.tobytes()

    def test_cache_miss_and_version_mismatch_raise(self):
        cache = ContextCache()
        with pytest.raises(ContextCacheMissError):
            cache.get("s", 1, 0, version=0)
        cache.put("s", 1, 0, np.zeros((2, 2)), version=1)
        with pytest.raises(ContextCacheMissError):
            cache.get("s", 1, 0, version=2)


class TestDetach:
    def _setup(self, detach):
        session = tiny_session()
        cfg = micro_cfg(downsample_factors=(1,))
        params = init_parameters(cfg, seed=0)
        fusion = FusionConfig(mode="enc-concat", n_preceding=1, detach_context=detach)
        prev, cur, _ = session.utterances
        vocab_labels = [1, 2]
        return session, cfg, params, fusion, prev, cur, vocab_labels

    def _loss_with_frozen_context(self, params, cfg, fusion, cur, states, labels):
        provider = _BlockContextProvider(cfg, fusion, states, None)
        x = embed_input(cur.tokens, params, cfg)
        h = encode(x, params, cfg, ctx=provider)
        f = predict_all(labels, params, cfg)
        return rnnt_loss_tensor(joint_all(h, f, params), labels)

    def _loss_full(self, params, cfg, fusion, prev, cur, labels):
        result = contextual_forward(cur, params, cfg, fusion, prev=prev)
        f = predict_all(labels, params, cfg)
        return rnnt_loss_tensor(joint_all(result.encoded, f, params), labels)

    def _fd_grad(self, loss_fn, params, name, eps=1e-5):
        tensor = params[name]
        flat = tensor.values.reshape(-1)
        numeric = np.zeros_like(flat)
        with ad.no_grad():
            for i in range(flat.size):
                for sign in (+1, -1):
                    bumped = flat.copy()
                    bumped[i] += sign * eps
                    params.set_values(name, bumped.reshape(tensor.values.shape))
                    numeric[i] += sign * loss_fn(params).item()
                numeric[i] /= 2 * eps
        params.set_values(name, tensor.values)
        return numeric.reshape(tensor.values.shape)

    def test_detach_blocks_context_path_gradient(self):
        _, cfg, params, fusion, prev, cur, labels = self._setup(detach=True)
        states = build_context(prev, params, cfg, fusion)
        probe = "input.subsample.weight"

        loss = self._loss_full(params, cfg, fusion, prev, cur, labels)
        params.zero_grad()
        loss.backward()
        analytic = params[probe].grad.copy()

        frozen_fd = self._fd_grad(
            lambda p: self._loss_with_frozen_context(p, cfg, fusion, cur, states, labels),
            params, probe,
        )
        full_fd = self._fd_grad(
            lambda p: self._loss_full(p, cfg, fusion, prev, cur, labels), params, probe
        )

        def max_rel(a, b):
            return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))

        # with detach on, autodiff equals the frozen-context derivative and the
        # context-path contribution (full minus frozen) is exactly dropped
        assert max_rel(analytic, frozen_fd) <= 1e-5
        assert np.max(np.abs(full_fd - frozen_fd)) > 1e-6
        assert max_rel(analytic, full_fd) > 1e-4

    def test_no_detach_gradient_flows_through_neighbour_pass(self):
        _, cfg, params, fusion, prev, cur, labels = self._setup(detach=False)
        probe = "input.subsample.weight"
        loss = self._loss_full(params, cfg, fusion, prev, cur, labels)
        params.zero_grad()
        loss.backward()
        analytic = params[probe].grad.copy()
        full_fd = self._fd_grad(
            lambda p: self._loss_full(p, cfg, fusion, prev, cur, labels), params, probe
        )
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(full_fd)), 1e-8)
        assert float(np.max(np.abs(analytic - full_fd) / denom)) <= 1e-5


class TestFuse:
    def test_no_context_returns_current_unchanged(self):
        cfg = micro_cfg()
        params = init_parameters(cfg, seed=0)
        cur = Tensor(np.random.default_rng(0).uniform(-1, 1, (4, 8)))
        plan = fuse(cur, None, None, params)
        assert plan.kv is cur and plan.score_bias is None

    def test_segment_embeddings_applied(self):
        cfg = micro_cfg()
        params = init_parameters(cfg, seed=0)
        cur = Tensor(np.zeros((2, 8)))
        prev = Tensor(np.zeros((3, 8)))
        plan = fuse(cur, prev, None, params)
        assert plan.spans == (3, 2, 0)
        assert np.allclose(plan.kv.values[:3], params["fusion.segment.prev"].values)
        assert np.allclose(plan.kv.values[3:], 0.0)  # current entries stay untagged

    def test_key_bias_layout(self):
        cfg = micro_cfg()
        params = init_parameters(cfg, seed=0)
        plan = fuse(Tensor(np.zeros((2, 8))), Tensor(np.zeros((3, 8))),
                    Tensor(np.zeros((1, 8))), params, key_bias=-50.0)
        assert plan.score_bias.tolist() == [-50.0] * 3 + [0.0] * 2 + [-50.0]


class TestInputConcat:
    def test_span_matches_marker_conv_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            p, c, f = (int(rng.integers(1, 10)) * 2 for _ in range(3))
            lo, hi = concat_current_span(p, c, f)
            marker = np.zeros(p + c + f)
            marker[p : p + c] = 1.0
            half = len(marker) // 2
            conv = np.array([(marker[2 * j] + marker[2 * j + 1]) / 2 for j in range(half)])
            oracle = np.nonzero(conv > 0.5)[0]
            assert lo == oracle[0] and hi == oracle[-1] + 1

    def test_span_length_equals_standalone_length(self):
        session = tiny_session()
        prev, cur, fut = session.utterances
        lo, hi = concat_current_span(prev.num_frames, cur.num_frames, fut.num_frames)
        assert hi - lo == cur.num_frames // 2

    def test_sliced_encoder_output_shape(self):
        session = tiny_session()
        cfg = micro_cfg()
        params = init_parameters(cfg, seed=0)
        prev, cur, fut = session.utterances
        fusion = FusionConfig(mode="input-concat", n_preceding=1, n_future=1)
        out = encoded_for(cur, params, cfg, fusion, prev=prev, future=fut)
        assert out.shape == (cur.num_frames // 2, cfg.model_dim)
