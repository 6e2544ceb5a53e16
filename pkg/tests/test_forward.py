import numpy as np
import pytest

from starshard.forward import (
    KVCacheShard,
    attention_block,
    ffn_block,
    make_step_inputs,
    postprocess,
    preprocess,
    reference_forward,
    snap_partial,
)
from starshard.kernels import matmul, rms_norm, rope_apply, silu, softmax_rows
from starshard.sharding import (
    BlockId,
    BlockKind,
    BlockWeights,
    block_weights,
    generate_toy_weights,
    plan_shards,
)


class TestPreprocess:
    def test_identity_embedding_lookup(self):
        embed = np.eye(8, dtype=np.float32)
        step = preprocess([3, 0, 5], embed)
        assert np.array_equal(step.hidden[0], embed[3])
        assert np.array_equal(step.hidden[1], embed[0])
        assert np.array_equal(step.hidden[2], embed[5])

    def test_single_token_empty_cache_mask(self):
        step = preprocess([1], np.eye(4, dtype=np.float32))
        assert step.mask.shape == (1, 1)
        assert step.mask[0, 0]

    def test_mask_matches_bruteforce_lower_triangular(self):
        step = preprocess([0, 1, 2], np.eye(4, dtype=np.float32))
        expected = np.array([[i >= j for j in range(3)] for i in range(3)])
        assert np.array_equal(step.mask, expected)

    def test_mask_with_cached_prefix(self):
        step = make_step_inputs(np.zeros((2, 4), dtype=np.float32), cache_position=3)
        # rows attend all cached columns plus themselves
        expected = np.array(
            [[True, True, True, True, False], [True, True, True, True, True]]
        )
        assert np.array_equal(step.mask, expected)

    def test_id_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            preprocess([9], np.eye(4, dtype=np.float32))
        with pytest.raises(ValueError, match="out of range"):
            preprocess([-1], np.eye(4, dtype=np.float32))


def monolithic_attention_oracle(hidden_in, tensors, cfg, step, cache_k, cache_v):
    """Textbook composition over full heads; snapped per head like the runtime."""
    normed = rms_norm(hidden_in, tensors["norm_gain"], cfg.norm_eps)
    d = cfg.head_dim
    out = None
    for head in range(cfg.heads):
        cols = slice(head * d, (head + 1) * d)
        kv = head // cfg.heads_per_kv
        kv_cols = slice(kv * d, (kv + 1) * d)
        q = rope_apply(matmul(normed, tensors["wq"][:, cols]), step.positions, cfg.rope_theta)
        scores = matmul(q, cache_k[:, kv_cols].T) * np.float32(1.0 / np.sqrt(np.float64(d)))
        probs = softmax_rows(np.where(step.mask, scores, np.float32(-1e9)))
        contrib = snap_partial(matmul(matmul(probs, cache_v[:, kv_cols]), tensors["wo"][cols, :]))
        out = contrib if out is None else out + contrib
    return out


class TestAttentionBlock:
    def test_single_device_matches_monolithic_oracle(self, toy_cfg):
        weights = generate_toy_weights(toy_cfg, 0)
        plan = plan_shards(toy_cfg, [1.0])
        block = block_weights(weights, toy_cfg, plan, 0, BlockId(BlockKind.ATTENTION, 1))
        step = preprocess([1, 2, 3], weights.embed)
        cache = KVCacheShard(toy_cfg.layers)
        partial = attention_block(step.hidden, block, cache, 1, step, toy_cfg)

        normed = rms_norm(step.hidden, block.tensors["norm_gain"], toy_cfg.norm_eps)
        k = matmul(normed, block.tensors["wk"])
        v = matmul(normed, block.tensors["wv"])
        d = toy_cfg.head_dim
        for j in range(toy_cfg.kv_heads):
            cols = slice(j * d, (j + 1) * d)
            k[:, cols] = rope_apply(k[:, cols], step.positions, toy_cfg.rope_theta)
        oracle = monolithic_attention_oracle(step.hidden, block.tensors, toy_cfg, step, k, v)
        assert partial.tobytes() == oracle.tobytes()

    def test_two_device_partials_sum_to_single_device(self, toy_cfg):
        weights = generate_toy_weights(toy_cfg, 1)
        single = plan_shards(toy_cfg, [1.0])
        double = plan_shards(toy_cfg, [0.5, 0.5])
        step = preprocess([5, 6], weights.embed)

        full_block = block_weights(weights, toy_cfg, single, 0, BlockId(BlockKind.ATTENTION, 1))
        full = attention_block(step.hidden, full_block, KVCacheShard(2), 1, step, toy_cfg)

        parts = []
        for rank in range(2):
            blk = block_weights(weights, toy_cfg, double, rank, BlockId(BlockKind.ATTENTION, 1))
            parts.append(attention_block(step.hidden, blk, KVCacheShard(2), 1, step, toy_cfg))
        # Grid-snapped head contributions make the split sum bit-identical.
        assert (parts[0] + parts[1]).tobytes() == full.tobytes()

    def test_zero_value_weights_give_zero_partial(self, toy_cfg):
        weights = generate_toy_weights(toy_cfg, 2)
        plan = plan_shards(toy_cfg, [1.0])
        block = block_weights(weights, toy_cfg, plan, 0, BlockId(BlockKind.ATTENTION, 1))
        tensors = dict(block.tensors)
        tensors["wv"] = np.zeros_like(tensors["wv"])
        block = BlockWeights(block.block_id, tensors)
        step = preprocess([1], weights.embed)
        partial = attention_block(step.hidden, block, KVCacheShard(2), 1, step, toy_cfg)
        assert np.array_equal(partial, np.zeros_like(partial))

    def test_cache_grows_by_step(self, toy_cfg):
        weights = generate_toy_weights(toy_cfg, 0)
        plan = plan_shards(toy_cfg, [1.0])
        block = block_weights(weights, toy_cfg, plan, 0, BlockId(BlockKind.ATTENTION, 1))
        cache = KVCacheShard(toy_cfg.layers)
        step = preprocess([1, 2, 3], weights.embed)
        attention_block(step.hidden, block, cache, 1, step, toy_cfg)
        assert cache.length(1) == 3
        nxt = preprocess([4], weights.embed, cache_position=3)
        attention_block(nxt.hidden, block, cache, 1, nxt, toy_cfg)
        assert cache.length(1) == 4


def monolithic_ffn_oracle(hidden_in, tensors, cfg):
    """Gated FFN with an explicit per-column snapped accumulation loop."""
    normed = rms_norm(hidden_in, tensors["norm_gain"], cfg.norm_eps)
    act = silu(matmul(normed, tensors["w_gate"])) * matmul(normed, tensors["w_up"])
    w_down = tensors["w_down"]
    out = np.zeros((hidden_in.shape[0], w_down.shape[1]), dtype=np.float32)
    for k in range(w_down.shape[0]):
        out += snap_partial(np.outer(act[:, k], w_down[k, :]).astype(np.float32))
    return out


class TestFfnBlock:
    def test_single_device_matches_monolithic_oracle(self, toy_cfg):
        weights = generate_toy_weights(toy_cfg, 3)
        plan = plan_shards(toy_cfg, [1.0])
        block = block_weights(weights, toy_cfg, plan, 0, BlockId(BlockKind.FFN, 1))
        x = generate_toy_weights(toy_cfg, 9).embed[:3]
        out = ffn_block(x, block, toy_cfg)
        oracle = monolithic_ffn_oracle(x, block.tensors, toy_cfg)
        assert out.tobytes() == oracle.tobytes()

    def test_zero_down_projection_gives_zero(self, toy_cfg):
        weights = generate_toy_weights(toy_cfg, 3)
        plan = plan_shards(toy_cfg, [1.0])
        block = block_weights(weights, toy_cfg, plan, 0, BlockId(BlockKind.FFN, 1))
        tensors = dict(block.tensors)
        tensors["w_down"] = np.zeros_like(tensors["w_down"])
        out = ffn_block(np.ones((2, toy_cfg.hidden), dtype=np.float32), BlockWeights(block.block_id, tensors), toy_cfg)
        assert np.array_equal(out, np.zeros_like(out))

    def test_column_split_partials_sum_to_single_device(self, toy_cfg):
        weights = generate_toy_weights(toy_cfg, 4)
        single = plan_shards(toy_cfg, [1.0])
        double = plan_shards(toy_cfg, [0.5, 0.5])
        x = generate_toy_weights(toy_cfg, 8).embed[:2]
        full = ffn_block(
            x, block_weights(weights, toy_cfg, single, 0, BlockId(BlockKind.FFN, 1)), toy_cfg
        )
        parts = [
            ffn_block(
                x, block_weights(weights, toy_cfg, double, rank, BlockId(BlockKind.FFN, 1)), toy_cfg
            )
            for rank in range(2)
        ]
        assert (parts[0] + parts[1]).tobytes() == full.tobytes()


class TestResidualPlacement:
    def test_post_sum_shortcut_close_to_presplit_shortcut(self, toy_cfg):
        # Adding the shortcut once after summation must agree with every
        # device adding hidden/n before summation, within fp32 tolerance.
        weights = generate_toy_weights(toy_cfg, 5)
        double = plan_shards(toy_cfg, [0.5, 0.5])
        step = preprocess([1, 2], weights.embed)
        parts = [
            attention_block(
                step.hidden,
                block_weights(weights, toy_cfg, double, rank, BlockId(BlockKind.ATTENTION, 1)),
                KVCacheShard(2),
                1,
                step,
                toy_cfg,
            )
            for rank in range(2)
        ]
        post_sum = (parts[0] + parts[1]) + step.hidden
        pre_split = (parts[0] + step.hidden / 2) + (parts[1] + step.hidden / 2)
        assert np.allclose(post_sum, pre_split, rtol=1e-5, atol=1e-6)


class TestPostprocess:
    def _post_block(self, cfg, head):
        return BlockWeights(
            BlockId(BlockKind.POSTPROCESS),
            {"norm_gain": np.ones(cfg.hidden, dtype=np.float32), "head": head},
        )

    def test_dominant_logit_wins(self, toy_cfg):
        head = np.zeros((toy_cfg.hidden, toy_cfg.vocab), dtype=np.float32)
        head[:, 17] = 1.0
        hidden = np.ones((2, toy_cfg.hidden), dtype=np.float32)
        assert postprocess(hidden, self._post_block(toy_cfg, head), toy_cfg) == 17

    def test_tie_breaks_to_lower_id(self, toy_cfg):
        head = np.zeros((toy_cfg.hidden, toy_cfg.vocab), dtype=np.float32)
        head[:, 5] = 1.0
        head[:, 9] = 1.0
        hidden = np.ones((1, toy_cfg.hidden), dtype=np.float32)
        assert postprocess(hidden, self._post_block(toy_cfg, head), toy_cfg) == 5


class TestReferenceForward:
    def test_zero_steps(self, toy_cfg):
        weights = generate_toy_weights(toy_cfg, 0)
        assert reference_forward(toy_cfg, weights, [1, 2], 0) == []

    def test_deterministic_across_runs(self, toy_cfg):
        weights = generate_toy_weights(toy_cfg, 0)
        a = reference_forward(toy_cfg, weights, [1, 2, 3], 12)
        b = reference_forward(toy_cfg, weights, [1, 2, 3], 12)
        assert a == b and len(a) == 12

    def test_eos_stops_generation(self, toy_cfg):
        weights = generate_toy_weights(toy_cfg, 0)
        free_run = reference_forward(toy_cfg, weights, [1, 2, 3], 12)
        eos = free_run[4]
        stopped = reference_forward(toy_cfg, weights, [1, 2, 3], 12, eos_id=eos)
        assert stopped == free_run[: free_run.index(eos) + 1]

    def test_gqa_config_runs(self, gqa_cfg):
        weights = generate_toy_weights(gqa_cfg, 1)
        ids = reference_forward(gqa_cfg, weights, [7, 8, 9], 6)
        assert len(ids) == 6 and all(0 <= i < gqa_cfg.vocab for i in ids)
