"""Per-rank transformer forward passes over sharded heads and FFN columns.

The same block functions drive the distributed runtime and the monolithic
reference decoder, so a single-device run reproduces the reference bit for
bit. For multi-device runs, every quantity that is later summed across ranks
(per-head attention contributions, per-column FFN contributions) is snapped
to a power-of-two grid first: grid multiples within the guarded magnitude
range add exactly in fp32, which makes the aggregated hidden states, and
therefore the greedy token ids, independent of how heads and columns were
split across devices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .kernels import matmul, rms_norm, rope_apply, silu, softmax_rows
from .sharding import BlockId, BlockKind, BlockWeights, FullWeights, block_weights, plan_shards, shard_block_ids

# Per-term partial contributions are rounded to multiples of 2**-19. Sums of
# up to 2**24 grid units (total magnitude 32.0) are exact in fp32 regardless
# of association, so any device grouping of heads or columns yields identical
# bits. Activations beyond that range only degrade to ordinary fp32 rounding.
_GRID = np.float32(2.0**-19)
_GRID_INV = np.float32(2.0**19)

# Finite mask sentinel; underflows to an exactly-zero attention weight after
# the softmax max subtraction.
_MASKED_SCORE = np.float32(-1e9)


def snap_partial(x: np.ndarray) -> np.ndarray:
    """Round fp32 values to the exact-summation grid (all steps exact)."""
    return np.rint(x * _GRID_INV) * _GRID


@dataclass
class StepInputs:
    """One decode step's inputs, identical on every rank after broadcast."""

    hidden: np.ndarray       # (seq, hidden) embeddings entering layer 1
    mask: np.ndarray         # bool (seq, cache_position + seq)
    positions: np.ndarray    # absolute positions of the new tokens
    cache_position: int


def make_step_inputs(hidden: np.ndarray, cache_position: int) -> StepInputs:
    """Rebuild the causal mask and positions from the cache position.

    Row i of the mask allows columns 0..cache_position+i, i.e. the mask is
    lower-triangular over the total (cached plus new) length.
    """
    hidden = np.ascontiguousarray(hidden, dtype=np.float32)
    seq = hidden.shape[0]
    total = cache_position + seq
    positions = np.arange(cache_position, total)
    mask = positions[:, None] >= np.arange(total)[None, :]
    return StepInputs(hidden=hidden, mask=mask, positions=positions, cache_position=cache_position)


def preprocess(token_ids, embed: np.ndarray, cache_position: int = 0) -> StepInputs:
    """Look up embedding rows for the new token ids (rank 0 only)."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("token ids must be a non-empty 1-D sequence")
    vocab = embed.shape[0]
    if ids.min() < 0 or ids.max() >= vocab:
        bad = int(ids[(ids < 0) | (ids >= vocab)][0])
        raise ValueError(f"token id {bad} out of range for vocab {vocab}")
    return make_step_inputs(embed[ids], cache_position)


class KVCacheShard:
    """Per-layer key/value tensors for this rank's kv heads.

    Grows along the sequence axis; entries stay resident for the whole
    generation (only weights are scheduled in and out of memory).
    """

    def __init__(self, layers: int) -> None:
        self._keys: list[np.ndarray | None] = [None] * layers
        self._values: list[np.ndarray | None] = [None] * layers

    def append(self, layer: int, k_new: np.ndarray, v_new: np.ndarray):
        idx = layer - 1
        if self._keys[idx] is None:
            self._keys[idx] = k_new
            self._values[idx] = v_new
        else:
            self._keys[idx] = np.concatenate([self._keys[idx], k_new], axis=0)
            self._values[idx] = np.concatenate([self._values[idx], v_new], axis=0)
        return self._keys[idx], self._values[idx]

    def length(self, layer: int) -> int:
        k = self._keys[layer - 1]
        return 0 if k is None else int(k.shape[0])


def attention_block(
    hidden_in: np.ndarray,
    block: BlockWeights,
    cache: KVCacheShard,
    layer: int,
    step: StepInputs,
    cfg: ModelConfig,
) -> np.ndarray:
    """This rank's attention contribution for one layer, before aggregation.

    New key/value rows are rotated and appended to the local cache, each
    local head attends over its own kv head's cache, and head contributions
    accumulate in ascending head order. The residual is added once by the
    caller, after cross-rank summation.
    """
    t = block.tensors
    d = cfg.head_dim
    normed = rms_norm(hidden_in, t["norm_gain"], cfg.norm_eps)
    kv_local = t["wk"].shape[1] // d
    k_new = matmul(normed, t["wk"])
    v_new = matmul(normed, t["wv"])
    for j in range(kv_local):
        cols = slice(j * d, (j + 1) * d)
        k_new[:, cols] = rope_apply(k_new[:, cols], step.positions, cfg.rope_theta)
    k_all, v_all = cache.append(layer, k_new, v_new)
    scale = np.float32(1.0 / np.sqrt(np.float64(d)))
    heads_local = t["wq"].shape[1] // d
    partial: np.ndarray | None = None
    for i in range(heads_local):
        cols = slice(i * d, (i + 1) * d)
        q = rope_apply(matmul(normed, t["wq"][:, cols]), step.positions, cfg.rope_theta)
        kv_cols = slice((i // cfg.heads_per_kv) * d, (i // cfg.heads_per_kv + 1) * d)
        scores = matmul(q, k_all[:, kv_cols].T) * scale
        probs = softmax_rows(np.where(step.mask, scores, _MASKED_SCORE))
        context = matmul(probs, v_all[:, kv_cols])
        contribution = snap_partial(matmul(context, t["wo"][cols, :]))
        partial = contribution if partial is None else partial + contribution
    assert partial is not None
    return partial


def ffn_block(hidden_in: np.ndarray, block: BlockWeights, cfg: ModelConfig) -> np.ndarray:
    """This rank's gated-FFN contribution for one layer, before aggregation.

    The down projection accumulates one snapped outer product per local
    column, so concatenating any devices' column ranges sums to the same bits
    as the unsharded product.
    """
    t = block.tensors
    normed = rms_norm(hidden_in, t["norm_gain"], cfg.norm_eps)
    activated = silu(matmul(normed, t["w_gate"])) * matmul(normed, t["w_up"])
    w_down = t["w_down"]
    partial = np.zeros((hidden_in.shape[0], w_down.shape[1]), dtype=np.float32)
    for k in range(w_down.shape[0]):
        partial += snap_partial(activated[:, k, None] * w_down[None, k, :])
    return partial


def postprocess(
    hidden_final: np.ndarray, block: BlockWeights, cfg: ModelConfig
) -> int:
    """Greedy next-token id from the last position (rank 0 only).

    Ties break toward the lowest id because argmax returns the first maximum.
    """
    t = block.tensors
    last = hidden_final[-1:, :]
    logits = matmul(rms_norm(last, t["norm_gain"], cfg.norm_eps), t["head"])
    return int(np.argmax(logits[0]))


def reference_forward(
    cfg: ModelConfig,
    weights: FullWeights,
    prompt_ids,
    steps: int,
    eos_id: int | None = None,
) -> list[int]:
    """Monolithic single-process greedy decoder; ground truth for the runtime.

    Runs the same block functions over an unsharded single-device plan, so a
    distributed run with one device is bit-identical and multi-device runs
    agree through the exact-summation grid.
    """
    plan = plan_shards(cfg, [1.0])
    blocks = {
        bid: block_weights(weights, cfg, plan, 0, bid) for bid in shard_block_ids(cfg, 0)
    }
    cache = KVCacheShard(cfg.layers)
    out: list[int] = []
    pending = list(prompt_ids)
    cache_position = 0
    for _ in range(steps):
        step = preprocess(pending, blocks[BlockId(BlockKind.PREPROCESS)].tensors["embed"], cache_position)
        hidden = step.hidden
        for layer in range(1, cfg.layers + 1):
            summed = attention_block(hidden, blocks[BlockId(BlockKind.ATTENTION, layer)], cache, layer, step, cfg)
            hidden_attn = summed + hidden
            summed = ffn_block(hidden_attn, blocks[BlockId(BlockKind.FFN, layer)], cfg)
            hidden = summed + hidden_attn
        token = postprocess(hidden, blocks[BlockId(BlockKind.POSTPROCESS)], cfg)
        out.append(token)
        cache_position += len(pending)
        pending = [token]
        if eos_id is not None and token == eos_id:
            break
    return out
