"""Cutting a model into per-device shards: heads, FFN columns, block files.

Devices with larger proportions receive more attention-head groups and FFN
columns. The embedding and head blocks stay on rank 0 only, so workers can
never map tokens to embeddings or hidden states to logits.
"""

import tempfile
from pathlib import Path

from starshard import ModelConfig, generate_toy_weights, plan_shards, write_shards
from starshard.sharding import BlockId, BlockKind, shard_byte_sizes


def show_plan(cfg, proportions) -> None:
    plan = plan_shards(cfg, proportions)
    print(f"\nproportions {proportions}:")
    for rank in range(plan.devices):
        print(
            f"  rank {rank}: query heads {list(plan.heads_of(rank))}, "
            f"kv heads {list(plan.kv_heads_of(rank))}, "
            f"ffn cols {plan.ffn_cols_of(rank).start}..{plan.ffn_cols_of(rank).stop - 1}"
        )


def main() -> None:
    cfg = ModelConfig(layers=2, hidden=16, vocab=256, heads=4, kv_heads=2, ffn_size=40)
    show_plan(cfg, [0.5, 0.5])
    show_plan(cfg, [0.6, 0.4])

    # Block sizes at a 7B-like shape, one quarter of the heads per device.
    big = ModelConfig(layers=32, hidden=4096, vocab=32000, heads=32, kv_heads=32, ffn_size=11008)
    plan = plan_shards(big, [0.25] * 4)
    sizes = shard_byte_sizes(big, plan, 0)
    print("\n7B-like block sizes at proportion 0.25:")
    for bid in (
        BlockId(BlockKind.PREPROCESS),
        BlockId(BlockKind.ATTENTION, 1),
        BlockId(BlockKind.FFN, 1),
        BlockId(BlockKind.POSTPROCESS),
    ):
        print(f"  {bid.label():<15} {sizes[bid] / 2**20:8.1f} MiB")

    with tempfile.TemporaryDirectory() as tmp:
        weights = generate_toy_weights(cfg, seed=0)
        plan = plan_shards(cfg, [0.5, 0.5])
        manifests = write_shards(weights, cfg, plan, Path(tmp))
        print("\nwritten shards:")
        for manifest in manifests:
            kinds = [e.block_id.label() for e in manifest.entries]
            total = sum(e.byte_size for e in manifest.entries)
            print(f"  rank {manifest.rank}: {total} bytes, blocks: {', '.join(kinds)}")
        print("\nworker manifest has no embedding or head block: privacy by construction")


if __name__ == "__main__":
    main()
