"""A toy transformer from config to greedy decoding, in one process.

The reference decoder is the ground truth that every distributed run must
reproduce token for token. Weights are deterministic pseudo-random, so any
seed gives a fully reproducible model.
"""

from starshard import ModelConfig, generate_toy_weights, reference_forward


def main() -> None:
    cfg = ModelConfig(layers=2, hidden=16, vocab=256, heads=4, kv_heads=2, ffn_size=40)
    print("config:", cfg)
    print("head_dim:", cfg.head_dim, " query heads per kv head:", cfg.heads_per_kv)
    print("config digest:", cfg.digest()[:16], "...")

    weights = generate_toy_weights(cfg, seed=0)
    print("\nembedding table:", weights.embed.shape, weights.embed.dtype)
    print("per-layer tensors:", sorted(vars(weights.layers[0])))

    # vocab >= 256 lets us use raw bytes as token ids
    prompt = list(b"hello edge")
    ids = reference_forward(cfg, weights, prompt, steps=12)
    print("\nprompt ids:   ", prompt)
    print("generated ids:", ids)
    print("as bytes:     ", bytes(ids))

    again = reference_forward(cfg, weights, prompt, steps=12)
    print("\ndeterministic rerun matches:", ids == again)


if __name__ == "__main__":
    main()
