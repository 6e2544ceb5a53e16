"""Weight generation, head/FFN-column sharding, and the on-disk block format.

A model is cut block-wise: one attention block and one FFN block per layer,
plus the embedding (preprocess) and head (postprocess) blocks which exist
only on the rank-0 shard so workers never hold the tensors that map tokens
to embeddings or hidden states to logits. Each block is one self-describing
binary file; the sliding-window scheduler loads and drops whole files.

Block file layout (all integers little-endian)::

    4s   magic "TPIW"
    u16  version = 1
    u8   block kind  (0 preprocess, 1 attention, 2 ffn, 3 postprocess)
    u32  layer       (1-based for attention/ffn, 0 otherwise)
    then, one record per tensor in the block's canonical order:
        u8   ndim
        u32  dims[ndim]
        f32  payload[prod(dims)]
    u32  CRC32 over all payload bytes, in record order

The manifest is one text line per block: ``kind layer path bytes crc32``.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .config import ConfigError, ModelConfig

SHARD_MAGIC = b"TPIW"
SHARD_VERSION = 1


class ShardFormatError(OSError):
    """Corrupt or mismatched shard file or manifest."""


class BlockKind(IntEnum):
    PREPROCESS = 0
    ATTENTION = 1
    FFN = 2
    POSTPROCESS = 3


@dataclass(frozen=True, order=True)
class BlockId:
    kind: BlockKind
    layer: int = 0

    def label(self) -> str:
        return f"{self.kind.name.lower()}:{self.layer}"


# Tensor order inside each block file; readers rely on position, not names.
BLOCK_TENSOR_NAMES: dict[BlockKind, tuple[str, ...]] = {
    BlockKind.PREPROCESS: ("embed",),
    BlockKind.ATTENTION: ("norm_gain", "wq", "wk", "wv", "wo"),
    BlockKind.FFN: ("norm_gain", "w_gate", "w_up", "w_down"),
    BlockKind.POSTPROCESS: ("norm_gain", "head"),
}


@dataclass
class BlockWeights:
    """One attention/FFN/embedding/head block; the scheduler's load unit."""

    block_id: BlockId
    tensors: dict[str, np.ndarray]

    @property
    def param_count(self) -> int:
        return sum(int(t.size) for t in self.tensors.values())

    @property
    def byte_size(self) -> int:
        return 4 * self.param_count


def largest_remainder(total: int, proportions) -> list[int]:
    """Integral allocation of ``total`` items proportional to ``proportions``.

    Floors every share and hands leftover items to the largest fractional
    remainders, ties going to the lower index, so the allocation is
    deterministic and sums exactly to ``total``.
    """
    shares = [total * p for p in proportions]
    counts = [math.floor(s) for s in shares]
    leftover = total - sum(counts)
    by_remainder = sorted(range(len(shares)), key=lambda i: (counts[i] - shares[i], i))
    for i in by_remainder[:leftover]:
        counts[i] += 1
    return counts


@dataclass(frozen=True)
class ShardPlan:
    """Which query heads, kv heads, and FFN columns each device owns.

    Query heads are assigned in whole kv-head groups so a device's queries
    only ever read its own kv cache; FFN columns are contiguous ranges.
    """

    devices: int
    proportions: tuple[float, ...]
    kv_head_counts: tuple[int, ...]
    head_counts: tuple[int, ...]
    ffn_col_counts: tuple[int, ...]

    def _range(self, counts: tuple[int, ...], rank: int) -> range:
        start = sum(counts[:rank])
        return range(start, start + counts[rank])

    def heads_of(self, rank: int) -> range:
        return self._range(self.head_counts, rank)

    def kv_heads_of(self, rank: int) -> range:
        return self._range(self.kv_head_counts, rank)

    def ffn_cols_of(self, rank: int) -> range:
        return self._range(self.ffn_col_counts, rank)


def plan_shards(cfg: ModelConfig, proportions) -> ShardPlan:
    """Derive the integral head/column assignment from a proportion vector.

    Kv heads get the largest-remainder allocation of ``kv_heads * p``; each
    device's query heads are its kv heads' whole groups. A proportion vector
    that would leave any device without a kv head or without an FFN column is
    rejected by name.
    """
    proportions = tuple(float(p) for p in proportions)
    n = len(proportions)
    if n < 1:
        raise ConfigError("at least one device is required")
    if any(p <= 0.0 for p in proportions):
        raise ConfigError("device proportions must be positive")
    if abs(sum(proportions) - 1.0) > 1e-9:
        raise ConfigError(f"device proportions must sum to 1, got {sum(proportions)!r}")
    if n > cfg.kv_heads:
        raise ConfigError(
            f"{n} devices but only {cfg.kv_heads} kv heads; every device needs one"
        )
    kv_counts = largest_remainder(cfg.kv_heads, proportions)
    for rank, count in enumerate(kv_counts):
        if count == 0:
            raise ConfigError(
                f"device {rank} would receive no kv heads under proportions {proportions}"
            )
    head_counts = [c * cfg.heads_per_kv for c in kv_counts]
    col_counts = largest_remainder(cfg.ffn_size, proportions)
    for rank, count in enumerate(col_counts):
        if count == 0:
            raise ConfigError(
                f"device {rank} would receive no FFN columns under proportions {proportions}"
            )
    return ShardPlan(
        devices=n,
        proportions=proportions,
        kv_head_counts=tuple(kv_counts),
        head_counts=tuple(head_counts),
        ffn_col_counts=tuple(col_counts),
    )


@dataclass
class LayerWeights:
    attn_gain: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ffn_gain: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass
class FullWeights:
    """The unsharded weight set; input to sharding and the reference decoder."""

    embed: np.ndarray      # (vocab, hidden)
    layers: list[LayerWeights]
    final_gain: np.ndarray  # (hidden,)
    head: np.ndarray        # (hidden, vocab)


def generate_toy_weights(cfg: ModelConfig, seed: int) -> FullWeights:
    """Deterministic pseudo-random weights for desk-scale runs.

    Matrices are N(0, 0.02/sqrt(hidden)); norm gains are 1 plus noise at the
    same scale so normalized activations stay near unit RMS and greedy logits
    keep clear gaps. The draw order is fixed, so the seed determines every
    byte.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    scale = np.float32(0.02 / math.sqrt(cfg.hidden))

    def mat(rows: int, cols: int) -> np.ndarray:
        return rng.standard_normal((rows, cols), dtype=np.float32) * scale

    def gain() -> np.ndarray:
        return np.float32(1.0) + rng.standard_normal(cfg.hidden, dtype=np.float32) * scale

    h, d = cfg.hidden, cfg.head_dim
    kv_width = cfg.kv_heads * d
    embed = mat(cfg.vocab, h)
    layers = [
        LayerWeights(
            attn_gain=gain(),
            wq=mat(h, h),
            wk=mat(h, kv_width),
            wv=mat(h, kv_width),
            wo=mat(h, h),
            ffn_gain=gain(),
            w_gate=mat(h, cfg.ffn_size),
            w_up=mat(h, cfg.ffn_size),
            w_down=mat(cfg.ffn_size, h),
        )
        for _ in range(cfg.layers)
    ]
    return FullWeights(embed=embed, layers=layers, final_gain=gain(), head=mat(h, cfg.vocab))


def shard_block_ids(cfg: ModelConfig, rank: int) -> list[BlockId]:
    """Block order for one device: preprocess?, (attn, ffn) per layer, postprocess?."""
    ids: list[BlockId] = []
    if rank == 0:
        ids.append(BlockId(BlockKind.PREPROCESS))
    for layer in range(1, cfg.layers + 1):
        ids.append(BlockId(BlockKind.ATTENTION, layer))
        ids.append(BlockId(BlockKind.FFN, layer))
    if rank == 0:
        ids.append(BlockId(BlockKind.POSTPROCESS))
    return ids


def block_weights(
    full: FullWeights, cfg: ModelConfig, plan: ShardPlan, rank: int, block_id: BlockId
) -> BlockWeights:
    """Slice one device's tensors for one block out of the full weight set."""
    d = cfg.head_dim
    if block_id.kind in (BlockKind.PREPROCESS, BlockKind.POSTPROCESS) and rank != 0:
        raise ValueError(f"{block_id.label()} exists only on the rank-0 shard")
    if block_id.kind == BlockKind.PREPROCESS:
        tensors = {"embed": full.embed}
    elif block_id.kind == BlockKind.POSTPROCESS:
        tensors = {"norm_gain": full.final_gain, "head": full.head}
    else:
        layer = full.layers[block_id.layer - 1]
        if block_id.kind == BlockKind.ATTENTION:
            heads = plan.heads_of(rank)
            kv = plan.kv_heads_of(rank)
            q_cols = slice(heads.start * d, heads.stop * d)
            kv_cols = slice(kv.start * d, kv.stop * d)
            tensors = {
                "norm_gain": layer.attn_gain,
                "wq": layer.wq[:, q_cols],
                "wk": layer.wk[:, kv_cols],
                "wv": layer.wv[:, kv_cols],
                "wo": layer.wo[q_cols, :],
            }
        else:
            cols = plan.ffn_cols_of(rank)
            col_slice = slice(cols.start, cols.stop)
            tensors = {
                "norm_gain": layer.ffn_gain,
                "w_gate": layer.w_gate[:, col_slice],
                "w_up": layer.w_up[:, col_slice],
                "w_down": layer.w_down[col_slice, :],
            }
    return BlockWeights(block_id=block_id, tensors=dict(tensors))


def shard_byte_sizes(cfg: ModelConfig, plan: ShardPlan, rank: int) -> dict[BlockId, int]:
    """Per-block payload byte sizes (4 bytes per fp32 parameter) for one device.

    Attention is 4*(2*h*m*d + 2*h*k*d + h) for m local query heads and k local
    kv heads; FFN is 4*(3*h*c + h) for c local columns. Norm gains are
    replicated on every device, hence the +h per block.
    """
    h, d = cfg.hidden, cfg.head_dim
    m = plan.head_counts[rank]
    k = plan.kv_head_counts[rank]
    c = plan.ffn_col_counts[rank]
    sizes: dict[BlockId, int] = {}
    for bid in shard_block_ids(cfg, rank):
        if bid.kind == BlockKind.PREPROCESS:
            params = h * cfg.vocab
        elif bid.kind == BlockKind.POSTPROCESS:
            params = h * cfg.vocab + h
        elif bid.kind == BlockKind.ATTENTION:
            params = 2 * h * m * d + 2 * h * k * d + h
        else:
            params = 3 * h * c + h
        sizes[bid] = 4 * params
    return sizes


def block_file_name(block_id: BlockId) -> str:
    if block_id.kind == BlockKind.PREPROCESS:
        return "preprocess.blk"
    if block_id.kind == BlockKind.POSTPROCESS:
        return "postprocess.blk"
    return f"{block_id.kind.name.lower()}_{block_id.layer:03d}.blk"


def write_block_file(path: Path, block: BlockWeights) -> int:
    """Serialize one block; returns the payload CRC32 recorded in the trailer."""
    parts = [SHARD_MAGIC, struct.pack("<HBI", SHARD_VERSION, int(block.block_id.kind), block.block_id.layer)]
    crc = 0
    for name in BLOCK_TENSOR_NAMES[block.block_id.kind]:
        tensor = np.ascontiguousarray(block.tensors[name], dtype="<f4")
        parts.append(struct.pack("<B", tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        raw = tensor.tobytes()
        crc = zlib.crc32(raw, crc)
        parts.append(raw)
    parts.append(struct.pack("<I", crc))
    path.write_bytes(b"".join(parts))
    return crc


def read_block_file(path: Path, expected_crc: int | None = None) -> BlockWeights:
    """Parse one block file, checking its trailer CRC (and the manifest's)."""
    raw = Path(path).read_bytes()
    if len(raw) < 15 or raw[:4] != SHARD_MAGIC:
        raise ShardFormatError(f"{path}: not a shard block file")
    version, kind_code, layer = struct.unpack_from("<HBI", raw, 4)
    if version != SHARD_VERSION:
        raise ShardFormatError(f"{path}: unsupported shard version {version}")
    try:
        kind = BlockKind(kind_code)
    except ValueError:
        raise ShardFormatError(f"{path}: unknown block kind {kind_code}") from None
    names = BLOCK_TENSOR_NAMES[kind]
    offset = 11
    end = len(raw) - 4
    tensors: dict[str, np.ndarray] = {}
    crc = 0
    for name in names:
        if offset >= end:
            raise ShardFormatError(f"{path}: truncated before tensor {name!r}")
        (ndim,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        dims = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        nbytes = 4 * int(np.prod(dims, dtype=np.int64)) if ndim else 4
        payload = raw[offset : offset + nbytes]
        if len(payload) != nbytes:
            raise ShardFormatError(f"{path}: truncated payload for tensor {name!r}")
        crc = zlib.crc32(payload, crc)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        offset += nbytes
    if offset != end:
        raise ShardFormatError(f"{path}: trailing bytes after last tensor")
    (stored_crc,) = struct.unpack_from("<I", raw, end)
    if stored_crc != crc:
        raise ShardFormatError(f"{path}: payload CRC mismatch")
    if expected_crc is not None and expected_crc != crc:
        raise ShardFormatError(f"{path}: manifest checksum mismatch")
    return BlockWeights(block_id=BlockId(kind, layer), tensors=tensors)


@dataclass(frozen=True)
class ManifestEntry:
    block_id: BlockId
    path: str
    byte_size: int
    crc32: int


@dataclass
class ShardManifest:
    rank: int
    config_digest: str
    entries: list[ManifestEntry]

    def block_ids(self) -> list[BlockId]:
        return [e.block_id for e in self.entries]

    def entry_for(self, block_id: BlockId) -> ManifestEntry:
        for entry in self.entries:
            if entry.block_id == block_id:
                return entry
        raise KeyError(block_id.label())

    def save(self, shard_dir: Path) -> Path:
        lines = [f"# rank {self.rank}", f"# config {self.config_digest}"]
        for e in self.entries:
            lines.append(
                f"{e.block_id.kind.name.lower()} {e.block_id.layer} {e.path} {e.byte_size} {e.crc32:08x}"
            )
        path = Path(shard_dir) / "manifest.txt"
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, shard_dir: Path) -> "ShardManifest":
        path = Path(shard_dir) / "manifest.txt"
        rank = -1
        digest = ""
        entries: list[ManifestEntry] = []
        for line in path.read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                fields = line[1:].split()
                if fields[:1] == ["rank"]:
                    rank = int(fields[1])
                elif fields[:1] == ["config"]:
                    digest = fields[1]
                continue
            kind_name, layer, rel_path, size, crc = line.split()
            entries.append(
                ManifestEntry(
                    block_id=BlockId(BlockKind[kind_name.upper()], int(layer)),
                    path=rel_path,
                    byte_size=int(size),
                    crc32=int(crc, 16),
                )
            )
        if rank < 0 or not digest:
            raise ShardFormatError(f"{path}: missing rank or config header")
        return cls(rank=rank, config_digest=digest, entries=entries)


def shard_dir_for_rank(out_dir: Path, rank: int) -> Path:
    return Path(out_dir) / f"rank{rank}"


def write_shards(
    full: FullWeights, cfg: ModelConfig, plan: ShardPlan, out_dir: Path
) -> list[ShardManifest]:
    """Write every device's block files and manifest under ``out_dir/rank<i>``."""
    manifests = []
    digest = cfg.digest()
    for rank in range(plan.devices):
        rank_dir = shard_dir_for_rank(out_dir, rank)
        rank_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for bid in shard_block_ids(cfg, rank):
            block = block_weights(full, cfg, plan, rank, bid)
            name = block_file_name(bid)
            crc = write_block_file(rank_dir / name, block)
            entries.append(
                ManifestEntry(block_id=bid, path=name, byte_size=block.byte_size, crc32=crc)
            )
        manifest = ShardManifest(rank=rank, config_digest=digest, entries=entries)
        manifest.save(rank_dir)
        manifests.append(manifest)
    return manifests


def load_full_weights(cfg: ModelConfig, shard_dir: Path) -> FullWeights:
    """Rebuild a full weight set from a single-device shard directory."""
    manifest = ShardManifest.load(shard_dir)
    if manifest.config_digest != cfg.digest():
        raise ShardFormatError(f"{shard_dir}: shard was written for a different config")
    blocks = {
        e.block_id: read_block_file(Path(shard_dir) / e.path) for e in manifest.entries
    }
    pre = blocks[BlockId(BlockKind.PREPROCESS)]
    post = blocks[BlockId(BlockKind.POSTPROCESS)]
    layers = []
    for layer in range(1, cfg.layers + 1):
        attn = blocks[BlockId(BlockKind.ATTENTION, layer)].tensors
        ffn = blocks[BlockId(BlockKind.FFN, layer)].tensors
        if attn["wq"].shape[1] != cfg.hidden:
            raise ShardFormatError(f"{shard_dir}: expected an unsharded (single-device) shard")
        layers.append(
            LayerWeights(
                attn_gain=attn["norm_gain"],
                wq=attn["wq"],
                wk=attn["wk"],
                wv=attn["wv"],
                wo=attn["wo"],
                ffn_gain=ffn["norm_gain"],
                w_gate=ffn["w_gate"],
                w_up=ffn["w_up"],
                w_down=ffn["w_down"],
            )
        )
    return FullWeights(
        embed=pre.tensors["embed"],
        layers=layers,
        final_gain=post.tensors["norm_gain"],
        head=post.tensors["head"],
    )
