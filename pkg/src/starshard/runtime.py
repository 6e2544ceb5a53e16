"""Master and worker decode loops, metrics, and cluster orchestration.

Per generated token the master embeds the new ids, broadcasts the hidden
states and cache position, and every rank (master included, as rank 0's
compute shard) walks the layers: attention partial, allreduce, shortcut, FFN
partial, allreduce, shortcut. A final reduce returns the (already replicated)
last hidden state to the master as the per-token completion barrier; the
master then greedily picks the next token. That is 2 * layers + 1 collective
rounds per token on every rank.

Weight residency is delegated to a block provider: the sliding-window
scheduler, or a load-everything provider when the scheduler is disabled.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cluster import (
    ClusterHandle,
    LinkDelayModel,
    TrafficCapture,
    all_reduce_star,
    broadcast,
    loopback_cluster,
    receive_from_master,
    reduce_to_master,
    send_shutdown,
)
from .config import ConfigError, ModelConfig
from .forward import (
    KVCacheShard,
    StepInputs,
    attention_block,
    ffn_block,
    make_step_inputs,
    postprocess,
    preprocess,
)
from .scheduler import BlockScheduler, DiskDelayModel, FullResidencyProvider
from .sharding import (
    BlockKind,
    ShardManifest,
    plan_shards,
    shard_dir_for_rank,
    write_shards,
)
from .wire import MsgType, Phase


def peak_rss_bytes() -> int:
    """Informational process high-water memory; never asserted against."""
    try:
        import resource

        return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
    except Exception:  # noqa: BLE001 - absent on some platforms
        return 0


@dataclass
class Metrics:
    role: str
    rank: int
    ttft_ms: float = 0.0
    token_latencies_ms: list[float] = field(default_factory=list)
    compute_ms: float = 0.0  # this rank's time inside block math
    peak_param_bytes: int = 0
    peak_rss_bytes: int = 0
    allreduce_rounds: int = 0
    allreduce_bytes: int = 0
    stall_ms: float = 0.0
    generated_ids: list[int] = field(default_factory=list)

    @property
    def mean_token_ms(self) -> float:
        tail = self.token_latencies_ms[1:]
        return sum(tail) / len(tail) if tail else 0.0

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "rank": self.rank,
            "ttft_ms": self.ttft_ms,
            "token_latencies_ms": self.token_latencies_ms,
            "mean_token_ms": self.mean_token_ms,
            "compute_ms": self.compute_ms,
            "peak_param_bytes": self.peak_param_bytes,
            "peak_rss_bytes": self.peak_rss_bytes,
            "allreduce_rounds": self.allreduce_rounds,
            "allreduce_bytes": self.allreduce_bytes,
            "stall_ms": self.stall_ms,
            "generated_ids": self.generated_ids,
        }


class ShardExecutor:
    """One rank's per-step layer walk; shared by master and workers."""

    def __init__(self, cfg: ModelConfig, provider, cluster: ClusterHandle) -> None:
        self.cfg = cfg
        self.provider = provider
        self.cluster = cluster
        self.cache = KVCacheShard(cfg.layers)
        # Wall time inside block math, excluding waits and collectives.
        # Faithful for one process per device; loopback runs share a process,
        # so there it also absorbs contention between rank threads.
        self.compute_ms = 0.0

    def run_step(self, step: StepInputs) -> np.ndarray:
        cfg = self.cfg
        hidden = step.hidden
        for layer in range(1, cfg.layers + 1):
            block = self.provider.wait_for_block(BlockKind.ATTENTION, layer)
            started = time.perf_counter()
            partial = attention_block(hidden, block, self.cache, layer, step, cfg)
            self.compute_ms += (time.perf_counter() - started) * 1e3
            self.provider.release_block(BlockKind.ATTENTION, layer)
            hidden = all_reduce_star(self.cluster, partial, layer, Phase.ATTN) + hidden
            block = self.provider.wait_for_block(BlockKind.FFN, layer)
            started = time.perf_counter()
            partial = ffn_block(hidden, block, cfg)
            self.compute_ms += (time.perf_counter() - started) * 1e3
            self.provider.release_block(BlockKind.FFN, layer)
            hidden = all_reduce_star(self.cluster, partial, layer, Phase.FFN) + hidden
        reduce_to_master(self.cluster, hidden, 0, Phase.FINAL)
        return hidden


def _finalize_metrics(metrics: Metrics, cluster: ClusterHandle, provider) -> Metrics:
    metrics.allreduce_rounds = cluster.counters.rounds
    metrics.allreduce_bytes = cluster.counters.payload_bytes
    metrics.peak_param_bytes = provider.peak_param_bytes
    metrics.stall_ms = provider.stall_ms
    metrics.peak_rss_bytes = peak_rss_bytes()
    return metrics


def run_master(
    cfg: ModelConfig,
    provider,
    cluster: ClusterHandle,
    prompt_ids: Sequence[int],
    max_new_tokens: int,
) -> tuple[list[int], Metrics]:
    """Drive one generation from the prompt owner's side.

    Time-to-first-token counts from entry (prompt receipt) to the first
    emitted token; one-time startup such as shard writing stays outside.
    """
    if len(prompt_ids) == 0:
        raise ConfigError("prompt must contain at least one token")
    metrics = Metrics(role="master", rank=0)
    executor = ShardExecutor(cfg, provider, cluster)
    ids: list[int] = []
    pending = list(prompt_ids)
    cache_position = 0
    started = time.perf_counter()
    token_started = started
    for _ in range(max_new_tokens):
        block = provider.wait_for_block(BlockKind.PREPROCESS, 0)
        step = preprocess(pending, block.tensors["embed"], cache_position)
        provider.release_block(BlockKind.PREPROCESS, 0)
        broadcast(cluster, step.hidden, step.cache_position)
        hidden = executor.run_step(step)
        block = provider.wait_for_block(BlockKind.POSTPROCESS, 0)
        token = postprocess(hidden, block, cfg)
        provider.release_block(BlockKind.POSTPROCESS, 0)
        now = time.perf_counter()
        metrics.token_latencies_ms.append((now - token_started) * 1e3)
        token_started = now
        if not ids:
            metrics.ttft_ms = (now - started) * 1e3
        ids.append(token)
        cache_position += len(pending)
        pending = [token]
        if cfg.eos_id is not None and token == cfg.eos_id:
            break
    send_shutdown(cluster)
    metrics.generated_ids = list(ids)
    metrics.compute_ms = executor.compute_ms
    return ids, _finalize_metrics(metrics, cluster, provider)


def run_worker(cfg: ModelConfig, provider, cluster: ClusterHandle) -> Metrics:
    """Serve one generation from a worker rank until shutdown."""
    metrics = Metrics(role="worker", rank=cluster.rank)
    executor = ShardExecutor(cfg, provider, cluster)
    started = time.perf_counter()
    token_started = started
    while True:
        frame = receive_from_master(cluster)
        if frame.msg_type == MsgType.SHUTDOWN:
            break
        step = make_step_inputs(frame.payload, frame.layer)
        executor.run_step(step)
        now = time.perf_counter()
        metrics.token_latencies_ms.append((now - token_started) * 1e3)
        token_started = now
        if metrics.ttft_ms == 0.0:
            metrics.ttft_ms = (now - started) * 1e3
    metrics.compute_ms = executor.compute_ms
    return _finalize_metrics(metrics, cluster, provider)


def make_provider(
    cfg: ModelConfig,
    shard_root: Path,
    rank: int,
    window: int,
    retention_period: int | None = None,
    disk_delay: DiskDelayModel | None = None,
):
    """Build a block provider for one rank; ``window=0`` disables scheduling."""
    rank_dir = shard_dir_for_rank(shard_root, rank)
    manifest = ShardManifest.load(rank_dir)
    if manifest.config_digest != cfg.digest():
        raise ConfigError(f"{rank_dir}: shards were written for a different config")
    if window == 0:
        return FullResidencyProvider(manifest, rank_dir)
    return BlockScheduler(
        manifest, rank_dir, window, retention_period=retention_period, disk_delay=disk_delay
    ).start()


def shard_model(cfg: ModelConfig, seed: int, proportions: Sequence[float], out_dir: Path):
    """Generate toy weights and write every rank's shard; returns manifests."""
    from .sharding import generate_toy_weights

    plan = plan_shards(cfg, proportions)
    weights = generate_toy_weights(cfg, seed)
    return plan, write_shards(weights, cfg, plan, Path(out_dir))


@dataclass
class ClusterRun:
    ids: list[int]
    metrics: list[Metrics]  # by rank
    capture: TrafficCapture | None = None


def run_loopback_generation(
    cfg: ModelConfig,
    shard_root: Path,
    devices: int,
    prompt_ids: Sequence[int],
    max_new_tokens: int,
    window: int,
    retention_period: int | None = None,
    link_delay: LinkDelayModel | None = None,
    disk_delay: DiskDelayModel | None = None,
    capture: bool = False,
    timeout_s: float = 30.0,
) -> ClusterRun:
    """Run master plus workers on threads over the loopback transport."""
    traffic = TrafficCapture() if capture else None
    handles = loopback_cluster(devices, timeout_s=timeout_s, delay=link_delay, capture=traffic)
    providers = [
        make_provider(cfg, shard_root, rank, window, retention_period, disk_delay)
        for rank in range(devices)
    ]
    results: dict[int, Metrics] = {}
    ids: list[int] = []
    errors: list[BaseException] = []

    def master_main() -> None:
        nonlocal ids
        try:
            ids, metrics = run_master(cfg, providers[0], handles[0], prompt_ids, max_new_tokens)
            results[0] = metrics
        except BaseException as exc:  # noqa: BLE001 - re-raised in the caller
            errors.append(exc)

    def worker_main(rank: int) -> None:
        try:
            results[rank] = run_worker(cfg, providers[rank], handles[rank])
        except BaseException as exc:  # noqa: BLE001
            errors.append(exc)

    threads = [threading.Thread(target=master_main, name="rank0")]
    threads += [
        threading.Thread(target=worker_main, args=(rank,), name=f"rank{rank}")
        for rank in range(1, devices)
    ]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    for provider in providers:
        provider.stop()
    for handle in handles:
        handle.close()
    if errors:
        raise errors[0]
    return ClusterRun(
        ids=ids, metrics=[results[rank] for rank in range(devices)], capture=traffic
    )


@dataclass
class BenchRow:
    devices: int
    window: int
    retention: int | None
    ttft_ms: float
    tok_ms: float
    peak_bytes: int
    stall_ms: float
    full_bytes: int
    mem_ratio: float


def full_residency_bytes(cfg: ModelConfig, shard_root: Path, devices: int) -> int:
    """Largest per-rank total of all block bytes, the scheduler-off peak."""
    totals = []
    for rank in range(devices):
        manifest = ShardManifest.load(shard_dir_for_rank(shard_root, rank))
        totals.append(sum(e.byte_size for e in manifest.entries))
    return max(totals)


def bench_cell(
    cfg: ModelConfig,
    shard_root: Path,
    devices: int,
    window: int,
    retention: int | None,
    prompt_ids: Sequence[int],
    max_new_tokens: int,
    link_delay: LinkDelayModel | None,
    disk_delay: DiskDelayModel | None,
) -> BenchRow:
    """One benchmark configuration on the loopback transport."""
    run = run_loopback_generation(
        cfg,
        shard_root,
        devices,
        prompt_ids,
        max_new_tokens,
        window=window,
        retention_period=retention,
        link_delay=link_delay,
        disk_delay=disk_delay,
    )
    master = run.metrics[0]
    peak = max(m.peak_param_bytes for m in run.metrics)
    stall = max(m.stall_ms for m in run.metrics)
    full = full_residency_bytes(cfg, shard_root, devices)
    return BenchRow(
        devices=devices,
        window=window,
        retention=retention,
        ttft_ms=master.ttft_ms,
        tok_ms=master.mean_token_ms,
        peak_bytes=peak,
        stall_ms=stall,
        full_bytes=full,
        mem_ratio=peak / full if full else 0.0,
    )
