"""Desk-scale tensor-parallel transformer inference.

Building blocks: fp32 kernels with fixed summation order, head/FFN weight
sharding with a self-describing block file format, star-topology collectives
over loopback or TCP, a sliding-window weight scheduler with steady-state
analysis, and an analytical latency lab for collective cost models.
"""

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
    tcp_master_cluster,
    tcp_worker_cluster,
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
    reference_forward,
)
from .kernels import matmul, rms_norm, rope_apply, silu, softmax_rows
from .latency import (
    GatewayTopology,
    NetParams,
    allreduce_latency,
    barrier_latency,
    ring_hop_latency,
    simulate_collective,
    t_data,
)
from .runtime import (
    Metrics,
    ShardExecutor,
    bench_cell,
    full_residency_bytes,
    make_provider,
    run_loopback_generation,
    run_master,
    run_worker,
    shard_model,
)
from .scheduler import BlockScheduler, DiskDelayModel, FullResidencyProvider
from .sharding import (
    BlockId,
    BlockKind,
    BlockWeights,
    FullWeights,
    ShardManifest,
    ShardPlan,
    block_weights,
    generate_toy_weights,
    largest_remainder,
    plan_shards,
    read_block_file,
    shard_byte_sizes,
    write_shards,
)
from .steady import (
    TimingProfile,
    check_loose_steady,
    check_retention_steady,
    check_tight_steady,
    min_retention_period,
    peak_memory_estimate,
    simulate_schedule,
)
from .wire import MsgType, Phase, ProtocolError, WireFrame, decode_frame, encode_frame

__version__ = "0.1.0"
