"""Steady-state analysis of the sliding-window scheduler.

A decode pass alternates attention compute, allreduce, FFN compute, allreduce
for every layer while one background load runs at a time. The predicates here
decide whether every block's weights finish loading before its compute slot,
the estimator gives the closed-form peak weight residency, and
``simulate_schedule`` replays the slot model deterministically so predicate
and simulation can be cross-checked.

All times are milliseconds. Profile order everywhere is (attention compute,
FFN compute, allreduce, attention load, FFN load).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .config import ModelConfig
from .sharding import BlockId, BlockKind


@dataclass(frozen=True)
class TimingProfile:
    """Per-slot stage timings driving the steady-state analysis."""

    attn_compute_ms: float
    ffn_compute_ms: float
    allreduce_ms: float
    attn_load_ms: float
    ffn_load_ms: float

    def __post_init__(self) -> None:
        for name in ("attn_compute_ms", "ffn_compute_ms", "allreduce_ms", "attn_load_ms", "ffn_load_ms"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (
            self.attn_compute_ms,
            self.ffn_compute_ms,
            self.allreduce_ms,
            self.attn_load_ms,
            self.ffn_load_ms,
        )


def check_tight_steady(profile: TimingProfile) -> bool:
    """Each block's load fits inside the previous compute plus one allreduce."""
    t = profile
    return (
        t.attn_compute_ms + t.allreduce_ms >= t.ffn_load_ms
        and t.ffn_compute_ms + t.allreduce_ms >= t.attn_load_ms
    )


def _family_ffn_first(t: TimingProfile, layer: int) -> bool:
    """Per-layer condition chain when the first FFN load finishes in time."""
    lhs = (
        layer * t.attn_compute_ms
        + (layer - 1) * t.ffn_compute_ms
        + (2 * layer - 1) * t.allreduce_ms
    )
    rhs = layer * t.ffn_load_ms + (layer - 1) * t.attn_load_ms
    return lhs >= rhs


def _family_attn_first(t: TimingProfile, layer: int) -> bool:
    """Per-layer condition chain when the first FFN slot absorbs a late load."""
    lhs = (
        (layer - 1) * t.attn_compute_ms
        + layer * t.ffn_compute_ms
        + (2 * layer - 1) * t.allreduce_ms
    )
    rhs = (layer - 1) * t.ffn_load_ms + layer * t.attn_load_ms
    return lhs >= rhs


def check_loose_steady(profile: TimingProfile, layers: int) -> bool:
    """Steady state is reached (possibly after a one-slot initial stall).

    Requires the per-layer budget ``t_attn + t_ffn + 2*t_ar >= load_ffn +
    load_attn`` plus one of the two per-layer condition families holding for
    every layer.
    """
    t = profile
    if t.attn_compute_ms + t.ffn_compute_ms + 2 * t.allreduce_ms < t.ffn_load_ms + t.attn_load_ms:
        return False
    return all(_family_ffn_first(t, l) for l in range(1, layers + 1)) or all(
        _family_attn_first(t, l) for l in range(1, layers + 1)
    )


def _retained_count(layer: int, retention_period: int | float | None) -> int:
    """Retained FFN blocks among layers 1..layer for the given period."""
    if retention_period is None:
        return 0
    return math.ceil(layer / retention_period)


def check_retention_steady(
    profile: TimingProfile, layers: int, retention_period: int | float | None
) -> bool:
    """Steady state with every ``retention_period``-th FFN block kept resident.

    Retained FFN loads drop out of the load budget; both per-layer condition
    families must hold for every layer. ``retention_period=None`` disables
    retention, which reduces the families to the no-retention budget plus the
    first loose family.
    """
    t = profile
    if retention_period is not None and retention_period < 1:
        raise ValueError("retention period must be >= 1")
    for layer in range(1, layers + 1):
        ffn_loads = layer - _retained_count(layer, retention_period)
        lhs_a = layer * (t.attn_compute_ms + t.ffn_compute_ms + 2 * t.allreduce_ms)
        rhs_a = ffn_loads * t.ffn_load_ms + layer * t.attn_load_ms
        lhs_b = (
            layer * t.attn_compute_ms
            + (layer - 1) * t.ffn_compute_ms
            + (2 * layer - 1) * t.allreduce_ms
        )
        rhs_b = ffn_loads * t.ffn_load_ms + (layer - 1) * t.attn_load_ms
        if lhs_a < rhs_a or lhs_b < rhs_b:
            return False
    return True


def min_retention_period(profile: TimingProfile, layers: int) -> int | None:
    """Largest retention period (fewest retained blocks) reaching steady state.

    Smaller periods retain more FFN blocks and only relax the condition, so
    the admissible periods form 1..T for some T; this returns that T, or None
    when even full retention (period 1) cannot reach steady state. A profile
    that is steady without help admits the largest scanned period, ``layers``.
    """
    for period in range(layers, 0, -1):
        if check_retention_steady(profile, layers, period):
            return period
    return None


def peak_memory_estimate(
    cfg: ModelConfig,
    proportion: float,
    role: str,
    window: int | None = None,
    gamma: float | None = None,
) -> int:
    """Closed-form peak weight residency, in bytes, for a steady run.

    The peak window on rank 0 spans both embedding blocks (the head block of
    one token plus the next token's embedding block) and the compute blocks
    just behind them; workers only ever hold alternating attention/FFN
    blocks, aligned to maximize FFN count. Parameter counts are scaled by
    ``gamma`` and by 4 bytes per fp32 parameter.

    Exact whenever the proportion splits heads and columns integrally and
    the shape is Llama-like, meaning an FFN block is at least as large as an
    attention block (3*ffn_size >= 2*(1 + kv_heads/heads)*hidden); outside
    that regime the true peak window prefers the attention-heavy alignment
    and this formula undercounts.
    """
    w = cfg.window if window is None else window
    g = cfg.gamma if gamma is None else gamma
    if w < 1:
        raise ValueError("window must be >= 1")
    h, v, s = cfg.hidden, cfg.vocab, cfg.ffn_size
    attn_params = 2.0 * (1.0 + cfg.kv_heads / cfg.heads) * h * h * proportion + h
    ffn_params = 3.0 * h * s * proportion + h
    if role == "master":
        if w == 1:
            params = h * v + h
        elif w == 2:
            params = 2 * h * v + h
        else:
            params = (
                2 * h * v
                + h
                + ((w - 2) // 2) * attn_params
                + ((w - 1) // 2) * ffn_params
            )
    elif role == "worker":
        params = (w // 2) * attn_params + ((w + 1) // 2) * ffn_params
    else:
        raise ValueError(f"role must be 'master' or 'worker', got {role!r}")
    return round(g * 4.0 * params)


@dataclass(frozen=True)
class SlotRecord:
    block: BlockId
    start_ms: float
    end_ms: float
    stall_ms: float


@dataclass(frozen=True)
class LoadRecord:
    block: BlockId
    start_ms: float
    end_ms: float


@dataclass
class ScheduleResult:
    slots: list[SlotRecord]
    loads: list[LoadRecord]
    total_stall_ms: float   # stalls at every slot after the cold start
    steady_stall_ms: float  # stalls after the window-fill ramp (slots 3+)


def simulate_schedule(
    profile: TimingProfile,
    layers: int,
    window: int,
    retention_period: int | None = None,
) -> ScheduleResult:
    """Deterministic replay of one decode pass of the slot model.

    Blocks load in sequence order, one in flight, a load starting only when
    fewer than ``window`` non-retained blocks are resident; a compute slot
    stalls by whatever load time remains; each block releases when its
    compute slot ends; every compute slot is followed by one allreduce slot.
    Retained FFN blocks are already resident and are skipped by the loader.

    The steady-state condition families assume the window never throttles
    prefetch, so evaluate them with ``window >= 2 * layers``; smaller windows
    add their own blocking on top.
    """
    if layers < 1:
        raise ValueError("layers must be >= 1")
    if window < 1:
        raise ValueError("window must be >= 1")
    t = profile
    blocks: list[BlockId] = []
    for layer in range(1, layers + 1):
        blocks.append(BlockId(BlockKind.ATTENTION, layer))
        blocks.append(BlockId(BlockKind.FFN, layer))
    retained = set()
    if retention_period is not None:
        if retention_period < 1:
            raise ValueError("retention period must be >= 1")
        retained = {
            b for b in blocks if b.kind == BlockKind.FFN and (b.layer - 1) % retention_period == 0
        }
    loadable = [b for b in blocks if b not in retained]
    load_duration = {
        BlockKind.ATTENTION: t.attn_load_ms,
        BlockKind.FFN: t.ffn_load_ms,
    }
    compute_duration = {
        BlockKind.ATTENTION: t.attn_compute_ms,
        BlockKind.FFN: t.ffn_compute_ms,
    }

    loads: list[LoadRecord] = []
    load_end: dict[BlockId, float] = {}
    release_ms: dict[BlockId, float] = {}
    prev_load_end = 0.0
    next_load = 0

    def advance_loader_through(block: BlockId) -> None:
        nonlocal prev_load_end, next_load
        while next_load < len(loadable):
            candidate = loadable[next_load]
            start = prev_load_end
            if next_load >= window:
                # The slot freed by the (next_load - window)-th release.
                start = max(start, release_ms[loadable[next_load - window]])
            end = start + load_duration[candidate.kind]
            loads.append(LoadRecord(candidate, start, end))
            load_end[candidate] = end
            prev_load_end = end
            next_load += 1
            if candidate == block:
                return

    slots: list[SlotRecord] = []
    cursor = 0.0
    total_stall = 0.0
    steady_stall = 0.0
    for index, block in enumerate(blocks):
        if block in retained:
            ready = 0.0
        else:
            advance_loader_through(block)
            ready = load_end[block]
        start = max(cursor, ready)
        stall = max(0.0, ready - cursor) if index > 0 else 0.0
        if index > 0:
            total_stall += stall
        if index > 1:
            steady_stall += stall
        end = start + compute_duration[block.kind]
        slots.append(SlotRecord(block, start, end, stall))
        release_ms[block] = end
        cursor = end + t.allreduce_ms
    return ScheduleResult(
        slots=slots,
        loads=loads,
        total_stall_ms=total_stall,
        steady_stall_ms=steady_stall,
    )
