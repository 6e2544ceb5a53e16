"""Sliding-window weight residency: a background agent prefetches block files.

The decode loop and one daemon loading agent are the only actors. The agent
walks the shard's block sequence cyclically (one generation visits it once
per token), keeps at most ``window`` non-retained blocks resident, and always
has at most one load in flight. ``wait_for_block`` hands a loaded block to
the decode loop and records any stall; ``release_block`` unloads it (unless
retained) and lets the agent advance.

With a retention period T, the FFN blocks of layers 1, 1+T, 1+2T, ... stay
resident after first load and stop counting against the window, trading idle
memory for fewer disk reads.

Every state change is appended to a timeline of ``(timestamp_ms, event,
block)`` rows with events load_start, load_done, wait_start, wait_done, and
release, which tests and the schedule analyzer consume.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .sharding import (
    BlockId,
    BlockKind,
    BlockWeights,
    ShardFormatError,
    ShardManifest,
    read_block_file,
)


@dataclass(frozen=True)
class DiskDelayModel:
    """Synthetic extra disk latency per block load."""

    base_ms: float = 0.0
    ms_per_mib: float = 0.0

    def delay_s(self, nbytes: int) -> float:
        return self.base_ms / 1e3 + (nbytes / 2**20) * self.ms_per_mib / 1e3


@dataclass(frozen=True)
class TimelineEvent:
    t_ms: float
    event: str  # load_start | load_done | wait_start | wait_done | release
    block: BlockId


def retained_block_ids(sequence, retention_period: int | None) -> frozenset[BlockId]:
    """FFN blocks at layers 1, 1+T, 1+2T, ... for retention period T."""
    if retention_period is None:
        return frozenset()
    if retention_period < 1:
        raise ValueError("retention period must be >= 1")
    return frozenset(
        bid
        for bid in sequence
        if bid.kind == BlockKind.FFN and (bid.layer - 1) % retention_period == 0
    )


class BlockScheduler:
    """Loads shard blocks ahead of use and bounds weight residency.

    ``|loaded minus retained| <= window`` holds at all times; blocks load in
    sequence order and are never unloaded before their release.
    """

    def __init__(
        self,
        manifest: ShardManifest,
        shard_dir: str | Path,
        window: int,
        retention_period: int | None = None,
        disk_delay: DiskDelayModel | None = None,
    ) -> None:
        if window < 1:
            raise ValueError("window must be >= 1")
        self._manifest = manifest
        self._dir = Path(shard_dir)
        self._window = window
        self._sequence: list[BlockId] = manifest.block_ids()
        if not self._sequence:
            raise ValueError("manifest lists no blocks")
        self._retained = retained_block_ids(self._sequence, retention_period)
        self._disk_delay = disk_delay
        self._cond = threading.Condition()
        self._loaded: dict[BlockId, BlockWeights] = {}
        self._load_ptr = 0
        self._consume_ptr = 0
        self._acquired: BlockId | None = None
        self._resident_bytes = 0
        self._peak_bytes = 0
        self._stall_ms = 0.0
        self._error: Exception | None = None
        self._stopping = False
        self._timeline: list[TimelineEvent] = []
        self._t0 = time.perf_counter()
        self._agent = threading.Thread(target=self._agent_loop, name="block-loader", daemon=True)

    # -- public API ---------------------------------------------------------

    def start(self) -> "BlockScheduler":
        self._agent.start()
        return self

    def stop(self) -> None:
        with self._cond:
            self._stopping = True
            self._cond.notify_all()
        self._agent.join(timeout=10.0)

    def __enter__(self) -> "BlockScheduler":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()

    def wait_for_block(self, kind: BlockKind, layer: int = 0) -> BlockWeights:
        """Block until the named block is resident; records stall time."""
        bid = BlockId(kind, layer)
        with self._cond:
            expected = self._sequence[self._consume_ptr % len(self._sequence)]
            if bid != expected:
                raise RuntimeError(
                    f"schedule violation: asked for {bid.label()}, expected {expected.label()}"
                )
            if self._acquired is not None:
                raise RuntimeError(f"{self._acquired.label()} is still acquired")
            if self._error is not None:
                raise self._error
            if bid not in self._loaded:
                started = time.perf_counter()
                self._log("wait_start", bid)
                while bid not in self._loaded and self._error is None:
                    self._cond.wait(timeout=0.5)
                if self._error is not None:
                    raise self._error
                self._stall_ms += (time.perf_counter() - started) * 1e3
                self._log("wait_done", bid)
            self._acquired = bid
            self._consume_ptr += 1
            return self._loaded[bid]

    def release_block(self, kind: BlockKind, layer: int = 0) -> None:
        """Drop the acquired block (unless retained) and let the agent advance."""
        bid = BlockId(kind, layer)
        with self._cond:
            if self._acquired != bid:
                raise RuntimeError(f"release of unacquired block {bid.label()}")
            self._acquired = None
            self._log("release", bid)
            if bid not in self._retained:
                block = self._loaded.pop(bid)
                self._resident_bytes -= block.byte_size
            self._cond.notify_all()

    @property
    def resident_bytes(self) -> int:
        with self._cond:
            return self._resident_bytes

    @property
    def peak_param_bytes(self) -> int:
        with self._cond:
            return self._peak_bytes

    @property
    def stall_ms(self) -> float:
        with self._cond:
            return self._stall_ms

    @property
    def timeline(self) -> list[TimelineEvent]:
        with self._cond:
            return list(self._timeline)

    def dump_timeline(self, path: str | Path) -> None:
        with self._cond:
            rows = [f"{e.t_ms:.3f} {e.event} {e.block.label()}" for e in self._timeline]
        Path(path).write_text("\n".join(rows) + "\n")

    # -- loading agent -------------------------------------------------------

    def _log(self, event: str, bid: BlockId) -> None:
        self._timeline.append(
            TimelineEvent((time.perf_counter() - self._t0) * 1e3, event, bid)
        )

    def _window_count(self) -> int:
        return sum(1 for bid in self._loaded if bid not in self._retained)

    def _agent_loop(self) -> None:
        while True:
            with self._cond:
                bid = None
                while bid is None:
                    if self._stopping:
                        return
                    candidate = self._sequence[self._load_ptr % len(self._sequence)]
                    if candidate in self._loaded:
                        if candidate in self._retained:
                            # Permanently resident: nothing to do this cycle.
                            self._load_ptr += 1
                            continue
                        # Still resident from the previous cycle; wait for its
                        # release before loading the next instance.
                        self._cond.wait(timeout=0.5)
                    elif candidate not in self._retained and self._window_count() >= self._window:
                        self._cond.wait(timeout=0.5)
                    else:
                        bid = candidate
                        self._load_ptr += 1
                self._log("load_start", bid)
            try:
                entry = self._manifest.entry_for(bid)
                block = read_block_file(self._dir / entry.path, expected_crc=entry.crc32)
                if block.block_id != bid:
                    raise ShardFormatError(
                        f"{entry.path}: holds {block.block_id.label()}, expected {bid.label()}"
                    )
                if self._disk_delay is not None:
                    time.sleep(self._disk_delay.delay_s(block.byte_size))
            except Exception as exc:  # noqa: BLE001 - surfaced to the decode loop
                with self._cond:
                    self._error = RuntimeError(f"failed to load {bid.label()}: {exc}")
                    self._cond.notify_all()
                return
            with self._cond:
                self._loaded[bid] = block
                self._resident_bytes += block.byte_size
                self._peak_bytes = max(self._peak_bytes, self._resident_bytes)
                self._log("load_done", bid)
                self._cond.notify_all()


class FullResidencyProvider:
    """Scheduler-off mode: every block loads up front and stays resident."""

    def __init__(self, manifest: ShardManifest, shard_dir: str | Path) -> None:
        self._blocks = {
            e.block_id: read_block_file(Path(shard_dir) / e.path, expected_crc=e.crc32)
            for e in manifest.entries
        }
        total = sum(b.byte_size for b in self._blocks.values())
        self._resident_bytes = total
        self.stall_ms = 0.0
        self.timeline: list[TimelineEvent] = []

    def start(self) -> "FullResidencyProvider":
        return self

    def stop(self) -> None:
        return None

    def wait_for_block(self, kind: BlockKind, layer: int = 0) -> BlockWeights:
        return self._blocks[BlockId(kind, layer)]

    def release_block(self, kind: BlockKind, layer: int = 0) -> None:
        return None

    @property
    def resident_bytes(self) -> int:
        return self._resident_bytes

    @property
    def peak_param_bytes(self) -> int:
        return self._resident_bytes
