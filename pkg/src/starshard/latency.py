"""Analytical models and a small event engine for collective latency.

Cost models assume a payload of ``32 * hidden`` bits (one fp32 hidden vector)
and uniform per-hop link latency. The closed forms cover the three classic
shapes on one master and two workers joined by direct logical links:

    star: 2 * (t_data + t_link) +     t_barrier +       t_aggr
    tree: 3 * t_data + 4 * t_link + 2 * t_barrier + 2 * t_aggr
    ring: 4/3 * t_data + 4 * t_link + 3 * t_barrier + 2/3 * t_aggr

with ``t_data`` the one-way transfer time of the full payload over one link.
The event engine generalizes the same traffic patterns to any device count;
uplinks store-and-forward (aggregation needs the whole tensor), downlinks
forward cut-through. A home-gateway topology (devices behind per-home
gateways joined by one core router) is built in for hop-count studies.

All latencies are milliseconds, bandwidths megabits per second.
"""

from __future__ import annotations

from dataclasses import dataclass, field

ALGORITHMS = ("star", "tree", "ring")


@dataclass(frozen=True)
class NetParams:
    """Link and payload parameters shared by the cost models."""

    hidden: int
    bandwidth_mbps: float
    link_latency_ms: float
    devices: int = 3
    barrier_ms: float = 0.0
    aggr_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.link_latency_ms < 0:
            raise ValueError("link latency must be nonnegative")
        if self.bandwidth_mbps <= 0:
            raise ValueError("bandwidth must be positive")

    @property
    def payload_bits(self) -> int:
        return 32 * self.hidden

    def transfer_ms(self) -> float:
        """One-way full-payload serialization time over one link."""
        return self.payload_bits / (self.bandwidth_mbps * 1e6) * 1e3


def t_data(params: NetParams, path_links: int) -> float:
    """Round-trip data transfer time over a path of ``path_links`` links.

    ``2 * sum over links of (32 * hidden) / bandwidth``; a device reaching the
    hub through one router crosses two links each way.
    """
    if path_links < 1:
        raise ValueError("a path needs at least one link")
    return 2.0 * path_links * params.transfer_ms()


def barrier_latency(params: NetParams, path_bandwidths_mbps: list[list[float]]) -> float:
    """Spread (max minus min) of per-path one-way transfer times.

    Homogeneous paths give zero, which is why the closed forms drop the
    barrier term for uniform links.
    """
    if not path_bandwidths_mbps:
        return 0.0
    totals = [
        sum(params.payload_bits / (b * 1e6) * 1e3 for b in path) for path in path_bandwidths_mbps
    ]
    return max(totals) - min(totals)


def allreduce_latency(params: NetParams, algorithm: str) -> float:
    """Closed-form allreduce completion time for one master and two workers.

    Raises for other device counts; use :func:`simulate_collective` there.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    if params.devices != 3:
        raise ValueError(
            f"closed forms cover 3 devices, got {params.devices}; use simulate_collective"
        )
    d = params.transfer_ms()
    tau = params.link_latency_ms
    barrier = params.barrier_ms
    aggr = params.aggr_ms
    if algorithm == "star":
        return 2.0 * (d + tau) + barrier + aggr
    if algorithm == "tree":
        return 3.0 * d + 4.0 * tau + 2.0 * barrier + 2.0 * aggr
    return 4.0 / 3.0 * d + 4.0 * tau + 3.0 * barrier + 2.0 / 3.0 * aggr


def ring_hop_latency(devices: int, link_latency_ms: float, hops_per_step: int = 1) -> float:
    """Cumulative link latency of ring allreduce: 2*(n-1) steps of fixed hops.

    On the home-gateway topology neighbors sit four hops apart, so eight
    devices pay 56 hop delays.
    """
    if devices < 2:
        raise ValueError("a ring needs at least two devices")
    if hops_per_step < 1:
        raise ValueError("hops_per_step must be >= 1")
    return 2.0 * (devices - 1) * hops_per_step * link_latency_ms


@dataclass(frozen=True)
class CollectiveEvent:
    t_ms: float
    node: str
    action: str


@dataclass
class CollectiveTimeline:
    events: list[CollectiveEvent] = field(default_factory=list)
    completion_ms: float = 0.0

    def add(self, t_ms: float, node: str, action: str) -> float:
        self.events.append(CollectiveEvent(t_ms, node, action))
        return t_ms


def simulate_collective(params: NetParams, algorithm: str, devices: int | None = None) -> CollectiveTimeline:
    """Event replay of one collective; exact match with the closed forms at n=3.

    Star: workers push over their own links in parallel, the hub aggregates
    once, then pushes results back in parallel. Tree: a worker chain
    store-and-forwards partial aggregates up, then the result streams back
    down cut-through (one serialization, one hop delay per link). Ring: the
    payload splits into n chunks walking 2*(n-1) steps.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    n = params.devices if devices is None else devices
    if n < 2:
        raise ValueError("a collective needs at least two devices")
    d = params.transfer_ms()
    tau = params.link_latency_ms
    aggr = params.aggr_ms
    timeline = CollectiveTimeline()

    if algorithm == "star":
        arrivals = []
        for worker in range(1, n):
            timeline.add(0.0, f"w{worker}", "push_start")
            arrivals.append(timeline.add(d + tau, "master", f"recv_w{worker}"))
        done_aggr = timeline.add(max(arrivals) + aggr, "master", "aggregate")
        completion = 0.0
        for worker in range(1, n):
            completion = max(completion, timeline.add(done_aggr + d + tau, f"w{worker}", "recv_result"))
        timeline.completion_ms = completion
        return timeline

    if algorithm == "tree":
        # Chain w_{n-1} -> ... -> w_1 -> master; each inner node waits for the
        # full tensor, aggregates, and forwards.
        t = 0.0
        timeline.add(0.0, f"w{n - 1}", "push_start")
        for depth in range(n - 1, 0, -1):
            receiver = "master" if depth == 1 else f"w{depth - 1}"
            t = timeline.add(t + d + tau, receiver, "recv_partial")
            t = timeline.add(t + aggr, receiver, "aggregate")
        # Downlink: one serialization, then cut-through forwarding per hop.
        t = timeline.add(t + d + tau, "w1", "recv_result")
        for depth in range(2, n):
            t = timeline.add(t + tau, f"w{depth}", "recv_result")
        timeline.completion_ms = t
        return timeline

    # Ring: payload splits into n chunks; 2*(n-1) steps of one chunk per link,
    # aggregation cost spread over the n-1 reduce steps.
    chunk = d / n
    t = 0.0
    for step in range(n - 1):
        t = timeline.add(t + chunk + tau + aggr / n, "ring", f"reduce_step{step}")
    for step in range(n - 1):
        t = timeline.add(t + chunk + tau, "ring", f"gather_step{step}")
    timeline.completion_ms = t
    return timeline


# ---------------------------------------------------------------------------
# Home-gateway topology: 8 devices, one gateway each, one core router.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GatewayTopology:
    """Devices d1..dn behind gateways g1..gn joined by a core router.

    Every device-to-device path runs device -> gateway -> core -> gateway ->
    device, four hops.
    """

    devices: int = 8

    def path_hops(self, src: int, dst: int) -> int:
        if src == dst:
            return 0
        if not (1 <= src <= self.devices and 1 <= dst <= self.devices):
            raise ValueError("device index out of range")
        return 4

    def star_link_latency_ms(self, link_latency_ms: float, worker: int, master: int = 1) -> float:
        """Round-trip hop delay for one worker's push-pull through the core."""
        return 2.0 * self.path_hops(worker, master) * link_latency_ms

    def tree_link_latency_ms(
        self, link_latency_ms: float, worker: int, aggregator: int, master: int = 1
    ) -> float:
        """Round-trip hop delay when a worker's data detours via an aggregator."""
        one_way = self.path_hops(worker, aggregator) + self.path_hops(aggregator, master)
        return 2.0 * one_way * link_latency_ms

    def ring_link_latency_ms(self, link_latency_ms: float) -> float:
        return ring_hop_latency(self.devices, link_latency_ms, hops_per_step=4)


def latency_sweep_rows(
    hidden: int,
    bandwidth_mbps: float,
    taus_ms: list[float],
    algorithms: list[str] | None = None,
    devices: int = 3,
) -> list[dict[str, object]]:
    """CSV-shaped rows (algo, n, tau_ms, bandwidth_mbps, hidden, latency_ms)."""
    rows = []
    for algo in algorithms or list(ALGORITHMS):
        for tau in taus_ms:
            params = NetParams(
                hidden=hidden,
                bandwidth_mbps=bandwidth_mbps,
                link_latency_ms=tau,
                devices=devices,
            )
            if devices == 3:
                latency = allreduce_latency(params, algo)
            else:
                latency = simulate_collective(params, algo, devices).completion_ms
            rows.append(
                {
                    "algo": algo,
                    "n": devices,
                    "tau_ms": tau,
                    "bandwidth_mbps": bandwidth_mbps,
                    "hidden": hidden,
                    "latency_ms": latency,
                }
            )
    return rows
