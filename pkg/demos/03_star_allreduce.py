"""Star collectives over the loopback transport.

Workers push partial tensors to rank 0, which sums them in ascending rank
order and pushes the total back: two link traversals per worker, no
intermediate hops. The loopback transport moves real encoded frames through
queues, so byte counters and captures match what sockets would carry.
"""

import threading

import numpy as np

from starshard.cluster import (
    LinkDelayModel,
    TrafficCapture,
    all_reduce_star,
    loopback_cluster,
    reduce_to_master,
)
from starshard.wire import Phase


def on_threads(handles, fn):
    results = {}

    def runner(rank):
        results[rank] = fn(handles[rank])

    threads = [threading.Thread(target=runner, args=(r,)) for r in range(len(handles))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return results


def main() -> None:
    capture = TrafficCapture()
    handles = loopback_cluster(3, capture=capture)
    partials = [np.full((1, 8), float(10**rank), dtype=np.float32) for rank in range(3)]

    summed = on_threads(handles, lambda h: all_reduce_star(h, partials[h.rank], 1, Phase.ATTN))
    print("rank partials: 1, 10, 100 -> every rank holds:", summed[0][0, :3], "...")
    print("identical on all ranks:", all(np.array_equal(summed[0], s) for s in summed.values()))

    reduced = on_threads(handles, lambda h: reduce_to_master(h, partials[h.rank]))
    print("\nreduce_to_master: rank 0 gets", reduced[0][0, 0], "; workers get", reduced[1])

    print("\nper-rank counters after 2 rounds:")
    for rank, handle in enumerate(handles):
        c = handle.counters
        print(f"  rank {rank}: rounds={c.rounds} payload_bytes={c.payload_bytes}")

    print("\ncaptured frame types:", sorted({rec.msg_type.name for rec in capture.frames}))

    # Synthetic link delay: a 5 ms hop dominates the microsecond payload time,
    # which is exactly why the runtime uses a star instead of a ring.
    slow = loopback_cluster(2, delay=LinkDelayModel(latency_ms=5.0, bandwidth_mbps=300.0))
    import time

    start = time.perf_counter()
    on_threads(slow, lambda h: all_reduce_star(h, partials[0], 1, Phase.FFN))
    elapsed = (time.perf_counter() - start) * 1e3
    print(f"\nallreduce with 5 ms links took {elapsed:.1f} ms (push + pull = 2 hops)")


if __name__ == "__main__":
    main()
