"""Start a metrics server and drive it with simulated ranks over TCP.

    python scripts/telemetry_demo.py --ranks 4 --iterations 5 --messages 1000

Prints the persisted record count and the mean client-side cost of one emit.
"""

import argparse
import random
import tempfile
import threading
import time
from pathlib import Path

from moelab.telemetry import MetricsClient, MetricsServer


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--ranks", type=int, default=4)
    p.add_argument("--iterations", type=int, default=5)
    p.add_argument("--messages", type=int, default=1000, help="messages per rank per iteration")
    p.add_argument("--out", type=Path, default=Path(tempfile.mkdtemp()) / "metrics.jsonl")
    args = p.parse_args()

    costs = []
    with MetricsServer(range(args.ranks), args.out) as server:
        def rank(r):
            rng = random.Random(r)
            client = MetricsClient(server.address, r)
            t0 = time.perf_counter()
            for it in range(args.iterations):
                for _ in range(args.messages):
                    client.emit(rng.choice(["loss", "grad_norm", "tokens"]), rng.random(),
                                rng.choice(["sum", "mean", "max", "min"]), it)
                client.end_iteration(it)
            costs.append((time.perf_counter() - t0) / (args.iterations * args.messages))
            client.close()

        threads = [threading.Thread(target=rank, args=(r,)) for r in range(args.ranks)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        expected = args.iterations * 12
        deadline = time.monotonic() + 30
        while len(server.aggregator.records) < expected and time.monotonic() < deadline:
            time.sleep(0.02)
        n = len(server.aggregator.records)
    print(f"{n} records written to {args.out}; mean emit cost {1e6 * sum(costs) / len(costs):.1f} us")


if __name__ == "__main__":
    main()
