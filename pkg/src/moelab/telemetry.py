"""Asynchronous metrics pipeline with an end-of-iteration barrier.

Ranks emit newline-delimited JSON messages over TCP.  The server buffers
metric values per iteration and, once every declared rank has sent its
end-of-iteration (eoi) signal, reduces the iteration and appends one JSON
line per (iteration, key, agg) to the output file.

Wire format, one UTF-8 JSON object per line::

    {"kind": "metric", "rank": 0, "iteration": 3, "key": "loss", "value": 1.5, "agg": "mean"}
    {"kind": "eoi", "rank": 0, "iteration": 3}

Protocol errors are answered with ``{"error": "...", "line": n}`` on the same
connection; a malformed line closes only that connection.
"""

from __future__ import annotations

import collections
import json
import logging
import queue
import socket
import socketserver
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

log = logging.getLogger(__name__)

AGGS = ("sum", "mean", "max", "min", "last")


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class MetricMessage:
    kind: str
    rank: int
    iteration: int
    key: Optional[str] = None
    value: Optional[float] = None
    agg: Optional[str] = None

    def __post_init__(self):
        if self.kind == "metric":
            if self.key is None or self.value is None or self.agg not in AGGS:
                raise ProtocolError(f"metric message needs key, value and agg in {AGGS}")
        elif self.kind == "eoi":
            if self.key is not None or self.value is not None:
                raise ProtocolError("eoi messages carry rank and iteration only")
        else:
            raise ProtocolError(f"unknown message kind {self.kind!r}")

    @classmethod
    def metric(cls, rank: int, iteration: int, key: str, value: float, agg: str = "mean") -> "MetricMessage":
        return cls("metric", rank, iteration, key, float(value), agg)

    @classmethod
    def eoi(cls, rank: int, iteration: int) -> "MetricMessage":
        return cls("eoi", rank, iteration)

    def to_json(self) -> str:
        d = {"kind": self.kind, "rank": self.rank, "iteration": self.iteration}
        if self.kind == "metric":
            d.update(key=self.key, value=self.value, agg=self.agg)
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str | bytes) -> "MetricMessage":
        try:
            d = json.loads(line)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ProtocolError(f"malformed JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ProtocolError("message must be a JSON object")
        try:
            rank, iteration = d["rank"], d["iteration"]
        except KeyError as exc:
            raise ProtocolError(f"missing field {exc}") from None
        if not isinstance(rank, int) or not isinstance(iteration, int):
            raise ProtocolError("rank and iteration must be integers")
        value = d.get("value")
        if value is not None:
            if not isinstance(value, (int, float)):
                raise ProtocolError("value must be a number")
            value = float(value)
        return cls(d.get("kind"), rank, iteration, d.get("key"), value, d.get("agg"))


@dataclass
class ReducedRecord:
    iteration: int
    key: str
    agg: str
    value: float
    count: int
    partial: bool = False

    def to_json(self) -> str:
        d = asdict(self)
        if not self.partial:
            del d["partial"]
        return json.dumps(d)


def reduce(values: list[float], agg: str) -> tuple[float, int]:
    """Reduce values already in canonical (rank, sequence) order.

    Sums run left to right so the result depends only on that order; ``last``
    is the final element, i.e. the highest rank's latest value.
    """
    if not values:
        raise ValueError("nothing to reduce")
    n = len(values)
    if agg == "sum":
        return _ordered_sum(values), n
    if agg == "mean":
        return _ordered_sum(values) / n, n
    if agg == "max":
        return max(values), n
    if agg == "min":
        return min(values), n
    if agg == "last":
        return values[-1], n
    raise ValueError(f"unknown aggregation {agg!r}")


def _ordered_sum(values: Iterable[float]) -> float:
    total = 0.0
    for v in values:
        total += v
    return total


# ---------------------------------------------------------------------------
# Barrier aggregation core (transport independent)
# ---------------------------------------------------------------------------


@dataclass
class _Iteration:
    # (key, agg) -> list of (rank, seq, value)
    buffers: dict = field(default_factory=dict)
    eoi: set = field(default_factory=set)
    first_seen: float = field(default_factory=time.monotonic)


class MetricsAggregator:
    """Buffers metrics per iteration and reduces an iteration once all
    ranks have signalled its end.

    ``ingest`` and ``signal_eoi`` only touch buffers under a lock; reduction
    and persistence run on a dedicated reducer thread (or synchronously via
    :meth:`drain` when no thread was started).
    """

    def __init__(self, ranks: Iterable[int], output: Optional[str | Path] = None,
                 barrier_timeout: Optional[float] = None):
        self.ranks = frozenset(ranks)
        if not self.ranks:
            raise ValueError("need at least one rank")
        self.output = Path(output) if output is not None else None
        self.barrier_timeout = barrier_timeout
        self._lock = threading.Lock()
        self._iters: dict[int, _Iteration] = {}
        self._done: set[int] = set()
        self._seq: dict[int, int] = {}
        self._ready: queue.Queue = queue.Queue()
        self.records: list[ReducedRecord] = []
        self.accepted = 0
        self.rejected = 0
        self._thread: Optional[threading.Thread] = None
        self._stop = threading.Event()
        self._fh = open(self.output, "a", encoding="utf-8") if self.output else None

    # -- ingestion -------------------------------------------------------
    def ingest(self, msg: MetricMessage, seq: Optional[int] = None) -> bool:
        """Buffer one message.  ``seq`` is the per-connection arrival number;
        when omitted a per-rank counter is used."""
        if msg.rank not in self.ranks:
            with self._lock:
                self.rejected += 1
            raise ProtocolError(f"unknown rank {msg.rank}")
        if msg.kind == "eoi":
            self.signal_eoi(msg.rank, msg.iteration)
            return True
        with self._lock:
            if seq is None:
                seq = self._seq.get(msg.rank, 0)
                self._seq[msg.rank] = seq + 1
            if msg.iteration in self._done:
                log.warning("late metric for completed iteration %d dropped", msg.iteration)
                self.rejected += 1
                return False
            it = self._iters.setdefault(msg.iteration, _Iteration())
            it.buffers.setdefault((msg.key, msg.agg), []).append((msg.rank, seq, msg.value))
            self.accepted += 1
        return True

    def signal_eoi(self, rank: int, iteration: int) -> bool:
        """Record an eoi; returns True when it completed the barrier."""
        if rank not in self.ranks:
            raise ProtocolError(f"unknown rank {rank}")
        with self._lock:
            if iteration in self._done:
                return False
            it = self._iters.setdefault(iteration, _Iteration())
            it.eoi.add(rank)
            if it.eoi != self.ranks:
                return False
            self._done.add(iteration)
            del self._iters[iteration]
        self._ready.put((iteration, it, False))
        return True

    # -- reduction -------------------------------------------------------
    def _reduce_iteration(self, iteration: int, it: _Iteration, partial: bool) -> list[ReducedRecord]:
        out = []
        for (key, agg) in sorted(it.buffers):
            entries = sorted(it.buffers[(key, agg)], key=lambda e: (e[0], e[1]))
            value, count = reduce([e[2] for e in entries], agg)
            out.append(ReducedRecord(iteration, key, agg, value, count, partial))
        return out

    def _persist(self, records: list[ReducedRecord]) -> None:
        self.records.extend(records)
        if self._fh is not None:
            self._fh.write("".join(r.to_json() + "\n" for r in records))
            self._fh.flush()

    def _expire(self) -> None:
        if self.barrier_timeout is None:
            return
        now = time.monotonic()
        with self._lock:
            stale = [i for i, it in self._iters.items() if now - it.first_seen > self.barrier_timeout]
            for i in stale:
                self._done.add(i)
                self._ready.put((i, self._iters.pop(i), True))

    def drain(self) -> int:
        """Reduce and persist every completed iteration (synchronous path)."""
        self._expire()
        n = 0
        while True:
            try:
                iteration, it, partial = self._ready.get_nowait()
            except queue.Empty:
                return n
            if iteration is None:
                continue
            self._persist(self._reduce_iteration(iteration, it, partial))
            n += 1

    def _run(self) -> None:
        while not self._stop.is_set():
            try:
                item = self._ready.get(timeout=0.05)
            except queue.Empty:
                self._expire()
                continue
            iteration, it, partial = item
            if iteration is None:
                break
            self._persist(self._reduce_iteration(iteration, it, partial))
        self.drain()

    def start(self) -> "MetricsAggregator":
        self._thread = threading.Thread(target=self._run, name="metrics-reducer", daemon=True)
        self._thread.start()
        return self

    def close(self) -> None:
        if self._thread is not None:
            self._stop.set()
            self._ready.put((None, None, False))
            self._thread.join()
            self._thread = None
        else:
            self.drain()
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def pending_iterations(self) -> list[int]:
        with self._lock:
            return sorted(self._iters)


# ---------------------------------------------------------------------------
# TCP transport
# ---------------------------------------------------------------------------


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        agg: MetricsAggregator = self.server.aggregator
        seq = 0
        for lineno, raw in enumerate(self.rfile, start=1):
            if not raw.strip():
                continue
            try:
                msg = MetricMessage.from_json(raw)
            except ProtocolError as exc:
                self._reply({"error": str(exc), "line": lineno})
                return  # malformed input ends this connection only
            try:
                agg.ingest(msg, seq)
            except ProtocolError as exc:
                self._reply({"error": str(exc), "line": lineno})
            seq += 1

    def _reply(self, payload: dict) -> None:
        try:
            self.wfile.write((json.dumps(payload) + "\n").encode())
            self.wfile.flush()
        except OSError:
            pass


class _ThreadingServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class MetricsServer:
    """TCP front end: one thread per connection feeding a shared aggregator."""

    def __init__(self, ranks: Iterable[int], output: Optional[str | Path], host: str = "127.0.0.1",
                 port: int = 0, barrier_timeout: Optional[float] = None):
        self.aggregator = MetricsAggregator(ranks, output, barrier_timeout)
        self._server = _ThreadingServer((host, port), _Handler)
        self._server.aggregator = self.aggregator
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def start(self) -> "MetricsServer":
        self.aggregator.start()
        self._thread = threading.Thread(target=self._server.serve_forever, name="metrics-accept", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self.aggregator.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected HOST:PORT, got {addr!r}")
    return host, int(port)


class MetricsClient:
    """Non-blocking emitter for one rank.

    ``emit`` and ``end_iteration`` append to a local deque and return.  A
    background thread formats and sends the backlog when an iteration ends,
    when ``batch`` messages are waiting, or every ``interval`` seconds, so
    the caller is not woken per message.
    """

    HIGH_WATER = 1_000_000

    def __init__(self, address: tuple[str, int] | str, rank: int, batch: int = 4096, interval: float = 0.05):
        if isinstance(address, str):
            address = parse_addr(address)
        self.rank = rank
        self._sock = socket.create_connection(address)
        self._pending: collections.deque = collections.deque()
        self._wake = threading.Event()
        self._closing = False
        self._batch = batch
        self._interval = interval
        self._warned = False
        self._thread = threading.Thread(target=self._flush_loop, name=f"metrics-client-{rank}", daemon=True)
        self._thread.start()

    def emit(self, key: str, value: float, agg: str = "mean", iteration: int = 0) -> None:
        if agg not in AGGS:
            raise ProtocolError(f"agg must be one of {AGGS}")
        self._put(("metric", iteration, key, float(value), agg))

    def end_iteration(self, iteration: int) -> None:
        self._put(("eoi", iteration))
        self._wake.set()

    def send_raw(self, line: str) -> None:
        self._put(("raw", line))

    def _put(self, item: tuple) -> None:
        self._pending.append(item)
        n = len(self._pending)
        if n >= self._batch:
            self._wake.set()
        if not self._warned and n > self.HIGH_WATER:
            log.warning("metrics client %d queue above high-water mark", self.rank)
            self._warned = True

    def _format(self, item: tuple) -> str:
        if item[0] == "metric":
            _, iteration, key, value, agg = item
            return json.dumps({"kind": "metric", "rank": self.rank, "iteration": iteration,
                               "key": key, "value": value, "agg": agg})
        if item[0] == "eoi":
            return json.dumps({"kind": "eoi", "rank": self.rank, "iteration": item[1]})
        return item[1]

    def _send_backlog(self) -> None:
        lines = []
        while self._pending:
            lines.append(self._format(self._pending.popleft()))
        if lines:
            self._sock.sendall(("\n".join(lines) + "\n").encode())

    def _flush_loop(self) -> None:
        while True:
            self._wake.wait(self._interval)
            self._wake.clear()
            self._send_backlog()
            if self._closing:
                self._send_backlog()
                return

    def close(self) -> None:
        self._closing = True
        self._wake.set()
        self._thread.join()
        self._sock.shutdown(socket.SHUT_WR)
        self._sock.close()


class LocalEmitter:
    """In-process emitter: a single-rank aggregator writing JSONL directly."""

    def __init__(self, output: Optional[str | Path], rank: int = 0):
        self.rank = rank
        self.aggregator = MetricsAggregator([rank], output)

    def emit(self, key: str, value: float, agg: str = "mean", iteration: int = 0) -> None:
        self.aggregator.ingest(MetricMessage.metric(self.rank, iteration, key, value, agg))

    def end_iteration(self, iteration: int) -> None:
        self.aggregator.signal_eoi(self.rank, iteration)
        self.aggregator.drain()

    def close(self) -> None:
        self.aggregator.close()
