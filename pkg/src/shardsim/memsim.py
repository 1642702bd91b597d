"""Discrete-event model of a rank's execution: the host issue thread, the
compute and communication device queues, the stream-aware caching allocator
with allocation-retry semantics, and a per-category memory ledger.

Virtual time is a float; every quantity is derived deterministically from the
issue sequence, so identical programs produce identical traces.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

CATEGORIES = ("sharded_params", "unsharded_params", "grads", "activations",
              "optimizer_state")

COMPUTE = "compute"
COMM = "comm"


@dataclass
class CostModel:
    """Linear virtual-time costs.

    A collective costs alpha + beta * bytes_moved (bytes_moved is the
    per-rank ring volume), so many small collectives pay the launch overhead
    alpha repeatedly — fewer, larger collectives amortize it.  Compute costs
    gamma per flop; every host-issued op costs delta.
    """

    alpha: float = 1.0
    beta: float = 1e-3
    gamma: float = 1e-3
    delta: float = 1e-6

    def collective_cost(self, bytes_moved: float) -> float:
        return self.alpha + self.beta * bytes_moved

    def compute_cost(self, flops: float) -> float:
        return self.gamma * flops


class SimulatedOOM(RuntimeError):
    """Hard out-of-memory after one allocation retry; carries a ledger snapshot."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TraceRecord:
    rank: int
    seq: int
    kind: str
    unit: Any
    bytes: int

    def line(self) -> str:
        unit = "-" if self.unit is None else self.unit
        return (f"rank={self.rank} seq={self.seq} kind={self.kind} "
                f"unit={unit} bytes={self.bytes}")


class Trace:
    """Append-only event stream shared by all ranks; seq is per-rank monotone."""

    def __init__(self) -> None:
        self.records: list[TraceRecord] = []
        self._seq: dict[int, int] = {}

    def record(self, rank: int, kind: str, unit: Any, nbytes: int) -> None:
        seq = self._seq.get(rank, 0)
        self._seq[rank] = seq + 1
        self.records.append(TraceRecord(rank, seq, kind, unit, int(nbytes)))

    def events(self, rank: int | None = None,
               kind: str | None = None) -> list[TraceRecord]:
        return [r for r in self.records
                if (rank is None or r.rank == rank)
                and (kind is None or r.kind == kind)]

    def lines(self) -> list[str]:
        return [r.line() for r in self.records]


class Block:
    """One allocator block: exact size, owned by the queue that allocated it."""

    __slots__ = ("size_bytes", "elements", "queue", "category", "live",
                 "last_dep", "free_ready", "alloc_time")

    def __init__(self, size_bytes: int, elements: int, queue: str,
                 category: str, alloc_time: float):
        self.size_bytes = size_bytes
        self.elements = elements
        self.queue = queue
        self.category = category
        self.live = True
        self.last_dep = 0.0       # completion time of the last dependent event
        self.free_ready = 0.0     # set when freed
        self.alloc_time = alloc_time

    def note_dependent(self, done: float) -> None:
        self.last_dep = max(self.last_dep, done)

    @property
    def ready_at(self) -> float:
        # Dependencies may land after the host free (a collective resolving
        # late), so readiness is computed on demand, not frozen at free time.
        return max(self.free_ready, self.last_dep)


class MemoryLedger:
    """Bytes/elements in use by category, with online peak tracking.

    The parameter peak (sharded + unsharded categories combined) is tracked
    separately because the closed-form memory contracts are stated on it.
    """

    def __init__(self) -> None:
        self.current_bytes = dict.fromkeys(CATEGORIES, 0)
        self.current_elements = dict.fromkeys(CATEGORIES, 0)
        self.peak_bytes = dict.fromkeys(CATEGORIES, 0)
        self.peak_elements = dict.fromkeys(CATEGORIES, 0)
        self.peak_total_bytes = 0
        self.peak_total_elements = 0
        self.peak_param_bytes = 0
        self.peak_param_elements = 0
        self.series: list[tuple[float, str, int, int]] = []

    def _after_change(self, cat: str) -> None:
        self.peak_bytes[cat] = max(self.peak_bytes[cat],
                                   self.current_bytes[cat])
        self.peak_elements[cat] = max(self.peak_elements[cat],
                                      self.current_elements[cat])
        self.peak_total_bytes = max(self.peak_total_bytes,
                                    sum(self.current_bytes.values()))
        self.peak_total_elements = max(self.peak_total_elements,
                                       sum(self.current_elements.values()))
        param_b = (self.current_bytes["sharded_params"]
                   + self.current_bytes["unsharded_params"])
        param_e = (self.current_elements["sharded_params"]
                   + self.current_elements["unsharded_params"])
        self.peak_param_bytes = max(self.peak_param_bytes, param_b)
        self.peak_param_elements = max(self.peak_param_elements, param_e)

    def on_alloc(self, t: float, cat: str, nbytes: int, elements: int) -> None:
        self.current_bytes[cat] += nbytes
        self.current_elements[cat] += elements
        self.series.append((t, cat, nbytes, elements))
        self._after_change(cat)

    def on_free(self, t: float, cat: str, nbytes: int, elements: int) -> None:
        self.current_bytes[cat] -= nbytes
        self.current_elements[cat] -= elements
        assert self.current_bytes[cat] >= 0, f"negative {cat} bytes"
        self.series.append((t, cat, -nbytes, -elements))
        self._after_change(cat)

    def reset_peaks(self) -> dict:
        """Restart peak tracking from the current residency; returns the
        peaks recorded so far (used to separate e.g. an initialization phase
        from steady-state training)."""
        old = self.snapshot()
        for cat in CATEGORIES:
            self.peak_bytes[cat] = self.current_bytes[cat]
            self.peak_elements[cat] = self.current_elements[cat]
        self.peak_total_bytes = sum(self.current_bytes.values())
        self.peak_total_elements = sum(self.current_elements.values())
        self.peak_param_bytes = (self.current_bytes["sharded_params"]
                                 + self.current_bytes["unsharded_params"])
        self.peak_param_elements = (
            self.current_elements["sharded_params"]
            + self.current_elements["unsharded_params"])
        return old

    def snapshot(self) -> dict:
        return {
            "current_bytes": dict(self.current_bytes),
            "peak_bytes": dict(self.peak_bytes),
            "peak_elements": dict(self.peak_elements),
            "peak_total_bytes": self.peak_total_bytes,
            "peak_param_bytes": self.peak_param_bytes,
            "peak_param_elements": self.peak_param_elements,
        }


class CachingAllocator:
    """Exact-size blocks with per-queue free lists.

    A cached block is reusable only by an allocation on the same queue, and
    only once its last dependent device event has completed at host-issue
    time.  When nothing fits, the allocator simulates a blocking free-all:
    the host stalls until both device queues drain, the cache is flushed, and
    the allocation is retried once; a second failure is a hard OOM.
    """

    def __init__(self, capacity_bytes: int | None = None):
        self.capacity_bytes = capacity_bytes
        self.reserved_bytes = 0
        self.live_bytes = 0
        self.num_alloc_retries = 0
        self._cache: dict[tuple[str, int], list[Block]] = {}

    def _take_cached(self, queue: str, size: int, now: float) -> Block | None:
        blocks = self._cache.get((queue, size))
        if not blocks:
            return None
        blocks.sort(key=lambda b: b.ready_at)
        for i, blk in enumerate(blocks):
            if blk.ready_at <= now:
                return blocks.pop(i)
        return None

    def _fits(self, size: int) -> bool:
        return (self.capacity_bytes is None
                or self.reserved_bytes + size <= self.capacity_bytes)

    def flush(self) -> None:
        for blocks in self._cache.values():
            for blk in blocks:
                self.reserved_bytes -= blk.size_bytes
        self._cache.clear()

    def alloc(self, dev: "DeviceSim", size_bytes: int, elements: int,
              queue: str, category: str) -> Block:
        dev.host_advance()
        blk = self._take_cached(queue, size_bytes, dev.host_time)
        if blk is None:
            if not self._fits(size_bytes):
                # Blocking free-all: stall the host until the device drains,
                # drop every cached block, then try once more.
                self.num_alloc_retries += 1
                dev.trace_record("retry", None, size_bytes)
                dev.host_wait_until(max(dev.compute_tail, dev.comm_tail))
                self.flush()
                if not self._fits(size_bytes):
                    raise SimulatedOOM(
                        f"allocation of {size_bytes} bytes exceeds capacity "
                        f"{self.capacity_bytes} even after retry "
                        f"(reserved {self.reserved_bytes})",
                        dev.ledger.snapshot())
            self.reserved_bytes += size_bytes
            blk = Block(size_bytes, elements, queue, category, dev.host_time)
        else:
            blk.live = True
            blk.category = category
            blk.last_dep = 0.0
            blk.alloc_time = dev.host_time
        self.live_bytes += size_bytes
        dev.ledger.on_alloc(dev.host_time, category, size_bytes, elements)
        dev.trace_record("alloc", None, size_bytes)
        return blk

    def free(self, dev: "DeviceSim", blk: Block) -> None:
        assert blk.live, "double free"
        dev.host_advance()
        blk.live = False
        blk.free_ready = dev.host_time
        self.live_bytes -= blk.size_bytes
        cache = self._cache.setdefault((blk.queue, blk.size_bytes), [])
        cache.append(blk)
        dev.ledger.on_free(dev.host_time, blk.category, blk.size_bytes,
                           blk.elements)
        dev.trace_record("free", None, blk.size_bytes)
        dev.note_interval(blk)


@dataclass
class DeviceEvent:
    kind: str
    queue: str
    unit: Any
    start: float
    done: float


class DeviceSim:
    """One rank's virtual device: host cursor plus two FIFO queues."""

    def __init__(self, rank: int, cost: CostModel, trace: Trace,
                 allocator: CachingAllocator | None = None):
        self.rank = rank
        self.cost = cost
        self.trace = trace
        self.allocator = allocator or CachingAllocator()
        self.ledger = MemoryLedger()
        self.host_time = 0.0
        self.compute_tail = 0.0
        self.comm_tail = 0.0
        self.events: list[DeviceEvent] = []
        self.unshard_intervals: list[tuple[float, float]] = []

    # -- host ---------------------------------------------------------------

    def host_advance(self, delta: float | None = None) -> None:
        self.host_time += self.cost.delta if delta is None else delta

    def host_wait_until(self, t: float) -> None:
        self.host_time = max(self.host_time, t)

    def trace_record(self, kind: str, unit: Any, nbytes: int) -> None:
        self.trace.record(self.rank, kind, unit, nbytes)

    def note_interval(self, blk: Block) -> None:
        # Virtual live window of an unsharded-parameter buffer: from its
        # allocation to the later of host free and last dependent completion.
        if blk.category == "unsharded_params":
            self.unshard_intervals.append((blk.alloc_time, blk.ready_at))

    # -- device queues ------------------------------------------------------

    def issue_compute(self, flops: float, unit: Any = None,
                      waits: Iterable[DeviceEvent] = (),
                      reads: Iterable[Block] = (),
                      writes: Iterable[Block] = ()) -> DeviceEvent:
        self.host_advance()
        start = max([self.compute_tail, self.host_time]
                    + [w.done for w in waits if w is not None])
        done = start + self.cost.compute_cost(flops)
        ev = DeviceEvent("compute", COMPUTE, unit, start, done)
        self.events.append(ev)
        self.compute_tail = done
        for blk in list(reads) + list(writes):
            blk.note_dependent(done)
        self.trace_record("compute_begin", unit, 0)
        self.trace_record("compute_end", unit, 0)
        return ev

    def issue_comm(self, kind: str, cost: float, unit: Any = None,
                   waits: Iterable[DeviceEvent] = (),
                   reads: Iterable[Block] = (),
                   writes: Iterable[Block] = (),
                   nbytes: int = 0) -> DeviceEvent:
        """A local (non-rendezvous) communication-queue event."""
        self.host_advance()
        start = max([self.comm_tail, self.host_time]
                    + [w.done for w in waits if w is not None])
        done = start + cost
        ev = DeviceEvent(kind, COMM, unit, start, done)
        self.events.append(ev)
        self.comm_tail = done
        for blk in list(reads) + list(writes):
            blk.note_dependent(done)
        self.trace_record(f"{kind}_issue", unit, nbytes)
        self.trace_record(f"{kind}_done", unit, nbytes)
        return ev

    def install_collective(self, kind: str, unit: Any, done: float,
                           start: float) -> DeviceEvent:
        """Called by the fabric at rendezvous resolution."""
        ev = DeviceEvent(kind, COMM, unit, start, done)
        self.events.append(ev)
        self.comm_tail = max(self.comm_tail, done)
        return ev

    def finish_time(self) -> float:
        return max(self.host_time, self.compute_tail, self.comm_tail)


def max_overlap(intervals: Sequence[tuple[float, float]]) -> int:
    """Maximum number of half-open [start, end) intervals alive at once."""
    points: list[tuple[float, int]] = []
    for s, e in intervals:
        points.append((s, 1))
        points.append((e, -1))
    points.sort(key=lambda p: (p[0], p[1]))  # ends before starts at ties
    best = cur = 0
    for _, d in points:
        cur += d
        best = max(best, cur)
    return best


# ---------------------------------------------------------------------------
# constructed scenarios
# ---------------------------------------------------------------------------

@dataclass
class RetryResult:
    retries: int
    makespan: float
    max_inflight: int
    trace: Trace


def retry_experiment(rate_limit: int | None,
                     capacity_elements: int | None = None,
                     unlimited_capacity: bool = False,
                     units: int = 3, psi: int = 8, shard_factor: int = 4,
                     itemsize: int = 8,
                     cost: CostModel | None = None,
                     compute_flops: float = 1500.0) -> RetryResult:
    """Parameter-flow workload on one rank with a fast host.

    Three equal units are unsharded (all-gather), computed, and resharded in
    sequence; capacity defaults to the resident shards plus exactly two
    unsharded buffers, so an unlimited host overruns it on the third
    all-gather while a two-inflight limit never does.
    """
    cost = cost or CostModel(alpha=0.5, beta=1.0 / 64.0, gamma=1e-3,
                             delta=1e-6)
    shard_elements = units * (psi // shard_factor)
    if capacity_elements is None:
        capacity_elements = shard_elements + 2 * psi
    capacity = (None if unlimited_capacity
                else capacity_elements * itemsize)
    trace = Trace()
    dev = DeviceSim(0, cost, trace, CachingAllocator(capacity))
    shards = dev.allocator.alloc(dev, shard_elements * itemsize,
                                 shard_elements, COMPUTE, "sharded_params")
    inflight: list[tuple[int, Block, DeviceEvent]] = []
    for k in range(units):
        if rate_limit is not None:
            while len(inflight) >= rate_limit:
                _, blk, cmp = inflight.pop(0)
                dev.host_wait_until(max(cmp.done, blk.free_ready))
        buf = dev.allocator.alloc(dev, psi * itemsize, psi, COMM,
                                  "unsharded_params")
        ag = dev.issue_comm("AG", cost.collective_cost(psi * itemsize),
                            unit=k, reads=[shards], writes=[buf],
                            nbytes=psi * itemsize)
        cmp = dev.issue_compute(compute_flops, unit=k, waits=[ag],
                                reads=[buf])
        dev.allocator.free(dev, buf)
        inflight.append((k, buf, cmp))
    makespan = dev.finish_time()
    return RetryResult(dev.allocator.num_alloc_retries, makespan,
                       max_overlap(dev.unshard_intervals), trace)


def collective_size_sweep(total_bytes: int, pieces_list: Sequence[int],
                          cost: CostModel | None = None
                          ) -> list[tuple[int, float]]:
    """Total communication time for one volume split into n serial collectives."""
    cost = cost or CostModel()
    out = []
    for pieces in pieces_list:
        per = total_bytes / pieces
        total = sum(cost.collective_cost(per) for _ in range(pieces))
        out.append((pieces, total))
    return out
