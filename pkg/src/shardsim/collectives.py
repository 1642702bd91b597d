"""Simulated multi-rank collective fabric.

Rendezvous all-gather / reduce-scatter / all-reduce over in-process rank
workers, sharded/replicated group construction for hybrid sharding, and exact
per-rank traffic accounting (element counts kept as `fractions.Fraction`).

Rank workers are generators that yield a `CollectiveHandle` whenever they need
a collective's result; two drivers execute them — a deterministic
single-threaded round-robin scheduler and a one-thread-per-rank driver.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Generator, Iterable, Sequence

import numpy as np

ALL_GATHER = "AG"
REDUCE_SCATTER = "RS"
ALL_REDUCE = "AR"


class CollectiveError(ValueError):
    """Contract violation at a collective call site (uneven input, bad group...)."""


class DeadlockError(RuntimeError):
    """Every live rank worker is parked on an unresolved rendezvous."""


# ---------------------------------------------------------------------------
# sharding plan
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShardingPlan:
    """World topology: W ranks in hosts of size G, sharding factor F.

    Ranks are partitioned two ways: `sharded_groups` are W/F consecutive
    blocks of F ranks (each block co-owns one shard set), and
    `replicated_groups` are F strided groups of W/F ranks that hold identical
    shard copies.  Rank r belongs to sharded group r // F and replicated
    group r % F.
    """

    world_size: int
    shard_factor: int
    host_size: int

    def __post_init__(self) -> None:
        w, f, g = self.world_size, self.shard_factor, self.host_size
        if w < 1:
            raise CollectiveError(f"world_size must be >= 1, got {w}")
        if not 1 <= f <= w or w % f != 0:
            raise CollectiveError(
                f"shard_factor {f} must divide world_size {w} (1 <= F <= W)")
        if not 1 <= g <= w or w % g != 0:
            raise CollectiveError(
                f"host_size {g} must divide world_size {w}")

    @property
    def sharded_groups(self) -> list[tuple[int, ...]]:
        f = self.shard_factor
        return [tuple(range(i * f, (i + 1) * f))
                for i in range(self.world_size // f)]

    @property
    def replicated_groups(self) -> list[tuple[int, ...]]:
        f = self.shard_factor
        return [tuple(range(j, self.world_size, f)) for j in range(f)]

    @property
    def num_hosts(self) -> int:
        return self.world_size // self.host_size

    @property
    def strategy(self) -> str:
        if self.shard_factor == 1:
            return "replicate"
        if self.shard_factor == self.world_size:
            return "full"
        return "hybrid"

    def host_of(self, rank: int) -> int:
        return rank // self.host_size

    def sharded_group_of(self, rank: int) -> tuple[int, ...]:
        f = self.shard_factor
        base = (rank // f) * f
        return tuple(range(base, base + f))

    def replicated_group_of(self, rank: int) -> tuple[int, ...]:
        return tuple(range(rank % self.shard_factor, self.world_size,
                           self.shard_factor))

    def spans_hosts(self, group: Sequence[int]) -> bool:
        return len({self.host_of(r) for r in group}) > 1


def build_plan(world_size: int, shard_factor: int,
               host_size: int | None = None) -> ShardingPlan:
    """Validate and build a ShardingPlan; host_size defaults to one host."""
    return ShardingPlan(world_size, shard_factor,
                        world_size if host_size is None else host_size)


# ---------------------------------------------------------------------------
# fabric
# ---------------------------------------------------------------------------

class CollectiveHandle:
    """One in-flight rendezvous.  Resolved when every group member has entered."""

    __slots__ = ("kind", "group", "unit", "content", "entries", "meta",
                 "resolved", "results", "done_time", "events", "reads",
                 "writes", "waits")

    def __init__(self, kind: str, group: tuple[int, ...], unit: Any):
        self.kind = kind
        self.group = group
        self.unit = unit
        self.content: int | None = None  # total logical elements
        self.entries: dict[int, np.ndarray] = {}
        self.meta: dict[int, tuple[Any, ...]] = {}
        self.resolved = False
        self.results: dict[int, np.ndarray] = {}
        self.done_time: float | None = None
        self.events: dict[int, Any] = {}
        self.reads: dict[int, list] = {}
        self.writes: dict[int, list] = {}
        self.waits: dict[int, list] = {}

    def result_for(self, rank: int) -> np.ndarray:
        assert self.resolved, "collective not resolved yet"
        return self.results[rank]

    def event_for(self, rank: int):
        return self.events.get(rank)


class TrafficLedger:
    """Per-rank monotone element counters, exact, keyed by (kind, locality)."""

    def __init__(self) -> None:
        self.counts: dict[tuple[str, str], Fraction] = {}

    def add(self, kind: str, locality: str, amount: Fraction) -> None:
        assert amount >= 0
        key = (kind, locality)
        self.counts[key] = self.counts.get(key, Fraction(0)) + amount

    def total(self, locality: str | None = None) -> Fraction:
        return sum((v for (k, loc), v in self.counts.items()
                    if locality is None or loc == locality), Fraction(0))


class CollectiveFabric:
    """Rendezvous endpoint shared by all rank workers.

    Value semantics are synchronous-at-resolution: the last member to enter a
    collective computes the results for everyone (ascending-rank summation in
    deterministic mode).  If per-rank device simulators are attached, the
    collective's timing is installed on every member's communication queue at
    resolution.
    """

    def __init__(self, plan: ShardingPlan, devices: Sequence | None = None,
                 deterministic: bool = True):
        self.plan = plan
        self.devices = list(devices) if devices is not None else None
        self.deterministic = deterministic
        self.iterations = 0
        self.traffic = [TrafficLedger() for _ in range(plan.world_size)]
        self.misorder_reduce_scatter = False  # verify-sensitivity fault hook
        self._open: dict[tuple[int, ...], list[CollectiveHandle]] = {}
        self._lock = threading.Lock()
        self._cv = threading.Condition(self._lock)

    # -- entry points -------------------------------------------------------

    def all_gather_begin(self, rank: int, group: Sequence[int],
                         local: np.ndarray, unit: Any = None,
                         reads: list | None = None, writes: list | None = None,
                         waits: list | None = None) -> CollectiveHandle:
        return self._begin(ALL_GATHER, rank, group, local, unit, reads, writes,
                           waits)

    def reduce_scatter_begin(self, rank: int, group: Sequence[int],
                             local: np.ndarray, unit: Any = None,
                             reads: list | None = None,
                             writes: list | None = None,
                             waits: list | None = None) -> CollectiveHandle:
        return self._begin(REDUCE_SCATTER, rank, group, local, unit, reads,
                           writes, waits)

    def all_reduce_begin(self, rank: int, group: Sequence[int],
                         local: np.ndarray, unit: Any = None,
                         reads: list | None = None, writes: list | None = None,
                         waits: list | None = None) -> CollectiveHandle:
        return self._begin(ALL_REDUCE, rank, group, local, unit, reads, writes,
                           waits)

    def _begin(self, kind: str, rank: int, group: Sequence[int],
               local: np.ndarray, unit: Any, reads: list | None,
               writes: list | None, waits: list | None = None
               ) -> CollectiveHandle:
        group = tuple(sorted(group))
        if rank not in group:
            raise CollectiveError(f"rank {rank} is not a member of {group}")
        local = np.asarray(local)
        if local.ndim != 1:
            raise CollectiveError(
                f"{kind}: expected a flat 1-d buffer, got shape {local.shape}")
        with self._cv:
            handle = self._join(kind, rank, group, unit)
            self._validate_entry(handle, rank, local)
            handle.entries[rank] = local
            if reads:
                handle.reads[rank] = list(reads)
            if writes:
                handle.writes[rank] = list(writes)
            if waits:
                handle.waits[rank] = [w for w in waits if w is not None]
            if self.devices is not None:
                dev = self.devices[rank]
                dev.host_advance()
                handle.meta[rank] = (dev.host_time,)
                dev.trace_record(f"{kind}_issue", unit,
                                 local.nbytes if kind != ALL_GATHER
                                 else local.nbytes * len(group))
            if len(handle.entries) == len(group):
                self._resolve(handle)
                self._cv.notify_all()
            return handle

    def _join(self, kind: str, rank: int, group: tuple[int, ...],
              unit: Any) -> CollectiveHandle:
        # A rank's k-th call on a group pairs with everyone else's k-th call.
        open_list = self._open.setdefault(group, [])
        for handle in open_list:
            if rank not in handle.entries:
                if handle.kind != kind:
                    raise CollectiveError(
                        f"collective mismatch on group {group}: rank {rank} "
                        f"entered {kind} while peers entered {handle.kind}")
                return handle
        handle = CollectiveHandle(kind, group, unit)
        open_list.append(handle)
        return handle

    def _validate_entry(self, handle: CollectiveHandle, rank: int,
                        local: np.ndarray) -> None:
        n = len(handle.group)
        length = local.size
        if handle.kind == REDUCE_SCATTER and length % n != 0:
            raise CollectiveError(
                f"reduce_scatter: input length {length} not divisible by "
                f"group size {n}")
        content = length * n if handle.kind == ALL_GATHER else length
        if handle.content is None:
            handle.content = content
        elif handle.content != content:
            raise CollectiveError(
                f"{handle.kind} on group {handle.group}: rank {rank} supplied "
                f"{length} elements, peers supplied "
                f"{handle.content // n if handle.kind == ALL_GATHER else handle.content}"
                f" — uneven inputs are rejected, pad explicitly")

    # -- resolution ---------------------------------------------------------

    def _reduce(self, arrays: list[np.ndarray]) -> np.ndarray:
        if self.deterministic:
            acc = np.zeros_like(arrays[0])
            for a in arrays:  # ascending rank order, sequential
                acc = acc + a
            return acc
        while len(arrays) > 1:  # pairwise tree
            arrays = [arrays[i] + arrays[i + 1] if i + 1 < len(arrays)
                      else arrays[i] for i in range(0, len(arrays), 2)]
        return arrays[0].copy()

    def _resolve(self, handle: CollectiveHandle) -> None:
        group = handle.group
        n = len(group)
        ordered = [handle.entries[r] for r in group]
        if handle.kind == ALL_GATHER:
            out = np.concatenate(ordered)
            for r in group:
                handle.results[r] = out  # read-only by convention
        elif handle.kind == REDUCE_SCATTER:
            acc = self._reduce(ordered)
            chunk = acc.size // n
            for pos, r in enumerate(group):
                src = pos if not self.misorder_reduce_scatter else (pos + 1) % n
                handle.results[r] = acc[src * chunk:(src + 1) * chunk].copy()
        else:
            acc = self._reduce(ordered)
            for r in group:
                handle.results[r] = acc
        self._account(handle)
        if self.devices is not None:
            self._install_timing(handle)
        handle.resolved = True
        self._open[group].remove(handle)

    def _account(self, handle: CollectiveHandle) -> None:
        group, n = handle.group, len(handle.group)
        if n == 1:
            return
        content = Fraction(handle.content)
        vol = content * (n - 1) / n
        if handle.kind == ALL_REDUCE:
            vol *= 2
        plan = self.plan
        spanning = plan.spans_hosts(group)
        subset_ar = (handle.kind == ALL_REDUCE and n < plan.world_size)
        for r in group:
            if not spanning:
                self.traffic[r].add(handle.kind, "intra", vol)
            elif subset_ar:
                # A replicated-group all-reduce in a hybrid plan: the shard
                # content was already pre-reduced host_size-fold inside each
                # host, so the boundary-crossing volume per rank is 1/G of the
                # equivalent world-wide all-reduce of the full content F*B.
                cross = Fraction(2 * handle.content * plan.shard_factor
                                 * (plan.world_size - 1),
                                 plan.num_hosts * plan.world_size)
                self.traffic[r].add(handle.kind, "cross", cross)
            else:
                self.traffic[r].add(handle.kind, "cross", vol)

    def _install_timing(self, handle: CollectiveHandle) -> None:
        n = len(handle.group)
        itemsize = next(iter(handle.entries.values())).itemsize
        ring_bytes = float(handle.content) * (n - 1) / n * itemsize
        if handle.kind == ALL_REDUCE:
            ring_bytes *= 2
        devs = [self.devices[r] for r in handle.group]
        # Host-issue time at entry, but the *current* comm-queue tail: any
        # event installed on a member's queue since its entry was an earlier
        # collective, which must complete first (FIFO per queue).  Explicit
        # waits (e.g. the compute event producing a gradient) also gate start.
        start = max(max([handle.meta[r][0], self.devices[r].comm_tail]
                        + [w.done for w in handle.waits.get(r, [])])
                    for r in handle.group)
        cost = devs[0].cost.collective_cost(ring_bytes) if n > 1 else 0.0
        done = start + cost
        handle.done_time = done
        for r in handle.group:
            dev = self.devices[r]
            ev = dev.install_collective(handle.kind, handle.unit, done,
                                        start=start)
            handle.events[r] = ev
            for blk in handle.reads.get(r, []) + handle.writes.get(r, []):
                blk.note_dependent(done)
            content_bytes = handle.content * itemsize
            dev.trace_record(f"{handle.kind}_done", handle.unit, content_bytes)

    # -- misc ---------------------------------------------------------------

    def mark_iteration(self) -> None:
        self.iterations += 1

    def wait_resolved_blocking(self, handle: CollectiveHandle) -> None:
        """Thread-driver wait; the round-robin driver never blocks here."""
        with self._cv:
            while not handle.resolved:
                self._cv.wait()


# ---------------------------------------------------------------------------
# composed reduction for hybrid plans
# ---------------------------------------------------------------------------

def hybrid_reduce_task(fabric: CollectiveFabric, rank: int,
                       grad: np.ndarray
                       ) -> Generator[CollectiveHandle, np.ndarray, np.ndarray]:
    """Reduce an unsharded gradient to this rank's shard of the global sum.

    reduce_scatter inside the rank's sharded group, then all_reduce across its
    replicated group.  Degenerates to a plain reduce_scatter at F=W and a
    plain all_reduce at F=1.
    """
    plan = fabric.plan
    if plan.shard_factor == 1:
        out = yield fabric.all_reduce_begin(rank, plan.replicated_group_of(rank),
                                            grad)
        return np.array(out, copy=True)
    partial = yield fabric.reduce_scatter_begin(
        rank, plan.sharded_group_of(rank), grad)
    if plan.shard_factor == plan.world_size:
        return partial
    out = yield fabric.all_reduce_begin(rank, plan.replicated_group_of(rank),
                                        partial)
    return np.array(out, copy=True)


# ---------------------------------------------------------------------------
# traffic report
# ---------------------------------------------------------------------------

def predicted_cross_host_traffic(plan: ShardingPlan,
                                 model_elements: int) -> Fraction:
    """Closed-form per-GPU cross-host elements for one training iteration."""
    w, g, m = plan.world_size, plan.num_hosts, model_elements
    if w == 1:
        return Fraction(0)
    if plan.strategy == "replicate":
        return Fraction(2 * m * (w - 1), w)
    if plan.strategy == "full":
        return Fraction(3 * m * (w - 1), w)
    return Fraction(2 * m * (w - 1), g * w)


def traffic_report(fabric: CollectiveFabric, plan: ShardingPlan,
                   model_elements: int) -> dict[str, Fraction]:
    """Measured-vs-predicted per-GPU cross-host traffic, per iteration."""
    if fabric.iterations == 0:
        raise RuntimeError(
            "traffic_report requires at least one completed training iteration")
    w = plan.world_size
    measured = sum((fabric.traffic[r].total("cross") for r in range(w)),
                   Fraction(0)) / (w * fabric.iterations)
    intra = sum((fabric.traffic[r].total("intra") for r in range(w)),
                Fraction(0)) / (w * fabric.iterations)
    return {
        "measured_cross_per_gpu": measured,
        "measured_intra_per_gpu": intra,
        "predicted_cross_per_gpu": predicted_cross_host_traffic(
            plan, model_elements),
    }


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------

@dataclass
class RankTask:
    rank: int
    gen: Generator[CollectiveHandle, Any, Any]
    waiting_on: CollectiveHandle | None = None
    done: bool = False
    result: Any = None


def _advance(task: RankTask, value: Any) -> None:
    try:
        if task.waiting_on is None and value is None:
            task.waiting_on = next(task.gen)
        else:
            task.waiting_on = task.gen.send(value)
    except StopIteration as stop:
        task.done = True
        task.result = stop.value
        task.waiting_on = None


def run_round_robin(tasks: Iterable[RankTask]) -> dict[int, Any]:
    """Deterministic cooperative scheduler; detects all-parked deadlock."""
    tasks = list(tasks)
    for t in tasks:
        _advance(t, None)
    while True:
        live = [t for t in tasks if not t.done]
        if not live:
            break
        progressed = False
        for t in live:
            h = t.waiting_on
            if h is not None and h.resolved:
                _advance(t, h.result_for(t.rank))
                progressed = True
        if not progressed:
            states = ", ".join(
                f"rank {t.rank} parked on {t.waiting_on.kind}"
                f"(group={t.waiting_on.group}, unit={t.waiting_on.unit})"
                for t in live)
            raise DeadlockError(
                f"rendezvous deadlock: every live worker is parked — {states}")
    return {t.rank: t.result for t in tasks}


def run_threaded(tasks: Iterable[RankTask],
                 fabric: CollectiveFabric) -> dict[int, Any]:
    """One OS thread per rank; rendezvous via the fabric's condition variable."""
    tasks = list(tasks)
    errors: list[BaseException] = []

    def drive(task: RankTask) -> None:
        try:
            value = None
            while True:
                _advance(task, value)
                if task.done:
                    return
                fabric.wait_resolved_blocking(task.waiting_on)
                value = task.waiting_on.result_for(task.rank)
        except BaseException as exc:  # surface in the joining thread
            errors.append(exc)

    threads = [threading.Thread(target=drive, args=(t,), daemon=True)
               for t in tasks]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise errors[0]
    return {t.rank: t.result for t in tasks}


def run_symmetric(fabric: CollectiveFabric,
                  fn: Callable[[int], Generator],
                  ranks: Sequence[int] | None = None,
                  threaded: bool = False) -> dict[int, Any]:
    """Run fn(rank) as a worker on every rank and collect return values."""
    ranks = range(fabric.plan.world_size) if ranks is None else ranks
    tasks = [RankTask(r, fn(r)) for r in ranks]
    if threaded:
        return run_threaded(tasks, fabric)
    return run_round_robin(tasks)
