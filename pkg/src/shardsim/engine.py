"""The sharded training runtime.

Per-unit unshard -> compute -> reshard orchestration for forward and backward
over simulated ranks, covering the full strategy surface: full / hybrid /
replicated sharding, reshard-after-forward on or off, backward and forward
prefetching, an inflight-unshard rate limiter, gradient accumulation with and
without per-micro-batch communication, mixed precision with a sharded
gradient scaler, and multiple forwards per step via materialization
reference counts.

One worker (a generator) runs per rank; workers interact only through the
collective fabric.  Within a rank the host cursor issues events onto the two
device queues owned by its DeviceSim; every allocation, collective, compute
kernel and optimizer step lands in the shared trace.

`local_train` is the single-process reference implementation the sharded
runs are compared against.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Generator, Iterable, Sequence

import numpy as np

from .collectives import (
    ALL_GATHER,
    ALL_REDUCE,
    REDUCE_SCATTER,
    CollectiveFabric,
    CollectiveHandle,
    RankTask,
    ShardingPlan,
    run_round_robin,
    run_threaded,
    traffic_report,
)
from .flatparam import (
    SHARDED,
    UNSHARDED,
    FlatParameter,
    UnitLayout,
    build_unit_layouts,
    writeback_grad,
)
from .memsim import COMM, COMPUTE, CachingAllocator, CostModel, DeviceSim, Trace
from .numerics import (
    DTYPES,
    ITEMSIZE,
    DenseTensor,
    LayeredModel,
    ModelSpec,
    batch_stream,
    make_optimizer,
    mse_loss,
)
from . import deferred_init as dinit

RAF = "RAF"
NRAF = "NRAF"

ACCUM_OFF = "off"
ACCUM_WITH_COMM = "with_comm"
ACCUM_NO_COMM = "no_comm"


class EngineError(RuntimeError):
    pass


class StaticOrderError(EngineError):
    """Forward prefetch needs a static graph; the observed unit order moved."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PrecisionPolicy:
    """Uniform full precision, or mixed: compute/communicate low, master full.

    The optimizer always consumes full precision; with `mixed` the gathered
    parameter buffers, activations and gradients are low precision, and
    collective payloads are low unless `reduce_in_low` is off.
    """

    mixed: bool = False
    reduce_in_low: bool = True

    @property
    def compute_dtype(self) -> str:
        return "low" if self.mixed else "full"

    @property
    def reduce_dtype(self) -> str:
        return "low" if (self.mixed and self.reduce_in_low) else "full"

    @property
    def k_full(self) -> int:
        return ITEMSIZE["full"]

    @property
    def k_low(self) -> int:
        return ITEMSIZE["low"]


@dataclass
class ScalerConfig:
    # Growth/backoff constants are conventional defaults, not normative.
    init_scale: float = 65536.0
    growth_factor: float = 2.0
    backoff_factor: float = 0.5
    growth_interval: int = 2000


class ShardedGradScaler:
    """Loss-scale state machine for sharded training.

    Each rank checks only its own gradient shard; the engine combines the
    per-rank found_inf flags with a world all-reduce (a sum over {0,1} flags
    carries the same verdict as a max), so every rank takes the identical
    step-or-skip decision and the per-rank scaler states never diverge.
    """

    def __init__(self, cfg: ScalerConfig | None = None):
        self.cfg = cfg or ScalerConfig()
        self.scale = float(self.cfg.init_scale)
        self._growth_tracker = 0
        self.steps_skipped = 0

    def update(self, found_inf: bool) -> None:
        if found_inf:
            self.scale *= self.cfg.backoff_factor
            self._growth_tracker = 0
            self.steps_skipped += 1
        else:
            self._growth_tracker += 1
            if self._growth_tracker >= self.cfg.growth_interval:
                self.scale *= self.cfg.growth_factor
                self._growth_tracker = 0
        if not math.isfinite(self.scale) or self.scale <= 0.0:
            raise EngineError(f"gradient scale became non-positive or "
                              f"non-finite: {self.scale}")


class ExecutionOrder:
    """Observed forward unit order for one iteration; backward is its reverse."""

    def __init__(self) -> None:
        self.order: list[int] = []
        self._seen: set[int] = set()

    def record(self, unit: int) -> None:
        if unit in self._seen:
            raise EngineError(f"unit {unit} materialized twice in one forward")
        self._seen.add(unit)
        self.order.append(unit)

    def backward_order(self) -> list[int]:
        return list(reversed(self.order))


@dataclass
class EngineConfig:
    plan: ShardingPlan
    reshard_after_forward: str = RAF
    backward_prefetch: bool = True
    forward_prefetch: bool = False
    rate_limit: int | None = 2
    precision: PrecisionPolicy = field(default_factory=PrecisionPolicy)
    accumulation: str = ACCUM_OFF
    accumulation_steps: int = 1
    keep_outermost_unsharded: bool = True
    loss_reduction: str = "mean"
    optimizer: str = "sgd"
    lr: float | None = None
    use_scaler: bool = False
    scaler: ScalerConfig = field(default_factory=ScalerConfig)
    forwards_per_micro: int = 1
    init_path: str = "deferred"
    capacity_bytes: int | None = None
    cost: CostModel = field(default_factory=CostModel)
    deterministic: bool = True

    def __post_init__(self) -> None:
        if self.reshard_after_forward not in (RAF, NRAF):
            raise EngineError(
                f"reshard_after_forward must be {RAF} or {NRAF}, got "
                f"{self.reshard_after_forward!r}")
        if self.accumulation not in (ACCUM_OFF, ACCUM_WITH_COMM,
                                     ACCUM_NO_COMM):
            raise EngineError(
                f"accumulation must be one of off/with_comm/no_comm, got "
                f"{self.accumulation!r}")
        if self.accumulation == ACCUM_OFF and self.accumulation_steps != 1:
            raise EngineError("accumulation off requires accumulation_steps=1")
        if self.accumulation_steps < 1:
            raise EngineError("accumulation_steps must be >= 1")
        if self.rate_limit is not None and self.rate_limit < 1:
            raise EngineError("rate_limit must be >= 1 (or None for no limit)")
        if self.forwards_per_micro < 1:
            raise EngineError("forwards_per_micro must be >= 1")
        if self.init_path not in ("deferred", "device", "streamed"):
            raise EngineError(f"unknown init_path {self.init_path!r}")


# ---------------------------------------------------------------------------
# per-rank runtime state
# ---------------------------------------------------------------------------

class _InflightWindow:
    """One issued gather, open until its first consuming compute completes."""

    __slots__ = ("unit", "done")

    def __init__(self, unit: int):
        self.unit = unit
        self.done: float | None = None  # completion of the consuming compute


class _UnitRuntime:
    """One rank's live state for one unit; everything transient lives here."""

    __slots__ = ("fp", "layout", "shard_block", "opt_state", "opt_block",
                 "live", "block", "event", "pending", "uses", "compute_done",
                 "window",
                 "grad", "grad_block", "grad_pending", "accum", "accum_block",
                 "accum_unsharded", "accum_unsharded_block")

    def __init__(self, fp: FlatParameter, layout: UnitLayout):
        self.fp = fp
        self.layout = layout
        self.shard_block = None
        self.opt_state: dict | None = None
        self.opt_block = None
        # materialization
        self.live: np.ndarray | None = None   # buffer compute reads
        self.block = None                      # device block behind `live`
        self.event = None                      # device event producing `live`
        self.pending = None                    # (handle, block, buf) prefetch
        self.uses = 0                          # outstanding materialization uses
        self.compute_done: float | None = None
        self.window: _InflightWindow | None = None
        # gradients
        self.grad: np.ndarray | None = None    # unsharded grad, current micro
        self.grad_block = None
        self.grad_pending = 0                  # backward visits before reduce
        self.accum: np.ndarray | None = None   # sharded accumulator (full)
        self.accum_block = None
        self.accum_unsharded: np.ndarray | None = None  # no_comm accumulator
        self.accum_unsharded_block = None


class _RankRuntime:
    def __init__(self, rank: int, dev: DeviceSim, model: LayeredModel,
                 units: list[_UnitRuntime], optimizer,
                 scaler: ShardedGradScaler | None):
        self.rank = rank
        self.dev = dev
        self.model = model
        self.units = units
        self.optimizer = optimizer
        self.scaler = scaler
        # Limiter windows, oldest first: gathers whose consuming compute the
        # host has not yet observed completing.
        self.inflight: list[_InflightWindow] = []
        self.events: list[tuple[int, str, Any]] = []  # (step, kind, unit)


@dataclass
class RankStepResult:
    micro_losses: list[float]
    stepped: bool
    found_inf: bool


@dataclass
class StepResult:
    step: int
    loss: float                 # mean over ranks of mean micro-batch loss
    rank_losses: list[float]
    stepped: bool
    found_inf: bool
    scale: float | None
    sim_time: float             # simulated wall time this step added
    makespan: float             # cumulative simulated finish time
    event_counts: dict[str, int]


# ---------------------------------------------------------------------------
# the session
# ---------------------------------------------------------------------------

class Session:
    """A multi-rank training world: devices, fabric, flat parameters, steps."""

    def __init__(self, spec: ModelSpec, config: EngineConfig, seed: int = 0):
        self.spec = spec
        self.config = config
        self.seed = seed
        self.plan = config.plan
        w = self.plan.world_size

        self.trace = Trace()
        self.devices = [DeviceSim(r, config.cost, self.trace,
                                  CachingAllocator(config.capacity_bytes))
                        for r in range(w)]
        self.fabric = CollectiveFabric(self.plan, devices=self.devices,
                                       deterministic=config.deterministic)
        self.layouts = build_unit_layouts(spec.param_shapes(),
                                          spec.unit_param_names(),
                                          self.plan.shard_factor)
        self.num_units = len(self.layouts)
        fake = dinit.record(spec)
        k_full = ITEMSIZE["full"]

        self.ranks: list[_RankRuntime] = []
        self.host_arenas: list = []
        for r in range(w):
            dev = self.devices[r]
            units, fps = [], []
            for lay in self.layouts:
                fp = FlatParameter(lay, self.plan, r, dtype="full")
                ru = _UnitRuntime(fp, lay)
                ru.shard_block = dev.allocator.alloc(
                    dev, lay.shard_numel * k_full, lay.shard_numel, COMPUTE,
                    "sharded_params")
                units.append(ru)
                fps.append(fp)
            if config.init_path == "deferred":
                dinit.materialize_by_unit(fake, fps, seed, dev)
            elif config.init_path == "device":
                dinit.init_unsharded_on_device(fake, fps, seed, dev)
            else:
                self.host_arenas.append(
                    dinit.init_streamed_from_host(fake, fps, seed, dev))
            opt = make_optimizer(config.optimizer, config.lr)
            for ru in units:
                n = ru.layout.shard_numel
                ru.opt_state = opt.init_state(n)
                state_elems = opt.state_elements(n)
                if state_elems:
                    ru.opt_block = dev.allocator.alloc(
                        dev, state_elems * k_full, state_elems, COMPUTE,
                        "optimizer_state")
            scaler = ShardedGradScaler(config.scaler) if config.use_scaler \
                else None
            model = LayeredModel(spec, {})  # views installed on materialize
            self.ranks.append(_RankRuntime(r, dev, model, units, opt, scaler))

        # Initialization materializes at full precision; archive its peaks so
        # steady-state training peaks are measured on their own.
        self.init_peaks = [dev.ledger.reset_peaks() for dev in self.devices]

        self.step_count = 0
        self.prev_forward_order: list[int] | None = None
        self.order_hook: Callable[[int], Sequence[int]] | None = None
        self.inject_inf: set[tuple[int, int]] = set()  # {(rank, step)}
        self.results: list[StepResult] = []

    # -- ordering -----------------------------------------------------------

    def _order_for(self, step: int) -> list[int]:
        if self.order_hook is not None:
            order = list(self.order_hook(step))
            if sorted(order) != list(range(self.num_units)):
                raise EngineError(f"order hook returned {order}, not a "
                                  f"permutation of {self.num_units} units")
            return order
        return list(range(self.num_units))

    # -- public driving -----------------------------------------------------

    def train_step(self, micro_batches: Sequence[tuple[np.ndarray, np.ndarray]],
                   threaded: bool = False) -> StepResult:
        cfg = self.config
        if len(micro_batches) != cfg.accumulation_steps:
            raise EngineError(
                f"expected {cfg.accumulation_steps} micro-batches per step "
                f"(accumulation {cfg.accumulation}), got {len(micro_batches)}")
        w = self.plan.world_size
        for x, y in micro_batches:
            if x.shape[0] % w != 0:
                raise EngineError(
                    f"batch size {x.shape[0]} not divisible by world size {w}")
        step = self.step_count
        order = self._order_for(step)
        before = max(d.finish_time() for d in self.devices)
        trace_start = len(self.trace.records)

        tasks = []
        for rt in self.ranks:
            per = micro_batches[0][0].shape[0] // w
            slices = [(x[rt.rank * per:(rt.rank + 1) * per],
                       y[rt.rank * per:(rt.rank + 1) * per])
                      for x, y in micro_batches]
            tasks.append(RankTask(rt.rank,
                                  self._rank_step(rt, slices, step, order)))
        if threaded:
            results = run_threaded(tasks, self.fabric)
        else:
            results = run_round_robin(tasks)

        self.fabric.mark_iteration()
        self.prev_forward_order = order
        self.step_count += 1

        per_rank: list[RankStepResult] = [results[r] for r in range(w)]
        assert len({p.stepped for p in per_rank}) == 1, \
            "ranks disagree on the step verdict"
        rank_losses = [float(np.mean(p.micro_losses)) for p in per_rank]
        after = max(d.finish_time() for d in self.devices)
        counts: dict[str, int] = {}
        for rec in self.trace.records[trace_start:]:
            if rec.kind.endswith("_issue"):
                base = rec.kind[:-len("_issue")]
                counts[base] = counts.get(base, 0) + 1
        result = StepResult(
            step=step,
            loss=float(np.mean(rank_losses)),
            rank_losses=rank_losses,
            stepped=per_rank[0].stepped,
            found_inf=per_rank[0].found_inf,
            scale=self.ranks[0].scaler.scale if self.ranks[0].scaler else None,
            sim_time=after - before,
            makespan=after,
            event_counts=counts,
        )
        self.results.append(result)
        return result

    def run(self, steps: int, batch: int, regime: str = "integer",
            threaded: bool = False) -> list[StepResult]:
        """Drive `steps` optimizer steps from the deterministic data stream."""
        k = self.config.accumulation_steps
        stream = batch_stream(self.seed, steps * k, batch, self.spec.dims[0],
                              self.spec.dims[-1], regime)
        out = []
        for _ in range(steps):
            micro = [next(stream) for _ in range(k)]
            out.append(self.train_step(micro, threaded=threaded))
        return out

    # -- the per-rank worker ------------------------------------------------

    def _rank_step(self, rt: _RankRuntime,
                   micro_batches: list[tuple[np.ndarray, np.ndarray]],
                   step: int, order: list[int]
                   ) -> Generator[CollectiveHandle, np.ndarray,
                                  RankStepResult]:
        cfg = self.config
        dev = rt.dev
        w = self.plan.world_size
        k = len(micro_batches)
        compute = cfg.precision.compute_dtype
        item = ITEMSIZE[compute]
        prefetch_plan = (self.prev_forward_order
                         if cfg.forward_prefetch else None)
        micro_losses: list[float] = []

        for m, (x, y) in enumerate(micro_batches):
            final = (m == k - 1)
            batch = x.shape[0]
            # ---------------- forward pass(es) ----------------
            passes = []  # (ExecutionOrder, caches by unit, dpred) per forward
            loss_sum = 0.0
            for _ in range(cfg.forwards_per_micro):
                observed = ExecutionOrder()
                caches: dict[int, tuple[list, Any]] = {}
                h = x.astype(DTYPES[compute], copy=False)
                for pos, u in enumerate(order):
                    if prefetch_plan is not None and order[pos] != \
                            prefetch_plan[pos]:
                        raise StaticOrderError(
                            f"forward prefetch assumes a static graph: step "
                            f"{step} visited unit {order[pos]} at position "
                            f"{pos} where the previous iteration ran unit "
                            f"{prefetch_plan[pos]}")
                    yield from self._ensure_unsharded(rt, u, step)
                    observed.record(u)
                    if prefetch_plan is not None and pos + 1 < len(order):
                        self._try_prefetch(rt, prefetch_plan[pos + 1])
                    ru = rt.units[u]
                    act_elems = rt.model.unit_activation_elements(u, batch)
                    act_blk = dev.allocator.alloc(
                        dev, act_elems * item, act_elems, COMPUTE,
                        "activations")
                    ev = dev.issue_compute(
                        rt.model.unit_flops(u, batch), unit=u,
                        waits=[ru.event],
                        reads=[ru.block] if ru.block is not None else [],
                        writes=[act_blk])
                    ru.compute_done = ev.done
                    self._close_window(ru, ev.done)
                    h, cache = rt.model.forward_unit(u, h)
                    caches[u] = (cache, act_blk)
                    self._release_use(rt, u, phase="forward",
                                      outermost=order[-1])
                loss, dpred = mse_loss(h.astype(np.float64), y,
                                       cfg.loss_reduction)
                if rt.scaler is not None:
                    dpred = dpred * rt.scaler.scale
                loss_sum += loss
                passes.append((observed, caches, dpred))
            micro_losses.append(loss_sum)

            # ---------------- backward pass(es) ----------------
            for u in order:
                rt.units[u].grad_pending = cfg.forwards_per_micro
            for observed, caches, dpred in reversed(passes):
                bwd = observed.backward_order()
                dout = dpred.astype(DTYPES[compute], copy=False)
                for pos, u in enumerate(bwd):
                    ru = rt.units[u]
                    yield from self._ensure_unsharded(rt, u, step)
                    cache, act_blk = caches[u]
                    ev = dev.issue_compute(
                        rt.model.unit_flops(u, batch, backward=True), unit=u,
                        waits=[ru.event],
                        reads=([ru.block] if ru.block is not None else [])
                        + [act_blk])
                    ru.compute_done = ev.done
                    self._close_window(ru, ev.done)
                    dout, unit_grads = rt.model.backward_unit(u, cache, dout)
                    if ru.grad is None:
                        psi = ru.layout.psi
                        ru.grad_block = dev.allocator.alloc(
                            dev, psi * item, psi, COMPUTE, "grads")
                        ru.grad = np.zeros(psi, dtype=DTYPES[compute])
                    flat, _ = writeback_grad(ru.layout, unit_grads,
                                             dtype=compute)
                    ru.grad += flat
                    ru.grad_block.note_dependent(ev.done)
                    dev.allocator.free(dev, act_blk)
                    ru.grad_pending -= 1
                    finalized = ru.grad_pending == 0
                    if finalized:
                        rt.events.append((step, "grad_finalized", u))
                        if final and u == 0 and \
                                (rt.rank, step) in self.inject_inf:
                            ru.grad[0] = np.inf
                    if cfg.backward_prefetch and pos + 1 < len(bwd):
                        self._try_prefetch(rt, bwd[pos + 1])
                    if finalized:
                        if cfg.accumulation == ACCUM_NO_COMM:
                            self._accumulate_local(rt, u)
                            if final:
                                yield from self._reduce_unit(
                                    rt, u, rt.units[u].accum_unsharded, step,
                                    ev)
                                self._drop_local_accum(rt, u)
                        else:  # off / with_comm reduce every micro-batch
                            yield from self._reduce_unit(rt, u, ru.grad, step,
                                                         ev)
                        dev.allocator.free(dev, ru.grad_block)
                        ru.grad = None
                        ru.grad_block = None
                    self._release_use(rt, u, phase="backward",
                                      outermost=order[-1])

        # ---------------- epilogue: scaler, verdict, optimizer ----------------
        found_inf = False
        if rt.scaler is not None:
            inv = 1.0 / rt.scaler.scale
            flag = 0.0
            for ru in rt.units:
                ru.accum *= inv
                if not np.isfinite(ru.accum).all():
                    flag = 1.0
            world = tuple(range(w))
            handle = self.fabric.all_reduce_begin(
                rt.rank, world, np.array([flag], dtype=np.float64))
            total = yield handle
            found_inf = bool(total[0] > 0.0)

        stepped = not found_inf
        if stepped:
            for ru in rt.units:
                if ru.accum is None:
                    raise EngineError(
                        f"unit {ru.layout.unit_id}: optimizer step without a "
                        f"reduced gradient")
                rt.optimizer.step(ru.fp.sharded, ru.accum, ru.opt_state)
            rt.events.append((step, "opt_step", None))
            dev.trace_record("step", None, 0)
        if rt.scaler is not None:
            rt.scaler.update(found_inf)
        for ru in rt.units:  # drop the window's accumulators
            if ru.accum_block is not None:
                dev.allocator.free(dev, ru.accum_block)
            ru.accum = None
            ru.accum_block = None
        # rt.inflight deliberately survives the step: gathers the host issued
        # near the end still occupy the window when the next step begins.
        return RankStepResult(micro_losses, stepped, found_inf)

    # -- materialization ----------------------------------------------------

    def _ensure_unsharded(self, rt: _RankRuntime, u: int, step: int
                          ) -> Generator[CollectiveHandle, np.ndarray, None]:
        """Make unit u's parameters readable; parks on the gather if needed."""
        ru = rt.units[u]
        if ru.live is not None:
            ru.uses += 1
            return
        cfg = self.config
        mixed = cfg.precision.mixed
        if ru.pending is not None:
            handle, blk, buf = ru.pending
            ru.pending = None
            out = yield handle
            buf[:] = out
            ru.event = handle.event_for(rt.rank)
        elif self.plan.shard_factor == 1 and not mixed:
            # Replication: shard == whole parameter, nothing moves.
            ru.fp.set_unsharded(None)
            ru.live = ru.fp.sharded
            ru.block = None
            ru.event = None
            ru.uses = 1
            rt.model.params.update(ru.fp.views(ru.live))
            return
        else:
            self._limiter_acquire(rt)
            blk, buf, handle = self._issue_unshard(rt, u)
            if handle is not None:
                out = yield handle
                buf[:] = out
                ru.event = handle.event_for(rt.rank)
        ru.live = buf
        ru.block = blk
        if not mixed and ru.fp.state == SHARDED:
            ru.fp.set_unsharded(buf)
        ru.uses = 1
        rt.model.params.update(ru.fp.views(buf))
        return

    def _issue_unshard(self, rt: _RankRuntime, u: int):
        """Allocate the gathered buffer and enter the all-gather (no wait)."""
        ru = rt.units[u]
        dev = rt.dev
        cfg = self.config
        mixed = cfg.precision.mixed
        compute = cfg.precision.compute_dtype
        psi = ru.layout.psi
        item = ITEMSIZE[compute]
        ru.compute_done = None  # this materialization not yet consumed
        ru.window = None
        if self.plan.shard_factor == 1:
            # mixed + replication: a local full->low cast, no collective
            blk = dev.allocator.alloc(dev, psi * item, psi, COMPUTE,
                                      "unsharded_params")
            buf = np.empty(psi, dtype=DTYPES[compute])
            buf[:] = ru.fp.sharded
            ev = dev.issue_compute(0.0, unit=u, reads=[ru.shard_block],
                                   writes=[blk])
            ru.event = ev
            return blk, buf, None
        payload = (ru.fp.sharded.astype(DTYPES["low"]) if mixed
                   else ru.fp.sharded)
        blk = dev.allocator.alloc(dev, psi * item, psi, COMM,
                                  "unsharded_params")
        buf = np.empty(psi, dtype=DTYPES[compute])
        handle = self.fabric.all_gather_begin(
            rt.rank, self.plan.sharded_group_of(rt.rank), payload, unit=u,
            reads=[ru.shard_block], writes=[blk])
        ru.window = _InflightWindow(u)
        rt.inflight.append(ru.window)
        return blk, buf, handle

    @staticmethod
    def _close_window(ru: _UnitRuntime, done: float) -> None:
        """First consuming compute issued: stamp when the host may retire the
        gather's limiter window. The window stays queued until the limiter
        actually waits that long; only then has the host *observed* it."""
        if ru.window is not None:
            ru.window.done = done
            ru.window = None

    def _try_prefetch(self, rt: _RankRuntime, u: int) -> None:
        """Unshard hint for the next unit in the schedule. Honors the rate
        limiter by waiting like any other issue; skipped only when the front
        of the window is an unconsumed gather (nothing to wait on yet), so a
        tight limit degrades toward the serial schedule instead of
        deadlocking."""
        ru = rt.units[u]
        if ru.live is not None or ru.pending is not None:
            return
        if self.plan.shard_factor == 1:
            return
        self._limiter_acquire(rt)
        limit = self.config.rate_limit
        if limit is not None and len(rt.inflight) >= limit:
            return
        blk, buf, handle = self._issue_unshard(rt, u)
        ru.pending = (handle, blk, buf)

    def _limiter_acquire(self, rt: _RankRuntime) -> None:
        """Block the issuing worker until inflight unshards < rate_limit.

        A gather occupies the window from issue until the host has observed
        the completion of its first consuming compute — observation means the
        host clock actually reaches that completion time, exactly the
        event-wait a real producer thread performs. Waiting on the oldest
        entry advances only this rank's host clock, never another rank, so
        the wait cannot deadlock the rendezvous. An unconsumed gather at the
        front (its compute not yet issued) is unwaitable; the cap is allowed
        to overshoot there rather than stall forever.
        """
        limit = self.config.rate_limit
        if limit is None:
            return
        now = rt.dev.host_time
        while rt.inflight and rt.inflight[0].done is not None \
                and rt.inflight[0].done <= now:
            rt.inflight.pop(0)  # already elapsed: free of charge
        while len(rt.inflight) >= limit:
            oldest = rt.inflight[0]
            if oldest.done is None:
                break  # nothing measurable to wait on yet; stay live
            rt.dev.host_wait_until(oldest.done)
            rt.inflight.pop(0)

    def _release_use(self, rt: _RankRuntime, u: int, phase: str,
                     outermost: int) -> None:
        ru = rt.units[u]
        ru.uses -= 1
        if ru.uses > 0:
            return
        if phase == "forward":
            if self.config.reshard_after_forward == NRAF:
                return  # keep through backward
            if self.config.keep_outermost_unsharded and u == outermost:
                return  # the outermost unit starts backward immediately
        self._reshard(rt, u)

    def _reshard(self, rt: _RankRuntime, u: int) -> None:
        ru = rt.units[u]
        for o in ru.layout.originals:
            rt.model.params.pop(o.name, None)
        if ru.fp.state == UNSHARDED:
            ru.fp.shard()
        if ru.block is not None:
            rt.dev.allocator.free(rt.dev, ru.block)
        ru.live = None
        ru.block = None
        ru.event = None

    # -- gradient reduction -------------------------------------------------

    def _accumulate_local(self, rt: _RankRuntime, u: int) -> None:
        """no_comm: fold this micro-batch's unsharded grad into the local
        full-precision accumulator; no communication happens here."""
        ru = rt.units[u]
        if ru.accum_unsharded is None:
            psi = ru.layout.psi
            k_full = ITEMSIZE["full"]
            ru.accum_unsharded_block = rt.dev.allocator.alloc(
                rt.dev, psi * k_full, psi, COMPUTE, "grads")
            ru.accum_unsharded = np.zeros(psi, dtype=np.float64)
        ru.accum_unsharded += ru.grad

    def _drop_local_accum(self, rt: _RankRuntime, u: int) -> None:
        ru = rt.units[u]
        rt.dev.allocator.free(rt.dev, ru.accum_unsharded_block)
        ru.accum_unsharded = None
        ru.accum_unsharded_block = None

    def _reduce_unit(self, rt: _RankRuntime, u: int, grad: np.ndarray,
                     step: int, grad_event
                     ) -> Generator[CollectiveHandle, np.ndarray, None]:
        """Reduce an unsharded gradient to this rank's reduced shard and fold
        it into the unit's full-precision accumulator.

        reduce_scatter inside the sharded group, then (hybrid) all_reduce
        across the replicated group; replication degenerates to a single
        all_reduce.  The mean over the data-parallel degree W is taken
        post-reduction in full precision.
        """
        ru = rt.units[u]
        if ru.grad_pending != 0:
            raise EngineError(
                f"unit {u}: gradient reduction issued before the gradient was "
                f"finalized ({ru.grad_pending} backward visits outstanding)")
        cfg = self.config
        plan = self.plan
        reduce_dtype = cfg.precision.reduce_dtype
        payload = grad.astype(DTYPES[reduce_dtype], copy=False)
        if ru.accum is None:
            n = ru.layout.shard_numel
            k_full = ITEMSIZE["full"]
            ru.accum_block = rt.dev.allocator.alloc(
                rt.dev, n * k_full, n, COMPUTE, "grads")
            ru.accum = np.zeros(n, dtype=np.float64)
        reads = [ru.grad_block] if ru.grad_block is not None else []
        if plan.shard_factor > 1:
            rt.events.append((step, "reduce_issue", u))
            handle = self.fabric.reduce_scatter_begin(
                rt.rank, plan.sharded_group_of(rt.rank), payload, unit=u,
                reads=reads, writes=[ru.accum_block], waits=[grad_event])
            out = yield handle
            if plan.shard_factor < plan.world_size:
                rt.events.append((step, "reduce_stage2", u))
                handle = self.fabric.all_reduce_begin(
                    rt.rank, plan.replicated_group_of(rt.rank), out, unit=u,
                    writes=[ru.accum_block],
                    waits=[handle.event_for(rt.rank)])
                out = yield handle
        else:
            rt.events.append((step, "reduce_issue", u))
            handle = self.fabric.all_reduce_begin(
                rt.rank, plan.replicated_group_of(rt.rank), payload, unit=u,
                reads=reads, writes=[ru.accum_block], waits=[grad_event])
            out = yield handle
        reduced = out.astype(np.float64)
        if cfg.loss_reduction == "mean":
            reduced = reduced / float(plan.world_size)
        ru.accum += reduced

    # -- inspection ---------------------------------------------------------

    def gather_full_params(self) -> dict[str, np.ndarray]:
        """Reassemble full-precision parameters from sharded group 0."""
        group0 = self.plan.sharded_groups[0]
        out = {}
        for u, lay in enumerate(self.layouts):
            flat = np.concatenate(
                [self.ranks[r].units[u].fp.sharded for r in group0])
            for o in lay.originals:
                out[o.name] = flat[o.offset:o.offset + o.numel] \
                    .reshape(o.shape).copy()
        return out

    def replica_divergence(self) -> float:
        """Max |shard difference| across ranks that hold the same shard copy."""
        worst = 0.0
        for u in range(self.num_units):
            for group in self.plan.replicated_groups:
                base = self.ranks[group[0]].units[u].fp.sharded
                for r in group[1:]:
                    delta = np.abs(base - self.ranks[r].units[u].fp.sharded)
                    if delta.size:
                        worst = max(worst, float(delta.max()))
        return worst

    def check_reduction_ordering(self) -> list[str]:
        """Correctness guard: every reduce follows its unit's grad-finalized
        event, and each step's optimizer step follows all its reductions."""
        problems = []
        for rt in self.ranks:
            finalized: dict[tuple[int, int], int] = {}
            reduced: dict[tuple[int, int], int] = {}
            last_reduce_idx: dict[int, int] = {}
            opt_idx: dict[int, int] = {}
            for i, (step, kind, unit) in enumerate(rt.events):
                if kind == "grad_finalized":
                    finalized[(step, unit)] = \
                        finalized.get((step, unit), 0) + 1
                elif kind == "reduce_issue":
                    if reduced.get((step, unit), 0) >= \
                            finalized.get((step, unit), 0):
                        problems.append(
                            f"rank {rt.rank} step {step}: reduce of unit "
                            f"{unit} before gradient finalized")
                    reduced[(step, unit)] = reduced.get((step, unit), 0) + 1
                    last_reduce_idx[step] = i
                elif kind == "reduce_stage2":
                    last_reduce_idx[step] = i
                elif kind == "opt_step":
                    opt_idx[step] = i
            for step, i in opt_idx.items():
                if last_reduce_idx.get(step, -1) > i:
                    problems.append(
                        f"rank {rt.rank} step {step}: optimizer step before "
                        f"the last reduction")
        return problems

    def traffic_report(self):
        model_elements = sum(lay.raw_numel for lay in self.layouts)
        return traffic_report(self.fabric, self.plan, model_elements)


# ---------------------------------------------------------------------------
# local reference training
# ---------------------------------------------------------------------------

@dataclass
class LocalTrainResult:
    losses: list[float]                     # per step, mean over micro-batches
    micro_losses: list[list[float]]
    params: dict[str, np.ndarray]           # final values
    snapshots: list[dict[str, np.ndarray]]  # after each step
    stepped: list[bool]
    scales: list[float]


def _tree_sum(parts: list[dict[str, np.ndarray]], block: int
              ) -> dict[str, np.ndarray]:
    """Sum per-slice gradient dicts: ascending within consecutive blocks,
    then ascending across block partials.  block == 1 and block == len(parts)
    both degenerate to plain ascending summation."""
    groups = [parts[i:i + block] for i in range(0, len(parts), block)]
    total: dict[str, np.ndarray] | None = None
    for group in groups:
        partial = {name: g.copy() for name, g in group[0].items()}
        for part in group[1:]:
            for name in partial:
                partial[name] += part[name]
        if total is None:
            total = partial
        else:
            for name in total:
                total[name] += partial[name]
    assert total is not None
    return total


def local_train(spec: ModelSpec, seed: int, steps: int, batch: int,
                regime: str = "integer", optimizer: str = "sgd",
                lr: float | None = None, accumulation_steps: int = 1,
                loss_reduction: str = "mean", use_scaler: bool = False,
                scaler: ScalerConfig | None = None,
                forwards_per_micro: int = 1,
                inject_inf_steps: Iterable[int] = (),
                grad_slices: int = 1, grad_block: int | None = None,
                deferred_reduce: bool = False) -> LocalTrainResult:
    """Single-process oracle: same data stream, same init, no sharding.

    Gradient semantics mirror the engine: micro-batch gradients are summed
    over the accumulation window (never divided by the window length), the
    loss is scaled before backward when a scaler is active, and unscaling
    happens once per window before the optimizer step.

    Floating-point summation is not associative, so bitwise comparisons need
    a declared summation order.  `grad_slices` splits each batch into that
    many consecutive slices whose gradients are computed independently (with
    per-slice mean normalization, then one exact division by the slice
    count); `grad_block` groups the slice sums pairwise-by-blocks the way a
    two-stage reduction would, and `deferred_reduce` accumulates micro-batch
    gradients per slice before combining slices (instead of combining every
    micro-batch).  The defaults compute one plain full-batch gradient, which
    is the convention-free oracle for tolerance-based checks.
    """
    if batch % grad_slices != 0:
        raise EngineError(
            f"batch {batch} not divisible by grad_slices {grad_slices}")
    block = grad_block if grad_block is not None else grad_slices
    per = batch // grad_slices
    values = dinit.eager_param_values(spec, seed)
    params = {name: DenseTensor(arr.reshape(-1).copy(), arr.shape)
              for name, arr in values.items()}
    names = list(params)
    model = LayeredModel(spec, params)
    opt = make_optimizer(optimizer, lr)
    states = {name: opt.init_state(t.numel) for name, t in params.items()}
    sc = ShardedGradScaler(scaler) if use_scaler else None
    inject = set(inject_inf_steps)

    stream = batch_stream(seed, steps * accumulation_steps, batch,
                          spec.dims[0], spec.dims[-1], regime)
    losses, micro_losses, snapshots, stepped_list, scales = [], [], [], [], []
    first_param = spec.param_shapes()[0][0]
    for s in range(steps):
        accum = {name: np.zeros(t.numel) for name, t in params.items()}
        slice_accum = [{name: np.zeros(t.numel) for name, t in params.items()}
                       for _ in range(grad_slices)] if deferred_reduce else None
        step_micro = []
        for _ in range(accumulation_steps):
            x, y = next(stream)
            slice_parts = [{name: np.zeros(t.numel)
                            for name, t in params.items()}
                           for _ in range(grad_slices)]
            slice_loss = [0.0] * grad_slices
            for _ in range(forwards_per_micro):
                for r in range(grad_slices):
                    xs, ys = x[r * per:(r + 1) * per], y[r * per:(r + 1) * per]
                    pred, caches = model.forward(xs)
                    loss, dpred = mse_loss(pred, ys, loss_reduction)
                    if sc is not None:
                        dpred = dpred * sc.scale
                    slice_loss[r] += loss
                    grads = model.backward(caches, dpred)
                    for name, g in grads.items():
                        slice_parts[r][name] += g.reshape(-1)
            step_micro.append(float(np.mean(slice_loss)))
            if deferred_reduce:
                for r in range(grad_slices):
                    for name in names:
                        slice_accum[r][name] += slice_parts[r][name]
            else:
                total = _tree_sum(slice_parts, block)
                for name in names:
                    if loss_reduction == "mean":
                        total[name] = total[name] / float(grad_slices)
                    accum[name] += total[name]
        if deferred_reduce:
            total = _tree_sum(slice_accum, block)
            for name in names:
                if loss_reduction == "mean":
                    total[name] = total[name] / float(grad_slices)
                accum[name] += total[name]
        if s in inject:
            accum[first_param][0] = np.inf
        found = False
        if sc is not None:
            inv = 1.0 / sc.scale
            for name in accum:
                accum[name] *= inv
                if not np.isfinite(accum[name]).all():
                    found = True
        if not found:
            for name, t in params.items():
                opt.step(t.data, accum[name], states[name])
        if sc is not None:
            sc.update(found)
        losses.append(float(np.mean(step_micro)))
        micro_losses.append(step_micro)
        snapshots.append({name: t.array.copy() for name, t in params.items()})
        stepped_list.append(not found)
        scales.append(sc.scale if sc is not None else 1.0)
    final = {name: t.array.copy() for name, t in params.items()}
    return LocalTrainResult(losses, micro_losses, final, snapshots,
                            stepped_list, scales)


def max_param_delta(a: dict[str, np.ndarray],
                    b: dict[str, np.ndarray]) -> float:
    """Max absolute elementwise difference across two parameter dicts."""
    if set(a) != set(b):
        raise EngineError(f"parameter sets differ: {sorted(set(a) ^ set(b))}")
    worst = 0.0
    for name, arr in a.items():
        if arr.shape != b[name].shape:
            raise EngineError(f"shape mismatch for '{name}': "
                             f"{arr.shape} vs {b[name].shape}")
        if not arr.size or np.array_equal(arr, b[name], equal_nan=True):
            continue
        delta = float(np.abs(arr - b[name]).max())
        # nan here means one side is non-finite where the other is not:
        # that is unbounded divergence, not agreement.
        worst = max(worst, float("inf") if np.isnan(delta) else delta)
    return worst
