"""Record/replay parameter initialization and the materialization paths.

Construction on a "fake device" records, per parameter, a small program over
a closed op vocabulary — fill(c), uniform(lo, hi), normal(mu, sigma),
scale(c), add(c) — without allocating storage.  Materialization replays the
programs one unit at a time into the unit's unsharded buffer and shards it.
Random draws come from PRNG streams keyed by (seed, parameter name), so the
values are independent of materialization order and of which path ran:
deferred replay, whole-model unsharded-on-device, or streamed from a host
arena all produce bit-identical shards.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .flatparam import FlatParameter
from .memsim import COMPUTE, DeviceSim
from .numerics import DTYPES, ITEMSIZE, ModelSpec, named_stream

VOCABULARY = ("fill", "uniform", "normal", "scale", "add")

# Adding 3*2^51 pushes a small double to where the ulp is exactly 1, so the
# round-trip rounds to the nearest integer (half-to-even).
_ROUND_SHIFT = 3.0 * 2.0 ** 51


class UnsupportedInitOpError(ValueError):
    """An init op outside the replayable vocabulary was recorded."""


@dataclass(frozen=True)
class InitOp:
    kind: str
    args: tuple

    def __post_init__(self):
        if self.kind not in VOCABULARY:
            raise UnsupportedInitOpError(
                f"recorded initialization op '{self.kind}{self.args}' is "
                f"outside the replayable vocabulary {VOCABULARY}")


@dataclass(frozen=True)
class InitProgram:
    name: str
    shape: tuple[int, ...]
    ops: tuple[InitOp, ...]

    @property
    def numel(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class FakeModel:
    """Model skeleton: shapes and recorded programs, no storage."""

    spec: ModelSpec
    programs: dict[str, InitProgram]


def _style_ops(style: str, name: str, shape: tuple[int, ...],
               fan_in: int, peer: str | None) -> tuple[InitOp, ...]:
    if style == "zeros":
        return (InitOp("fill", (0.0,)),)
    if style == "dyadic":
        # Uniform draw snapped to the grid {0..8}/8 - 1/2: every value has a
        # 3-bit mantissa, keeping downstream float arithmetic exact.
        return (InitOp("uniform", (0.0, 1.0)),
                InitOp("scale", (8.0,)),
                InitOp("add", (_ROUND_SHIFT,)),
                InitOp("add", (-_ROUND_SHIFT,)),
                InitOp("scale", (0.125,)),
                InitOp("add", (-0.5,)))
    if style == "scaled_uniform":
        return (InitOp("uniform", (-1.0, 1.0)),
                InitOp("scale", (1.0 / math.sqrt(max(fan_in, 1)),)))
    if style == "normal":
        return (InitOp("normal", (0.0, 1.0)),
                InitOp("scale", (1.0 / math.sqrt(max(fan_in, 1)),)))
    if style == "read_peer":
        # Initialization that reads another parameter cannot be replayed
        # unit by unit; surfaced as an out-of-vocabulary op at record time.
        if peer is not None:
            raise UnsupportedInitOpError(
                f"recorded initialization op 'copy_from({peer!r})' for "
                f"'{name}' is outside the replayable vocabulary {VOCABULARY}; "
                f"initialization reading a different unit's parameter cannot "
                f"be deferred")
        return (InitOp("uniform", (-1.0, 1.0)),)
    raise UnsupportedInitOpError(f"unknown init style '{style}'")


def record(spec: ModelSpec) -> FakeModel:
    """Build the fake model: capture per-parameter init programs, no storage."""
    programs: dict[str, InitProgram] = {}
    prev_weight: str | None = None
    for name, shape in spec.param_shapes():
        fan_in = shape[-1] if len(shape) > 1 else shape[0]
        peer = prev_weight if name.endswith(".weight") else None
        ops = _style_ops(spec.init, name, shape, fan_in, peer)
        programs[name] = InitProgram(name, shape, ops)
        if name.endswith(".weight"):
            prev_weight = name
    return FakeModel(spec, programs)


def replay(program: InitProgram, out: np.ndarray, seed: int) -> None:
    """Execute a program into an existing buffer (typically a flat view)."""
    if out.size != program.numel:
        raise UnsupportedInitOpError(
            f"replay target for '{program.name}' has {out.size} elements, "
            f"program expects {program.numel}")
    rng = named_stream(seed, program.name)
    flat = out.reshape(-1)
    for op in program.ops:
        if op.kind == "fill":
            flat[:] = op.args[0]
        elif op.kind == "uniform":
            lo, hi = op.args
            flat[:] = rng.uniform(lo, hi, size=flat.size)
        elif op.kind == "normal":
            mu, sigma = op.args
            flat[:] = rng.normal(mu, sigma, size=flat.size)
        elif op.kind == "scale":
            flat *= op.args[0]
        elif op.kind == "add":
            flat += op.args[0]


def eager_param_values(spec: ModelSpec, seed: int,
                       dtype: str = "full") -> dict[str, np.ndarray]:
    """Whole-model eager initialization (the reference the paths must match)."""
    fake = record(spec)
    out = {}
    for name, shape in spec.param_shapes():
        buf = np.zeros(math.prod(shape), dtype=DTYPES[dtype])
        replay(fake.programs[name], buf, seed)
        out[name] = buf.reshape(shape)
    return out


# ---------------------------------------------------------------------------
# materialization paths
# ---------------------------------------------------------------------------

def _replay_unit(fake: FakeModel, fp: FlatParameter, buf: np.ndarray,
                 seed: int) -> None:
    for view_name, view in fp.views(buf).items():
        replay(fake.programs[view_name], view.data, seed)


def materialize_by_unit(fake: FakeModel, flat_params: list[FlatParameter],
                        seed: int, dev: DeviceSim | None = None) -> None:
    """Deferred path: one unit at a time — allocate, replay, shard, free."""
    for fp in flat_params:
        if fp.trivial:
            fp.set_unsharded(None)
            _replay_unit(fake, fp, fp.sharded, seed)
            fp.shard()
            continue
        psi = fp.layout.psi
        itemsize = ITEMSIZE[fp.dtype]
        blk = None
        if dev is not None:
            blk = dev.allocator.alloc(dev, psi * itemsize, psi, COMPUTE,
                                      "unsharded_params")
        buf = np.zeros(psi, dtype=DTYPES[fp.dtype])
        _replay_unit(fake, fp, buf, seed)
        fp.set_unsharded(buf)
        fp.shard()
        if dev is not None:
            dev.allocator.free(dev, blk)


def init_unsharded_on_device(fake: FakeModel,
                             flat_params: list[FlatParameter], seed: int,
                             dev: DeviceSim | None = None) -> None:
    """Fallback: materialize the whole unsharded model, then shard each unit.

    Deliberately memory-hungry — the device ledger peaks at least at the full
    model size; it exists for models whose init cannot be replayed safely.
    """
    blocks, buffers = [], []
    for fp in flat_params:
        if fp.trivial:
            fp.set_unsharded(None)
            _replay_unit(fake, fp, fp.sharded, seed)
            buffers.append(None)
            continue
        psi = fp.layout.psi
        if dev is not None:
            blocks.append(dev.allocator.alloc(
                dev, psi * ITEMSIZE[fp.dtype], psi, COMPUTE,
                "unsharded_params"))
        buf = np.zeros(psi, dtype=DTYPES[fp.dtype])
        _replay_unit(fake, fp, buf, seed)
        fp.set_unsharded(buf)
        buffers.append(buf)
    for fp in flat_params:
        if fp.state == "UNSHARDED":
            fp.shard()
    if dev is not None:
        for blk in blocks:
            dev.allocator.free(dev, blk)


class HostArena:
    """Unbounded host-memory ledger for the streamed path."""

    def __init__(self) -> None:
        self.current_elements = 0
        self.peak_elements = 0

    def alloc(self, elements: int) -> None:
        self.current_elements += elements
        self.peak_elements = max(self.peak_elements, self.current_elements)

    def free(self, elements: int) -> None:
        self.current_elements -= elements
        assert self.current_elements >= 0


def init_streamed_from_host(fake: FakeModel,
                            flat_params: list[FlatParameter], seed: int,
                            dev: DeviceSim | None = None,
                            arena: HostArena | None = None) -> HostArena:
    """Fallback: eager init in host memory, migrated one unit at a time.

    The full model stays resident in the host arena until the last unit has
    been sharded; the device only ever holds one unsharded unit.
    """
    arena = arena or HostArena()
    host_buffers: list[np.ndarray] = []
    for fp in flat_params:
        raw = fp.layout.raw_numel  # the eager host model carries no padding
        arena.alloc(raw)
        buf = np.zeros(raw, dtype=DTYPES[fp.dtype])
        _replay_unit(fake, fp, buf, seed)
        host_buffers.append(buf)
    for fp, host_buf in zip(flat_params, host_buffers):
        psi = fp.layout.psi
        if fp.trivial:
            fp.set_unsharded(None)
            fp.sharded[:fp.layout.raw_numel] = host_buf
            fp.shard()
            continue
        blk = None
        if dev is not None:
            blk = dev.allocator.alloc(dev, psi * ITEMSIZE[fp.dtype], psi,
                                      COMPUTE, "unsharded_params")
        buf = np.zeros(psi, dtype=DTYPES[fp.dtype])
        buf[:fp.layout.raw_numel] = host_buf
        fp.set_unsharded(buf)
        fp.shard()
        if dev is not None:
            dev.allocator.free(dev, blk)
    for fp in flat_params:
        arena.free(fp.layout.raw_numel)
    return arena
